//! Miniature fully convolutional segmentation networks.
//!
//! | variant   | input   | trunk                          | upsampling                    |
//! |-----------|---------|--------------------------------|-------------------------------|
//! | Mini-8s   | 128x128 | 3 x (conv3x3x16, relu, pool)   | score, deconv x8              |
//! | Mini-4s   | 128x128 | same                           | x2, + score(pool2), x4        |
//! | Mini-2s   | 128x128 | same                           | x2, + pool2, x2, + pool1, x2  |
//! | Mini-Fast | 64x64   | 2 x (conv3x3x8, relu, pool)    | score, deconv x4              |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::baseline::ScoreMap;
use crate::encoding::EncodedImage;
use crate::error::{Error, Result};
use crate::gridmap::{DogGrid, Label, LabelMask};
use crate::neuralnet::{read_params, softmax, write_params, LayerSpec, Network, NetworkSpec, Params, Source, Tensor};

pub const CLASSES: usize = 2;
pub const DEFAULT_INPUT: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Mini8s,
    Mini4s,
    Mini2s,
    MiniFast,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Mini8s, Variant::Mini4s, Variant::Mini2s, Variant::MiniFast];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mini8s => "mini-8s",
            Variant::Mini4s => "mini-4s",
            Variant::Mini2s => "mini-2s",
            Variant::MiniFast => "mini-fast",
        }
    }

    /// Factor by which the grid is downsampled before encoding.
    pub fn input_downsample(self) -> usize {
        match self {
            Variant::MiniFast => 2,
            _ => 1,
        }
    }

    pub fn default_channels(self) -> usize {
        match self {
            Variant::MiniFast => 8,
            _ => 16,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.to_ascii_lowercase().chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match key.as_str() {
            "mini8s" => Ok(Variant::Mini8s),
            "mini4s" => Ok(Variant::Mini4s),
            "mini2s" => Ok(Variant::Mini2s),
            "minifast" => Ok(Variant::MiniFast),
            _ => Err(Error::arg(format!("unknown variant {s:?} (expected mini-8s, mini-4s, mini-2s or mini-fast)"))),
        }
    }
}

/// Layer graph of a variant with `channels` feature maps per conv.
pub fn network_spec(variant: Variant, in_channels: usize, classes: usize, channels: usize) -> NetworkSpec {
    use Source::{Input, Layer};
    let ch = channels;
    let mut layers = vec![
        LayerSpec::conv("conv1", Input, in_channels, ch, 3),
        LayerSpec::relu("relu1", Layer(0)),
        LayerSpec::maxpool("pool1", Layer(1)),
        LayerSpec::conv("conv2", Layer(2), ch, ch, 3),
        LayerSpec::relu("relu2", Layer(3)),
        LayerSpec::maxpool("pool2", Layer(4)),
    ];
    if variant == Variant::MiniFast {
        layers.push(LayerSpec::score("score", Layer(5), ch, classes));
        layers.push(LayerSpec::deconv("up4", Layer(6), classes, 4));
    } else {
        layers.extend([
            LayerSpec::conv("conv3", Layer(5), ch, ch, 3),
            LayerSpec::relu("relu3", Layer(6)),
            LayerSpec::maxpool("pool3", Layer(7)),
            LayerSpec::score("score", Layer(8), ch, classes),
        ]);
        match variant {
            Variant::Mini8s => layers.push(LayerSpec::deconv("up8", Layer(9), classes, 8)),
            Variant::Mini4s => layers.extend([
                LayerSpec::deconv("up2", Layer(9), classes, 2),
                LayerSpec::score("score_pool2", Layer(5), ch, classes),
                LayerSpec::fuse_sum("fuse_pool2", Layer(10), Layer(11)),
                LayerSpec::deconv("up4", Layer(12), classes, 4),
            ]),
            Variant::Mini2s => layers.extend([
                LayerSpec::deconv("up2", Layer(9), classes, 2),
                LayerSpec::score("score_pool2", Layer(5), ch, classes),
                LayerSpec::fuse_sum("fuse_pool2", Layer(10), Layer(11)),
                LayerSpec::deconv("up2b", Layer(12), classes, 2),
                LayerSpec::score("score_pool1", Layer(2), ch, classes),
                LayerSpec::fuse_sum("fuse_pool1", Layer(13), Layer(14)),
                LayerSpec::deconv("up2c", Layer(15), classes, 2),
            ]),
            Variant::MiniFast => unreachable!(),
        }
    }
    let last = layers.len() - 1;
    layers.push(LayerSpec::softmax("prob", Layer(last)));
    NetworkSpec {
        name: variant.name().into(),
        in_channels,
        classes,
        layers,
    }
}

/// A variant bound to its weights and expected input size.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnModel {
    pub variant: Variant,
    pub input_width: usize,
    pub input_height: usize,
    pub net: Network<f32>,
}

/// Fresh, deterministically initialised model of `variant`.
pub fn build_network(variant: Variant, in_channels: usize, classes: usize, seed: u64) -> Result<FcnModel> {
    build_network_with(variant, in_channels, classes, variant.default_channels(), seed)
}

/// As [`build_network`] with a custom feature width.
pub fn build_network_with(variant: Variant, in_channels: usize, classes: usize, channels: usize, seed: u64) -> Result<FcnModel> {
    if in_channels == 0 || classes < 2 || channels == 0 {
        return Err(Error::arg("network needs >= 1 input channel, >= 2 classes, >= 1 feature channel"));
    }
    let side = DEFAULT_INPUT / variant.input_downsample();
    Ok(FcnModel {
        variant,
        input_width: side,
        input_height: side,
        net: Network::init(network_spec(variant, in_channels, classes, channels), seed)?,
    })
}

impl FcnModel {
    /// Rebinds the expected input size; sides must be divisible by the
    /// network's total stride.
    pub fn with_input(mut self, width: usize, height: usize) -> Result<Self> {
        let d = self.net.spec().total_downsample();
        if width == 0 || height == 0 || width % d != 0 || height % d != 0 {
            return Err(Error::arg(format!("{} needs input sides divisible by {d}, got {width}x{height}", self.variant)));
        }
        self.input_width = width;
        self.input_height = height;
        Ok(self)
    }

    /// Input size for a `grid_w × grid_h` grid after the variant's downsampling.
    pub fn for_grid(self, grid_w: usize, grid_h: usize) -> Result<Self> {
        let k = self.variant.input_downsample();
        self.with_input(grid_w / k, grid_h / k)
    }

    pub fn from_params(variant: Variant, params: Params<f32>, in_channels: usize) -> Result<Self> {
        let channels = params
            .iter()
            .find(|p| p.name == "conv1.weight")
            .map(|p| p.value.shape()[0])
            .ok_or_else(|| Error::Format("weights lack conv1.weight".into()))?;
        let spec = network_spec(variant, in_channels, CLASSES, channels);
        let side = DEFAULT_INPUT / variant.input_downsample();
        Ok(FcnModel {
            variant,
            input_width: side,
            input_height: side,
            net: Network::with_params(spec, params)?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_params(self.net.params(), path)
    }

    pub fn load(variant: Variant, path: impl AsRef<Path>) -> Result<Self> {
        Self::from_params(variant, read_params(path)?, 3)
    }

    pub fn parameter_count(&self) -> usize {
        self.net.parameter_count()
    }

    /// Static FLOP count of one forward pass at the bound input size.
    pub fn flops(&self) -> u64 {
        self.net.spec().flops(self.input_height, self.input_width)
    }

    /// Grid as the network sees it (downsampled for Mini-Fast).
    pub fn prepare_grid(&self, grid: &DogGrid) -> Result<DogGrid> {
        match self.variant.input_downsample() {
            1 => Ok(grid.clone()),
            _ => grid.downsample2(),
        }
    }
}

pub fn image_tensor(encoded: &EncodedImage) -> Tensor<f32> {
    Tensor::from_vec(&[1, 3, encoded.height(), encoded.width()], encoded.data().to_vec()).expect("encoded image holds 3 planes")
}

/// Per-pixel dynamic probability and argmax mask (ties go to static).
pub fn infer(model: &FcnModel, encoded: &EncodedImage) -> Result<(ScoreMap, LabelMask)> {
    if encoded.width() != model.input_width || encoded.height() != model.input_height {
        return Err(Error::shape(format!(
            "{} expects {}x{} input, got {}x{}",
            model.variant,
            model.input_width,
            model.input_height,
            encoded.width(),
            encoded.height()
        )));
    }
    let logits = model.net.logits(&image_tensor(encoded))?;
    Ok(probabilities_to_outputs(&softmax(&logits)?, encoded.width(), encoded.height()))
}

fn probabilities_to_outputs(prob: &Tensor<f32>, w: usize, h: usize) -> (ScoreMap, LabelMask) {
    let n = w * h;
    let p_dyn = &prob.data()[n..2 * n];
    let p_static = &prob.data()[..n];
    let scores = p_dyn.iter().map(|&p| p as f64).collect();
    let labels = p_dyn.iter().zip(p_static).map(|(d, s)| Label::from(d > s)).collect();
    (
        ScoreMap::new(w, h, scores).expect("dims from tensor"),
        LabelMask::new(w, h, labels).expect("dims from tensor"),
    )
}

/// Keeps a dynamic label only where the cell is occupied (`occ > occ_thresh`).
pub fn refine(mask: &LabelMask, grid: &DogGrid, occ_thresh: f32) -> Result<LabelMask> {
    mask.check_grid(grid)?;
    let labels = mask
        .labels()
        .iter()
        .zip(grid.cells())
        .map(|(l, c)| Label::from(l.is_dynamic() && c.occ > occ_thresh))
        .collect();
    LabelMask::new(mask.width(), mask.height(), labels)
}

/// Zeroes the score of every cell at or below the occupancy threshold.
pub fn refine_scores(scores: &ScoreMap, grid: &DogGrid, occ_thresh: f32) -> Result<ScoreMap> {
    if !grid.same_dims(scores.width, scores.height) {
        return Err(Error::shape("score map and grid differ in size"));
    }
    let s = scores
        .scores
        .iter()
        .zip(grid.cells())
        .map(|(&s, c)| if c.occ > occ_thresh { s } else { 0.0 })
        .collect();
    ScoreMap::new(scores.width, scores.height, s)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_mask(mask: &LabelMask, k: usize) -> LabelMask {
    if k == 1 {
        return mask.clone();
    }
    let (w, h) = (mask.width() * k, mask.height() * k);
    let labels = (0..w * h).map(|i| mask.get(i / w / k, i % w / k)).collect();
    LabelMask::new(w, h, labels).expect("dims computed")
}

pub fn upsample_scores(scores: &ScoreMap, k: usize) -> ScoreMap {
    if k == 1 {
        return scores.clone();
    }
    let (w, h) = (scores.width * k, scores.height * k);
    let s = (0..w * h).map(|i| scores.scores[(i / w / k) * scores.width + i % w / k]).collect();
    ScoreMap::new(w, h, s).expect("dims computed")
}
