//! Supervised training of an [`FcnModel`] on labelled frames.
//!
//! The loss is the class-weighted sum over pixels; gradients are divided by
//! the pixel count of each batch before the SGD step, so the learning rate
//! is per pixel and does not depend on image or batch size.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasetkit::{rotate_frame, ROTATION_STEP_DEG};
use crate::encoding::{encode, ConfigId};
use crate::error::{Error, Result};
use crate::fcnmodels::FcnModel;
use crate::gridmap::{Label, LabelMask};
use crate::neuralnet::{sgd_step, ClassWeights, Tensor};
use crate::simworld::LabeledFrame;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub config: ConfigId,
    /// Loss weight of dynamic cells; static cells weigh 1.
    pub c1: f64,
    pub lr: f64,
    /// Halve the learning rate every `lr_step` epochs (0 = never).
    pub lr_step: usize,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Random 10° rotation per sample and epoch.
    pub augment: bool,
    /// Train on random square crops of this side instead of whole frames.
    pub crop: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            config: ConfigId::new(2).expect("2 is a valid config"),
            c1: 40.0,
            lr: 0.1,
            lr_step: 10,
            momentum: 0.9,
            epochs: 30,
            batch: 8,
            augment: true,
            crop: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_step {
            0 => self.lr,
            s => self.lr * 0.5f64.powi((epoch / s) as i32),
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.batch == 0 || !(self.c1 > 0.0) {
            return Err(Error::arg(format!(
                "need lr > 0, momentum in [0, 1), batch >= 1, c1 > 0; got lr={} momentum={} batch={} c1={}",
                self.lr, self.momentum, self.batch, self.c1
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean weighted loss per pixel over the epoch.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// `epoch,lr,train_loss,val_loss` rows.
pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_loss\n");
    for e in log {
        let val = e.val_loss.map_or(String::new(), |v| v.to_string());
        s += &format!("{},{},{},{}\n", e.epoch, e.lr, e.train_loss, val);
    }
    s
}

/// Encoded network input and labels for one frame at one rotation.
pub fn prepare_sample(model: &FcnModel, frame: &LabeledFrame, angle: i32, config: ConfigId) -> Result<(Vec<f32>, LabelMask)> {
    let (grid, mask) = rotate_frame(&frame.grid, &frame.mask, angle)?;
    let (grid, mask) = match model.variant.input_downsample() {
        1 => (grid, mask),
        _ => (grid.downsample2()?, mask.downsample2()),
    };
    let enc = encode(&grid, config)?;
    Ok((enc.data().to_vec(), mask))
}

fn crop(data: &[f32], mask: &LabelMask, side: usize, r0: usize, c0: usize) -> (Vec<f32>, Vec<Label>) {
    let (w, h) = (mask.width(), mask.height());
    let mut img = Vec::with_capacity(3 * side * side);
    for ch in 0..3 {
        for r in r0..r0 + side {
            let base = ch * w * h + r * w;
            img.extend_from_slice(&data[base + c0..base + c0 + side]);
        }
    }
    let mut labels = Vec::with_capacity(side * side);
    for r in r0..r0 + side {
        labels.extend_from_slice(&mask.labels()[r * w + c0..r * w + c0 + side]);
    }
    (img, labels)
}

/// Mean weighted per-pixel loss over whole, unrotated frames.
pub fn evaluate_loss(model: &FcnModel, frames: &[LabeledFrame], config: ConfigId, c1: f64) -> Result<f64> {
    let weights = ClassWeights::dynamic(c1)?;
    let mut total = 0.0;
    let mut pixels = 0usize;
    for f in frames {
        let (data, mask) = prepare_sample(model, f, 0, config)?;
        let x = Tensor::from_vec(&[1, 3, mask.height(), mask.width()], data)?;
        total += model.net.loss(&x, mask.labels(), &weights)? as f64;
        pixels += mask.len();
    }
    Ok(if pixels == 0 { 0.0 } else { total / pixels as f64 })
}

/// Trains in place; calls `on_epoch` after every epoch.
pub fn train_with(
    model: &mut FcnModel,
    train: &[LabeledFrame],
    val: &[LabeledFrame],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if cfg.epochs > 0 && train.is_empty() {
        return Err(Error::Training("no training frames".into()));
    }
    let weights = ClassWeights::dynamic(cfg.c1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let momentum = cfg.momentum as f32;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_pixels = 0usize;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let mut data = Vec::new();
            let mut labels = Vec::new();
            let (mut bw, mut bh) = (0, 0);
            for &i in chunk {
                let angle = if cfg.augment { rng.gen_range(0..36) * ROTATION_STEP_DEG } else { 0 };
                let (img, mask) = prepare_sample(model, &train[i], angle, cfg.config)?;
                match cfg.crop {
                    Some(side) if side < mask.width() || side < mask.height() => {
                        let side = side.min(mask.width()).min(mask.height());
                        let r0 = rng.gen_range(0..=mask.height() - side);
                        let c0 = rng.gen_range(0..=mask.width() - side);
                        let (ci, cl) = crop(&img, &mask, side, r0, c0);
                        data.extend(ci);
                        labels.extend(cl);
                        (bw, bh) = (side, side);
                    }
                    _ => {
                        data.extend(img);
                        labels.extend_from_slice(mask.labels());
                        (bw, bh) = (mask.width(), mask.height());
                    }
                }
            }
            let x = Tensor::from_vec(&[chunk.len(), 3, bh, bw], data)?;
            let (loss, mut grads) = model.net.loss_and_grads(&x, &labels, &weights)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}, step {step}")));
            }
            let pixels = labels.len();
            for g in &mut grads {
                g.scale(1.0 / pixels as f32);
            }
            sgd_step(model.net.params_mut(), &grads, lr as f32, momentum)
                .map_err(|e| Error::Training(format!("epoch {epoch}, step {step}: {e}")))?;
            epoch_loss += loss as f64;
            epoch_pixels += pixels;
        }
        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, val, cfg.config, cfg.c1)?)
        };
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: epoch_loss / epoch_pixels.max(1) as f64,
            val_loss,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

pub fn train(model: &mut FcnModel, train: &[LabeledFrame], val: &[LabeledFrame], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    train_with(model, train, val, cfg, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcnmodels::{build_network, Variant};
    use crate::simworld::{generate_scene, MovingBox, SceneSpec, StaticShape};

    fn desk_frames() -> Vec<LabeledFrame> {
        (0..6)
            .map(|k| {
                let spec = SceneSpec {
                    width: 32,
                    height: 32,
                    sensor_range: 6.0,
                    velocity_noise: 0.5,
                    static_velocity_noise: 0.1,
                    occ_noise: 0.05,
                    shapes: vec![StaticShape::wall(vec![[-4.0, 2.5], [4.0, 2.5]])],
                    movers: vec![MovingBox {
                        center: [-1.5 + 0.5 * k as f64, -1.5],
                        extent: [1.5, 1.0],
                        velocity: [4.0, 0.0],
                    }],
                    ..SceneSpec::default()
                };
                generate_scene(&spec, k).unwrap().remove(0)
            })
            .collect()
    }

    #[test]
    fn zero_epochs_keep_initial_weights() {
        let mut m = build_network(Variant::Mini8s, 3, 2, 1).unwrap().with_input(32, 32).unwrap();
        let before = m.clone();
        let log = train(&mut m, &desk_frames(), &[], &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
        assert!(log.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn desk_net_learns_mover_over_wall() {
        let frames = desk_frames();
        let mut m = build_network(Variant::Mini8s, 3, 2, 1).unwrap().with_input(32, 32).unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            batch: 2,
            lr: 0.05,
            augment: false,
            c1: 10.0,
            ..TrainConfig::default()
        };
        let log = train(&mut m, &frames, &[], &cfg).unwrap();
        assert!(log.last().unwrap().train_loss < log[0].train_loss);
        let f = &frames[0];
        let enc = encode(&f.grid, cfg.config).unwrap();
        let (scores, _) = crate::fcnmodels::infer(&m, &enc).unwrap();
        let mean = |sel: &dyn Fn(usize) -> bool| {
            let v: Vec<f64> = (0..scores.scores.len()).filter(|&i| sel(i)).map(|i| scores.scores[i]).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let mover = mean(&|i| f.mask.labels()[i].is_dynamic());
        let wall = mean(&|i| !f.mask.labels()[i].is_dynamic() && f.grid.cells()[i].occ > 0.6);
        assert!(mover > wall, "mover {mover} vs wall {wall}");
    }

    #[test]
    fn training_is_deterministic() {
        let frames = desk_frames();
        let cfg = TrainConfig {
            epochs: 2,
            batch: 3,
            crop: Some(16),
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = build_network(Variant::Mini4s, 3, 2, 2).unwrap().with_input(32, 32).unwrap();
            let log = train(&mut m, &frames, &frames[..1], &cfg).unwrap();
            (m, log)
        };
        assert_eq!(run(), run());
    }
}
