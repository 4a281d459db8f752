//! Dataset assembly: rotation augmentation, train/val/test splits, and
//! class-ratio accounting.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gridmap::{read_pgm, CellState, DogGrid, Label, LabelMask};

pub const ROTATION_STEP_DEG: i32 = 10;

/// Every augmentation angle, `0, 10, …, 350`.
pub fn rotation_angles() -> impl Iterator<Item = i32> {
    (0..36).map(|k| k * ROTATION_STEP_DEG)
}

/// Exact `(cos, sin)` for quarter turns, libm otherwise.
fn cos_sin(deg: i32) -> (f64, f64) {
    match deg.rem_euclid(360) {
        0 => (1.0, 0.0),
        90 => (0.0, 1.0),
        180 => (-1.0, 0.0),
        270 => (0.0, -1.0),
        d => {
            let a = (d as f64).to_radians();
            (a.cos(), a.sin())
        }
    }
}

/// Rotates a frame counter-clockwise by `theta_deg` about the grid centre.
///
/// Statistics are resampled bilinearly and labels by nearest neighbour;
/// velocities and covariances are rotated along with the image. Cells whose
/// preimage falls outside the source grid become unknown.
pub fn rotate_frame(grid: &DogGrid, mask: &LabelMask, theta_deg: i32) -> Result<(DogGrid, LabelMask)> {
    if theta_deg % ROTATION_STEP_DEG != 0 {
        return Err(Error::arg(format!("rotation must be a multiple of 10 degrees, got {theta_deg}")));
    }
    mask.check_grid(grid)?;
    if theta_deg.rem_euclid(360) == 0 {
        return Ok((grid.clone(), mask.clone()));
    }
    let (w, h) = (grid.width(), grid.height());
    let (wf, hf) = (w as f64, h as f64);
    let (c, s) = cos_sin(theta_deg);
    let src = grid.cells();
    let mut cells = Vec::with_capacity(src.len());
    let mut labels = Vec::with_capacity(src.len());
    for r in 0..h {
        for col in 0..w {
            // output centre in cell units, then its preimage under R(-θ)
            let x = col as f64 + 0.5 - wf / 2.0;
            let y = hf / 2.0 - r as f64 - 0.5;
            let qx = c * x + s * y;
            let qy = -s * x + c * y;
            let fc = qx + wf / 2.0 - 0.5;
            let fr = hf / 2.0 - 0.5 - qy;
            if !(-0.5..=wf - 0.5).contains(&fc) || !(-0.5..=hf - 0.5).contains(&fr) {
                cells.push(CellState::UNKNOWN);
                labels.push(Label::Static);
                continue;
            }
            let nr = (fr.round().max(0.0) as usize).min(h - 1);
            let nc = (fc.round().max(0.0) as usize).min(w - 1);
            labels.push(mask.get(nr, nc));

            let fc = fc.clamp(0.0, wf - 1.0);
            let fr = fr.clamp(0.0, hf - 1.0);
            let (c0, r0) = (fc.floor() as usize, fr.floor() as usize);
            let (c1, r1) = ((c0 + 1).min(w - 1), (r0 + 1).min(h - 1));
            let (tc, tr) = (fc - c0 as f64, fr - r0 as f64);
            let mut acc = [0f64; 6];
            for (rr, cc, wgt) in [
                (r0, c0, (1.0 - tr) * (1.0 - tc)),
                (r0, c1, (1.0 - tr) * tc),
                (r1, c0, tr * (1.0 - tc)),
                (r1, c1, tr * tc),
            ] {
                if wgt == 0.0 {
                    continue;
                }
                let sc = &src[rr * w + cc];
                for (a, v) in acc.iter_mut().zip([sc.occ, sc.vx, sc.vy, sc.var_x, sc.var_y, sc.cov_xy]) {
                    *a += wgt * v as f64;
                }
            }
            let [occ, vx, vy, sxx, syy, sxy] = acc;
            let mut cell = CellState {
                occ: (occ as f32).clamp(0.0, 1.0),
                vx: (c * vx - s * vy) as f32,
                vy: (s * vx + c * vy) as f32,
                var_x: (c * c * sxx - 2.0 * c * s * sxy + s * s * syy) as f32,
                var_y: (s * s * sxx + 2.0 * c * s * sxy + c * c * syy) as f32,
                cov_xy: (c * s * (sxx - syy) + (c * c - s * s) * sxy) as f32,
            };
            cell.clamp_covariance();
            cells.push(cell);
        }
    }
    Ok((grid.with_cells(cells)?, LabelMask::new(w, h, labels)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Format(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub frame: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
    pub rotation_deg: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetIndex {
    pub entries: Vec<IndexEntry>,
}

/// Shuffled split assignment for `n` source items: `round(n·r_train)` train,
/// `round(n·r_val)` val, the rest test.
pub fn assign_splits(n: usize, ratios: [f64; 3], seed: u64) -> Result<Vec<Split>> {
    if n < 3 {
        return Err(Error::arg(format!("need at least 3 frames to split, got {n}")));
    }
    if ratios.iter().any(|r| !(*r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::arg(format!("split ratios must be >= 0 and sum to 1, got {ratios:?}")));
    }
    let n_train = (n as f64 * ratios[0]).round() as usize;
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Split::Test; n];
    for (k, &i) in order.iter().enumerate() {
        out[i] = if k < n_train {
            Split::Train
        } else if k < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

/// Assigns each source `(frame, mask)` pair to a split; rows are emitted
/// at rotation 0 in input order.
pub fn make_split(frames: &[(PathBuf, PathBuf)], ratios: [f64; 3], seed: u64) -> Result<DatasetIndex> {
    let splits = assign_splits(frames.len(), ratios, seed)?;
    Ok(DatasetIndex {
        entries: frames
            .iter()
            .zip(splits)
            .map(|((frame, mask), split)| IndexEntry {
                frame: frame.clone(),
                mask: mask.clone(),
                split,
                rotation_deg: 0,
            })
            .collect(),
    })
}

impl DatasetIndex {
    /// Expands every rotation-0 row into all 36 augmentation angles, each
    /// inheriting its source's split.
    pub fn with_rotations(&self) -> DatasetIndex {
        DatasetIndex {
            entries: self
                .entries
                .iter()
                .filter(|e| e.rotation_deg == 0)
                .flat_map(|e| {
                    rotation_angles().map(move |a| IndexEntry {
                        rotation_deg: a,
                        ..e.clone()
                    })
                })
                .collect(),
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut s = String::from("path,mask_path,split,rotation_deg\n");
        for e in &self.entries {
            let (p, m) = (e.frame.to_string_lossy(), e.mask.to_string_lossy());
            if p.contains([',', '\n']) || m.contains([',', '\n']) {
                return Err(Error::arg(format!("path {p:?} cannot be stored in CSV")));
            }
            s += &format!("{p},{m},{},{}\n", e.split, e.rotation_deg);
        }
        Ok(s)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("path,mask_path,split,rotation_deg") => {}
            other => return Err(Error::Format(format!("bad index header {other:?}"))),
        }
        let mut entries = Vec::new();
        for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("index row {}: expected 4 fields", k + 2)));
            }
            let rotation_deg: i32 = f[3]
                .parse()
                .map_err(|_| Error::Format(format!("index row {}: bad rotation {:?}", k + 2, f[3])))?;
            entries.push(IndexEntry {
                frame: f[0].into(),
                mask: f[1].into(),
                split: f[2].parse()?,
                rotation_deg,
            });
        }
        Ok(DatasetIndex { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassRatio {
    pub dynamic: usize,
    pub total: usize,
}

impl ClassRatio {
    pub fn of_masks<'a>(masks: impl IntoIterator<Item = &'a LabelMask>) -> Self {
        masks.into_iter().fold(ClassRatio { dynamic: 0, total: 0 }, |acc, m| ClassRatio {
            dynamic: acc.dynamic + m.dynamic_count(),
            total: acc.total + m.len(),
        })
    }

    /// `dynamic / total`, 0 for an empty set.
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.dynamic as f64 / self.total as f64
        }
    }
}

impl fmt::Display for ClassRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.dynamic == 0 {
            write!(f, "0 dynamic of {}", self.total)
        } else {
            write!(f, "1:{:.1} ({} of {})", self.total as f64 / self.dynamic as f64, self.dynamic, self.total)
        }
    }
}

/// Exact class counts over the rotation-0 masks of one split; mask paths
/// are resolved against `base`.
pub fn class_ratio(index: &DatasetIndex, split: Split, base: impl AsRef<Path>) -> Result<ClassRatio> {
    let base = base.as_ref();
    let masks = index
        .split(split)
        .filter(|e| e.rotation_deg == 0)
        .map(|e| read_pgm(base.join(&e.mask)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassRatio::of_masks(&masks))
}
