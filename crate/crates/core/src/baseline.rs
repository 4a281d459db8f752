//! Reference detector: threshold the per-cell Mahalanobis distance of the
//! velocity estimate from zero. Each cell is decided independently.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::encoding::cell_mahalanobis;
use crate::error::{Error, Result};
use crate::gridmap::{DogGrid, Label, LabelMask};

/// Default operating point: for a static cell whose velocity error is
/// Gaussian with the reported covariance, m² is chi-square with 2 degrees of
/// freedom, and m > sqrt(-2 ln 0.01) happens with probability 1%.
pub const DEFAULT_TAU: f64 = 3.034_854_258_770_293;

/// Per-cell score map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f64>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != width * height {
            return Err(Error::shape(format!(
                "expected {} scores, got {}",
                width * height,
                scores.len()
            )));
        }
        Ok(ScoreMap {
            width,
            height,
            scores,
        })
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("cell,score\n");
        for (i, s) in self.scores.iter().enumerate() {
            writeln!(out, "{i},{s}").unwrap();
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub fn baseline_scores(grid: &DogGrid) -> Result<ScoreMap> {
    let scores = grid
        .cells()
        .iter()
        .enumerate()
        .map(|(index, c)| {
            cell_mahalanobis(c).map_err(|e| Error::InvalidCell {
                index,
                reason: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreMap::new(grid.width(), grid.height(), scores)
}

/// Dynamic iff `m > tau`. No occupancy gating.
pub fn classify_scores(scores: &ScoreMap, tau: f64) -> LabelMask {
    let labels = scores.scores.iter().map(|&m| Label::from(m > tau)).collect();
    LabelMask::new(scores.width, scores.height, labels).expect("dims carried from score map")
}

pub fn baseline_classify(grid: &DogGrid, tau: f64) -> Result<LabelMask> {
    if !(tau >= 0.0) {
        return Err(Error::arg(format!("tau must be >= 0, got {tau}")));
    }
    Ok(classify_scores(&baseline_scores(grid)?, tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmap::CellState;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn default_tau_flags_one_percent_of_gaussian_static_cells() {
        // v = L z with L the Cholesky factor of Σ = [[4, 1.2], [1.2, 1]]
        let (l11, l21) = (2.0f64, 0.6f64);
        let l22 = (1.0f64 - l21 * l21).sqrt();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let flagged = (0..n)
            .filter(|_| {
                let (z1, z2): (f64, f64) = (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng));
                let c = CellState {
                    occ: 1.0,
                    vx: (l11 * z1) as f32,
                    vy: (l21 * z1 + l22 * z2) as f32,
                    var_x: 4.0,
                    var_y: 1.0,
                    cov_xy: 1.2,
                };
                cell_mahalanobis(&c).unwrap() > DEFAULT_TAU
            })
            .count();
        let rate = flagged as f64 / n as f64;
        assert!((rate - 0.01).abs() < 0.001, "{rate}");
    }

    fn moving(vx: f32, var_x: f32, var_y: f32) -> CellState {
        CellState {
            occ: 1.0,
            vx,
            vy: 0.0,
            var_x,
            var_y,
            cov_xy: 0.0,
        }
    }

    #[test]
    fn zero_velocity_scores_zero() {
        let grid = DogGrid::filled(4, 4, 1.0, moving(0.0, 1.0, 1.0)).unwrap();
        assert!(baseline_scores(&grid).unwrap().scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn single_cell_score() {
        let mut cells = vec![CellState::UNKNOWN; 4];
        cells[3] = moving(2.0, 1.0, 4.0);
        let grid = DogGrid::new(2, 2, 1.0, 0, cells).unwrap();
        let s = baseline_scores(&grid).unwrap();
        assert!((s.scores[3] - 2.0).abs() < 1e-5);
        assert_eq!(&s.scores[..3], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn threshold_examples() {
        let scores = ScoreMap::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let mask = classify_scores(&scores, 1.5);
        let dynamic: Vec<usize> = (0..4).filter(|&i| mask.labels()[i].is_dynamic()).collect();
        assert_eq!(dynamic, vec![2, 3]);
        assert_eq!(classify_scores(&scores, 0.0).dynamic_count(), 3);
        assert_eq!(classify_scores(&scores, 3.5).dynamic_count(), 0);
    }

    #[test]
    fn scores_are_permutation_equivariant() {
        let cells: Vec<CellState> = (0..16).map(|i| moving(i as f32 * 0.3, 1.0 + i as f32, 2.0)).collect();
        let grid = DogGrid::new(4, 4, 1.0, 0, cells.clone()).unwrap();
        let mut permuted = cells;
        permuted.reverse();
        let pgrid = DogGrid::new(4, 4, 1.0, 0, permuted).unwrap();
        let a = baseline_scores(&grid).unwrap().scores;
        let mut b = baseline_scores(&pgrid).unwrap().scores;
        b.reverse();
        assert_eq!(a, b);
    }

    #[test]
    fn negative_tau_rejected() {
        let grid = DogGrid::unknown(2, 2, 1.0).unwrap();
        assert!(baseline_classify(&grid, -1.0).is_err());
    }
}
