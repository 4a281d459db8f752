//! Per-cell motion statistics and the 3-channel network input encodings.
//!
//! Channel planes are stored in B, G, R order. Each configuration puts an
//! occupancy channel in B and motion cues in G and R:
//!
//! | id | B          | G                 | R                 |
//! |----|------------|-------------------|-------------------|
//! | 1  | occ        | vx  (±20 m/s)     | vy  (±20 m/s)     |
//! | 2  | occ        | vx/σx (±3)        | vy/σy (±3)        |
//! | 3  | occ_nonfree| vx/σx (±3)        | vy/σy (±3)        |
//! | 4  | occ        | \|v\| (0..20 m/s) | var_overall (0..100) |
//! | 5  | occ        | \|v\| (0..20 m/s) | mahalanobis (0..10)  |
//!
//! Every value is clipped to its range and mapped affinely onto `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gridmap::{parse_pnm_header, CellState, DogGrid, PSD_TOLERANCE};

/// Regulariser added to variances before inversion, m²/s².
pub const VARIANCE_EPS: f64 = 1e-6;
pub const RAW_VELOCITY_CLIP: f64 = 20.0;
pub const NORMALIZED_VELOCITY_CLIP: f64 = 3.0;
pub const SPEED_CLIP: f64 = 20.0;
pub const VARIANCE_CLIP: f64 = 100.0;
pub const MAHALANOBIS_CLIP: f64 = 10.0;

pub const ENCD_MAGIC: &[u8; 4] = b"ENCD";
pub const ENCD_VERSION: u32 = 1;

/// Mahalanobis distance of the mean velocity from zero,
/// `sqrt(vᵀ (Σ + εI)⁻¹ v)` with ε = [`VARIANCE_EPS`].
pub fn mahalanobis(vx: f64, vy: f64, var_x: f64, var_y: f64, cov_xy: f64) -> Result<f64> {
    mahalanobis_with_eps(vx, vy, var_x, var_y, cov_xy, VARIANCE_EPS)
}

pub fn mahalanobis_with_eps(
    vx: f64,
    vy: f64,
    var_x: f64,
    var_y: f64,
    cov_xy: f64,
    eps: f64,
) -> Result<f64> {
    if var_x < -PSD_TOLERANCE || var_y < -PSD_TOLERANCE {
        return Err(Error::arg(format!(
            "negative variance (var_x={var_x}, var_y={var_y})"
        )));
    }
    if vx == 0.0 && vy == 0.0 {
        return Ok(0.0);
    }
    let a = var_x.max(0.0) + eps;
    let d = var_y.max(0.0) + eps;
    let det = a * d - cov_xy * cov_xy;
    if !(det > 0.0) {
        return Err(Error::arg(format!(
            "covariance is singular after regularisation (det={det})"
        )));
    }
    let quad = (d * vx * vx - 2.0 * cov_xy * vx * vy + a * vy * vy) / det;
    Ok(quad.max(0.0).sqrt())
}

pub fn cell_mahalanobis(cell: &CellState) -> Result<f64> {
    mahalanobis(
        cell.vx as f64,
        cell.vy as f64,
        cell.var_x as f64,
        cell.var_y as f64,
        cell.cov_xy as f64,
    )
}

/// `v / sqrt(var + ε)` before clipping.
pub fn normalized_velocity_raw(v: f64, var: f64) -> f64 {
    v / (var.max(0.0) + VARIANCE_EPS).sqrt()
}

/// Normalised velocity clipped to ±3.
pub fn normalized_velocity(v: f64, var: f64) -> f64 {
    normalized_velocity_raw(v, var).clamp(-NORMALIZED_VELOCITY_CLIP, NORMALIZED_VELOCITY_CLIP)
}

/// Variance of `vx + vy`.
pub fn overall_variance(var_x: f64, cov_xy: f64, var_y: f64) -> f64 {
    var_x + 2.0 * cov_xy + var_y
}

/// Maps `[lo, hi]` onto `[0, 1]` after clipping.
fn unit(value: f64, lo: f64, hi: f64) -> f32 {
    ((value.clamp(lo, hi) - lo) / (hi - lo)) as f32
}

/// Input configuration, numbered as in the table above.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConfigId(u8);

impl ConfigId {
    pub const ALL: [ConfigId; 5] = [ConfigId(1), ConfigId(2), ConfigId(3), ConfigId(4), ConfigId(5)];

    pub fn new(id: u8) -> Result<Self> {
        if (1..=5).contains(&id) {
            Ok(ConfigId(id))
        } else {
            Err(Error::arg(format!("config id must be 1..5, got {id}")))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }
}

impl std::fmt::Display for ConfigId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Three planes (B, G, R) of `height * width` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedImage {
    config: ConfigId,
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl EncodedImage {
    pub fn new(config: ConfigId, width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "expected {} values for 3x{height}x{width}, got {}",
                3 * width * height,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg(format!("channel value {} at {i} outside [0, 1]", data[i])));
        }
        Ok(EncodedImage {
            config,
            width,
            height,
            data,
        })
    }

    pub fn config(&self) -> ConfigId {
        self.config
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Channel-major data, B plane first.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[channel * n..(channel + 1) * n]
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = row * self.width + col;
        let n = self.width * self.height;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }
}

/// Encodes one cell as `(B, G, R)`.
pub fn encode_cell(cell: &CellState, config: ConfigId) -> Result<[f32; 3]> {
    let (vx, vy) = (cell.vx as f64, cell.vy as f64);
    let (var_x, var_y, cov) = (cell.var_x as f64, cell.var_y as f64, cell.cov_xy as f64);
    let occ = cell.occ as f64;
    let occ_free = occ as f32;
    let nclip = NORMALIZED_VELOCITY_CLIP;
    let speed = vx.hypot(vy);
    Ok(match config.get() {
        1 => [
            occ_free,
            unit(vx, -RAW_VELOCITY_CLIP, RAW_VELOCITY_CLIP),
            unit(vy, -RAW_VELOCITY_CLIP, RAW_VELOCITY_CLIP),
        ],
        2 | 3 => {
            let b = if config.get() == 2 {
                occ_free
            } else {
                (2.0 * (occ.max(0.5) - 0.5)) as f32
            };
            [
                b,
                unit(normalized_velocity(vx, var_x), -nclip, nclip),
                unit(normalized_velocity(vy, var_y), -nclip, nclip),
            ]
        }
        4 => [
            occ_free,
            unit(speed, 0.0, SPEED_CLIP),
            unit(overall_variance(var_x, cov, var_y), 0.0, VARIANCE_CLIP),
        ],
        5 => [
            occ_free,
            unit(speed, 0.0, SPEED_CLIP),
            unit(mahalanobis(vx, vy, var_x, var_y, cov)?, 0.0, MAHALANOBIS_CLIP),
        ],
        _ => unreachable!("ConfigId is validated on construction"),
    })
}

pub fn encode(grid: &DogGrid, config: ConfigId) -> Result<EncodedImage> {
    let n = grid.len();
    let mut data = vec![0f32; 3 * n];
    for (i, cell) in grid.cells().iter().enumerate() {
        let px = encode_cell(cell, config).map_err(|e| Error::InvalidCell {
            index: i,
            reason: e.to_string(),
        })?;
        data[i] = px[0];
        data[n + i] = px[1];
        data[2 * n + i] = px[2];
    }
    Ok(EncodedImage {
        config,
        width: grid.width(),
        height: grid.height(),
        data,
    })
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a binary PPM; pixel triplets are (R, G, B) = planes (2, 1, 0).
pub fn write_ppm(image: &EncodedImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    for r in 0..image.height {
        for c in 0..image.width {
            let [b, g, red] = image.pixel(r, c);
            buf.extend_from_slice(&[to_byte(red), to_byte(g), to_byte(b)]);
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Lossless container:
/// `"ENCD" | u32 version | u32 width | u32 height | u32 config | 3 planes f32 LE (B, G, R)`.
pub fn write_encd(image: &EncodedImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(20 + 4 * image.data.len());
    buf.extend_from_slice(ENCD_MAGIC);
    buf.extend_from_slice(&ENCD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(image.width as u32).to_le_bytes());
    buf.extend_from_slice(&(image.height as u32).to_le_bytes());
    buf.extend_from_slice(&(image.config.get() as u32).to_le_bytes());
    for v in &image.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_encd(path: impl AsRef<Path>) -> Result<EncodedImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 || &bytes[..4] != ENCD_MAGIC {
        return Err(Error::Format("bad magic, expected \"ENCD\"".into()));
    }
    if bytes.len() < 20 {
        return Err(Error::Length {
            expected: 20,
            actual: bytes.len(),
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    if u32_at(4) != ENCD_VERSION {
        return Err(Error::Format(format!("unsupported ENCD version {}", u32_at(4))));
    }
    let (width, height) = (u32_at(8) as usize, u32_at(12) as usize);
    let config = ConfigId::new(u32_at(16) as u8)?;
    let expected = 20 + 12 * width * height;
    if bytes.len() != expected {
        return Err(Error::Length {
            expected,
            actual: bytes.len(),
        });
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EncodedImage::new(config, width, height, data)
}

/// 8-bit RGB raster, row-major triplets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn write_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            buf.extend_from_slice(p);
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (width, height, maxval, off) = parse_pnm_header(&bytes, b"P6")?;
        if maxval != 255 {
            return Err(Error::Format(format!("PPM maxval {maxval}, expected 255")));
        }
        let expected = off + 3 * width * height;
        if bytes.len() < expected {
            return Err(Error::Length {
                expected,
                actual: bytes.len(),
            });
        }
        let pixels = bytes[off..expected]
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Ok(RgbImage {
            width,
            height,
            pixels,
        })
    }
}

/// HSV with `h` in degrees.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |u: f64| ((u + m).clamp(0.0, 1.0) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

/// Debug rendering: hue encodes velocity heading, saturation the speed
/// (saturating at 20 m/s), value the occupancy.
pub fn render_dog(grid: &DogGrid) -> RgbImage {
    let pixels = grid
        .cells()
        .iter()
        .map(|c| {
            let (vx, vy) = (c.vx as f64, c.vy as f64);
            let hue = vy.atan2(vx).to_degrees();
            let sat = (vx.hypot(vy) / SPEED_CLIP).min(1.0);
            hsv_to_rgb(hue, sat, c.occ as f64)
        })
        .collect();
    RgbImage {
        width: grid.width(),
        height: grid.height(),
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(occ: f32, vx: f32, vy: f32, var_x: f32, var_y: f32, cov_xy: f32) -> CellState {
        CellState {
            occ,
            vx,
            vy,
            var_x,
            var_y,
            cov_xy,
        }
    }

    #[test]
    fn mahalanobis_examples() {
        assert_eq!(mahalanobis(0.0, 0.0, 1.0, 1.0, 0.0).unwrap(), 0.0);
        let m = mahalanobis_with_eps(2.0, 0.0, 1.0, 4.0, 0.0, 0.0).unwrap();
        assert!((m - 2.0).abs() < 1e-12);
        let m = mahalanobis_with_eps(1.0, 1.0, 2.0, 2.0, 1.0, 0.0).unwrap();
        assert!((m * m - 2.0 / 3.0).abs() < 1e-12);
        assert!((m - 0.816_496_580_927_726).abs() < 1e-12);
    }

    #[test]
    fn mahalanobis_rejects_negative_variance() {
        assert!(mahalanobis(1.0, 0.0, -1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn normalized_velocity_examples() {
        assert_eq!(normalized_velocity(0.0, 5.0), 0.0);
        assert!((normalized_velocity(3.0, 9.0) - 1.0).abs() < 1e-6);
        assert_eq!(normalized_velocity(3.0, 0.0), 3.0);
        assert!((normalized_velocity_raw(3.0, 0.0) - 3.0 / 1e-3).abs() < 1e-6);
    }

    #[test]
    fn overall_variance_examples() {
        assert_eq!(overall_variance(0.0, 0.0, 0.0), 0.0);
        assert_eq!(overall_variance(1.0, 0.5, 2.0), 4.0);
    }

    #[test]
    fn unknown_cell_encodings() {
        let c = CellState::UNKNOWN;
        assert_eq!(encode_cell(&c, ConfigId::new(1).unwrap()).unwrap(), [0.5, 0.5, 0.5]);
        assert_eq!(encode_cell(&c, ConfigId::new(3).unwrap()).unwrap()[0], 0.0);
    }

    #[test]
    fn occupied_mover_config1() {
        let c = cell(1.0, 20.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(encode_cell(&c, ConfigId::new(1).unwrap()).unwrap(), [1.0, 1.0, 0.5]);
    }

    #[test]
    fn config2_separates_clutter_from_mover() {
        let clutter = cell(0.8, 10.0, 0.0, 100.0, 100.0, 0.0);
        let mover = cell(0.8, 10.0, 0.0, 1.0, 1.0, 0.0);
        let c1 = ConfigId::new(1).unwrap();
        let c2 = ConfigId::new(2).unwrap();
        assert_eq!(encode_cell(&clutter, c1).unwrap()[1], encode_cell(&mover, c1).unwrap()[1]);
        let g_clutter = encode_cell(&clutter, c2).unwrap()[1];
        let g_mover = encode_cell(&mover, c2).unwrap()[1];
        // normalised speed 1 vs clipped 3
        assert!((g_clutter - 4.0 / 6.0).abs() < 1e-6);
        assert_eq!(g_mover, 1.0);
    }

    #[test]
    fn config3_folds_free_into_unknown() {
        let c3 = ConfigId::new(3).unwrap();
        let free = cell(0.1, 0.0, 0.0, 0.0, 0.0, 0.0);
        let occupied = cell(0.9, 0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(encode_cell(&free, c3).unwrap()[0], 0.0);
        assert!((encode_cell(&occupied, c3).unwrap()[0] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn configs_4_and_5() {
        let c = cell(1.0, 3.0, 4.0, 1.0, 4.0, 0.5);
        let p4 = encode_cell(&c, ConfigId::new(4).unwrap()).unwrap();
        assert!((p4[1] - 0.25).abs() < 1e-6);
        assert!((p4[2] - 0.06).abs() < 1e-6);
        let p5 = encode_cell(&c, ConfigId::new(5).unwrap()).unwrap();
        let m = mahalanobis(3.0, 4.0, 1.0, 4.0, 0.5).unwrap();
        assert!((p5[2] as f64 - m / 10.0).abs() < 1e-6);
    }

    #[test]
    fn invalid_config_id() {
        assert!(ConfigId::new(0).is_err());
        assert!(ConfigId::new(6).is_err());
    }

    #[test]
    fn render_unknown_grid_is_mid_gray() {
        let grid = DogGrid::unknown(4, 4, 1.0).unwrap();
        let img = render_dog(&grid);
        assert!(img.pixels.iter().all(|&p| p == [128, 128, 128]));
    }

    #[test]
    fn render_hue_depends_on_heading_only() {
        let cells = vec![
            cell(1.0, 10.0, 0.0, 1.0, 1.0, 0.0),
            cell(1.0, 5.0, 0.0, 1.0, 1.0, 0.0),
            cell(1.0, 0.0, 5.0, 1.0, 1.0, 0.0),
            cell(1.0, 0.0, 10.0, 1.0, 1.0, 0.0),
        ];
        let grid = DogGrid::new(2, 2, 1.0, 0, cells).unwrap();
        let img = render_dog(&grid);
        // +x is pure red hue; the faster cell is more saturated
        let [r0, g0, b0] = img.pixels[0];
        let [r1, g1, b1] = img.pixels[1];
        assert_eq!(r0, 255);
        assert_eq!(r1, 255);
        assert_eq!(g0, b0);
        assert_eq!(g1, b1);
        assert!(g0 < g1);
        // +y (90 degrees) is chartreuse-green
        let [r2, g2, _] = img.pixels[2];
        let [r3, g3, _] = img.pixels[3];
        assert_eq!(g2, 255);
        assert_eq!(g3, 255);
        assert!(r3 < r2);
    }

    #[test]
    fn encd_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.encd");
        let grid = DogGrid::new(
            2,
            2,
            1.0,
            0,
            vec![
                cell(0.1, 1.0, -2.0, 1.0, 2.0, 0.3),
                cell(0.9, 15.0, 0.0, 4.0, 1.0, 0.0),
                CellState::UNKNOWN,
                cell(1.0, -30.0, 30.0, 0.0, 0.0, 0.0),
            ],
        )
        .unwrap();
        for config in ConfigId::ALL {
            let img = encode(&grid, config).unwrap();
            write_encd(&img, &path).unwrap();
            assert_eq!(read_encd(&path).unwrap(), img);
        }
    }

    #[test]
    fn ppm_channel_permutation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ppm");
        let img = EncodedImage::new(ConfigId::new(1).unwrap(), 1, 1, vec![0.0, 0.5, 1.0]).unwrap();
        write_ppm(&img, &path).unwrap();
        let rgb = RgbImage::read_ppm(&path).unwrap();
        assert_eq!(rgb.pixels[0], [255, 128, 0]);
    }
}
