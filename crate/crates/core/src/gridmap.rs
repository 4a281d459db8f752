//! Grid data model shared by every stage of the pipeline.
//!
//! A [`DogGrid`] is an ego-centred, axis-aligned raster of per-cell occupancy
//! and velocity statistics. Rows run top to bottom, columns left to right.
//! Metric coordinates put the ego at the grid centre with `x` pointing along
//! increasing columns and `y` pointing up (towards row 0), so a velocity of
//! `(0, 1)` moves towards the top of the image.
//!
//! Grids persist in the little-endian `DOGG` container:
//!
//! ```text
//! "DOGG" | u32 version=1 | u32 width | u32 height | f32 cell_size
//! width*height cells, row-major, each 6 x f32: occ vx vy var_x var_y cov_xy
//! ```
//!
//! Label masks persist as binary PGM (`P5`, maxval 255, 0 = static,
//! 255 = dynamic).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const DOGG_MAGIC: &[u8; 4] = b"DOGG";
pub const DOGG_VERSION: u32 = 1;
pub const DOGG_HEADER_BYTES: usize = 20;
pub const DOGG_CELL_BYTES: usize = 24;

/// Tolerance on `var_x * var_y - cov_xy^2` below zero.
pub const PSD_TOLERANCE: f64 = 1e-9;

/// Occupancy above which a cell counts as occupied for evaluation and
/// refinement.
pub const DEFAULT_OCC_THRESHOLD: f32 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CellState {
    /// 0 = free, 0.5 = unknown, 1 = occupied.
    pub occ: f32,
    pub vx: f32,
    pub vy: f32,
    pub var_x: f32,
    pub var_y: f32,
    pub cov_xy: f32,
}

impl CellState {
    pub const UNKNOWN: CellState = CellState {
        occ: 0.5,
        vx: 0.0,
        vy: 0.0,
        var_x: 0.0,
        var_y: 0.0,
        cov_xy: 0.0,
    };

    pub fn speed(&self) -> f32 {
        self.vx.hypot(self.vy)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let fields = [
            self.occ,
            self.vx,
            self.vy,
            self.var_x,
            self.var_y,
            self.cov_xy,
        ];
        if fields.iter().any(|v| !v.is_finite()) {
            return Err("non-finite field".into());
        }
        if !(0.0..=1.0).contains(&self.occ) {
            return Err(format!("occupancy {} outside [0, 1]", self.occ));
        }
        if self.var_x < 0.0 || self.var_y < 0.0 {
            return Err(format!(
                "negative variance (var_x={}, var_y={})",
                self.var_x, self.var_y
            ));
        }
        let det = self.var_x as f64 * self.var_y as f64 - (self.cov_xy as f64).powi(2);
        if det < -PSD_TOLERANCE {
            return Err(format!("covariance not positive semidefinite (det={det})"));
        }
        Ok(())
    }

    /// Clamps the covariance so the matrix stays positive semidefinite after
    /// lossy arithmetic (interpolation, rotation in f32).
    pub fn clamp_covariance(&mut self) {
        self.var_x = self.var_x.max(0.0);
        self.var_y = self.var_y.max(0.0);
        let bound = (self.var_x as f64 * self.var_y as f64).sqrt() as f32;
        if self.cov_xy.abs() > bound {
            self.cov_xy = bound.copysign(self.cov_xy);
        }
    }
}

/// Ego-centred dynamic occupancy grid. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct DogGrid {
    width: usize,
    height: usize,
    cell_size: f32,
    frame_id: u64,
    cells: Vec<CellState>,
}

impl DogGrid {
    pub fn new(
        width: usize,
        height: usize,
        cell_size: f32,
        frame_id: u64,
        cells: Vec<CellState>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::arg(format!("grid dims must be positive, got {width}x{height}")));
        }
        if width % 2 != 0 || height % 2 != 0 {
            return Err(Error::arg(format!("grid dims must be even, got {width}x{height}")));
        }
        if !(cell_size.is_finite() && cell_size > 0.0) {
            return Err(Error::arg(format!("cell_size must be positive, got {cell_size}")));
        }
        if cells.len() != width * height {
            return Err(Error::shape(format!(
                "expected {} cells for {width}x{height}, got {}",
                width * height,
                cells.len()
            )));
        }
        for (index, cell) in cells.iter().enumerate() {
            cell.validate()
                .map_err(|reason| Error::InvalidCell { index, reason })?;
        }
        Ok(DogGrid {
            width,
            height,
            cell_size,
            frame_id,
            cells,
        })
    }

    pub fn filled(width: usize, height: usize, cell_size: f32, cell: CellState) -> Result<Self> {
        Self::new(width, height, cell_size, 0, vec![cell; width * height])
    }

    pub fn unknown(width: usize, height: usize, cell_size: f32) -> Result<Self> {
        Self::filled(width, height, cell_size, CellState::UNKNOWN)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell_size(&self) -> f32 {
        self.cell_size
    }

    pub fn frame_id(&self) -> u64 {
        self.frame_id
    }

    pub fn cells(&self) -> &[CellState] {
        &self.cells
    }

    pub fn cell(&self, row: usize, col: usize) -> &CellState {
        &self.cells[row * self.width + col]
    }

    pub fn with_frame_id(mut self, frame_id: u64) -> Self {
        self.frame_id = frame_id;
        self
    }

    /// Builds a grid with the same geometry and new cell contents.
    pub fn with_cells(&self, cells: Vec<CellState>) -> Result<Self> {
        Self::new(self.width, self.height, self.cell_size, self.frame_id, cells)
    }

    pub fn into_cells(self) -> Vec<CellState> {
        self.cells
    }

    /// Metric centre `(x, y)` of a cell, ego at the origin.
    pub fn cell_center(&self, row: usize, col: usize) -> (f32, f32) {
        let x = (col as f32 + 0.5 - self.width as f32 / 2.0) * self.cell_size;
        let y = (self.height as f32 / 2.0 - row as f32 - 0.5) * self.cell_size;
        (x, y)
    }

    /// Fractional `(row, col)` index of a metric point; cell centres land on
    /// integers.
    pub fn point_to_index(&self, x: f32, y: f32) -> (f32, f32) {
        let col = x / self.cell_size + self.width as f32 / 2.0 - 0.5;
        let row = self.height as f32 / 2.0 - 0.5 - y / self.cell_size;
        (row, col)
    }

    pub fn same_dims(&self, width: usize, height: usize) -> bool {
        self.width == width && self.height == height
    }

    /// 2x2 block average, halving each dimension (the dims of the result
    /// must stay even).
    pub fn downsample2(&self) -> Result<Self> {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut cells = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                let mut acc = [0f64; 6];
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = self.cell(2 * r + dr, 2 * c + dc);
                    for (a, v) in acc
                        .iter_mut()
                        .zip([s.occ, s.vx, s.vy, s.var_x, s.var_y, s.cov_xy])
                    {
                        *a += v as f64 / 4.0;
                    }
                }
                let mut cell = CellState {
                    occ: (acc[0] as f32).clamp(0.0, 1.0),
                    vx: acc[1] as f32,
                    vy: acc[2] as f32,
                    var_x: acc[3] as f32,
                    var_y: acc[4] as f32,
                    cov_xy: acc[5] as f32,
                };
                cell.clamp_covariance();
                cells.push(cell);
            }
        }
        Self::new(w, h, self.cell_size * 2.0, self.frame_id, cells)
    }
}

/// `mask[i] = occ_i > thresh` (strict).
pub fn occupied_mask(grid: &DogGrid, thresh: f32) -> Vec<bool> {
    grid.cells().iter().map(|c| c.occ > thresh).collect()
}

pub fn write_dog(grid: &DogGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    for (index, cell) in grid.cells().iter().enumerate() {
        cell.validate()
            .map_err(|reason| Error::InvalidCell { index, reason })?;
    }
    fs::write(path, encode_dog(grid)).map_err(|e| Error::io(path, e))
}

pub fn encode_dog(grid: &DogGrid) -> Vec<u8> {
    let mut buf = Vec::with_capacity(DOGG_HEADER_BYTES + grid.len() * DOGG_CELL_BYTES);
    buf.extend_from_slice(DOGG_MAGIC);
    buf.extend_from_slice(&DOGG_VERSION.to_le_bytes());
    buf.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    buf.extend_from_slice(&grid.cell_size().to_le_bytes());
    for c in grid.cells() {
        for v in [c.occ, c.vx, c.vy, c.var_x, c.var_y, c.cov_xy] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

/// Reads a `DOGG` file. The frame id is not part of the container; it is
/// recovered from trailing digits of the file stem (`frame_000042.dogg`)
/// and defaults to 0.
pub fn read_dog(path: impl AsRef<Path>) -> Result<DogGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let frame_id = frame_id_from_path(path).unwrap_or(0);
    decode_dog(&bytes).map(|g| g.with_frame_id(frame_id))
}

pub fn decode_dog(bytes: &[u8]) -> Result<DogGrid> {
    if bytes.len() < 4 || &bytes[..4] != DOGG_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(Error::Format(format!("bad magic {found:?}, expected \"DOGG\"")));
    }
    if bytes.len() < DOGG_HEADER_BYTES {
        return Err(Error::Length {
            expected: DOGG_HEADER_BYTES,
            actual: bytes.len(),
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != DOGG_VERSION {
        return Err(Error::Format(format!("unsupported DOGG version {version}")));
    }
    let width = u32_at(8) as usize;
    let height = u32_at(12) as usize;
    let cell_size = f32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let expected = DOGG_HEADER_BYTES + width * height * DOGG_CELL_BYTES;
    if bytes.len() < expected {
        return Err(Error::Length {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let cells = bytes[DOGG_HEADER_BYTES..]
        .chunks_exact(DOGG_CELL_BYTES)
        .map(|chunk| {
            let f = |i: usize| f32::from_le_bytes(chunk[4 * i..4 * i + 4].try_into().unwrap());
            CellState {
                occ: f(0),
                vx: f(1),
                vy: f(2),
                var_x: f(3),
                var_y: f(4),
                cov_xy: f(5),
            }
        })
        .collect();
    DogGrid::new(width, height, cell_size, 0, cells)
}

fn frame_id_from_path(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(u8)]
pub enum Label {
    #[default]
    Static = 0,
    Dynamic = 1,
}

impl Label {
    pub fn is_dynamic(self) -> bool {
        self == Label::Dynamic
    }

    pub fn from_index(k: usize) -> Option<Label> {
        match k {
            0 => Some(Label::Static),
            1 => Some(Label::Dynamic),
            _ => None,
        }
    }
}

impl From<bool> for Label {
    fn from(dynamic: bool) -> Self {
        if dynamic {
            Label::Dynamic
        } else {
            Label::Static
        }
    }
}

/// Per-cell binary class map, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<Label>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::shape(format!(
                "expected {} labels for {width}x{height}, got {}",
                width * height,
                labels.len()
            )));
        }
        Ok(LabelMask {
            width,
            height,
            labels,
        })
    }

    pub fn all_static(width: usize, height: usize) -> Self {
        LabelMask {
            width,
            height,
            labels: vec![Label::Static; width * height],
        }
    }

    pub fn from_bools(width: usize, height: usize, dynamic: &[bool]) -> Result<Self> {
        Self::new(width, height, dynamic.iter().map(|&d| Label::from(d)).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> Label {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: Label) {
        self.labels[row * self.width + col] = label;
    }

    pub fn dynamic_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_dynamic()).count()
    }

    pub fn matches_grid(&self, grid: &DogGrid) -> bool {
        grid.same_dims(self.width, self.height)
    }

    pub fn check_grid(&self, grid: &DogGrid) -> Result<()> {
        if self.matches_grid(grid) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "mask is {}x{}, grid is {}x{}",
                self.width,
                self.height,
                grid.width(),
                grid.height()
            )))
        }
    }

    /// Cell is dynamic when at least two of its four children are.
    pub fn downsample2(&self) -> LabelMask {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut labels = Vec::with_capacity(w * h);
        for r in 0..h {
            for c in 0..w {
                let n = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .filter(|(dr, dc)| self.get(2 * r + dr, 2 * c + dc).is_dynamic())
                    .count();
                labels.push(Label::from(n >= 2));
            }
        }
        LabelMask {
            width: w,
            height: h,
            labels,
        }
    }
}

pub fn write_pgm(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    buf.extend(mask.labels.iter().map(|l| if l.is_dynamic() { 255u8 } else { 0 }));
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (width, height, maxval, offset) = parse_pnm_header(&bytes, b"P5")?;
    if maxval != 255 {
        return Err(Error::Format(format!("PGM maxval {maxval}, expected 255")));
    }
    let expected = offset + width * height;
    if bytes.len() < expected {
        return Err(Error::Length {
            expected,
            actual: bytes.len(),
        });
    }
    let labels = bytes[offset..expected]
        .iter()
        .enumerate()
        .map(|(i, &b)| match b {
            0 => Ok(Label::Static),
            255 => Ok(Label::Dynamic),
            other => Err(Error::Format(format!("label value {other} at pixel {i}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    LabelMask::new(width, height, labels)
}

/// Parses a binary PNM header, returning `(width, height, maxval, data_offset)`.
pub(crate) fn parse_pnm_header(bytes: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(Error::Format(format!(
            "expected {} header",
            String::from_utf8_lossy(magic)
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated PNM header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PNM header".into()))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::Format("malformed PNM header".into()));
    }
    Ok((fields[0], fields[1], fields[2], pos + 1))
}
