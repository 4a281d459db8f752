//! Seeded generator of synthetic dynamic occupancy grids with exact
//! ground-truth masks.
//!
//! A scene is a set of static structures (walls, curbs, parked blocks) and
//! moving boxes. Each frame rasterizes the footprints, ray-casts freespace
//! from the ego at the grid centre, fills in per-cell velocity statistics,
//! then layers on the two failure modes of the Mahalanobis baseline:
//! aperture-corrupted velocities on long thin structures and high-variance
//! clutter in unobserved space.
//!
//! Scene files are plain `key=value` lines; list-valued keys repeat:
//!
//! ```text
//! preset=paper_like
//! seed=7
//! clutter_density=0.05
//! mover=2.0,0.5,4.5,1.8,10,0        # cx,cy,length,width,vx,vy
//! wall=-10,5;10,5;10,12             # polyline vertices
//! curb=-16,-3.5;16,-3.5
//! block=4,-2.6,4.5,1.8,0            # cx,cy,length,width,heading_deg
//! ```

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::gridmap::{CellState, DogGrid, Label, LabelMask};

type Vec2 = [f64; 2];

/// Occupancy of never-observed cells.
pub const UNKNOWN_OCC: f32 = 0.5;
/// Mean occupancy of observed free cells.
pub const FREE_OCC: f32 = 0.1;
/// Lower bound on clutter variance at unit scale (m²/s²).
pub const CLUTTER_VARIANCE_FLOOR: f64 = 25.0;
/// Lower bound on the tangential aperture variance at unit scale (m²/s²).
pub const APERTURE_VARIANCE_FLOOR: f64 = 16.0;
/// Largest spurious tangential speed at unit scale (m/s).
pub const APERTURE_MAX_SPEED: f64 = 8.0;
/// Segments shorter than this (m) are not treated as one-dimensional.
pub const APERTURE_MIN_LENGTH: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MovingBox {
    pub center: Vec2,
    /// `(length along the heading, width)` in metres.
    pub extent: Vec2,
    pub velocity: Vec2,
}

impl MovingBox {
    /// Unit heading; boxes at rest face +x.
    pub fn heading(&self) -> Vec2 {
        let s = self.velocity[0].hypot(self.velocity[1]);
        if s > 0.0 {
            [self.velocity[0] / s, self.velocity[1] / s]
        } else {
            [1.0, 0.0]
        }
    }

    pub fn center_at(&self, t: f64) -> Vec2 {
        [self.center[0] + self.velocity[0] * t, self.center[1] + self.velocity[1] * t]
    }

    fn rect_at(&self, t: f64) -> Rect {
        Rect::new(self.center_at(t), self.extent, self.heading())
    }

    pub fn contains(&self, p: Vec2, t: f64) -> bool {
        self.rect_at(t).contains(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    /// Tall; blocks the sensor.
    Wall,
    /// Low; seen but not occluding.
    Curb,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StaticShape {
    Polyline {
        kind: ShapeKind,
        points: Vec<Vec2>,
        thickness: f64,
    },
    /// Oriented rectangle such as a parked car or a pole; occluding.
    Block { center: Vec2, extent: Vec2, heading_deg: f64 },
}

impl StaticShape {
    pub fn wall(points: Vec<Vec2>) -> Self {
        StaticShape::Polyline {
            kind: ShapeKind::Wall,
            points,
            thickness: 0.5,
        }
    }

    pub fn curb(points: Vec<Vec2>) -> Self {
        StaticShape::Polyline {
            kind: ShapeKind::Curb,
            points,
            thickness: 0.25,
        }
    }

    fn occludes(&self) -> bool {
        !matches!(self, StaticShape::Polyline { kind: ShapeKind::Curb, .. })
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    center: Vec2,
    half: Vec2,
    axis: Vec2,
}

impl Rect {
    fn new(center: Vec2, extent: Vec2, axis: Vec2) -> Self {
        Rect {
            center,
            half: [extent[0] / 2.0, extent[1] / 2.0],
            axis,
        }
    }

    fn from_heading(center: Vec2, extent: Vec2, heading_deg: f64) -> Self {
        let a = heading_deg.to_radians();
        Self::new(center, extent, [a.cos(), a.sin()])
    }

    fn local(&self, p: Vec2) -> Vec2 {
        let d = [p[0] - self.center[0], p[1] - self.center[1]];
        [
            d[0] * self.axis[0] + d[1] * self.axis[1],
            -d[0] * self.axis[1] + d[1] * self.axis[0],
        ]
    }

    fn contains(&self, p: Vec2) -> bool {
        let l = self.local(p);
        l[0].abs() <= self.half[0] && l[1].abs() <= self.half[1]
    }

    fn corners(&self) -> [Vec2; 4] {
        let [ax, ay] = self.axis;
        let (n0, n1) = (-ay, ax);
        let mut out = [[0.0; 2]; 4];
        for (k, (s, t)) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)].iter().enumerate() {
            out[k] = [
                self.center[0] + s * self.half[0] * ax + t * self.half[1] * n0,
                self.center[1] + s * self.half[0] * ay + t * self.half[1] * n1,
            ];
        }
        out
    }

    /// Separating-axis overlap test, inflated by `margin` on every side.
    fn overlaps(&self, other: &Rect, margin: f64) -> bool {
        let a = Rect {
            half: [self.half[0] + margin, self.half[1] + margin],
            ..*self
        };
        let axes = [a.axis, [-a.axis[1], a.axis[0]], other.axis, [-other.axis[1], other.axis[0]]];
        let (ca, cb) = (a.corners(), other.corners());
        for ax in axes {
            let proj = |cs: &[Vec2; 4]| {
                cs.iter()
                    .map(|c| c[0] * ax[0] + c[1] * ax[1])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
            };
            let (alo, ahi) = proj(&ca);
            let (blo, bhi) = proj(&cb);
            if ahi < blo || bhi < alo {
                return false;
            }
        }
        true
    }
}

fn segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * ab[0]).hypot(p[1] - a[1] - t * ab[1])
}

/// How static structures and movers are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Exactly the listed shapes and movers.
    Explicit,
    /// A random street scene drawn from the seed, added to any listed items.
    Street,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub sensor_range: f64,
    pub movers: Vec<MovingBox>,
    pub shapes: Vec<StaticShape>,
    pub layout: Layout,
    /// Fraction of unobserved cells turned into clutter.
    pub clutter_density: f64,
    pub occ_noise: f64,
    /// Per-axis velocity noise on moving cells (m/s).
    pub velocity_noise: f64,
    /// Per-axis velocity noise on static occupied cells (m/s).
    pub static_velocity_noise: f64,
    pub clutter_variance_scale: f64,
    pub aperture_scale: f64,
    pub frames: usize,
    pub frame_dt: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    /// An empty, noise-free 128×128 world.
    fn default() -> Self {
        SceneSpec {
            width: 128,
            height: 128,
            cell_size: 0.25,
            sensor_range: 15.0,
            movers: Vec::new(),
            shapes: Vec::new(),
            layout: Layout::Explicit,
            clutter_density: 0.0,
            occ_noise: 0.0,
            velocity_noise: 0.0,
            static_velocity_noise: 0.0,
            clutter_variance_scale: 1.0,
            aperture_scale: 0.0,
            frames: 1,
            frame_dt: 0.5,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// Random street scenes with corruption enabled; the default for
    /// dataset generation.
    pub fn paper_like() -> Self {
        SceneSpec {
            layout: Layout::Street,
            clutter_density: 0.06,
            occ_noise: 0.05,
            velocity_noise: 0.5,
            static_velocity_noise: 0.1,
            clutter_variance_scale: 1.0,
            aperture_scale: 1.0,
            ..Self::default()
        }
    }

    /// Same scene with clutter and aperture corruption switched off.
    pub fn without_corruption(&self) -> Self {
        SceneSpec {
            clutter_density: 0.0,
            aperture_scale: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 || self.width % 2 != 0 || self.height % 2 != 0 {
            return bad(format!("grid dims must be positive and even, got {}x{}", self.width, self.height));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return bad(format!("cell_size must be positive, got {}", self.cell_size));
        }
        if !(self.sensor_range >= 0.0) {
            return bad(format!("sensor_range must be >= 0, got {}", self.sensor_range));
        }
        if !(0.0..=1.0).contains(&self.clutter_density) {
            return bad(format!("clutter_density must be in [0, 1], got {}", self.clutter_density));
        }
        for (name, v) in [
            ("occ_noise", self.occ_noise),
            ("velocity_noise", self.velocity_noise),
            ("static_velocity_noise", self.static_velocity_noise),
            ("clutter_variance_scale", self.clutter_variance_scale),
            ("aperture_scale", self.aperture_scale),
            ("frame_dt", self.frame_dt),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.frames == 0 {
            return bad("frames must be >= 1".into());
        }
        for (i, m) in self.movers.iter().enumerate() {
            if !(m.extent[0] > 0.0 && m.extent[1] > 0.0) {
                return bad(format!("mover {i} has non-positive extent"));
            }
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if let StaticShape::Polyline { points, thickness, .. } = s {
                if points.len() < 2 || !(*thickness > 0.0) {
                    return bad(format!("shape {i} needs >= 2 points and positive thickness"));
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SceneSpec::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: String| Error::Config(format!("line {}: {m}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |v: &str| -> Result<f64> { v.trim().parse::<f64>().map_err(|_| err(format!("bad number {v:?} for {key}"))) };
            let nums = |v: &str, n: usize| -> Result<Vec<f64>> {
                let xs = v.split(',').map(num).collect::<Result<Vec<_>>>()?;
                if xs.len() != n {
                    return Err(err(format!("{key} needs {n} comma-separated numbers, got {}", xs.len())));
                }
                Ok(xs)
            };
            let points = |v: &str| -> Result<Vec<Vec2>> {
                v.split(';')
                    .map(|p| nums(p, 2).map(|xy| [xy[0], xy[1]]))
                    .collect()
            };
            let int = |v: &str| -> Result<usize> { v.parse::<usize>().map_err(|_| err(format!("bad integer {v:?} for {key}"))) };
            match key {
                "preset" => match value {
                    "paper_like" => {
                        let keep = (spec.movers.clone(), spec.shapes.clone());
                        spec = SceneSpec::paper_like();
                        (spec.movers, spec.shapes) = keep;
                    }
                    "empty" => spec = SceneSpec::default(),
                    other => return Err(err(format!("unknown preset {other:?}"))),
                },
                "layout" => {
                    spec.layout = match value {
                        "explicit" => Layout::Explicit,
                        "street" => Layout::Street,
                        other => return Err(err(format!("unknown layout {other:?}"))),
                    }
                }
                "width" => spec.width = int(value)?,
                "height" => spec.height = int(value)?,
                "cell_size" => spec.cell_size = num(value)?,
                "sensor_range" => spec.sensor_range = num(value)?,
                "clutter_density" => spec.clutter_density = num(value)?,
                "occ_noise" => spec.occ_noise = num(value)?,
                "velocity_noise" => spec.velocity_noise = num(value)?,
                "static_velocity_noise" => spec.static_velocity_noise = num(value)?,
                "clutter_variance_scale" => spec.clutter_variance_scale = num(value)?,
                "aperture_scale" => spec.aperture_scale = num(value)?,
                "frames" => spec.frames = int(value)?,
                "frame_dt" => spec.frame_dt = num(value)?,
                "seed" => spec.seed = value.parse().map_err(|_| err(format!("bad seed {value:?}")))?,
                "mover" => {
                    let v = nums(value, 6)?;
                    spec.movers.push(MovingBox {
                        center: [v[0], v[1]],
                        extent: [v[2], v[3]],
                        velocity: [v[4], v[5]],
                    });
                }
                "wall" => spec.shapes.push(StaticShape::wall(points(value)?)),
                "curb" => spec.shapes.push(StaticShape::curb(points(value)?)),
                "block" => {
                    let v = nums(value, 5)?;
                    spec.shapes.push(StaticShape::Block {
                        center: [v[0], v[1]],
                        extent: [v[2], v[3]],
                        heading_deg: v[4],
                    });
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Serialises to the `key=value` format accepted by [`SceneSpec::parse`].
    pub fn to_config(&self) -> String {
        let mut s = String::new();
        let layout = match self.layout {
            Layout::Explicit => "explicit",
            Layout::Street => "street",
        };
        s += &format!(
            "width={}\nheight={}\ncell_size={}\nsensor_range={}\nlayout={layout}\n",
            self.width, self.height, self.cell_size, self.sensor_range
        );
        s += &format!(
            "clutter_density={}\nocc_noise={}\nvelocity_noise={}\nstatic_velocity_noise={}\n",
            self.clutter_density, self.occ_noise, self.velocity_noise, self.static_velocity_noise
        );
        s += &format!(
            "clutter_variance_scale={}\naperture_scale={}\nframes={}\nframe_dt={}\nseed={}\n",
            self.clutter_variance_scale, self.aperture_scale, self.frames, self.frame_dt, self.seed
        );
        let pts = |p: &[Vec2]| p.iter().map(|q| format!("{},{}", q[0], q[1])).collect::<Vec<_>>().join(";");
        for m in &self.movers {
            s += &format!(
                "mover={},{},{},{},{},{}\n",
                m.center[0], m.center[1], m.extent[0], m.extent[1], m.velocity[0], m.velocity[1]
            );
        }
        for sh in &self.shapes {
            match sh {
                StaticShape::Polyline { kind, points, .. } => {
                    let k = if *kind == ShapeKind::Wall { "wall" } else { "curb" };
                    s += &format!("{k}={}\n", pts(points));
                }
                StaticShape::Block { center, extent, heading_deg } => {
                    s += &format!("block={},{},{},{},{}\n", center[0], center[1], extent[0], extent[1], heading_deg)
                }
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFrame {
    pub grid: DogGrid,
    pub mask: LabelMask,
    pub frame_id: u64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// What a cell's footprint belongs to.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Occupant {
    Static { occludes: bool },
    Mover(usize),
}

struct Geometry {
    w: usize,
    h: usize,
    cs: f64,
}

impl Geometry {
    fn of(spec: &SceneSpec) -> Self {
        Geometry {
            w: spec.width,
            h: spec.height,
            cs: spec.cell_size,
        }
    }

    fn center(&self, i: usize) -> Vec2 {
        let (r, c) = (i / self.w, i % self.w);
        [
            (c as f64 + 0.5 - self.w as f64 / 2.0) * self.cs,
            (self.h as f64 / 2.0 - r as f64 - 0.5) * self.cs,
        ]
    }

    fn index_of(&self, p: Vec2) -> Option<usize> {
        let c = (p[0] / self.cs + self.w as f64 / 2.0).floor();
        let r = (self.h as f64 / 2.0 - p[1] / self.cs).floor();
        (c >= 0.0 && r >= 0.0 && (c as usize) < self.w && (r as usize) < self.h).then(|| r as usize * self.w + c as usize)
    }

    /// Cell index range covering a metric bounding box.
    fn cells_in_box(&self, lo: Vec2, hi: Vec2) -> impl Iterator<Item = usize> + '_ {
        let c0 = ((lo[0] / self.cs + self.w as f64 / 2.0).floor().max(0.0) as usize).min(self.w);
        let c1 = ((hi[0] / self.cs + self.w as f64 / 2.0).ceil().max(0.0) as usize).min(self.w);
        let r0 = ((self.h as f64 / 2.0 - hi[1] / self.cs).floor().max(0.0) as usize).min(self.h);
        let r1 = ((self.h as f64 / 2.0 - lo[1] / self.cs).ceil().max(0.0) as usize).min(self.h);
        (r0..r1).flat_map(move |r| (c0..c1).map(move |c| r * self.w + c))
    }

    fn rect_cells(&self, rect: &Rect) -> Vec<usize> {
        let cs = rect.corners();
        let lo = [cs.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min), cs.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min)];
        let hi = [cs.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max), cs.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max)];
        self.cells_in_box(lo, hi).filter(|&i| rect.contains(self.center(i))).collect()
    }

    /// Cells within `radius` of segment `a-b`.
    fn segment_cells(&self, a: Vec2, b: Vec2, radius: f64) -> Vec<usize> {
        let lo = [a[0].min(b[0]) - radius, a[1].min(b[1]) - radius];
        let hi = [a[0].max(b[0]) + radius, a[1].max(b[1]) + radius];
        self.cells_in_box(lo, hi)
            .filter(|&i| segment_distance(self.center(i), a, b) <= radius)
            .collect()
    }
}

/// One long straight piece of a wall or curb, for aperture corruption.
#[derive(Debug, Clone)]
struct ApertureSegment {
    tangent: Vec2,
    cells: Vec<usize>,
}

fn polyline_segments(shape: &StaticShape, geo: &Geometry) -> Vec<ApertureSegment> {
    let StaticShape::Polyline { points, thickness, .. } = shape else {
        return Vec::new();
    };
    let radius = (thickness / 2.0).max(geo.cs / 2.0);
    points
        .windows(2)
        .filter_map(|ab| {
            let (a, b) = (ab[0], ab[1]);
            let len = (b[0] - a[0]).hypot(b[1] - a[1]);
            (len > 0.0).then(|| ApertureSegment {
                tangent: [(b[0] - a[0]) / len, (b[1] - a[1]) / len],
                cells: geo.segment_cells(a, b, radius),
            })
            .filter(|_| len >= APERTURE_MIN_LENGTH)
        })
        .collect()
}

fn shape_cells(shape: &StaticShape, geo: &Geometry) -> Vec<usize> {
    match shape {
        StaticShape::Polyline { points, thickness, .. } => {
            let radius = (thickness / 2.0).max(geo.cs / 2.0);
            let mut cells: Vec<usize> = points.windows(2).flat_map(|ab| geo.segment_cells(ab[0], ab[1], radius)).collect();
            cells.sort_unstable();
            cells.dedup();
            cells
        }
        StaticShape::Block {
            center,
            extent,
            heading_deg,
        } => geo.rect_cells(&Rect::from_heading(*center, *extent, *heading_deg)),
    }
}

fn check_mover_overlaps(spec: &SceneSpec) -> Result<()> {
    for k in 0..spec.frames {
        let t = k as f64 * spec.frame_dt;
        for i in 0..spec.movers.len() {
            for j in i + 1..spec.movers.len() {
                if spec.movers[i].rect_at(t).overlaps(&spec.movers[j].rect_at(t), 0.0) {
                    return Err(Error::Generation(format!(
                        "overlapping moving boxes {i} and {j} at frame {k}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Draws a random street layout: a main road at a random heading through
/// the ego position, curbs, sidewalks, building walls, an optional cross
/// street with L-shaped corners, parked cars, poles, and road users.
fn street_layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> (Vec<StaticShape>, Vec<MovingBox>) {
    let theta = rng.gen_range(0.0..PI);
    let (ux, uy) = (theta.cos(), theta.sin());
    let offset = rng.gen_range(-2.5..2.5);
    // road frame (along, lateral) -> world
    let world = move |a: f64, l: f64| -> Vec2 { [a * ux - (l + offset) * uy, a * uy + (l + offset) * ux] };
    let heading_deg = theta.to_degrees();

    let lanes = *[2usize, 4, 6].choose(rng).unwrap();
    let hw = lanes as f64 * 3.5 / 2.0;
    let sidewalk = rng.gen_range(2.5..5.0);
    let far = 40.0;
    let cross = rng.gen_bool(0.4).then(|| (rng.gen_range(-10.0..10.0), *[3.5, 7.0].choose(rng).unwrap()));

    let mut shapes = Vec::new();
    for side in [-1.0, 1.0] {
        for (lat, is_wall) in [(hw, false), (hw + sidewalk, true)] {
            let mk = |pts: Vec<Vec2>| if is_wall { StaticShape::wall(pts) } else { StaticShape::curb(pts) };
            match cross {
                None => {
                    if is_wall && rng.gen_bool(0.5) {
                        // facade with a doorway or alley gap
                        let gap_at = rng.gen_range(-12.0..12.0);
                        let gap = rng.gen_range(2.0..6.0);
                        shapes.push(mk(vec![world(-far, side * lat), world(gap_at - gap / 2.0, side * lat)]));
                        shapes.push(mk(vec![world(gap_at + gap / 2.0, side * lat), world(far, side * lat)]));
                    } else {
                        shapes.push(mk(vec![world(-far, side * lat), world(far, side * lat)]));
                    }
                }
                Some((a, chw)) => {
                    let inset = if is_wall { chw + sidewalk } else { chw };
                    shapes.push(mk(vec![
                        world(-far, side * lat),
                        world(a - inset, side * lat),
                        world(a - inset, side * far),
                    ]));
                    shapes.push(mk(vec![
                        world(far, side * lat),
                        world(a + inset, side * lat),
                        world(a + inset, side * far),
                    ]));
                }
            }
        }
    }

    let mut taken: Vec<Rect> = Vec::new();
    let place = |rect: Rect, taken: &mut Vec<Rect>, margin: f64| -> bool {
        if taken.iter().any(|t| t.overlaps(&rect, margin)) {
            return false;
        }
        taken.push(rect);
        true
    };
    let in_cross = |a: f64, pad: f64| cross.is_some_and(|(ca, chw)| (a - ca).abs() < chw + pad);

    // parked cars along the curbs
    for _ in 0..rng.gen_range(0..=3) {
        let side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let a = rng.gen_range(-14.0..14.0);
        if in_cross(a, 3.0) {
            continue;
        }
        let center = world(a, side * (hw - 1.2));
        let rect = Rect::from_heading(center, [4.5, 1.8], heading_deg);
        if place(rect, &mut taken, 0.3) {
            shapes.push(StaticShape::Block {
                center,
                extent: [4.5, 1.8],
                heading_deg,
            });
        }
    }
    // poles and bins on the sidewalks
    for _ in 0..rng.gen_range(0..=4) {
        let side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let a = rng.gen_range(-14.0..14.0);
        if in_cross(a, sidewalk) {
            continue;
        }
        let center = world(a, side * (hw + rng.gen_range(0.4..1.0)));
        let size = rng.gen_range(0.4..0.7);
        let rect = Rect::from_heading(center, [size, size], heading_deg);
        if place(rect, &mut taken, 0.3) {
            shapes.push(StaticShape::Block {
                center,
                extent: [size, size],
                heading_deg,
            });
        }
    }

    // road users; footprints must stay clear of everything at every frame
    let span = (spec.frames.saturating_sub(1)) as f64 * spec.frame_dt;
    let mut movers = Vec::new();
    let try_mover = |a: f64, lat: f64, extent: Vec2, speed: f64, dir: f64, taken: &mut Vec<Rect>, movers: &mut Vec<MovingBox>| {
        let vel = [dir * speed * ux, dir * speed * uy];
        // centre the motion on the sampled position
        let c = world(a, lat);
        let start = [c[0] - vel[0] * span / 2.0, c[1] - vel[1] * span / 2.0];
        let m = MovingBox {
            center: start,
            extent,
            velocity: vel,
        };
        let rects: Vec<Rect> = (0..spec.frames).map(|k| m.rect_at(k as f64 * spec.frame_dt)).collect();
        if rects.iter().any(|r| taken.iter().any(|t| t.overlaps(r, 0.4))) {
            return;
        }
        taken.extend(rects);
        movers.push(m);
    };
    let cars = match rng.gen_range(0.0..1.0) {
        x if x < 0.55 => 0,
        x if x < 0.9 => 1,
        _ => 2,
    };
    for _ in 0..cars {
        let lane = rng.gen_range(0..lanes);
        let lat = -hw + 1.75 + 3.5 * lane as f64 + rng.gen_range(-0.4..0.4);
        let dir = if (lane as f64) < lanes as f64 / 2.0 { -1.0 } else { 1.0 };
        let extent = [rng.gen_range(4.0..5.0), rng.gen_range(1.7..2.0)];
        try_mover(rng.gen_range(-11.0..11.0), lat, extent, rng.gen_range(5.0..15.0), dir, &mut taken, &mut movers);
    }
    for _ in 0..rng.gen_range(0..=2) {
        let side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let lat = side * (hw - rng.gen_range(0.6..1.2));
        let extent = [rng.gen_range(1.6..1.9), rng.gen_range(0.5..0.7)];
        try_mover(rng.gen_range(-11.0..11.0), lat, extent, rng.gen_range(3.0..7.0), side, &mut taken, &mut movers);
    }
    for _ in 0..rng.gen_range(0..=4) {
        let side = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let lat = side * (hw + rng.gen_range(1.0..(sidewalk - 0.8).max(1.1)));
        let dir = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let extent = [rng.gen_range(0.5..0.7), rng.gen_range(0.5..0.7)];
        try_mover(rng.gen_range(-11.0..11.0), lat, extent, rng.gen_range(0.8..2.0), dir, &mut taken, &mut movers);
    }
    (shapes, movers)
}

/// Resolves the random layout (if any) into an explicit scene.
pub fn resolve_layout(spec: &SceneSpec, seed: u64) -> SceneSpec {
    let mut out = spec.clone();
    if spec.layout == Layout::Street {
        let mut rng = stream_rng(seed, 0);
        let (shapes, movers) = street_layout(spec, &mut rng);
        out.shapes.extend(shapes);
        out.movers.extend(movers);
        out.layout = Layout::Explicit;
    }
    out.seed = seed;
    out
}

fn normal(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).unwrap().sample(rng)
    } else {
        0.0
    }
}

fn isotropic(var: f64) -> (f32, f32, f32) {
    (var as f32, var as f32, 0.0)
}

/// Generates the frame sequence for `spec` with randomness drawn from `seed`.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Vec<LabeledFrame>> {
    spec.validate()?;
    let scene = resolve_layout(spec, seed);
    check_mover_overlaps(&scene)?;
    let geo = Geometry::of(&scene);
    let n = geo.w * geo.h;

    let mut static_fp: Vec<Option<Occupant>> = vec![None; n];
    let mut segments = Vec::new();
    for shape in &scene.shapes {
        let occludes = shape.occludes();
        for i in shape_cells(shape, &geo) {
            // walls and blocks win over curbs where they touch
            if static_fp[i].is_none() || occludes {
                static_fp[i] = Some(Occupant::Static { occludes });
            }
        }
        segments.extend(polyline_segments(shape, &geo));
    }

    let in_range: Vec<bool> = (0..n)
        .map(|i| {
            let p = geo.center(i);
            p[0].hypot(p[1]) <= scene.sensor_range
        })
        .collect();

    let mut frames = Vec::with_capacity(scene.frames);
    for k in 0..scene.frames {
        let t = k as f64 * scene.frame_dt;
        let mut fp = static_fp.clone();
        for (mi, m) in scene.movers.iter().enumerate() {
            for i in geo.rect_cells(&m.rect_at(t)) {
                fp[i] = Some(Occupant::Mover(mi));
            }
        }
        let labels: Vec<Label> = fp.iter().map(|o| Label::from(matches!(o, Some(Occupant::Mover(_))))).collect();
        let visible = visibility(&geo, &fp, &in_range);

        let mut rng = stream_rng(seed, 1 + 3 * k as u64);
        let base_var = scene.velocity_noise.max(0.1).powi(2);
        let mut cells = Vec::with_capacity(n);
        for i in 0..n {
            let cell = match (fp[i], visible[i]) {
                (_, Visibility::Unknown) => CellState::UNKNOWN,
                (None, Visibility::Free) => {
                    let occ = (FREE_OCC as f64 + normal(&mut rng, scene.occ_noise)).clamp(0.02, 0.3);
                    CellState {
                        occ: occ as f32,
                        ..CellState::default()
                    }
                }
                (Some(o), _) => {
                    let occ = (rng.gen_range(0.85..1.0) - normal(&mut rng, scene.occ_noise).abs()).clamp(0.61, 1.0);
                    let (v, sigma) = match o {
                        Occupant::Mover(mi) => (scene.movers[mi].velocity, scene.velocity_noise),
                        Occupant::Static { .. } => ([0.0, 0.0], scene.static_velocity_noise),
                    };
                    let (var_x, var_y, cov_xy) = isotropic(base_var * rng.gen_range(0.8..1.25));
                    CellState {
                        occ: occ as f32,
                        vx: (v[0] + normal(&mut rng, sigma)) as f32,
                        vy: (v[1] + normal(&mut rng, sigma)) as f32,
                        var_x,
                        var_y,
                        cov_xy,
                    }
                }
                (None, Visibility::Occupied) => unreachable!("occupied visibility implies a footprint"),
            };
            cells.push(cell);
        }
        let mut grid = DogGrid::new(geo.w, geo.h, geo.cs as f32, k as u64, cells)?;
        if scene.aperture_scale > 0.0 {
            let mut arng = stream_rng(seed, 2 + 3 * k as u64);
            grid = corrupt_segments(&grid, &segments, scene.aperture_scale, &mut arng)?;
        }
        if scene.clutter_density > 0.0 {
            let mut crng = stream_rng(seed, 3 + 3 * k as u64);
            grid = inject_clutter(&grid, scene.clutter_density, scene.clutter_variance_scale, &mut crng)?;
        }
        frames.push(LabeledFrame {
            mask: LabelMask::new(geo.w, geo.h, labels)?,
            grid,
            frame_id: k as u64,
        });
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Visibility {
    Free,
    Occupied,
    Unknown,
}

/// Marches from the ego to every in-range cell centre; a cell is free when
/// no occluding footprint lies strictly between.
fn visibility(geo: &Geometry, fp: &[Option<Occupant>], in_range: &[bool]) -> Vec<Visibility> {
    let occluding = |i: usize| match fp[i] {
        Some(Occupant::Static { occludes }) => occludes,
        Some(Occupant::Mover(_)) => true,
        None => false,
    };
    let step = geo.cs / 4.0;
    (0..fp.len())
        .map(|i| {
            if !in_range[i] {
                return Visibility::Unknown;
            }
            if fp[i].is_some() {
                return Visibility::Occupied;
            }
            let p = geo.center(i);
            let d = p[0].hypot(p[1]);
            let dir = [p[0] / d, p[1] / d];
            let mut s = 0.0;
            while s < d {
                if let Some(j) = geo.index_of([dir[0] * s, dir[1] * s]) {
                    if j != i && occluding(j) {
                        return Visibility::Unknown;
                    }
                }
                s += step;
            }
            Visibility::Free
        })
        .collect()
}

fn corrupt_segments(grid: &DogGrid, segments: &[ApertureSegment], scale: f64, rng: &mut ChaCha8Rng) -> Result<DogGrid> {
    let mut cells = grid.cells().to_vec();
    for seg in segments {
        let s = rng.gen_range(0.3..1.0) * APERTURE_MAX_SPEED * scale * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let var_t = (APERTURE_VARIANCE_FLOOR * scale).max(0.4 * s * s);
        let [tx, ty] = seg.tangent;
        for &i in &seg.cells {
            let c = &mut cells[i];
            if c.occ <= UNKNOWN_OCC {
                continue;
            }
            let var_n = (c.var_x as f64 + c.var_y as f64) / 2.0;
            let speed = s + normal(rng, var_t.sqrt() * 0.25);
            c.vx = (speed * tx) as f32;
            c.vy = (speed * ty) as f32;
            // Σ = var_t·t·tᵀ + var_n·n·nᵀ
            c.var_x = (var_t * tx * tx + var_n * ty * ty) as f32;
            c.var_y = (var_t * ty * ty + var_n * tx * tx) as f32;
            c.cov_xy = ((var_t - var_n) * tx * ty) as f32;
            c.clamp_covariance();
        }
    }
    grid.with_cells(cells)
}

/// Gives cells of long, thin walls and curbs a spurious velocity along the
/// structure with an inflated variance in that direction.
pub fn apply_aperture_corruption(grid: &DogGrid, walls: &[StaticShape], scale: f64, rng: &mut ChaCha8Rng) -> Result<DogGrid> {
    if !(scale >= 0.0) {
        return Err(Error::arg(format!("aperture scale must be >= 0, got {scale}")));
    }
    if scale == 0.0 {
        return Ok(grid.clone());
    }
    let geo = Geometry {
        w: grid.width(),
        h: grid.height(),
        cs: grid.cell_size() as f64,
    };
    let segments: Vec<ApertureSegment> = walls.iter().flat_map(|w| polyline_segments(w, &geo)).collect();
    corrupt_segments(grid, &segments, scale, rng)
}

/// Turns a fraction of the unknown cells into clutter: compact clumps with
/// a shared fast velocity and a large isotropic variance.
pub fn inject_clutter(grid: &DogGrid, density: f64, variance_scale: f64, rng: &mut ChaCha8Rng) -> Result<DogGrid> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::arg(format!("clutter density must be in [0, 1], got {density}")));
    }
    if !(variance_scale >= 0.0) {
        return Err(Error::arg(format!("clutter variance scale must be >= 0, got {variance_scale}")));
    }
    let (w, h) = (grid.width(), grid.height());
    let mut cells = grid.cells().to_vec();
    let mut unknown: Vec<usize> = (0..cells.len()).filter(|&i| cells[i].occ == UNKNOWN_OCC).collect();
    let target = (density * unknown.len() as f64).round() as usize;
    if target == 0 {
        return Ok(grid.clone());
    }
    unknown.shuffle(rng);
    let mut is_free_unknown: Vec<bool> = vec![false; cells.len()];
    for &i in &unknown {
        is_free_unknown[i] = true;
    }
    let mut placed = 0;
    let mut seeds = unknown.into_iter();
    while placed < target {
        let Some(seed) = seeds.find(|&i| is_free_unknown[i]) else { break };
        let size = rng.gen_range(3..=24).min(target - placed);
        let dir = rng.gen_range(0.0..2.0 * PI);
        let speed = rng.gen_range(8.0..40.0);
        let var = CLUTTER_VARIANCE_FLOOR * variance_scale * rng.gen_range(1.0..1.5);
        let mut clump = vec![seed];
        is_free_unknown[seed] = false;
        let mut frontier = vec![seed];
        while clump.len() < size && !frontier.is_empty() {
            let k = rng.gen_range(0..frontier.len());
            let i = frontier[k];
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            let nbrs: Vec<usize> = [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .filter_map(|(dr, dc)| {
                    let (rr, cc) = (r + dr, c + dc);
                    (rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w).then(|| rr as usize * w + cc as usize)
                })
                .filter(|&j| is_free_unknown[j])
                .collect();
            match nbrs.choose(rng) {
                Some(&j) => {
                    is_free_unknown[j] = false;
                    clump.push(j);
                    frontier.push(j);
                }
                None => {
                    frontier.swap_remove(k);
                }
            }
        }
        for &i in &clump {
            let jitter = normal(rng, 0.5);
            let a = dir + normal(rng, 0.1);
            cells[i] = CellState {
                occ: rng.gen_range(0.6..0.9),
                vx: ((speed + jitter) * a.cos()) as f32,
                vy: ((speed + jitter) * a.sin()) as f32,
                var_x: var as f32,
                var_y: var as f32,
                cov_xy: 0.0,
            };
        }
        placed += clump.len();
    }
    grid.with_cells(cells)
}

/// `scenes` independent scenes of `spec`, seeded `seed, seed+1, …`, with
/// frame ids numbered consecutively.
pub fn generate_dataset(spec: &SceneSpec, scenes: usize, seed: u64) -> Result<Vec<LabeledFrame>> {
    let mut out = Vec::with_capacity(scenes * spec.frames);
    for s in 0..scenes {
        for mut f in generate_scene(spec, seed.wrapping_add(s as u64))? {
            let id = out.len() as u64;
            f.grid = f.grid.with_frame_id(id);
            f.frame_id = id;
            out.push(f);
        }
    }
    Ok(out)
}

/// Counts `(dynamic, total)` cells over a set of frames.
pub fn dynamic_ratio(frames: &[LabeledFrame]) -> (usize, usize) {
    frames
        .iter()
        .fold((0, 0), |(d, t), f| (d + f.mask.dynamic_count(), t + f.mask.len()))
}

/// Per-key overrides as produced by `key=value` command-line flags.
pub fn apply_overrides(spec: &mut SceneSpec, overrides: &HashMap<String, String>) -> Result<()> {
    let mut text = spec.to_config();
    for (k, v) in overrides {
        text += &format!("{k}={v}\n");
    }
    *spec = SceneSpec::parse(&text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::cell_mahalanobis;

    fn frame(spec: &SceneSpec) -> LabeledFrame {
        generate_scene(spec, 1).unwrap().remove(0)
    }

    #[test]
    fn empty_world_is_free_inside_range() {
        let f = frame(&SceneSpec::default());
        let geo = Geometry::of(&SceneSpec::default());
        for (i, c) in f.grid.cells().iter().enumerate() {
            let p = geo.center(i);
            if p[0].hypot(p[1]) <= 15.0 {
                assert!((c.occ - 0.1).abs() < 1e-6);
            } else {
                assert_eq!(c.occ, 0.5);
            }
        }
        assert_eq!(f.mask.dynamic_count(), 0);
    }

    #[test]
    fn wall_cells_are_occupied_and_static() {
        let spec = SceneSpec {
            shapes: vec![StaticShape::wall(vec![[-5.0, 4.0], [5.0, 4.0]])],
            ..SceneSpec::default()
        };
        let f = frame(&spec);
        let geo = Geometry::of(&spec);
        let wall = shape_cells(&spec.shapes[0], &geo);
        assert!(!wall.is_empty());
        for i in wall {
            assert!(f.grid.cells()[i].occ >= 0.85);
        }
        assert_eq!(f.mask.dynamic_count(), 0);
        // directly behind the wall is shadowed
        let behind = geo.index_of([0.0, 6.0]).unwrap();
        assert_eq!(f.grid.cells()[behind].occ, 0.5);
    }

    #[test]
    fn moving_box_footprint_is_dynamic() {
        let spec = SceneSpec {
            movers: vec![MovingBox {
                center: [3.0, -2.0],
                extent: [4.0, 2.0],
                velocity: [10.0, 0.0],
            }],
            ..SceneSpec::default()
        };
        let f = frame(&spec);
        let geo = Geometry::of(&spec);
        let fp = geo.rect_cells(&spec.movers[0].rect_at(0.0));
        assert_eq!(fp.len(), 16 * 8);
        assert_eq!(f.mask.dynamic_count(), fp.len());
        for &i in &fp {
            assert!(f.mask.labels()[i].is_dynamic());
            assert!((f.grid.cells()[i].vx - 10.0).abs() < 1e-6);
        }
    }

    #[test]
    fn overlapping_movers_are_rejected() {
        let m = MovingBox {
            center: [0.0, 0.0],
            extent: [2.0, 2.0],
            velocity: [1.0, 0.0],
        };
        let spec = SceneSpec {
            movers: vec![m.clone(), MovingBox { center: [1.0, 0.5], ..m }],
            ..SceneSpec::default()
        };
        let err = generate_scene(&spec, 0).unwrap_err();
        assert!(err.to_string().contains("overlapping moving boxes"), "{err}");
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SceneSpec::paper_like();
        assert_eq!(generate_scene(&spec, 5).unwrap(), generate_scene(&spec, 5).unwrap());
        assert_ne!(generate_scene(&spec, 5).unwrap(), generate_scene(&spec, 6).unwrap());
    }

    #[test]
    fn clean_and_corrupted_share_base_frame() {
        let spec = SceneSpec::paper_like();
        let a = frame(&spec);
        let b = generate_scene(&spec.without_corruption(), 1).unwrap().remove(0);
        assert_eq!(a.mask, b.mask);
        let same = a.grid.cells().iter().zip(b.grid.cells()).filter(|(x, y)| x == y).count();
        assert!(same > a.grid.len() / 2);
    }

    #[test]
    fn aperture_scale_zero_is_identity() {
        let f = frame(&SceneSpec::paper_like().without_corruption());
        let walls = vec![StaticShape::curb(vec![[-10.0, 1.0], [10.0, 1.0]])];
        let out = apply_aperture_corruption(&f.grid, &walls, 0.0, &mut stream_rng(0, 0)).unwrap();
        assert_eq!(out, f.grid);
    }

    #[test]
    fn horizontal_curb_gets_tangential_velocity() {
        let spec = SceneSpec {
            shapes: vec![StaticShape::curb(vec![[-8.0, -3.0], [8.0, -3.0]])],
            ..SceneSpec::default()
        };
        let f = frame(&spec);
        let out = apply_aperture_corruption(&f.grid, &spec.shapes, 1.0, &mut stream_rng(3, 0)).unwrap();
        let geo = Geometry::of(&spec);
        let cells = shape_cells(&spec.shapes[0], &geo);
        for &i in &cells {
            let c = &out.cells()[i];
            assert!(c.vx.abs() > 0.0);
            assert!(c.vy.abs() < 1e-6);
            assert!(c.var_x > 10.0 * c.var_y);
        }
        assert_eq!(out.cells().len(), f.grid.cells().len());
    }

    #[test]
    fn clutter_identity_and_saturation() {
        let g = DogGrid::unknown(16, 16, 0.25).unwrap();
        let mut rng = stream_rng(1, 0);
        assert_eq!(inject_clutter(&g, 0.0, 1.0, &mut rng).unwrap(), g);
        let full = inject_clutter(&g, 1.0, 1.0, &mut rng).unwrap();
        for c in full.cells() {
            assert!((0.6..=0.9).contains(&c.occ));
            assert!(c.var_x >= 25.0 && c.var_y >= 25.0);
        }
    }

    #[test]
    fn clutter_touches_only_unknown_cells() {
        let base = frame(&SceneSpec::paper_like().without_corruption());
        let out = inject_clutter(&base.grid, 0.2, 1.0, &mut stream_rng(2, 0)).unwrap();
        for (a, b) in base.grid.cells().iter().zip(out.cells()) {
            if a != b {
                assert_eq!(a.occ, 0.5);
            }
        }
    }

    #[test]
    fn labels_lie_inside_mover_footprints() {
        let spec = SceneSpec {
            frames: 3,
            ..SceneSpec::paper_like()
        };
        for seed in 0..5 {
            let scene = resolve_layout(&spec, seed);
            let geo = Geometry::of(&scene);
            for f in generate_scene(&spec, seed).unwrap() {
                let t = f.frame_id as f64 * spec.frame_dt;
                for (i, l) in f.mask.labels().iter().enumerate() {
                    if l.is_dynamic() {
                        assert!(scene.movers.iter().any(|m| m.contains(geo.center(i), t)));
                    }
                }
            }
        }
    }

    #[test]
    fn aperture_m_is_lower_than_movers_at_same_speed() {
        // a mover and a corrupted curb cell with equal speed: the inflated
        // tangential variance keeps the curb's Mahalanobis score lower
        let mut rng = stream_rng(9, 0);
        let mut curb_m = Vec::new();
        for _ in 0..200 {
            let spec = SceneSpec {
                shapes: vec![StaticShape::curb(vec![[-8.0, -3.0], [8.0, -3.0]])],
                velocity_noise: 0.5,
                ..SceneSpec::default()
            };
            let f = frame(&spec);
            let g = apply_aperture_corruption(&f.grid, &spec.shapes, 1.0, &mut rng).unwrap();
            let i = Geometry::of(&spec).index_of([0.0, -3.0]).unwrap();
            let c = g.cells()[i];
            let mover = CellState {
                var_x: 0.25,
                var_y: 0.25,
                cov_xy: 0.0,
                ..c
            };
            curb_m.push((cell_mahalanobis(&c).unwrap(), cell_mahalanobis(&mover).unwrap()));
        }
        assert!(curb_m.iter().all(|(a, b)| a < b));
    }

    #[test]
    fn config_round_trip() {
        let text = "preset=paper_like\nseed=4\nmover=1,2,4,2,3,0\nwall=0,0;1,0;1,1\nblock=3,3,2,1,45\n";
        let spec = SceneSpec::parse(text).unwrap();
        assert_eq!(spec.movers.len(), 1);
        assert_eq!(spec.shapes.len(), 2);
        assert_eq!(spec.layout, Layout::Street);
        assert_eq!(SceneSpec::parse(&spec.to_config()).unwrap(), spec);
        assert!(SceneSpec::parse("clutter_density=2").is_err());
        assert!(SceneSpec::parse("bogus=1").is_err());
        assert!(SceneSpec::parse("mover=1,2,3").is_err());
    }
}
