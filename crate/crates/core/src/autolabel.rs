//! Automatic labelling: cluster high-Mahalanobis occupied cells, take the
//! convex hull of each cluster, and rasterize the hulls into a mask.

use std::fmt::Write as _;

use crate::encoding::cell_mahalanobis;
use crate::error::{Error, Result};
use crate::gridmap::{DogGrid, Label, LabelMask};

pub const DEFAULT_EPS: f64 = 2.0;
pub const DEFAULT_MIN_PTS: usize = 4;
pub const DEFAULT_M_TAU: f64 = 1.0;
pub const DEFAULT_OCC_TAU: f64 = 0.6;
/// Radius (cells) used to rasterize one- and two-point hulls.
pub const DEGENERATE_RADIUS: f64 = 0.5;

/// 2-D point in cell coordinates: `x` = column, `y` = row.
pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub id: usize,
    /// Indices into the clustered point list, ascending.
    pub members: Vec<usize>,
}

/// Density-based clustering with Euclidean distance.
///
/// Points are visited in input order, so the lowest-index unvisited core
/// point seeds each new cluster; a border point reachable from two clusters
/// stays with the first. Returns one optional cluster id per point, ids
/// numbered by each cluster's lowest member index.
pub fn dbscan(points: &[Point], eps: f64, min_pts: usize) -> Result<Vec<Option<usize>>> {
    if !(eps > 0.0) {
        return Err(Error::arg(format!("eps must be > 0, got {eps}")));
    }
    if min_pts == 0 {
        return Err(Error::arg("min_pts must be >= 1"));
    }
    let n = points.len();
    let eps2 = eps * eps;
    let grid = NeighborGrid::new(points, eps);
    let neighbors = |i: usize| grid.within(points, i, eps2);

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut next_id = 0;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let seeds = neighbors(i);
        if seeds.len() < min_pts {
            continue;
        }
        let id = next_id;
        next_id += 1;
        labels[i] = Some(id);
        let mut queue = seeds;
        let mut head = 0;
        while head < queue.len() {
            let j = queue[head];
            head += 1;
            if labels[j].is_none() {
                labels[j] = Some(id);
            }
            if visited[j] {
                continue;
            }
            visited[j] = true;
            let nb = neighbors(j);
            if nb.len() >= min_pts {
                queue.extend(nb);
            }
        }
    }
    // clusters are seeded in index order, but a border point may precede
    // its cluster's seed; renumber by lowest member
    let mut first: Vec<Option<usize>> = vec![None; next_id];
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = *l {
            first[c].get_or_insert(i);
        }
    }
    let mut order: Vec<usize> = (0..next_id).collect();
    order.sort_by_key(|&c| first[c]);
    let mut remap = vec![0; next_id];
    for (new, &old) in order.iter().enumerate() {
        remap[old] = new;
    }
    Ok(labels.into_iter().map(|l| l.map(|c| remap[c])).collect())
}

/// Groups point indices by cluster id.
pub fn clusters(labels: &[Option<usize>]) -> Vec<Cluster> {
    let count = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut out: Vec<Cluster> = (0..count).map(|id| Cluster { id, members: Vec::new() }).collect();
    for (i, l) in labels.iter().enumerate() {
        if let Some(c) = *l {
            out[c].members.push(i);
        }
    }
    out
}

/// Uniform bucket grid with `eps`-sized buckets for neighbour queries.
struct NeighborGrid {
    cell: f64,
    origin: Point,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<usize>>,
}

impl NeighborGrid {
    fn new(points: &[Point], eps: f64) -> Self {
        let lo = points.iter().fold([f64::INFINITY; 2], |a, p| [a[0].min(p[0]), a[1].min(p[1])]);
        let hi = points.iter().fold([f64::NEG_INFINITY; 2], |a, p| [a[0].max(p[0]), a[1].max(p[1])]);
        let origin = if points.is_empty() { [0.0; 2] } else { lo };
        let span = |k: usize| if points.is_empty() { 1 } else { ((hi[k] - lo[k]) / eps).floor() as usize + 1 };
        let (cols, rows) = (span(0).min(4096), span(1).min(4096));
        let cell = eps.max((hi[0] - lo[0]).max(hi[1] - lo[1]) / 4096.0);
        let mut g = NeighborGrid {
            cell,
            origin,
            cols,
            rows,
            buckets: vec![Vec::new(); cols * rows],
        };
        for (i, p) in points.iter().enumerate() {
            let (c, r) = g.bucket(p);
            g.buckets[r * g.cols + c].push(i);
        }
        g
    }

    fn bucket(&self, p: &Point) -> (usize, usize) {
        let c = ((p[0] - self.origin[0]) / self.cell).floor().max(0.0) as usize;
        let r = ((p[1] - self.origin[1]) / self.cell).floor().max(0.0) as usize;
        (c.min(self.cols - 1), r.min(self.rows - 1))
    }

    /// Indices within `sqrt(eps2)` of point `i` (including `i`), ascending.
    fn within(&self, points: &[Point], i: usize, eps2: f64) -> Vec<usize> {
        let p = points[i];
        let (c, r) = self.bucket(&p);
        let mut out = Vec::new();
        for rr in r.saturating_sub(1)..=(r + 1).min(self.rows - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(self.cols - 1) {
                for &j in &self.buckets[rr * self.cols + cc] {
                    let q = points[j];
                    if (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) <= eps2 {
                        out.push(j);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Convex polygon, counter-clockwise in `(x, y)`; one or two vertices for
/// degenerate inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub vertices: Vec<Point>,
}

impl Polygon {
    pub fn is_degenerate(&self) -> bool {
        self.vertices.len() < 3
    }

    /// Twice the signed area; positive for counter-clockwise order.
    pub fn doubled_area(&self) -> f64 {
        let v = &self.vertices;
        (0..v.len())
            .map(|i| {
                let (a, b) = (v[i], v[(i + 1) % v.len()]);
                a[0] * b[1] - a[1] * b[0]
            })
            .sum()
    }

    /// Inside or on the boundary (within `1e-9`); degenerate hulls are
    /// thickened to [`DEGENERATE_RADIUS`].
    pub fn contains(&self, p: Point) -> bool {
        let v = &self.vertices;
        match v.len() {
            0 => false,
            1 => (p[0] - v[0][0]).hypot(p[1] - v[0][1]) <= DEGENERATE_RADIUS,
            2 => segment_distance(p, v[0], v[1]) <= DEGENERATE_RADIUS,
            _ => {
                if v.iter().enumerate().any(|(i, &a)| segment_distance(p, a, v[(i + 1) % v.len()]) <= 1e-9) {
                    return true;
                }
                // even-odd crossing count
                let mut inside = false;
                for i in 0..v.len() {
                    let (a, b) = (v[i], v[(i + 1) % v.len()]);
                    if (a[1] > p[1]) != (b[1] > p[1]) {
                        let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
                        if p[0] < x {
                            inside = !inside;
                        }
                    }
                }
                inside
            }
        }
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * ab[0]).hypot(p[1] - a[1] - t * ab[1])
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain; collinear boundary points are dropped.
pub fn convex_hull(points: &[Point]) -> Polygon {
    // + 0.0 folds -0.0 into 0.0 so that equal points sort next to each other
    let mut pts: Vec<Point> = points.iter().map(|p| [p[0] + 0.0, p[1] + 0.0]).collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() <= 2 {
        return Polygon { vertices: pts };
    }
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    if lower.len() < 3 {
        // all collinear: keep the two extremes
        lower = vec![pts[0], pts[pts.len() - 1]];
    }
    Polygon { vertices: lower }
}

/// Marks every cell whose centre `(col, row)` lies in or on the polygon.
pub fn rasterize(poly: &Polygon, width: usize, height: usize) -> LabelMask {
    let mut mask = LabelMask::all_static(width, height);
    rasterize_into(poly, &mut mask);
    mask
}

fn rasterize_into(poly: &Polygon, mask: &mut LabelMask) {
    if poly.vertices.is_empty() {
        return;
    }
    let pad = if poly.is_degenerate() { DEGENERATE_RADIUS } else { 0.0 };
    let lo = poly.vertices.iter().fold([f64::INFINITY; 2], |a, p| [a[0].min(p[0]), a[1].min(p[1])]);
    let hi = poly.vertices.iter().fold([f64::NEG_INFINITY; 2], |a, p| [a[0].max(p[0]), a[1].max(p[1])]);
    let clamp = |v: f64, n: usize| v.max(0.0).min(n as f64) as usize;
    let (c0, c1) = (clamp((lo[0] - pad).floor(), mask.width()), clamp((hi[0] + pad).ceil() + 1.0, mask.width()));
    let (r0, r1) = (clamp((lo[1] - pad).floor(), mask.height()), clamp((hi[1] + pad).ceil() + 1.0, mask.height()));
    for r in r0..r1 {
        for c in c0..c1 {
            if poly.contains([c as f64, r as f64]) {
                mask.set(r, c, Label::Dynamic);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutolabelParams {
    pub m_tau: f64,
    pub occ_tau: f64,
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for AutolabelParams {
    fn default() -> Self {
        AutolabelParams {
            m_tau: DEFAULT_M_TAU,
            occ_tau: DEFAULT_OCC_TAU,
            eps: DEFAULT_EPS,
            min_pts: DEFAULT_MIN_PTS,
        }
    }
}

/// Result of labelling one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Autolabel {
    pub mask: LabelMask,
    pub hulls: Vec<Polygon>,
}

pub fn autolabel_pipeline(grid: &DogGrid, params: &AutolabelParams) -> Result<Autolabel> {
    if !(params.m_tau >= 0.0) || !(0.0..=1.0).contains(&params.occ_tau) {
        return Err(Error::arg(format!(
            "need m_tau >= 0 and occ_tau in [0, 1], got {} and {}",
            params.m_tau, params.occ_tau
        )));
    }
    let w = grid.width();
    let mut points = Vec::new();
    for (i, cell) in grid.cells().iter().enumerate() {
        if cell.occ as f64 > params.occ_tau && cell_mahalanobis(cell)? > params.m_tau {
            points.push([(i % w) as f64, (i / w) as f64]);
        }
    }
    let labels = dbscan(&points, params.eps, params.min_pts)?;
    let mut mask = LabelMask::all_static(w, grid.height());
    let mut hulls = Vec::new();
    for cl in clusters(&labels) {
        let pts: Vec<Point> = cl.members.iter().map(|&i| points[i]).collect();
        let hull = convex_hull(&pts);
        rasterize_into(&hull, &mut mask);
        hulls.push(hull);
    }
    Ok(Autolabel { mask, hulls })
}

/// `frame_id,polygon_id,vertex,col,row` rows.
pub fn polygons_csv(rows: &[(u64, &[Polygon])]) -> String {
    let mut s = String::from("frame_id,polygon_id,vertex,col,row\n");
    for (frame, polys) in rows {
        for (pid, p) in polys.iter().enumerate() {
            for (k, v) in p.vertices.iter().enumerate() {
                let _ = writeln!(s, "{frame},{pid},{k},{},{}", v[0], v[1]);
            }
        }
    }
    s
}

/// Intersection over union of the dynamic sets; 1 when both are empty.
pub fn iou(a: &LabelMask, b: &LabelMask) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(Error::shape("masks differ in size"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.labels().iter().zip(b.labels()) {
        inter += (x.is_dynamic() && y.is_dynamic()) as usize;
        union += (x.is_dynamic() || y.is_dynamic()) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
