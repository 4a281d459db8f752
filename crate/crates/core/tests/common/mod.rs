//! Brute-force oracles and seeded generators shared by the integration tests.
//! Each oracle is written from the definition and shares no code with the
//! library implementation it checks.

#![allow(dead_code)]

use dogseg::gridmap::{CellState, DogGrid, Label, LabelMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Point = [f64; 2];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sqrt(vᵀ (Σ + εI)⁻¹ v)` through a Cholesky factor: with `L Lᵀ = Σ + εI`
/// and `L z = v`, the distance is `|z|`.
pub fn mahalanobis_cholesky(v: [f64; 2], var_x: f64, var_y: f64, cov: f64, eps: f64) -> f64 {
    let a = var_x + eps;
    let l11 = a.sqrt();
    let l21 = cov / l11;
    let l22 = (var_y + eps - l21 * l21).sqrt();
    let z1 = v[0] / l11;
    let z2 = (v[1] - l21 * z1) / l22;
    (z1 * z1 + z2 * z2).sqrt()
}

/// Sample variance of `x + y` for `(x, y) ~ N(0, Σ)`.
pub fn sampled_sum_variance(var_x: f64, var_y: f64, cov: f64, n: usize, rng: &mut ChaCha8Rng) -> f64 {
    let l11 = var_x.sqrt();
    let l21 = if l11 > 0.0 { cov / l11 } else { 0.0 };
    let l22 = (var_y - l21 * l21).max(0.0).sqrt();
    let normal = rand_distr::StandardNormal;
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..n {
        let u: f64 = rng.sample(normal);
        let w: f64 = rng.sample(normal);
        let s = l11 * u + l21 * u + l22 * w;
        sum += s;
        sum2 += s * s;
    }
    let mean = sum / n as f64;
    sum2 / n as f64 - mean * mean
}

fn dist2(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Checks a DBSCAN labelling against the definition:
/// - core points are exactly those with at least `min_pts` points (self
///   included) within `eps`;
/// - two core points share a cluster iff they are linked by a chain of
///   core points with consecutive distances ≤ `eps`;
/// - a non-core point is noise iff no core point lies within `eps`, and
///   otherwise carries the cluster of one such core point;
/// - ids are numbered by lowest member index.
pub fn check_dbscan(points: &[Point], eps: f64, min_pts: usize, labels: &[Option<usize>]) -> Result<(), String> {
    let n = points.len();
    if labels.len() != n {
        return Err(format!("{} labels for {n} points", labels.len()));
    }
    let eps2 = eps * eps;
    let nb: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| dist2(points[i], points[j]) <= eps2).collect()).collect();
    let core: Vec<bool> = nb.iter().map(|v| v.len() >= min_pts).collect();

    // components of the core graph by repeated relabelling
    let mut comp: Vec<usize> = (0..n).collect();
    loop {
        let mut changed = false;
        for i in 0..n {
            if !core[i] {
                continue;
            }
            for &j in &nb[i] {
                if core[j] && comp[j] < comp[i] {
                    comp[i] = comp[j];
                    changed = true;
                } else if core[j] && comp[i] < comp[j] {
                    comp[j] = comp[i];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    for i in 0..n {
        if !core[i] {
            continue;
        }
        let Some(li) = labels[i] else { return Err(format!("core point {i} is noise")) };
        for j in 0..n {
            if core[j] && j != i {
                let same = labels[j] == Some(li);
                if same != (comp[i] == comp[j]) {
                    return Err(format!("core points {i} and {j}: same label {same}, same component {}", comp[i] == comp[j]));
                }
            }
        }
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let owners: Vec<usize> = nb[i].iter().copied().filter(|&j| core[j]).collect();
        match (labels[i], owners.is_empty()) {
            (None, true) => {}
            (Some(l), false) => {
                if !owners.iter().any(|&j| labels[j] == Some(l)) {
                    return Err(format!("border point {i} labelled {l} without a core neighbour of that cluster"));
                }
            }
            (l, _) => return Err(format!("point {i}: label {l:?} but {} core neighbours", owners.len())),
        }
    }
    let mut next = 0;
    for l in labels.iter().flatten() {
        if *l == next {
            next += 1;
        } else if *l > next {
            return Err(format!("cluster id {l} appears before id {next}"));
        }
    }
    Ok(())
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Hull vertices by brute force: `(a, b)` is a counter-clockwise hull edge
/// iff no point lies to its right and every point on its line lies within
/// the segment. Returns the distinct endpoints of such edges, or the single
/// distinct point.
pub fn brute_hull_vertices(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.iter().map(|p| [p[0] + 0.0, p[1] + 0.0]).collect();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() <= 1 {
        return pts;
    }
    let mut verts: Vec<Point> = Vec::new();
    for &a in &pts {
        for &b in &pts {
            if a == b {
                continue;
            }
            let edge = pts.iter().all(|&p| {
                let c = cross(a, b, p);
                if c < 0.0 {
                    return false;
                }
                if c == 0.0 {
                    let t = (p[0] - a[0]) * (b[0] - a[0]) + (p[1] - a[1]) * (b[1] - a[1]);
                    return t >= 0.0 && t <= dist2(a, b);
                }
                true
            });
            if edge {
                verts.push(a);
                verts.push(b);
            }
        }
    }
    verts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    verts.dedup();
    verts
}

/// Compares a hull against the brute-force vertex set and checks that the
/// ring is counter-clockwise with strictly convex turns.
pub fn check_hull(points: &[Point], hull: &[Point]) -> Result<(), String> {
    let want = brute_hull_vertices(points);
    let mut got = hull.to_vec();
    got.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    if got != want {
        return Err(format!("hull {got:?} != brute force {want:?}"));
    }
    if hull.len() >= 3 {
        for i in 0..hull.len() {
            let c = cross(hull[i], hull[(i + 1) % hull.len()], hull[(i + 2) % hull.len()]);
            if !(c > 0.0) {
                return Err(format!("turn {i} of {hull:?} is not a strict left turn"));
            }
        }
    }
    Ok(())
}

/// `(threshold, fpr, tpr)` at -inf, each distinct score ascending and +inf,
/// counting `score >= t` as positive.
pub fn brute_roc(scores: &[f64], truth: &[bool]) -> Vec<(f64, f64, f64)> {
    let mut ts: Vec<f64> = scores.to_vec();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let mut thresholds = vec![f64::NEG_INFINITY];
    thresholds.extend(ts);
    thresholds.push(f64::INFINITY);
    let p = truth.iter().filter(|&&t| t).count() as f64;
    let n = truth.len() as f64 - p;
    thresholds
        .into_iter()
        .map(|t| {
            let tp = scores.iter().zip(truth).filter(|(&s, &y)| y && s >= t).count() as f64;
            let fp = scores.iter().zip(truth).filter(|(&s, &y)| !y && s >= t).count() as f64;
            (t, fp / n, tp / p)
        })
        .collect()
}

/// `P(s+ > s-) + P(s+ = s-)/2` over all positive/negative pairs.
pub fn mann_whitney_auc(scores: &[f64], truth: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(truth).filter(|(_, &y)| y).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(truth).filter(|(_, &y)| !y).map(|(&s, _)| s).collect();
    let mut wins = 0.0;
    for &a in &pos {
        for &b in &neg {
            if a > b {
                wins += 1.0;
            } else if a == b {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// Grid with random occupancy (a share of cells exactly at 0.6) and random
/// velocity statistics.
pub fn random_grid(w: usize, h: usize, rng: &mut ChaCha8Rng) -> DogGrid {
    let cells = (0..w * h)
        .map(|_| {
            let occ = if rng.gen_bool(0.1) { 0.6 } else { rng.gen_range(0.0..=1.0) };
            let var_x = rng.gen_range(0.01..4.0);
            let var_y = rng.gen_range(0.01..4.0);
            let cov = rng.gen_range(-0.9..0.9) * f32::sqrt(var_x * var_y);
            CellState {
                occ,
                vx: rng.gen_range(-10.0..10.0),
                vy: rng.gen_range(-10.0..10.0),
                var_x,
                var_y,
                cov_xy: cov,
            }
        })
        .collect();
    DogGrid::new(w, h, 0.1, 0, cells).expect("valid grid")
}

pub fn random_mask(w: usize, h: usize, p: f64, rng: &mut ChaCha8Rng) -> LabelMask {
    let labels = (0..w * h).map(|_| Label::from(rng.gen_bool(p))).collect();
    LabelMask::new(w, h, labels).expect("dims")
}

/// Clustered point cloud on a coarse lattice, so that ties in distance and
/// collinear triples are common.
pub fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let centres: Vec<Point> = (0..rng.gen_range(1..6))
        .map(|_| [rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0)])
        .collect();
    let lattice = rng.gen_bool(0.5);
    (0..n)
        .map(|_| {
            let c = centres[rng.gen_range(0..centres.len())];
            let p = [c[0] + rng.gen_range(-4.0..4.0), c[1] + rng.gen_range(-4.0..4.0)];
            if lattice {
                [p[0].round(), p[1].round()]
            } else {
                p
            }
        })
        .collect()
}

/// One small network per layer kind plus two assembled FCN variants, each
/// with a seeded input and label map, all in 64-bit arithmetic.
pub fn gradient_cases() -> Vec<(String, dogseg::neuralnet::Network<f64>, dogseg::neuralnet::Tensor<f64>, Vec<Label>)> {
    use dogseg::fcnmodels::{build_network_with, Variant};
    use dogseg::neuralnet::{LayerSpec, Network, NetworkSpec, Source::*, Tensor};

    let spec = |name: &str, in_channels: usize, layers: Vec<LayerSpec>| NetworkSpec {
        name: name.into(),
        in_channels,
        classes: 2,
        layers,
    };
    let nets: Vec<(NetworkSpec, usize)> = vec![
        (spec("conv", 3, vec![LayerSpec::conv("c", Input, 3, 2, 3), LayerSpec::softmax("p", Layer(0))]), 6),
        (spec("score", 3, vec![LayerSpec::score("s", Input, 3, 2), LayerSpec::softmax("p", Layer(0))]), 6),
        (
            spec(
                "relu",
                2,
                vec![
                    LayerSpec::conv("c1", Input, 2, 3, 3),
                    LayerSpec::relu("r", Layer(0)),
                    LayerSpec::conv("c2", Layer(1), 3, 2, 3),
                    LayerSpec::softmax("p", Layer(2)),
                ],
            ),
            6,
        ),
        (
            spec(
                "maxpool+deconv",
                2,
                vec![
                    LayerSpec::conv("c", Input, 2, 2, 3),
                    LayerSpec::maxpool("m", Layer(0)),
                    LayerSpec::deconv("u", Layer(1), 2, 2),
                    LayerSpec::softmax("p", Layer(2)),
                ],
            ),
            8,
        ),
        (
            spec(
                "deconv x4",
                2,
                vec![
                    LayerSpec::maxpool("m1", Input),
                    LayerSpec::maxpool("m2", Layer(0)),
                    LayerSpec::deconv("u", Layer(1), 2, 4),
                    LayerSpec::softmax("p", Layer(2)),
                ],
            ),
            8,
        ),
        (
            spec(
                "fuse",
                2,
                vec![
                    LayerSpec::conv("a", Input, 2, 2, 3),
                    LayerSpec::score("b", Input, 2, 2),
                    LayerSpec::fuse_sum("f", Layer(0), Layer(1)),
                    LayerSpec::softmax("p", Layer(2)),
                ],
            ),
            6,
        ),
    ];
    let mut out = Vec::new();
    for (k, (s, side)) in nets.into_iter().enumerate() {
        let seed = 100 + k as u64;
        let in_ch = s.in_channels;
        let name = s.name.clone();
        let mut net = Network::<f64>::init(s, seed).expect("valid spec");
        // bilinear deconv weights and zero biases are a special point; move
        // every parameter off it
        let mut r = rng(seed);
        jitter(&mut net, 0.3, &mut r);
        out.push((name, net, in_ch, side));
    }
    let mut cases: Vec<(String, Network<f64>, Tensor<f64>, Vec<Label>)> = out
        .into_iter()
        .map(|(name, net, in_ch, side)| {
            let (x, y) = sample(2, in_ch, side, name.len() as u64);
            (name, net, x, y)
        })
        .collect();
    for (v, seed) in [(Variant::Mini8s, 7), (Variant::Mini2s, 8)] {
        let m = build_network_with(v, 3, 2, 3, seed).expect("valid variant");
        let mut net = m.net.cast::<f64>();
        let mut r = rng(seed);
        jitter(&mut net, 0.1, &mut r);
        let (x, y) = sample(1, 3, 16, seed);
        cases.push((v.name().to_string(), net, x, y));
    }
    cases
}

fn sample(n: usize, ch: usize, side: usize, seed: u64) -> (dogseg::neuralnet::Tensor<f64>, Vec<Label>) {
    let mut r = rng(seed ^ 0x5eed);
    let data = (0..n * ch * side * side).map(|_| r.gen_range(-1.0..1.0)).collect();
    let x = dogseg::neuralnet::Tensor::from_vec(&[n, ch, side, side], data).expect("shape");
    let y = (0..n * side * side).map(|_| Label::from(r.gen_bool(0.3))).collect();
    (x, y)
}

fn jitter(net: &mut dogseg::neuralnet::Network<f64>, amp: f64, r: &mut ChaCha8Rng) {
    let params = net.params_mut();
    for slot in 0..params.len() {
        for v in params.get_mut(slot).data_mut() {
            *v += r.gen_range(-amp..amp);
        }
    }
}
