//! ROC/EER evaluation over occupied cells, precision/recall/accuracy,
//! rotation sweeps, and per-stage timing.

use std::fmt::Write as _;
use std::time::Instant;

use crate::baseline::{baseline_scores, classify_scores, ScoreMap, DEFAULT_TAU};
use crate::datasetkit::{rotate_frame, rotation_angles};
use crate::encoding::{encode, ConfigId};
use crate::error::{Error, Result};
use crate::fcnmodels::{infer, refine, refine_scores, upsample_mask, upsample_scores, FcnModel};
use crate::gridmap::{DogGrid, LabelMask, DEFAULT_OCC_THRESHOLD};
use crate::simworld::LabeledFrame;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RocCurve {
    /// Ascending thresholds from `-inf` to `+inf`; a cell is called dynamic
    /// when its score is `>=` the threshold.
    pub points: Vec<RocPoint>,
    /// Equal error rate, where false-positive and false-negative rates meet.
    pub eer: f64,
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
}

impl RocCurve {
    /// `1 - eer`, the figure of merit quoted for each model.
    pub fn accuracy_at_eer(&self) -> f64 {
        1.0 - self.eer
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fpr,tpr\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        s
    }

    /// Minimal standalone SVG with the curve and the chance diagonal.
    pub fn to_svg(&self, title: &str) -> String {
        let size = 320.0;
        let m = 30.0;
        let plot = size - 2.0 * m;
        let xy = |fpr: f64, tpr: f64| (m + fpr * plot, size - m - tpr * plot);
        let mut pts: Vec<(f64, f64)> = self.points.iter().map(|p| xy(p.fpr, p.tpr)).collect();
        pts.reverse();
        let poly = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect::<Vec<_>>().join(" ");
        let (x0, y0) = xy(0.0, 0.0);
        let (x1, y1) = xy(1.0, 1.0);
        let title = title.replace('&', "&amp;").replace('<', "&lt;");
        format!(
            concat!(
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{s}\" height=\"{s}\" viewBox=\"0 0 {s} {s}\">\n",
                "<rect x=\"{m}\" y=\"{m}\" width=\"{p}\" height=\"{p}\" fill=\"none\" stroke=\"#888\"/>\n",
                "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y1}\" stroke=\"#ccc\" stroke-dasharray=\"4\"/>\n",
                "<polyline points=\"{poly}\" fill=\"none\" stroke=\"#c00\" stroke-width=\"2\"/>\n",
                "<text x=\"{m}\" y=\"{ty}\" font-size=\"12\">{title} (AUC {auc:.3}, EER acc {acc:.3})</text>\n",
                "<text x=\"{m}\" y=\"{by}\" font-size=\"10\">false positive rate</text>\n",
                "</svg>\n"
            ),
            s = size,
            m = m,
            p = plot,
            x0 = x0,
            y0 = y0,
            x1 = x1,
            y1 = y1,
            poly = poly,
            ty = m - 10.0,
            by = size - 8.0,
            title = title,
            auc = self.auc,
            acc = self.accuracy_at_eer()
        )
    }
}

/// ROC over raw `(score, is_dynamic)` samples.
pub fn roc_from_samples(scores: &[f64], truth: &[bool]) -> Result<RocCurve> {
    if scores.len() != truth.len() {
        return Err(Error::shape(format!("{} scores for {} labels", scores.len(), truth.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::arg(format!("NaN score at sample {i}")));
    }
    let pos = truth.iter().filter(|&&t| t).count();
    let neg = truth.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateCurve(format!("{pos} positive and {neg} negative cells in gate")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sweep thresholds upward; cells with score < t are called static
    let (p, n) = (pos as f64, neg as f64);
    let mut points = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    }];
    let (mut tp, mut fp) = (pos, neg);
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
        });
        while k < order.len() && scores[order[k]] == t {
            if truth[order[k]] {
                tp -= 1;
            } else {
                fp -= 1;
            }
            k += 1;
        }
    }
    points.push(RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    });

    let auc = points.windows(2).map(|w| (w[0].fpr - w[1].fpr) * (w[0].tpr + w[1].tpr) / 2.0).sum::<f64>();
    let eer = equal_error_rate(&points);
    Ok(RocCurve {
        points,
        eer,
        auc,
        positives: pos,
        negatives: neg,
    })
}

/// Where `fpr - fnr` changes sign, interpolated linearly along the curve.
fn equal_error_rate(points: &[RocPoint]) -> f64 {
    let d = |p: &RocPoint| p.fpr - (1.0 - p.tpr);
    for w in points.windows(2) {
        let (a, b) = (d(&w[0]), d(&w[1]));
        if a == 0.0 {
            return w[0].fpr;
        }
        if a > 0.0 && b <= 0.0 {
            let t = a / (a - b);
            let fpr = w[0].fpr + t * (w[1].fpr - w[0].fpr);
            let fnr = (1.0 - w[0].tpr) + t * (w[0].tpr - w[1].tpr);
            return (fpr + fnr) / 2.0;
        }
    }
    // unreachable for curves running from (1, 1) to (0, 0)
    0.5
}

/// Scores and truth of the cells with `occ > occ_gate`.
pub fn gated_samples(scores: &ScoreMap, truth: &LabelMask, grid: &DogGrid, occ_gate: f32) -> Result<(Vec<f64>, Vec<bool>)> {
    truth.check_grid(grid)?;
    if !grid.same_dims(scores.width, scores.height) {
        return Err(Error::shape("score map and grid differ in size"));
    }
    let mut s = Vec::new();
    let mut t = Vec::new();
    for ((c, &sc), l) in grid.cells().iter().zip(&scores.scores).zip(truth.labels()) {
        if c.occ > occ_gate {
            s.push(sc);
            t.push(l.is_dynamic());
        }
    }
    Ok((s, t))
}

pub fn roc(scores: &ScoreMap, truth: &LabelMask, grid: &DogGrid, occ_gate: f32) -> Result<RocCurve> {
    let (s, t) = gated_samples(scores, truth, grid, occ_gate)?;
    roc_from_samples(&s, &t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub model: String,
    pub rotation_deg: i32,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
}

pub fn pr_accuracy(pred: &LabelMask, truth: &LabelMask, grid: &DogGrid, occ_gate: f32) -> Result<MetricRow> {
    pred.check_grid(grid)?;
    truth.check_grid(grid)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for ((c, p), t) in grid.cells().iter().zip(pred.labels()).zip(truth.labels()) {
        if c.occ <= occ_gate {
            continue;
        }
        match (p.is_dynamic(), t.is_dynamic()) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok(MetricRow {
        model: String::new(),
        rotation_deg: 0,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        accuracy: ratio(tp + tn, tp + fp + fn_ + tn),
    })
}

pub fn metric_rows_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("angle,precision,recall,accuracy\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.rotation_deg, r.precision, r.recall, r.accuracy);
    }
    s
}

/// Per-cell dynamic scores plus a refined decision mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub scores: ScoreMap,
    pub mask: LabelMask,
}

/// Anything that labels a grid: the baseline or a trained network.
pub trait Segmenter {
    fn name(&self) -> String;
    fn segment(&self, grid: &DogGrid) -> Result<Segmentation>;
}

/// Mahalanobis threshold detector.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineSegmenter {
    pub tau: f64,
    pub occ_thresh: f32,
}

impl Default for BaselineSegmenter {
    fn default() -> Self {
        BaselineSegmenter {
            tau: DEFAULT_TAU,
            occ_thresh: DEFAULT_OCC_THRESHOLD,
        }
    }
}

impl Segmenter for BaselineSegmenter {
    fn name(&self) -> String {
        "baseline".into()
    }

    fn segment(&self, grid: &DogGrid) -> Result<Segmentation> {
        let scores = baseline_scores(grid)?;
        let mask = refine(&classify_scores(&scores, self.tau), grid, self.occ_thresh)?;
        Ok(Segmentation { scores, mask })
    }
}

/// Encode, infer, upsample to grid resolution, refine.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnSegmenter {
    pub model: FcnModel,
    pub config: ConfigId,
    pub occ_thresh: f32,
    pub label: String,
}

impl FcnSegmenter {
    pub fn new(model: FcnModel, config: ConfigId) -> Self {
        let label = format!("{}-config{}", model.variant, config);
        FcnSegmenter {
            model,
            config,
            occ_thresh: DEFAULT_OCC_THRESHOLD,
            label,
        }
    }
}

impl Segmenter for FcnSegmenter {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn segment(&self, grid: &DogGrid) -> Result<Segmentation> {
        let input = self.model.prepare_grid(grid)?;
        let (scores, mask) = infer(&self.model, &encode(&input, self.config)?)?;
        let k = self.model.variant.input_downsample();
        let (scores, mask) = (upsample_scores(&scores, k), upsample_mask(&mask, k));
        Ok(Segmentation {
            scores: refine_scores(&scores, grid, self.occ_thresh)?,
            mask: refine(&mask, grid, self.occ_thresh)?,
        })
    }
}

/// Pools gated samples over all frames and computes one curve.
pub fn evaluate_roc(model: &dyn Segmenter, frames: &[LabeledFrame], occ_gate: f32) -> Result<RocCurve> {
    let mut s = Vec::new();
    let mut t = Vec::new();
    for f in frames {
        let seg = model.segment(&f.grid)?;
        let (fs, ft) = gated_samples(&seg.scores, &f.mask, &f.grid, occ_gate)?;
        s.extend(fs);
        t.extend(ft);
    }
    roc_from_samples(&s, &t)
}

/// Precision/recall/accuracy of `model` on `frame` at every 10° rotation.
pub fn rotation_sweep(model: &dyn Segmenter, frame: &LabeledFrame, occ_gate: f32) -> Result<Vec<MetricRow>> {
    rotation_angles()
        .map(|a| {
            let (grid, truth) = rotate_frame(&frame.grid, &frame.mask, a)?;
            let seg = model.segment(&grid)?;
            let mut row = pr_accuracy(&seg.mask, &truth, &grid, occ_gate)?;
            row.model = model.name();
            row.rotation_deg = a;
            Ok(row)
        })
        .collect()
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

pub const WARMUP_RUNS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct StageStats {
    pub stage: String,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub samples: Vec<f64>,
}

/// A named pipeline stage; `run(frame_index)` does one unit of work.
pub struct Stage<'a> {
    pub name: String,
    pub run: Box<dyn FnMut(usize) -> Result<()> + 'a>,
}

impl<'a> Stage<'a> {
    pub fn new(name: impl Into<String>, run: impl FnMut(usize) -> Result<()> + 'a) -> Self {
        Stage {
            name: name.into(),
            run: Box::new(run),
        }
    }
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

pub fn median(sorted: &[f64]) -> f64 {
    match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0,
    }
}

/// Times each stage `repetitions` times (cycling through `frames` inputs)
/// after [`WARMUP_RUNS`] untimed runs.
pub fn bench(stages: &mut [Stage<'_>], frames: usize, repetitions: usize) -> Result<Vec<StageStats>> {
    if repetitions < 10 {
        return Err(Error::arg(format!("need >= 10 repetitions, got {repetitions}")));
    }
    if frames == 0 {
        return Err(Error::arg("need at least one frame"));
    }
    let mut out = Vec::with_capacity(stages.len());
    for st in stages.iter_mut() {
        for k in 0..WARMUP_RUNS {
            (st.run)(k % frames)?;
        }
        let mut samples = Vec::with_capacity(repetitions);
        for k in 0..repetitions {
            let t0 = Instant::now();
            (st.run)(k % frames)?;
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        out.push(StageStats {
            stage: st.name.clone(),
            median_ms: median(&sorted),
            p95_ms: percentile(&sorted, 0.95),
            samples,
        });
    }
    Ok(out)
}

pub fn bench_csv(rows: &[(String, StageStats)]) -> String {
    let mut s = String::from("model,stage,median_ms,p95_ms\n");
    for (model, st) in rows {
        let _ = writeln!(s, "{model},{},{:.4},{:.4}", st.stage, st.median_ms, st.p95_ms);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmap::{CellState, Label};

    #[test]
    fn perfect_separation() {
        let c = roc_from_samples(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(c.auc, 1.0);
        assert_eq!(c.accuracy_at_eer(), 1.0);
    }

    #[test]
    fn constant_scores_give_half_auc() {
        let c = roc_from_samples(&[0.3; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(c.auc, 0.5);
        assert_eq!(c.eer, 0.5);
    }

    #[test]
    fn four_cell_toy() {
        let c = roc_from_samples(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(c.auc, 0.75);
        let pts: Vec<(f64, f64)> = c.points.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(pts, vec![(1.0, 1.0), (1.0, 1.0), (0.5, 1.0), (0.5, 0.5), (0.0, 0.5), (0.0, 0.0)]);
        assert_eq!(c.eer, 0.5);
    }

    #[test]
    fn degenerate_gate_is_an_error() {
        assert!(matches!(roc_from_samples(&[0.1, 0.2], &[false, false]), Err(Error::DegenerateCurve(_))));
    }

    fn gated_grid(occ: &[f32]) -> DogGrid {
        let cells = occ.iter().map(|&o| CellState { occ: o, ..CellState::default() }).collect();
        DogGrid::new(occ.len(), 2, 0.25, 0, [cells, vec![CellState::UNKNOWN; occ.len()]].concat()).unwrap()
    }

    #[test]
    fn pr_accuracy_counting() {
        let g = gated_grid(&[0.9; 6]);
        let lab = |v: &[u8]| {
            let mut l: Vec<Label> = v.iter().map(|&x| Label::from(x == 1)).collect();
            l.extend(vec![Label::Dynamic; 6]);
            LabelMask::new(6, 2, l).unwrap()
        };
        let truth = lab(&[1, 1, 1, 0, 0, 0]);
        let pred = lab(&[1, 1, 0, 1, 0, 0]);
        let m = pr_accuracy(&pred, &truth, &g, 0.6).unwrap();
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-12);

        let none = lab(&[0, 0, 0, 0, 0, 0]);
        let m = pr_accuracy(&none, &truth, &g, 0.6).unwrap();
        assert_eq!((m.precision, m.recall), (1.0, 0.0));
        let m = pr_accuracy(&truth, &truth, &g, 0.6).unwrap();
        assert_eq!((m.precision, m.recall, m.accuracy), (1.0, 1.0, 1.0));
    }

    #[test]
    fn percentiles() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(median(&v), 10.5);
        assert_eq!(percentile(&v, 0.95), 19.0);
    }

    #[test]
    fn bench_reports_every_stage() {
        let mut counter = 0usize;
        let mut stages = vec![Stage::new("noop", |_| Ok(())), Stage::new("count", |_| {
            counter += 1;
            Ok(())
        })];
        let stats = bench(&mut stages, 2, 10).unwrap();
        drop(stages);
        assert_eq!(counter, 13);
        assert_eq!(stats.len(), 2);
        assert!(stats.iter().all(|s| s.median_ms >= 0.0 && s.samples.len() == 10));
        assert!(bench(&mut [], 1, 5).is_err());
    }

    #[test]
    fn csv_and_svg_outputs() {
        let c = roc_from_samples(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
        assert!(c.to_csv().starts_with("threshold,fpr,tpr\n"));
        assert!(c.to_svg("toy").contains("<polyline"));
    }
}
