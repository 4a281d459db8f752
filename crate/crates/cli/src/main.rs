use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use dogseg::autolabel::{autolabel_pipeline, polygons_csv, AutolabelParams};
use dogseg::datasetkit::{make_split, DatasetIndex, Split};
use dogseg::encoding::{encode, render_dog, write_encd, write_ppm, ConfigId};
use dogseg::evalkit::{
    bench, bench_csv, evaluate_roc, rotation_sweep, BaselineSegmenter, FcnSegmenter, Segmenter, Stage,
};
use dogseg::fcnmodels::{build_network, infer, refine, upsample_mask, FcnModel, Variant};
use dogseg::gridmap::{read_dog, read_pgm, write_dog, write_pgm};
use dogseg::simworld::{apply_overrides, generate_dataset, LabeledFrame, SceneSpec};
use dogseg::training::{loss_log_csv, train_with, TrainConfig};

#[derive(Parser)]
#[command(name = "dogseg", version, about = "Moving-object segmentation in dynamic occupancy grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labelled frames and a split index.
    Simulate(Common),
    /// Encode one DOGG frame (or a directory of them) into images.
    Encode(Common),
    /// Auto-label frames by clustering and convex hulls.
    Label(Common),
    /// Train a network on the train split of a dataset.
    Train(Common),
    /// Segment one frame (or a directory) with trained weights.
    Infer(Common),
    /// Compare the baseline and trained models on the test split.
    Eval(Common),
    /// Time pre/post processing and inference of each variant.
    Bench(Common),
    /// Colour-code the velocity field of a frame.
    Render(Common),
}

/// Flags mirror the run-configuration keys; a flag overrides the same key
/// from `--config`.
#[derive(Args, Clone, Default)]
struct Common {
    /// key=value run configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// scene description file (simulate)
    #[arg(long)]
    scene: Option<PathBuf>,
    /// dataset directory or frame file
    #[arg(long)]
    input: Option<PathBuf>,
    /// weights file (infer) or name=path list (eval)
    #[arg(long)]
    weights: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    config_id: Option<u8>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    occ_thresh: Option<f32>,
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    /// worker threads for per-frame work
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// scene-spec override, repeatable: --set clutter_density=0
    #[arg(long = "set")]
    overrides: Vec<String>,
}

/// Resolved run configuration.
#[derive(Debug, Clone)]
struct RunConfig {
    keys: BTreeMap<String, String>,
}

impl RunConfig {
    fn load(c: &Common) -> anyhow::Result<Self> {
        let mut keys = BTreeMap::new();
        if let Some(path) = &c.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| anyhow!("{}:{}: expected key=value", path.display(), n + 1))?;
                keys.insert(k.trim().replace('-', "_"), v.trim().to_string());
            }
        }
        let mut set = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                keys.insert(k.to_string(), v);
            }
        };
        set("out", c.out.as_ref().map(|p| p.display().to_string()));
        set("scene", c.scene.as_ref().map(|p| p.display().to_string()));
        set("input", c.input.as_ref().map(|p| p.display().to_string()));
        set("seed", c.seed.map(|v| v.to_string()));
        set("scenes", c.scenes.map(|v| v.to_string()));
        set("config_id", c.config_id.map(|v| v.to_string()));
        set("variant", c.variant.clone());
        set("occ_thresh", c.occ_thresh.map(|v| v.to_string()));
        set("c1", c.c1.map(|v| v.to_string()));
        set("lr", c.lr.map(|v| v.to_string()));
        set("momentum", c.momentum.map(|v| v.to_string()));
        set("epochs", c.epochs.map(|v| v.to_string()));
        set("batch", c.batch.map(|v| v.to_string()));
        set("repetitions", c.repetitions.map(|v| v.to_string()));
        if !c.weights.is_empty() {
            set("weights", Some(c.weights.join(",")));
        }
        for o in &c.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| usage(format!("--set expects key=value, got {o:?}")))?;
            keys.insert(format!("scene.{}", k.trim()), v.trim().to_string());
        }
        Ok(RunConfig { keys })
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> anyhow::Result<T> {
        match self.keys.get(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| usage(format!("bad value for {key}: {v:?}"))),
        }
    }

    fn path(&self, key: &str) -> anyhow::Result<PathBuf> {
        self.keys
            .get(key)
            .map(PathBuf::from)
            .ok_or_else(|| usage(format!("missing --{}", key.replace('_', "-"))))
    }

    fn out(&self) -> anyhow::Result<PathBuf> {
        let out = self.path("out")?;
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        Ok(out)
    }

    fn seed(&self) -> anyhow::Result<u64> {
        self.get("seed", 0)
    }

    fn config_id(&self) -> anyhow::Result<ConfigId> {
        Ok(ConfigId::new(self.get("config_id", 2u8)?)?)
    }

    fn variant(&self) -> anyhow::Result<Variant> {
        Ok(self.get::<String>("variant", "mini-8s".into())?.parse()?)
    }

    fn occ_thresh(&self) -> anyhow::Result<f32> {
        self.get("occ_thresh", 0.6)
    }

    fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let d = TrainConfig::default();
        Ok(TrainConfig {
            config: self.config_id()?,
            c1: self.get("c1", d.c1)?,
            lr: self.get("lr", d.lr)?,
            lr_step: self.get("lr_step", d.lr_step)?,
            momentum: self.get("momentum", d.momentum)?,
            epochs: self.get("epochs", d.epochs)?,
            batch: self.get("batch", d.batch)?,
            augment: self.get("augment", d.augment)?,
            crop: match self.get("crop", 0usize)? {
                0 => None,
                c => Some(c),
            },
            seed: self.seed()?,
        })
    }

    fn scene_spec(&self) -> anyhow::Result<SceneSpec> {
        let mut spec = match self.keys.get("scene") {
            Some(p) => SceneSpec::load(p)?,
            None => SceneSpec::paper_like(),
        };
        let overrides: HashMap<String, String> = self
            .keys
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("scene.").map(|k| (k.to_string(), v.clone())))
            .collect();
        apply_overrides(&mut spec, &overrides)?;
        Ok(spec)
    }
}

/// Marker for errors that map to exit code 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: String) -> anyhow::Error {
    anyhow::Error::new(Usage(msg))
}

fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn files_under(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            files_under(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// `manifest.txt`: command, resolved configuration, input and output hashes.
fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, inputs: &[PathBuf]) -> anyhow::Result<()> {
    let mut s = format!("command={command}\n");
    for (k, v) in &cfg.keys {
        s += &format!("config.{k}={v}\n");
    }
    for p in inputs {
        if p.is_file() {
            s += &format!("input {} {}\n", sha256_file(p)?, p.display());
        }
    }
    let mut files = Vec::new();
    files_under(out, &mut files)?;
    for p in files {
        let rel = p.strip_prefix(out).unwrap_or(&p);
        if rel == Path::new("manifest.txt") {
            continue;
        }
        s += &format!("output {} {}\n", sha256_file(&p)?, rel.display());
    }
    fs::write(out.join("manifest.txt"), s)?;
    Ok(())
}

fn frame_name(id: u64) -> String {
    format!("frame_{id:06}")
}

/// Frames of a dataset directory (via its index) or a single DOGG file;
/// masks are read when present, otherwise all-static.
fn load_frames(input: &Path, split: Option<Split>) -> anyhow::Result<Vec<LabeledFrame>> {
    let entries: Vec<(PathBuf, Option<PathBuf>)> = if input.is_dir() {
        let index = DatasetIndex::read(input.join("index.csv"))?;
        index
            .entries
            .iter()
            .filter(|e| split.map_or(true, |s| e.split == s))
            .map(|e| (input.join(&e.frame), Some(input.join(&e.mask))))
            .collect()
    } else {
        vec![(input.to_path_buf(), None)]
    };
    entries
        .into_iter()
        .map(|(f, m)| {
            let grid = read_dog(&f)?;
            let mask = match m {
                Some(m) => read_pgm(m)?,
                None => dogseg::gridmap::LabelMask::all_static(grid.width(), grid.height()),
            };
            let frame_id = grid.frame_id();
            Ok(LabeledFrame { grid, mask, frame_id })
        })
        .collect()
}

fn cmd_simulate(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let spec = cfg.scene_spec()?;
    let scenes: usize = cfg.get("scenes", 10)?;
    let seed = cfg.seed()?;
    let threads: usize = cfg.get("threads", 1)?;
    let out = cfg.out()?;
    let frames_dir = out.join("frames");
    fs::create_dir_all(&frames_dir)?;

    // scenes are seeded individually, so splitting them across threads
    // leaves the output unchanged
    let chunk = scenes.div_ceil(threads.max(1)).max(1);
    let parts: Vec<anyhow::Result<Vec<LabeledFrame>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..scenes)
            .step_by(chunk)
            .map(|start| {
                let spec = &spec;
                s.spawn(move || -> anyhow::Result<Vec<LabeledFrame>> {
                    let n = chunk.min(scenes - start);
                    Ok(generate_dataset(spec, n, seed + start as u64)?)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let mut pairs = Vec::new();
    let mut id = 0u64;
    for part in parts {
        for f in part? {
            let name = frame_name(id);
            let grid = f.grid.with_frame_id(id);
            write_dog(&grid, frames_dir.join(format!("{name}.dog")))?;
            write_pgm(&f.mask, frames_dir.join(format!("{name}.pgm")))?;
            pairs.push((PathBuf::from(format!("frames/{name}.dog")), PathBuf::from(format!("frames/{name}.pgm"))));
            id += 1;
        }
    }
    let index = make_split(&pairs, [0.8, 0.1, 0.1], seed)?;
    index.write(out.join("index.csv"))?;
    fs::write(out.join("scene.cfg"), spec.to_config())?;
    Ok(cfg.keys.get("scene").map(PathBuf::from).into_iter().collect())
}

fn cmd_encode(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let input = cfg.path("input")?;
    let id = cfg.config_id()?;
    let out = cfg.out()?;
    for f in load_frames(&input, None)? {
        let img = encode(&f.grid, id)?;
        let name = frame_name(f.frame_id);
        write_encd(&img, out.join(format!("{name}.encd")))?;
        write_ppm(&img, out.join(format!("{name}.ppm")))?;
    }
    Ok(vec![input])
}

fn cmd_label(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let input = cfg.path("input")?;
    let out = cfg.out()?;
    let params = AutolabelParams {
        occ_tau: cfg.get("occ_tau", AutolabelParams::default().occ_tau)?,
        m_tau: cfg.get("m_tau", AutolabelParams::default().m_tau)?,
        eps: cfg.get("eps", AutolabelParams::default().eps)?,
        min_pts: cfg.get("min_pts", AutolabelParams::default().min_pts)?,
    };
    let mut rows = Vec::new();
    for f in load_frames(&input, None)? {
        let a = autolabel_pipeline(&f.grid, &params)?;
        write_pgm(&a.mask, out.join(format!("{}.pgm", frame_name(f.frame_id))))?;
        rows.push((f.frame_id, a.hulls));
    }
    let refs: Vec<(u64, &[_])> = rows.iter().map(|(id, h)| (*id, h.as_slice())).collect();
    fs::write(out.join("polygons.csv"), polygons_csv(&refs))?;
    Ok(vec![input])
}

fn cmd_train(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let input = cfg.path("input")?;
    if !input.join("index.csv").is_file() {
        bail!("no dataset index at {}", input.join("index.csv").display());
    }
    let variant = cfg.variant()?;
    let tc = cfg.train_config()?;
    let out = cfg.out()?;
    let train = load_frames(&input, Some(Split::Train))?;
    let val = load_frames(&input, Some(Split::Val))?;
    let first = train.first().ok_or_else(|| anyhow!("train split is empty"))?;
    let mut model = build_network(variant, 3, 2, tc.seed)?.for_grid(first.grid.width(), first.grid.height())?;
    let log = train_with(&mut model, &train, &val, &tc, |e| {
        eprintln!("epoch {:>3} lr {:.2e} train {:.5} val {}", e.epoch, e.lr, e.train_loss, e.val_loss.map_or("-".into(), |v| format!("{v:.5}")))
    })?;
    model.save(out.join(format!("{variant}.nnp")))?;
    fs::write(out.join("loss_log.csv"), loss_log_csv(&log))?;
    Ok(vec![input.join("index.csv")])
}

fn load_model(variant: Variant, path: &Path, grid_w: usize, grid_h: usize) -> anyhow::Result<FcnModel> {
    if !path.is_file() {
        bail!("missing weights for {variant}: {}", path.display());
    }
    let params = dogseg::neuralnet::read_params::<f32>(path)?;
    Ok(FcnModel::from_params(variant, params, 3)?.for_grid(grid_w, grid_h)?)
}

fn cmd_infer(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let input = cfg.path("input")?;
    let weights = cfg.path("weights")?;
    let variant = cfg.variant()?;
    let id = cfg.config_id()?;
    let occ = cfg.occ_thresh()?;
    let out = cfg.out()?;
    let frames = load_frames(&input, None)?;
    let Some(first) = frames.first() else { bail!("no frames in {}", input.display()) };
    let model = load_model(variant, &weights, first.grid.width(), first.grid.height())?;
    for f in &frames {
        let grid = model.prepare_grid(&f.grid)?;
        let (scores, mask) = infer(&model, &encode(&grid, id)?)?;
        let k = variant.input_downsample();
        let mask = refine(&upsample_mask(&mask, k), &f.grid, occ)?;
        let scores = dogseg::fcnmodels::upsample_scores(&scores, k);
        let name = frame_name(f.frame_id);
        write_pgm(&mask, out.join(format!("{name}.pgm")))?;
        scores.write_csv(out.join(format!("{name}_scores.csv")))?;
    }
    Ok(vec![input, weights])
}

/// `name=path` pairs from `--weights`, where the name is a variant name,
/// optionally suffixed `@<config id>`.
fn parse_weights(list: &str) -> anyhow::Result<Vec<(String, Variant, ConfigId, PathBuf)>> {
    list.split(',')
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (name, path) = item.split_once('=').ok_or_else(|| usage(format!("--weights expects name=path, got {item:?}")))?;
            let (v, c) = name.split_once('@').unwrap_or((name, "2"));
            let id: u8 = c.parse().map_err(|_| usage(format!("bad config id in {name:?}")))?;
            Ok((name.to_string(), v.parse()?, ConfigId::new(id)?, PathBuf::from(path)))
        })
        .collect()
}

fn cmd_eval(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let input = cfg.path("input")?;
    let occ = cfg.occ_thresh()?;
    let out = cfg.out()?;
    let frames = load_frames(&input, Some(Split::Test))?;
    let Some(first) = frames.first() else { bail!("test split is empty") };
    let mut models: Vec<Box<dyn Segmenter>> = vec![Box::new(BaselineSegmenter::default())];
    let mut inputs = vec![input.join("index.csv")];
    for (name, variant, id, path) in parse_weights(cfg.keys.get("weights").map_or("", |s| s.as_str()))? {
        let m = load_model(variant, &path, first.grid.width(), first.grid.height())?;
        let mut s = FcnSegmenter::new(m, id);
        s.occ_thresh = occ;
        s.label = name;
        models.push(Box::new(s));
        inputs.push(path);
    }
    let mut summary = String::from("model,auc,eer,accuracy_at_eer,positives,negatives\n");
    let mut rotations = Vec::new();
    for m in &models {
        let curve = evaluate_roc(m.as_ref(), &frames, occ)?;
        let tag = m.name().replace(['@', '/', ' '], "_");
        fs::write(out.join(format!("roc_{tag}.csv")), curve.to_csv())?;
        fs::write(out.join(format!("roc_{tag}.svg")), curve.to_svg(&m.name()))?;
        summary += &format!(
            "{},{},{},{},{},{}\n",
            m.name(),
            curve.auc,
            curve.eer,
            curve.accuracy_at_eer(),
            curve.positives,
            curve.negatives
        );
        rotations.extend(rotation_sweep(m.as_ref(), first, occ)?);
    }
    fs::write(out.join("summary.csv"), summary)?;
    let mut lines = String::from("model,angle,precision,recall,accuracy\n");
    for r in &rotations {
        lines += &format!("{},{},{},{},{}\n", r.model, r.rotation_deg, r.precision, r.recall, r.accuracy);
    }
    fs::write(out.join("rotation.csv"), lines)?;
    Ok(inputs)
}

fn cmd_bench(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let out = cfg.out()?;
    let reps: usize = cfg.get("repetitions", 20)?;
    let scenes: usize = cfg.get("scenes", 4)?;
    let id = cfg.config_id()?;
    let frames = generate_dataset(&cfg.scene_spec()?, scenes, cfg.seed()?)?;
    let mut rows = Vec::new();
    for variant in [Variant::Mini8s, Variant::MiniFast] {
        let model = build_network(variant, 3, 2, 0)?.for_grid(frames[0].grid.width(), frames[0].grid.height())?;
        let k = variant.input_downsample();
        let encoded: Vec<_> = frames
            .iter()
            .map(|f| encode(&model.prepare_grid(&f.grid)?, id))
            .collect::<Result<_, _>>()?;
        let masks: Vec<_> = encoded.iter().map(|e| infer(&model, e).map(|r| r.1)).collect::<Result<_, _>>()?;
        let mut stages = vec![
            Stage::new("pre", |i| {
                encode(&model.prepare_grid(&frames[i].grid)?, id)?;
                Ok(())
            }),
            Stage::new("inference", |i| {
                infer(&model, &encoded[i])?;
                Ok(())
            }),
            Stage::new("post", |i| {
                refine(&upsample_mask(&masks[i], k), &frames[i].grid, 0.6)?;
                Ok(())
            }),
        ];
        for s in bench(&mut stages, frames.len(), reps)? {
            rows.push((variant.name().to_string(), s));
        }
    }
    fs::write(out.join("bench.csv"), bench_csv(&rows))?;
    Ok(Vec::new())
}

fn cmd_render(cfg: &RunConfig) -> anyhow::Result<Vec<PathBuf>> {
    let input = cfg.path("input")?;
    let out = cfg.out()?;
    for f in load_frames(&input, None)? {
        render_dog(&f.grid).write_ppm(out.join(format!("{}_velocity.ppm", frame_name(f.frame_id))))?;
    }
    Ok(vec![input])
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (name, common, f): (&str, &Common, fn(&RunConfig) -> anyhow::Result<Vec<PathBuf>>) = match &cli.command {
        Command::Simulate(c) => ("simulate", c, cmd_simulate),
        Command::Encode(c) => ("encode", c, cmd_encode),
        Command::Label(c) => ("label", c, cmd_label),
        Command::Train(c) => ("train", c, cmd_train),
        Command::Infer(c) => ("infer", c, cmd_infer),
        Command::Eval(c) => ("eval", c, cmd_eval),
        Command::Bench(c) => ("bench", c, cmd_bench),
        Command::Render(c) => ("render", c, cmd_render),
    };
    if common.threads == 0 {
        return Err(usage("--threads must be >= 1".into()));
    }
    let mut cfg = RunConfig::load(common)?;
    cfg.keys.insert("threads".into(), common.threads.to_string());
    let inputs = f(&cfg)?;
    write_manifest(&cfg.path("out")?, name, &cfg, &inputs)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
