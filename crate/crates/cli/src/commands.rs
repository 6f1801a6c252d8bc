//! Subcommand implementations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context as _, Result};
use clap::Args;
use serde::Serialize;
use tassel_core::data::{load_dataset, split_path, SplitMode};
use tassel_core::gradcheck::{check_case, GradCheckConfig, GradReport, MODEL_CASE, SUITE_CASES};
use tassel_core::metrics::{evaluate, evaluate_one_shot, report, stratify_by_exemplar_scale, throughput};
use tassel_core::metrics::{CountPredictor, EvalRecord, OneShotSummary, OracleCounter, Shots, Stratum, Throughput};
use tassel_core::synth::write_dataset;
use tassel_core::train::{fit, prepare, prepare_all, EpochRecord, FitObserver, Trainer};
use tassel_core::visualize::{render, visualize};
use tassel_core::{
    AnnotatedImage, Error, ExemplarBox, ExemplarSet, MetricsReport, ModelConfig, Raster, Sample,
    TasselModel, VisMode,
};

use crate::config::{Preset, RunConfig};
use crate::run::{run_dir, write_file, write_json, write_provenance};

/// Options shared by every subcommand.
pub struct Context {
    pub config: Option<PathBuf>,
    pub output_root: Option<PathBuf>,
    pub preset: Option<Preset>,
}

impl Context {
    fn resolve(&self) -> Result<RunConfig> {
        RunConfig::resolve(self.config.as_deref(), self.preset)
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of scenes.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory [default: a new run directory]
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Comma-separated relative split sizes (train,test or train,val,test).
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    split_mode: Option<SplitModeArg>,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum SplitModeArg {
    Random,
    CategoryDisjoint,
}

pub fn synth(ctx: &Context, a: SynthArgs) -> Result<()> {
    let mut cfg = ctx.resolve()?;
    if let Some(n) = a.n {
        cfg.dataset.scenes = n;
    }
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    if let Some(w) = a.width {
        cfg.synth.width = w;
    }
    if let Some(h) = a.height {
        cfg.synth.height = h;
    }
    if let Some(r) = a.ratios {
        cfg.dataset.split_ratios = r;
    }
    if let Some(m) = a.split_mode {
        cfg.dataset.split_mode = match m {
            SplitModeArg::Random => SplitMode::Random,
            SplitModeArg::CategoryDisjoint => SplitMode::CategoryDisjoint,
        };
    }
    ensure!(cfg.dataset.scenes > 0, "--n must be at least 1");
    cfg.validate()?;
    let out = run_dir(ctx.output_root.as_deref(), "synth", a.out.as_deref())?;
    let anns = write_dataset(
        &out,
        &cfg.synth,
        cfg.dataset.scenes,
        &cfg.dataset.split_ratios,
        cfg.dataset.split_mode,
    )?;
    write_file(&out.join("config.toml"), cfg.to_toml()?)?;
    let objects: usize = anns.iter().map(AnnotatedImage::count).sum();
    println!("wrote {} scenes ({objects} objects) to {}", anns.len(), out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seeds parameter initialisation and the data order.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_split: Option<String>,
    /// Validation split; an empty value disables validation.
    #[arg(long)]
    val_split: Option<String>,
    /// Continue from a training checkpoint; its model and schedule are kept.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs of this invocation, keeping the schedule.
    #[arg(long)]
    stop_after: Option<usize>,
    /// Run directory [default: a new timestamped directory]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn data_root(flag: Option<PathBuf>, cfg: &mut RunConfig) -> Result<PathBuf> {
    if let Some(d) = flag {
        cfg.data.root = d;
    }
    if cfg.data.root.as_os_str().is_empty() {
        bail!("no dataset given; pass --data or set data.root in the config");
    }
    Ok(cfg.data.root.clone())
}

fn load_split(root: &Path, split: &str, model: &ModelConfig) -> Result<(Vec<Sample>, Vec<ExemplarSet>)> {
    let path = split_path(root, split);
    if !path.is_file() {
        bail!("split file {} not found", path.display());
    }
    let anns = load_dataset(root, &path)?;
    let samples = anns
        .into_iter()
        .map(|a| Sample::load(root, a))
        .collect::<tassel_core::Result<Vec<_>>>()?;
    Ok(prepare_all(&samples, model)?)
}

struct TrainObserver {
    dir: PathBuf,
    log: BufWriter<File>,
    start: Instant,
    stop_at_epoch: Option<usize>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    record: &'a EpochRecord,
    seconds: f64,
}

impl FitObserver for TrainObserver {
    fn epoch(
        &mut self,
        record: &EpochRecord,
        model: &TasselModel,
        trainer: &Trainer,
        best: bool,
    ) -> tassel_core::Result<()> {
        let io = |e: std::io::Error| Error::Io {
            path: self.dir.join("log.jsonl"),
            source: e,
        };
        let line = LogLine {
            record,
            seconds: self.start.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_string(&line).expect("log line serializes");
        writeln!(self.log, "{text}").map_err(io)?;
        self.log.flush().map_err(io)?;
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        eprintln!(
            "epoch {:>3}  step {:>5}  loss {}  val mae {}  r2 {}{}",
            record.epoch,
            record.step,
            fmt(record.loss),
            fmt(record.val_mae),
            fmt(record.val_r2),
            if best { "  *" } else { "" }
        );
        trainer.checkpoint(model).save(&self.dir.join("last.ckpt"))?;
        if best {
            trainer.checkpoint(model).save(&self.dir.join("best.ckpt"))?;
        }
        Ok(())
    }

    fn should_stop(&self, trainer: &Trainer) -> bool {
        self.stop_at_epoch.is_some_and(|e| trainer.epoch >= e)
    }
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<()> {
    let mut cfg = ctx.resolve()?;
    let root = data_root(a.data, &mut cfg)?;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.base_lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = a.train_split {
        cfg.data.train_split = v;
    }
    if let Some(v) = a.val_split {
        cfg.data.val_split = v;
    }
    let resumed = match &a.resume {
        Some(path) => Some(
            tassel_core::Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?,
        ),
        None => None,
    };
    if let Some(ck) = &resumed {
        let (model, _) = TasselModel::from_checkpoint(ck)?;
        cfg.model = model.config().clone();
    }
    cfg.validate()?;
    let (train, trainx) = load_split(&root, &cfg.data.train_split, &cfg.model)?;
    ensure!(!train.is_empty(), "training split {} is empty", cfg.data.train_split);
    let (val, valx) = if cfg.data.val_split.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        load_split(&root, &cfg.data.val_split, &cfg.model)?
    };
    let (mut model, mut trainer) = match &resumed {
        Some(ck) => {
            let (m, t) = Trainer::resume(ck, train.len())?;
            cfg.train = t.cfg.clone();
            (m, t)
        }
        None => {
            let m = TasselModel::new(cfg.model.clone(), cfg.train.seed)?;
            let t = Trainer::new(cfg.train.clone(), &m, train.len())?;
            (m, t)
        }
    };
    let dir = run_dir(ctx.output_root.as_deref(), "train", a.out.as_deref())?;
    write_provenance(&dir, "train", &cfg)?;
    eprintln!(
        "training {} parameters on {} images ({} val) in {}",
        model.params().scalar_count(),
        train.len(),
        val.len(),
        dir.display()
    );
    let log_path = dir.join("log.jsonl");
    let log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let mut obs = TrainObserver {
        dir: dir.clone(),
        log: BufWriter::new(log),
        start: Instant::now(),
        stop_at_epoch: a.stop_after.map(|n| trainer.epoch + n),
    };
    match fit(&mut model, &mut trainer, (&train, &trainx), (&val, &valx), &mut obs) {
        Ok(outcome) => {
            if !trainer.finished() {
                println!("stopped after epoch {}; resume from {}", trainer.epoch, dir.join("last.ckpt").display());
                return Ok(());
            }
            trainer.checkpoint(&model).save(&dir.join("final.ckpt"))?;
            match outcome.best_val_mae {
                Some(m) => println!("best val MAE {m:.4}; checkpoints in {}", dir.display()),
                None => println!("finished; checkpoint in {}", dir.display()),
            }
            Ok(())
        }
        Err(e @ Error::Training { .. }) => {
            let path = dir.join("last_good.ckpt");
            model.save(&path, serde_json::json!({ "aborted": e.to_string() }))?;
            Err(anyhow!(e)).context(format!("last good parameters saved to {}", path.display()))
        }
        Err(e) => Err(e.into()),
    }
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    /// Predict the annotated counts instead of running a model (plumbing check).
    #[arg(long, conflicts_with = "checkpoint")]
    oracle: bool,
    #[arg(long)]
    fps_iters: Option<usize>,
    #[arg(long)]
    fps_repeats: Option<usize>,
    /// Skip the throughput measurement.
    #[arg(long)]
    no_fps: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ThroughputSummary {
    runs: Vec<Throughput>,
    /// Median of the per-run medians.
    fps: f64,
    /// `(max − min) / median` of the per-run median latencies.
    relative_spread: f64,
}

#[derive(Serialize)]
struct EvalReport {
    split: String,
    images: usize,
    three_shot: MetricsReport,
    one_shot: OneShotSummary,
    small_exemplar: Option<Stratum>,
    large_exemplar: Option<Stratum>,
    throughput: Option<ThroughputSummary>,
}

pub fn eval(ctx: &Context, a: EvalArgs) -> Result<()> {
    let mut cfg = ctx.resolve()?;
    let root = data_root(a.data, &mut cfg)?;
    if let Some(s) = a.split {
        cfg.data.eval_split = s;
    }
    if let Some(v) = a.fps_iters {
        cfg.eval.fps_iters = v;
    }
    if let Some(v) = a.fps_repeats {
        cfg.eval.fps_repeats = v;
    }
    let model = match &a.checkpoint {
        Some(path) => {
            let (m, _) = TasselModel::load(path).with_context(|| format!("loading {}", path.display()))?;
            cfg.model = m.config().clone();
            Some(m)
        }
        None => None,
    };
    cfg.validate()?;
    let (samples, exemplars) = load_split(&root, &cfg.data.eval_split, &cfg.model)?;
    ensure!(!samples.is_empty(), "split {} is empty", cfg.data.eval_split);
    let dir = run_dir(ctx.output_root.as_deref(), "eval", a.out.as_deref())?;
    write_provenance(&dir, "eval", &cfg)?;
    let predictor: &dyn CountPredictor = match &model {
        Some(m) => m,
        None => &OracleCounter,
    };
    let records = evaluate(predictor, &samples, &exemplars, Shots::All)?;
    let three_shot = report(&records)?;
    let one_shot = evaluate_one_shot(predictor, &samples, &exemplars)?;
    let (small, large) = stratify_by_exemplar_scale(&records, cfg.eval.small_max, cfg.eval.large_min)?;
    let fps = match (&model, a.no_fps) {
        (Some(m), false) => Some(measure_throughput(m, &cfg)?),
        _ => None,
    };

    let mut out = BufWriter::new(
        File::create(dir.join("records.jsonl")).with_context(|| format!("writing records in {}", dir.display()))?,
    );
    for r in &records {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
    }
    out.flush()?;
    print_eval(&records, &three_shot, &one_shot, &small, &large, fps.as_ref(), &cfg);
    write_json(
        &dir.join("metrics.json"),
        &EvalReport {
            split: cfg.data.eval_split.clone(),
            images: samples.len(),
            three_shot,
            one_shot,
            small_exemplar: small,
            large_exemplar: large,
            throughput: fps,
        },
    )?;
    println!("report written to {}", dir.join("metrics.json").display());
    Ok(())
}

fn measure_throughput(model: &TasselModel, cfg: &RunConfig) -> Result<ThroughputSummary> {
    let side = model.config().image_size;
    let runs = (0..cfg.eval.fps_repeats)
        .map(|_| throughput(model, side, side, cfg.eval.fps_warmup, cfg.eval.fps_iters))
        .collect::<tassel_core::Result<Vec<_>>>()?;
    let medians: Vec<f64> = runs.iter().map(|r| r.median_ms).collect();
    let mid = tassel_core::metrics::median(&medians);
    let spread = medians.iter().cloned().fold(f64::MIN, f64::max) - medians.iter().cloned().fold(f64::MAX, f64::min);
    Ok(ThroughputSummary {
        runs,
        fps: 1000.0 / mid,
        relative_spread: spread / mid,
    })
}

fn print_eval(
    records: &[EvalRecord],
    three: &MetricsReport,
    one: &OneShotSummary,
    small: &Option<Stratum>,
    large: &Option<Stratum>,
    fps: Option<&ThroughputSummary>,
    cfg: &RunConfig,
) {
    let opt = |v: Option<f64>| v.map_or("absent".to_string(), |v| format!("{v:.4}"));
    println!("images  {}", records.len());
    println!(
        "3-shot  MAE {:.4}  RMSE {:.4}  WCA {}  R2 {}",
        three.mae,
        three.rmse,
        opt(three.wca),
        opt(three.r2)
    );
    println!(
        "1-shot  MAE {:.4} ± {:.4}  RMSE {:.4} ± {:.4}  ({} exemplar choices)",
        one.mae.mean,
        one.mae.std,
        one.rmse.mean,
        one.rmse.std,
        one.runs.len()
    );
    for (label, bound, s) in [
        ("small-exemplar", format!("s < {}", cfg.eval.small_max), small),
        ("large-exemplar", format!("s > {}", cfg.eval.large_min), large),
    ] {
        match s {
            Some(s) => println!(
                "{label} ({bound}, n={})  MAE {:.4}  RMSE {:.4}",
                s.report.m, s.report.mae, s.report.rmse
            ),
            None => println!("{label} ({bound})  absent"),
        }
    }
    if let Some(t) = fps {
        let side = cfg.model.image_size;
        println!(
            "throughput {side}x{side}  {:.1} FPS  ({} runs, median spread {:.1}%)",
            t.fps,
            t.runs.len(),
            100.0 * t.relative_spread
        );
    }
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Exemplar box `x1,y1,x2,y2` in image pixels; give 1 to 3.
    #[arg(long = "box", required = true, value_parser = parse_box)]
    boxes: Vec<ExemplarBox>,
    /// Output directory [default: a new timestamped directory]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overlay opacity of the rendered visualizations.
    #[arg(long)]
    opacity: Option<f64>,
}

fn parse_box(s: &str) -> Result<ExemplarBox, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| format!("box `{s}` must be four numbers x1,y1,x2,y2"))?;
    if v.len() != 4 {
        return Err(format!("box `{s}` must be four numbers x1,y1,x2,y2"));
    }
    ExemplarBox::new(v[0], v[1], v[2], v[3]).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct CountResult {
    count: f64,
    branch: usize,
    block_size: usize,
    scale_prior: f64,
    magnitude: f64,
    hints: usize,
    image: PathBuf,
    model_input: (usize, usize),
}

pub fn count(ctx: &Context, a: CountArgs) -> Result<()> {
    let mut cfg = ctx.resolve()?;
    if let Some(o) = a.opacity {
        cfg.visualize.opacity = o;
    }
    ensure!(
        (1..=tassel_core::geometry::MAX_EXEMPLARS).contains(&a.boxes.len()),
        "expected 1 to {} exemplar boxes, got {}",
        tassel_core::geometry::MAX_EXEMPLARS,
        a.boxes.len()
    );
    let (model, _) = TasselModel::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    cfg.model = model.config().clone();
    cfg.validate()?;
    let raster = Raster::load(&a.image)?;
    let ann = AnnotatedImage {
        id: tassel_core::data::image_id(&a.image.to_string_lossy()),
        image_path: a.image.to_string_lossy().into_owned(),
        width: raster.width(),
        height: raster.height(),
        points: Vec::new(),
        boxes: a.boxes.clone(),
        category: "query".into(),
    };
    ann.validate()?;
    let (sample, exemplars) = prepare(&Sample::new(ann, raster)?, model.config())?;
    let pred = model.predict(&sample.raster, &exemplars)?;
    let dir = run_dir(ctx.output_root.as_deref(), "count", a.out.as_deref())?;
    write_provenance(&dir, "count", &cfg)?;

    let k = model.config().branch_blocks[pred.branch.index()];
    println!("count: {:.4}", pred.count);
    println!(
        "branch: {} (k={k}, s={:.2})",
        pred.branch.number(),
        pred.scale_prior
    );
    pred.normalized.save_text(&dir.join("count_map.txt"))?;
    let p = model.config().patch_size;
    let (rows, cols) = (sample.raster.height() / p, sample.raster.width() / p);
    let mut hints = 0;
    for (mode, name) in [(VisMode::Detection, "detection"), (VisMode::Density, "density")] {
        let vis = visualize(&pred.normalized, &pred.match_map, rows, cols, pred.magnitude, mode)?;
        hints = vis.n_top;
        render(&vis, &sample.raster, cfg.visualize.opacity, &dir.join(format!("vis_{name}.png")))?;
    }
    write_json(
        &dir.join("result.json"),
        &CountResult {
            count: pred.count,
            branch: pred.branch.number(),
            block_size: k,
            scale_prior: pred.scale_prior,
            magnitude: pred.magnitude,
            hints,
            image: a.image.clone(),
            model_input: (sample.raster.width(), sample.raster.height()),
        },
    )?;
    println!("outputs written to {}", dir.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Finite-difference step.
    #[arg(long)]
    eps: Option<f64>,
    /// Maximum relative error.
    #[arg(long)]
    tol: Option<f64>,
    /// Number of random seeds per case.
    #[arg(long)]
    seeds: Option<u64>,
    /// Corrupt one op's backward pass; the check must then fail.
    #[arg(long, value_name = "OP")]
    inject_bug: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn gradcheck(ctx: &Context, a: GradcheckArgs) -> Result<()> {
    let mut cfg = ctx.resolve()?;
    if let Some(v) = a.eps {
        cfg.gradcheck.eps = v;
    }
    if let Some(v) = a.tol {
        cfg.gradcheck.tol = v;
    }
    if let Some(v) = a.seeds {
        cfg.gradcheck.seeds = v;
    }
    cfg.validate()?;
    let corrupt = match &a.inject_bug {
        Some(op) => Some(
            SUITE_CASES
                .iter()
                .copied()
                .find(|c| c == op && *c != MODEL_CASE && *c != "conv2d_3x3")
                .ok_or_else(|| anyhow!("unknown op `{op}` for --inject-bug"))?,
        ),
        None => None,
    };
    let check = GradCheckConfig {
        eps: cfg.gradcheck.eps,
        tol: cfg.gradcheck.tol,
        abs_floor: cfg.gradcheck.abs_floor,
        corrupt,
        ..GradCheckConfig::default()
    };
    let dir = run_dir(ctx.output_root.as_deref(), "gradcheck", a.out.as_deref())?;
    write_provenance(&dir, "gradcheck", &cfg)?;
    let seeds: Vec<u64> = (0..cfg.gradcheck.seeds).collect();
    println!("{:<18}{:>12}{:>12}{:>9}  result", "case", "max_rel", "max_abs", "checked");
    let mut reports: Vec<GradReport> = Vec::new();
    for &case in SUITE_CASES {
        let r = check_case(case, &check, &seeds)?;
        println!(
            "{:<18}{:>12.3e}{:>12.3e}{:>9}  {}",
            r.op_name,
            r.max_rel_error,
            r.max_abs_error,
            r.checked,
            if r.passed { "pass" } else { "FAIL" }
        );
        reports.push(r);
    }
    write_json(&dir.join("gradcheck.json"), &reports)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op_name.as_str()).collect();
    if !failed.is_empty() {
        bail!(
            "gradient check failed for {} (tolerance {:e}, eps {:e})",
            failed.join(", "),
            cfg.gradcheck.tol,
            cfg.gradcheck.eps
        );
    }
    println!("all {} cases passed over {} seeds", reports.len(), seeds.len());
    Ok(())
}
