use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use gmnet_core::arch::{extract_feature_maps, Dataset, Model, ModelSpec};
use gmnet_core::data::{load_cifar, load_mnist, preprocess, Splits};
use gmnet_core::tensor::Tensor;
use gmnet_core::train::{
    evaluate, fit, load_checkpoint, save_checkpoint, stream_rng, EpochRecord, OptState, RunMetrics, TrainConfig,
    CSV_HEADER,
};

use crate::args::*;
use crate::pgm;

/// A failed command: exit status and a one-line reason.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    fn new(code: u8, msg: impl Into<String>) -> Self {
        Self { code, msg: msg.into() }
    }
}

impl From<gmnet_core::Error> for Failure {
    fn from(e: gmnet_core::Error) -> Self {
        Self::new(1, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn io_fail(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(1, format!("{}: {e}", path.display()))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, bytes).map_err(|e| io_fail(path, e))
}

fn create_dir(path: &Path) -> Outcome {
    fs::create_dir_all(path).map_err(|e| io_fail(path, e))
}

fn preset_dataset(p: Preset) -> Dataset {
    match p {
        Preset::DeskMnist => Dataset::Mnist,
        Preset::DeskCifar => Dataset::Cifar10,
    }
}

/// Build the model spec from defaults, preset, config file and flags, in rising
/// precedence. `fallback_config` is read when `--config` is absent and the
/// file exists.
pub fn resolve_spec(m: &ModelArgs, preset: Option<Preset>, fallback_config: Option<PathBuf>) -> Result<ModelSpec, Failure> {
    let config = m.config.clone().or(fallback_config.filter(|p| p.exists()));
    let mut spec = match &config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_fail(path, e))?;
            ModelSpec::from_config(&text).map_err(|e| Failure::new(1, format!("{}: {e}", path.display())))?
        }
        None => {
            let ds = preset.map_or(Dataset::Cifar10, preset_dataset);
            let spec = ModelSpec::default().for_dataset(ds);
            if preset.is_some() {
                spec.with_width(0.25)
            } else {
                spec
            }
        }
    };
    let mut set = |key: &str, value: Option<String>| -> Result<(), Failure> {
        if let Some(v) = value {
            spec.set(key, &v)?;
        }
        Ok(())
    };
    set("dataset", m.dataset.clone())?;
    set("variant", m.variant.clone())?;
    set("connection", m.connection.clone())?;
    set("merge", m.merge.clone())?;
    set("width", m.width.map(|w| w.to_string()))?;
    set("groups", m.groups.clone())?;
    set("bottleneck", m.bottleneck.clone())?;
    set("dropout_keep", m.dropout_keep.map(|k| k.to_string()))?;
    if let Some(p) = &m.placement {
        spec.groups = spec.groups.with_placement(p)?;
    }
    spec.validate()?;
    Ok(spec)
}

/// Dataset a spec was built for, judged by its input layout.
pub fn dataset_of(spec: &ModelSpec) -> Dataset {
    match (spec.in_channels, spec.num_classes) {
        (1, _) => Dataset::Mnist,
        (_, 100) => Dataset::Cifar100,
        _ => Dataset::Cifar10,
    }
}

fn spec_file(spec: &ModelSpec) -> String {
    format!("dataset = {}\n{}", dataset_of(spec).name(), spec.to_config())
}

/// Load, normalize with full-training-split statistics, then truncate.
fn load_data(d: &DataArgs, dataset: Dataset) -> Result<Splits, Failure> {
    let mut splits = match dataset {
        Dataset::Mnist => load_mnist(&d.data_dir)?,
        other => load_cifar(&d.data_dir, other)?,
    };
    preprocess(&mut splits, !d.mean_only);
    if let Some(n) = d.train_limit {
        splits.train = splits.train.subset(n)?;
    }
    if let Some(n) = d.test_limit {
        splits.test = splits.test.subset(n)?;
    }
    Ok(splits)
}

fn train_config(opts: &TrainOpts, dataset: Dataset) -> Result<TrainConfig, Failure> {
    let mut cfg = match opts.preset {
        Some(_) => TrainConfig::desk(dataset),
        None => TrainConfig::for_dataset(dataset),
    };
    if let Some(e) = opts.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = opts.batch {
        cfg.batch_size = b;
    }
    if let Some(lr) = opts.lr {
        cfg.base_lr = lr;
    }
    if let Some(m) = opts.momentum {
        cfg.momentum = m;
    }
    if let Some(w) = opts.weight_decay {
        cfg.weight_decay = w;
    }
    cfg.seed = opts.seed;
    cfg.augment &= !opts.no_augment;
    cfg.prefetch = opts.prefetch;
    cfg.validate()?;
    Ok(cfg)
}

fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model<f32>, Failure> {
    Ok(Model::build(spec, &mut stream_rng(seed, 0))?)
}

fn print_row(r: &EpochRecord, total: usize) {
    if r.epoch == 0 {
        println!("epoch 0/{total} test_err={:.2}% ({:.1}s)", r.test_err, r.seconds);
    } else {
        println!(
            "epoch {}/{total} lr={} train_loss={:.4} train_err={:.2}% test_err={:.2}% ({:.1}s)",
            r.epoch, r.lr, r.train_loss, r.train_err, r.test_err, r.seconds
        );
    }
}

/// Train one model and write its artifacts under `out`.
fn run_training(spec: &ModelSpec, splits: &Splits, cfg: &TrainConfig, out: &Path) -> Result<(RunMetrics, usize), Failure> {
    create_dir(out)?;
    write(&out.join("model.cfg"), spec_file(spec))?;
    let mut model = build_model(spec, cfg.seed)?;
    let mut opt = OptState::new(&model.params, cfg.momentum, cfg.weight_decay, cfg.base_lr)?;
    let metrics = fit(&mut model, &mut opt, splits, cfg, |r| print_row(r, cfg.epochs))?;
    metrics.write_csv(out.join("metrics.csv"))?;
    save_checkpoint(&model, Some(&opt), out.join("model.gmnt"))?;
    Ok((metrics, model.param_count()))
}

pub fn train(a: &TrainArgs) -> Outcome {
    let spec = resolve_spec(&a.model, a.opts.preset, None)?;
    let dataset = dataset_of(&spec);
    let cfg = train_config(&a.opts, dataset)?;
    let splits = load_data(&a.data, dataset)?;
    println!(
        "training {} ({} params) on {}: {} train / {} test, {} epochs",
        spec.variant,
        build_model(&spec, cfg.seed)?.param_count(),
        dataset.name(),
        splits.train.len(),
        splits.test.len(),
        cfg.epochs
    );
    run_training(&spec, &splits, &cfg, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn load_trained(model: &ModelArgs, checkpoint: &Path) -> Result<Model<f32>, Failure> {
    if !checkpoint.is_file() {
        return Err(Failure::new(2, format!("checkpoint not found: {}", checkpoint.display())));
    }
    let fallback = checkpoint.parent().map(|p| p.join("model.cfg"));
    let spec = resolve_spec(model, None, fallback)?;
    let mut m = build_model(&spec, 0)?;
    load_checkpoint(&mut m, None, checkpoint)?;
    Ok(m)
}

pub fn eval(a: &EvalArgs) -> Outcome {
    let model = load_trained(&a.model, &a.checkpoint)?;
    let splits = load_data(&a.data, dataset_of(&model.spec))?;
    let err = evaluate(&model, &splits.test, a.batch.max(1))?;
    println!("test_error={err:.2}");
    Ok(())
}

pub fn params(a: &ParamsArgs) -> Outcome {
    let spec = resolve_spec(&a.model, None, None)?;
    let model = build_model(&spec, 0)?;
    let count = model.count_params();
    println!("{:<12} {:>12}", "block", "params");
    for (block, n) in &count.blocks {
        println!("{block:<12} {n:>12}");
    }
    println!("{:<12} {:>12}", "total", count.total);
    println!("depth {}", model.depth());
    if let Some(target) = a.assert_near {
        let rel = (count.total as f64 - target).abs() / target;
        if rel > a.tol {
            return Err(Failure::new(
                1,
                format!("total {} is {:.1}% from {target}, tolerance {:.1}%", count.total, rel * 100.0, a.tol * 100.0),
            ));
        }
    }
    Ok(())
}

fn shape_str(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

pub fn trace(a: &TraceArgs) -> Outcome {
    let spec = resolve_spec(&a.model, None, None)?;
    let batch = if a.check { a.batch.max(1) } else { 1 };
    let input = [batch, spec.in_channels, spec.input_size, spec.input_size];
    let trace = gmnet_core::arch::forward_trace(&spec, &input)?;
    println!("{:<16} {}", "input", shape_str(&input));
    for t in &trace {
        println!("{:<16} {}", t.name, shape_str(&t.shape));
    }
    if a.check {
        let model = build_model(&spec, 0)?;
        let x = Tensor::<f32>::randn(&input, 1.0, &mut stream_rng(0, 1))?;
        let mut graph = gmnet_core::autodiff::Graph::new();
        let xi = graph.constant(x);
        let opts = gmnet_core::arch::ForwardOptions::eval();
        let pass = model.forward(&mut graph, xi, opts, &mut stream_rng(0, 0))?;
        for t in &trace {
            let got = pass
                .outputs
                .iter()
                .find(|(n, _)| *n == t.name)
                .map(|(_, id)| graph.value(*id).shape().to_vec())
                .ok_or_else(|| Failure::new(1, format!("block `{}` produced no output", t.name)))?;
            if got != t.shape {
                return Err(Failure::new(
                    1,
                    format!("block `{}`: traced {} but ran {}", t.name, shape_str(&t.shape), shape_str(&got)),
                ));
            }
        }
        println!("check ok: {} blocks match", trace.len());
    }
    Ok(())
}

pub fn visualize(a: &VisualizeArgs) -> Outcome {
    let model = load_trained(&a.model, &a.checkpoint)?;
    let splits = load_data(&a.data, dataset_of(&model.spec))?;
    if a.index >= splits.test.len() {
        return Err(Failure::new(
            1,
            format!("image index {} out of range for {} test images", a.index, splits.test.len()),
        ));
    }
    let taps = if a.taps.is_empty() { model.default_taps() } else { a.taps.clone() };
    let [c, h, w] = splits.test.image_shape();
    let input = Tensor::new(&[1, c, h, w], splits.test.image(a.index).to_vec())?;
    let maps = extract_feature_maps(&model, &input, &taps)?;
    create_dir(&a.out)?;
    let mut stats = format!("index={}\nlabel={}\n", a.index, splits.test.labels[a.index]);
    for (tap, t) in &maps {
        let s = t.shape();
        let (ch, mh, mw) = match s.len() {
            4 => (s[1], s[2], s[3]),
            _ => (s[1..].iter().product(), 1, 1),
        };
        for (i, map) in t.data().chunks_exact(mh * mw).enumerate() {
            let path = a.out.join(format!("{tap}_{i}.pgm"));
            write(&path, pgm::encode(mw, mh, &pgm::normalize(map)))?;
        }
        let inactive = t.data().iter().filter(|&&v| v <= 0.0).count();
        let mean_abs = t.data().iter().map(|v| v.abs() as f64).sum::<f64>() / t.numel() as f64;
        let _ = write!(
            stats,
            "{tap}.channels={ch}\n{tap}.height={mh}\n{tap}.width={mw}\n{tap}.sparsity={:.6}\n{tap}.mean_abs={mean_abs:.6}\n",
            inactive as f64 / t.numel() as f64
        );
        println!("{tap}: {ch} maps of {mh}x{mw}");
    }
    write(&a.out.join("stats.txt"), stats)?;
    Ok(())
}

/// The group-setting grid: placement rows on the chosen variant, group-count
/// rows on the baseline.
pub const SETTINGS: [(&str, bool, &str, &str); 8] = [
    ("none", false, "8+4", "none"),
    ("block1", false, "8+4", "block1"),
    ("block3", false, "8+4", "block3"),
    ("both", false, "8+4", "both"),
    ("8+2", true, "8+2", "both"),
    ("8+4", true, "8+4", "both"),
    ("8+4&16+8", true, "8+4&16+8", "both"),
    ("4+4", true, "4+4", "both"),
];

pub fn ablate(a: &AblateArgs) -> Outcome {
    let known: Vec<&str> = SETTINGS.iter().map(|s| s.0).collect();
    if let Some(bad) = a.settings.iter().find(|s| !known.contains(&s.as_str())) {
        return Err(Failure::new(1, format!("unknown setting `{bad}`; available: {}", known.join(", "))));
    }
    let base = resolve_spec(&a.model, a.opts.preset, None)?;
    let dataset = dataset_of(&base);
    let cfg = train_config(&a.opts, dataset)?;
    let splits = load_data(&a.data, dataset)?;
    create_dir(&a.out)?;
    let mut csv = format!("setting,variant,params,{CSV_HEADER}\n");
    for &(name, baseline, groups, placement) in SETTINGS.iter().filter(|s| a.settings.is_empty() || a.settings.iter().any(|x| x == s.0)) {
        let mut spec = base.clone();
        if baseline {
            spec.set("variant", "baseline")?;
        }
        spec.groups = gmnet_core::arch::GroupProfile::preset(groups)?.with_placement(placement)?;
        spec.validate()?;
        println!("== {name}: {} groups {groups}, placement {placement}", spec.variant);
        let dir = a.out.join(name.replace('&', "_"));
        let (metrics, params) = run_training(&spec, &splits, &cfg, &dir)?;
        for r in &metrics.records {
            let _ = writeln!(csv, "{name},{},{params},{}", spec.variant, r.csv_row());
        }
    }
    write(&a.out.join("ablation.csv"), csv)?;
    println!("wrote {}", a.out.join("ablation.csv").display());
    Ok(())
}
