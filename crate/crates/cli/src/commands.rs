use std::fs;
use std::path::{Path, PathBuf};

use pcaps_core::analysis::{
    correlation_matrix, fgsm_attack, flatten_layer_filters, generalization_gap, FgsmReport,
};
use pcaps_core::data::{center_crop, fit_zca_on_sample, gcn, load_cifar10, Dataset, GcnConfig, Split};
use pcaps_core::gradcheck::run_suite;
use pcaps_core::model::checkpoint::scalar_width;
use pcaps_core::model::{audit_notes, audit_reference_counts, msra_init, Checkpoint, ModelConfig, Network};
use pcaps_core::perf::{batch_linearity, bench_training, format_table, speedup};
use pcaps_core::train::{self, evaluate, Augment, MetricLog, OptimizerKind, RunOptions, TrainConfig};
use pcaps_core::{Error, Result, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::datasets::{self, infer_kind, resolve_dir, ZCA_FILE, ZCA_SAMPLES};
use crate::manifest::{now_unix, RunManifest};
use crate::{
    AnalyzeArgs, BenchArgs, DatasetKind, EvalArgs, GradcheckArgs, ModelArgs, OptimizerArg,
    Precision, PrepArgs, SplitArg, TrainArgs,
};

pub struct Context {
    pub seed: u64,
    pub threads: usize,
    pub argv: Vec<String>,
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        context: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

/// Output directory a checkpoint belongs to (`run/checkpoints/x.ckpt` and
/// `run/final.ckpt` both map to `run`).
fn run_dir_of(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    if parent.file_name().is_some_and(|n| n == "checkpoints") {
        parent.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        parent.to_path_buf()
    }
}

fn recipe(kind: DatasetKind, a: &TrainArgs, seed: u64) -> TrainConfig {
    let mut cfg = match kind {
        DatasetKind::Mnist => TrainConfig::mnist(),
        DatasetKind::Cifar10 => TrainConfig::cifar(),
    };
    cfg.seed = seed;
    if let Some(v) = a.iters {
        cfg.max_iterations = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.base_lr = v;
    }
    if let Some(v) = a.decay_every {
        cfg.decay_every = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = a.eval_train {
        cfg.eval_train_samples = v;
    }
    if a.eval_test.is_some() {
        cfg.eval_test_samples = a.eval_test;
    }
    if a.checkpoint_every.is_some() {
        cfg.checkpoint_every = a.checkpoint_every;
    }
    cfg.optimizer = match a.optimizer {
        OptimizerArg::Adam => OptimizerKind::Adam,
        OptimizerArg::Sgd => OptimizerKind::Sgd,
    };
    cfg.clip_norm = a.clip_norm;
    if a.no_augment {
        cfg.augment = Augment::None;
    }
    cfg
}

pub fn train(ctx: &Context, a: TrainArgs) -> Result<()> {
    let config = a.model.resolve("p2")?;
    let kind = a.data.dataset.unwrap_or_else(|| infer_kind(&config));
    let cfg = recipe(kind, &a, ctx.seed);
    cfg.validate()?;
    fs::create_dir_all(&a.out_dir).map_err(|e| io(&a.out_dir, e))?;

    let saved_zca = a.out_dir.join(ZCA_FILE);
    let zca_in = match (&a.data.zca, &a.resume) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(_)) => Some(saved_zca.clone()),
        (None, None) => None,
    };
    let data = datasets::load(&a.data, &config, true, true, ctx.seed, zca_in.as_deref())?;
    if let Some(z) = &data.zca {
        z.save(&saved_zca)?;
    }
    let mut train_set = data.train.expect("requested");
    let test_set = data.test.expect("requested");
    if let Some(n) = a.train_limit {
        train_set = train_set.take(n);
    }

    let settings = json!({
        "train": cfg,
        "dataset": format!("{kind:?}").to_lowercase(),
        "precision": format!("{:?}", a.precision).to_lowercase(),
        "train_limit": a.train_limit,
        "train_images": train_set.len(),
        "test_images": test_set.len(),
        "resume": a.resume.as_ref().map(|p| p.display().to_string()),
    });
    let mut manifest = RunManifest::new("train", &ctx.argv, ctx.seed, ctx.threads, Some(config.to_toml()), settings);
    for f in &data.files {
        manifest.add_input(f)?;
    }
    manifest.write(&a.out_dir)?;

    eprintln!(
        "training {} ({} parameters) on {} {kind:?} images for {} iterations",
        config.name,
        config.count_parameters(),
        train_set.len(),
        cfg.max_iterations
    );
    match a.precision {
        Precision::F32 => run_training::<f32>(config, &train_set, &test_set, &cfg, &a)?,
        Precision::F64 => run_training::<f64>(config, &train_set, &test_set, &cfg, &a)?,
    }
    manifest.finished_unix = Some(now_unix());
    manifest.write(&a.out_dir)
}

fn run_training<T: Scalar>(
    config: ModelConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    a: &TrainArgs,
) -> Result<()> {
    let network = Network::new(config.clone(), msra_init::<T>(&config, cfg.seed))?;
    let resume = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::<T>::load(path)?;
            let metrics = a.out_dir.join("metrics.csv");
            let log = match fs::read_to_string(&metrics) {
                Ok(text) => MetricLog::from_csv(&text)?,
                Err(_) => MetricLog::default(),
            };
            Some((ck, log))
        }
        None => None,
    };
    let quiet = a.quiet;
    let mut progress = |r: &train::MetricRecord| {
        if !quiet {
            eprintln!(
                "iter {:>6} {:<5} loss {:.5} acc {:.4} lr {:.6}",
                r.iteration, r.split, r.loss, r.accuracy, r.lr
            );
        }
    };
    let out = train::train(
        network,
        train_set,
        test_set,
        cfg,
        RunOptions {
            out_dir: Some(&a.out_dir),
            resume,
            progress: Some(&mut progress),
        },
    )?;
    if let Some(r) = out.log.last(Split::Test) {
        println!(
            "final test accuracy {:.4} (error {:.2}%) loss {:.5} at iteration {}",
            r.accuracy,
            100.0 * (1.0 - r.accuracy),
            r.loss,
            r.iteration
        );
    }
    Ok(())
}

fn load_network<T: Scalar>(path: &Path) -> Result<(Network<T>, u64)> {
    let ck = Checkpoint::<T>::load(path)?;
    Ok((Network::new(ck.config, ck.params)?, ck.seed))
}

fn checkpoint_config(path: &Path) -> Result<(ModelConfig, u64)> {
    Ok(match scalar_width(path)? {
        4 => {
            let c = Checkpoint::<f32>::load(path)?;
            (c.config, c.seed)
        }
        8 => {
            let c = Checkpoint::<f64>::load(path)?;
            (c.config, c.seed)
        }
        w => return Err(Error::Checkpoint(format!("unsupported scalar width {w}"))),
    })
}

fn default_zca(data: &crate::DataArgs, checkpoint: &Path) -> PathBuf {
    data.zca.clone().unwrap_or_else(|| run_dir_of(checkpoint).join(ZCA_FILE))
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let (config, seed) = checkpoint_config(&a.checkpoint)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let zca = default_zca(&a.data, &a.checkpoint);
    let data = datasets::load(&a.data, &config, split == Split::Train, split == Split::Test, seed, Some(&zca))?;
    let ds = match split {
        Split::Train => data.train,
        Split::Test => data.test,
    }
    .expect("requested");
    let ev = match scalar_width(&a.checkpoint)? {
        4 => evaluate(&load_network::<f32>(&a.checkpoint)?.0, &ds, a.limit)?,
        _ => evaluate(&load_network::<f64>(&a.checkpoint)?.0, &ds, a.limit)?,
    };
    println!(
        "{split} accuracy {:.4} error {:.2}% loss {:.5} on {} images",
        ev.accuracy,
        100.0 * (1.0 - ev.accuracy),
        ev.loss,
        ev.count
    );
    Ok(())
}

pub fn gradcheck(ctx: &Context, a: GradcheckArgs) -> Result<()> {
    let config = a.model.resolve("toy")?;
    let rows = run_suite(&config, ctx.seed, a.max_per_layer)?;
    println!("{:<32} {:>8} {:>12} {:>10}  result", "check", "entries", "max rel err", "tolerance");
    for r in &rows {
        println!(
            "{:<32} {:>8} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.checked,
            r.max_rel_err,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(path) = &a.json {
        write_file(path, &serde_json::to_string_pretty(&rows).expect("serializes"))?;
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} gradient check(s) failed")));
    }
    Ok(())
}

pub fn params(a: &ModelArgs) -> Result<()> {
    let config = a.resolve("p2")?;
    let chain = config.shape_chain()?;
    println!("model {}", config.name);
    for (i, (layer, out)) in config.layers.iter().zip(&chain).enumerate() {
        let c = out.capsule;
        println!(
            "layer {:<2} {:<36} -> {}x{}x{}x({}x{}x{})  {:>8}",
            i + 1,
            layer.to_string(),
            out.channels,
            out.height,
            out.width,
            c.g,
            c.m,
            c.n,
            layer.param_count()
        );
    }
    println!("total {}", config.count_parameters());
    println!();
    println!("reference audit:");
    let rows = audit_reference_counts();
    for r in &rows {
        println!(
            "  {:<3} computed {:>7}  quoted {:>6}  {}",
            r.preset,
            r.computed,
            r.reference,
            if r.consistent { "consistent" } else { "mismatch" }
        );
    }
    for note in audit_notes(&rows) {
        println!("  note: {note}");
    }
    Ok(())
}

/// `50,100,150,200` or `lo..hi` (four even steps).
pub fn parse_batches(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("cannot parse batch list {spec:?}"));
    if let Some((lo, hi)) = spec.split_once("..") {
        let lo: usize = lo.trim().parse().map_err(|_| bad())?;
        let hi: usize = hi.trim().parse().map_err(|_| bad())?;
        if lo == 0 || hi < lo {
            return Err(bad());
        }
        let mut out: Vec<usize> = (0..4).map(|i| lo + (hi - lo) * i / 3).collect();
        out.dedup();
        return Ok(out);
    }
    let out: Vec<usize> = spec
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if out.is_empty() || out.contains(&0) {
        return Err(bad());
    }
    Ok(out)
}

pub fn bench(ctx: &Context, a: BenchArgs) -> Result<()> {
    let config = a.model.resolve("p2")?;
    let batches = parse_batches(&a.batch)?;
    let mut threads = a.thread_counts.clone().unwrap_or_else(|| vec![1, ctx.threads]);
    threads.sort_unstable();
    threads.dedup();
    if threads.contains(&0) {
        return Err(Error::Config("thread counts must be positive".into()));
    }
    let rows = bench_training(&config, &batches, &threads, a.iters, ctx.seed)?;
    let table = format_table(&rows);
    println!("{} ({} parameters), {} timed iterations per cell", config.name, config.count_parameters(), a.iters);
    print!("{table}");
    let mut summary = Vec::new();
    for &t in &threads {
        if let Some(r) = batch_linearity(&rows, t) {
            let line = format!("linearity at {t} thread(s): time ratio / batch ratio = {r:.3}");
            println!("{line}");
            summary.push(line);
        }
    }
    let largest = *batches.iter().max().expect("non-empty");
    for &t in threads.iter().filter(|&&t| t > 1) {
        if let Some(s) = speedup(&rows, largest, t) {
            let line = format!("speedup at batch {largest}, {t} threads vs 1: {s:.2}x");
            println!("{line}");
            summary.push(line);
        }
    }
    if let Some(dir) = &a.out_dir {
        let settings = json!({"batches": batches, "thread_counts": threads, "iterations": a.iters});
        RunManifest::new("bench", &ctx.argv, ctx.seed, ctx.threads, Some(config.to_toml()), settings).write(dir)?;
        write_file(&dir.join("bench.json"), &serde_json::to_string_pretty(&rows).expect("serializes"))?;
        write_file(&dir.join("bench.md"), &format!("{table}\n{}\n", summary.join("\n")))?;
    }
    Ok(())
}

pub fn analyze(ctx: &Context, a: AnalyzeArgs) -> Result<()> {
    match scalar_width(&a.checkpoint)? {
        4 => analyze_with::<f32>(ctx, &a),
        _ => analyze_with::<f64>(ctx, &a),
    }
}

fn analyze_with<T: Scalar>(ctx: &Context, a: &AnalyzeArgs) -> Result<()> {
    let (net, ck_seed) = load_network::<T>(&a.checkpoint)?;
    let config = net.config().clone();
    let out = &a.out_dir;
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let settings = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "gap_window": a.gap_window,
        "fgsm_samples": if a.no_fgsm { None } else { Some(a.fgsm_samples) },
        "epsilons": a.epsilons,
    });
    let mut manifest = RunManifest::new("analyze", &ctx.argv, ctx.seed, ctx.threads, Some(config.to_toml()), settings);
    manifest.add_input(&a.checkpoint)?;

    for (i, k) in net.params().kernels.iter().enumerate() {
        let m = flatten_layer_filters(k)?;
        write_file(&out.join(format!("layer{}_filters.csv", i + 1)), &m.to_csv())?;
        if m.rows < 2 || m.cols < 2 {
            println!("layer {}: {}x{} filter matrix, correlation skipped", i + 1, m.rows, m.cols);
            continue;
        }
        let c = correlation_matrix(&m)?;
        write_file(&out.join(format!("layer{}_correlation.csv", i + 1)), &c.matrix.to_csv())?;
        let off: Vec<f64> = (0..c.matrix.rows)
            .flat_map(|r| (0..c.matrix.cols).filter(move |&q| q != r).map(move |q| (r, q)))
            .map(|(r, q)| c.matrix.at(r, q).abs())
            .collect();
        let mean_abs = off.iter().sum::<f64>() / off.len().max(1) as f64;
        println!(
            "layer {}: {}x{} filter matrix, mean |r| off-diagonal {:.3}{}",
            i + 1,
            m.rows,
            m.cols,
            mean_abs,
            if c.has_zero_variance() { " (zero-variance rows present)" } else { "" }
        );
    }

    let metrics = a.metrics.clone().unwrap_or_else(|| run_dir_of(&a.checkpoint).join("metrics.csv"));
    match fs::read_to_string(&metrics) {
        Ok(text) => {
            let gap = generalization_gap(&MetricLog::from_csv(&text)?, a.gap_window)?;
            write_file(&out.join("gap.csv"), &gap.to_csv())?;
            write_file(&out.join("gap.json"), &serde_json::to_string_pretty(&gap).expect("serializes"))?;
            manifest.add_input(&metrics)?;
            println!(
                "generalization gap (train - test loss): terminal mean {:.5} over {} points",
                gap.terminal_mean, gap.window
            );
        }
        Err(e) if a.metrics.is_some() => return Err(io(&metrics, e)),
        Err(_) => println!("no metric log at {}, gap skipped", metrics.display()),
    }

    if !a.no_fgsm {
        let zca = default_zca(&a.data, &a.checkpoint);
        let data = datasets::load(&a.data, &config, false, true, ck_seed, Some(&zca))?;
        let test = data.test.expect("requested").take(a.fgsm_samples);
        let s = config.input_shape;
        let (h, w, c) = (s.height, s.width, s.capsule.len() * s.channels);
        let test = if (test.height, test.width) == (h, w) {
            test
        } else {
            let dims = (test.height, test.width, test.channels);
            test.map_images((h, w, c), |im| center_crop(im, dims, (h, w)))?
        };
        // raw pixels stay in [0, 1]; whitened inputs are unbounded
        let clip = match data.kind {
            DatasetKind::Mnist => Some((0.0, 1.0)),
            DatasetKind::Cifar10 => None,
        };
        let idx: Vec<usize> = (0..test.len()).collect();
        let (x, labels) = test.batch::<T>(&idx);
        let mut reports: Vec<FgsmReport> = Vec::new();
        println!("{:>8} {:>8} {:>10} {:>12}", "epsilon", "n", "clean acc", "attacked acc");
        for &eps in &a.epsilons {
            let r = fgsm_attack(&net, &x, &labels, eps, clip)?.report;
            println!("{:>8.3} {:>8} {:>10.4} {:>12.4}", r.epsilon, r.n, r.clean_accuracy, r.adversarial_accuracy);
            reports.push(r);
        }
        write_file(&out.join("fgsm.json"), &serde_json::to_string_pretty(&reports).expect("serializes"))?;
        for f in &data.files {
            manifest.add_input(f)?;
        }
    }
    manifest.finished_unix = Some(now_unix());
    manifest.write(out)
}

pub fn prep(ctx: &Context, a: PrepArgs) -> Result<()> {
    let dir = resolve_dir(a.data_dir.as_deref(), DatasetKind::Cifar10);
    let cfg = GcnConfig::default();
    let raw = load_cifar10(&dir, Split::Train)?;
    let dims = (raw.height, raw.width, raw.channels);
    let ds = raw.map_images(dims, |im| gcn(im, &cfg))?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let samples = if a.samples == 0 { ZCA_SAMPLES } else { a.samples };
    let zca = fit_zca_on_sample(&ds, samples, &mut rng)?;
    zca.save(&a.out)?;
    println!(
        "fitted whitening on {} of {} images ({}-dimensional) -> {}",
        samples.min(ds.len()),
        ds.len(),
        zca.dim,
        a.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_lists() {
        assert_eq!(parse_batches("50..200").unwrap(), [50, 100, 150, 200]);
        assert_eq!(parse_batches("8, 16").unwrap(), [8, 16]);
        assert!(parse_batches("0,4").is_err());
        assert!(parse_batches("200..50").is_err());
        assert!(parse_batches("x").is_err());
    }

    #[test]
    fn run_dirs() {
        assert_eq!(run_dir_of(Path::new("r/checkpoints/iter_0000010.ckpt")), PathBuf::from("r"));
        assert_eq!(run_dir_of(Path::new("r/final.ckpt")), PathBuf::from("r"));
    }
}
