use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pnk::checkpoint::Checkpoint;
use pnk::checks;
use pnk::config::ExperimentConfig;
use pnk::data::{self, Dataset, DatasetSpec};
use pnk::metrics::{self, EvalReport};
use pnk::model::Detector;
use pnk::tensor::Tensor;
use pnk::train;
use pnk::{Error, Result};

#[derive(Parser)]
#[command(name = "pnk", version, about = "Pyramid-neck detection harness")]
struct Cli {
    /// INI experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Config override, `section.key=value`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shapes dataset.
    Synth(SynthArgs),
    /// Train a detector from the config.
    Train,
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Parameter, FLOP and latency report for the configured model.
    Bench(BenchArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
    /// Fractions of small, medium and large objects.
    #[arg(long, value_delimiter = ',')]
    mix: Option<Vec<f64>>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    max_objects: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file; the checkpoint config's validation split otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    #[arg(long, default_value_t = 0.65)]
    nms_iou: f64,
    /// Evaluate at 0.001 and 0.25 from the same predictions.
    #[arg(long)]
    threshold_study: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// Square input side; the config's image size otherwise.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 20)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check name or `all`.
    scope: String,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for o in &cli.overrides {
        let (lhs, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override {o:?} is not section.key=value")))?;
        let (s, k) = lhs
            .trim()
            .split_once('.')
            .ok_or_else(|| Error::Usage(format!("override {o:?} is not section.key=value")))?;
        cfg.set(s, k, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.into(),
        source,
    })
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut spec = DatasetSpec::new(cli.seed.unwrap_or(0), a.count, a.size);
    if let Some(m) = &a.mix {
        spec.mix = m
            .as_slice()
            .try_into()
            .map_err(|_| Error::Usage(format!("--mix needs three fractions, got {}", m.len())))?;
    }
    if let Some(n) = a.noise {
        spec.noise = n;
    }
    if let Some(m) = a.max_objects {
        spec.max_objects = m;
    }
    let (ds, stats) = data::generate(&spec)?;
    data::write_dataset(&a.out, &ds)?;
    let h = ds.band_histogram();
    let total = h.iter().sum::<usize>().max(1) as f64;
    println!(
        "event=synth out={} records={} objects={} skipped={}",
        a.out.display(),
        ds.len(),
        stats.objects,
        stats.skipped
    );
    println!(
        "bands small={} medium={} large={} small_pct={:.1} medium_pct={:.1} large_pct={:.1}",
        h[0],
        h[1],
        h[2],
        100.0 * h[0] as f64 / total,
        100.0 * h[1] as f64 / total,
        100.0 * h[2] as f64 / total
    );
    Ok(())
}

/// Writes to stdout and to a log file.
struct Tee {
    file: fs::File,
}

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stdout().write_all(buf)?;
        self.file.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stdout().flush()?;
        self.file.flush()
    }
}

fn train_cmd(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    create_dir(&cli.out_dir)?;
    let log_path = cli.out_dir.join("train.log");
    let file = fs::File::create(&log_path).map_err(|source| Error::Io { path: log_path, source })?;
    let mut log = Tee { file };
    let (train_ds, val_ds) = train::load_splits(&cfg)?;
    let (model, _) = Detector::build::<f32>(&cfg.model_spec(), cfg.train.seed)?;
    for line in model.neck.describe().lines() {
        let _ = writeln!(log, "graph {line}");
    }
    let out = train::train(&cfg, &train_ds, &val_ds, Some(&cli.out_dir), &mut log)?;
    let _ = writeln!(
        log,
        "event=done final_loss={:.9} best_val_ap50={:.4} best_epoch={}",
        out.final_loss(),
        out.best_ap50,
        out.best_epoch
    );
    Ok(())
}

fn check_classes(ds: &Dataset, num_classes: usize) -> Result<()> {
    match ds.annotations().iter().flatten().map(|a| a.class_id).max() {
        Some(c) if c >= num_classes => Err(Error::Config(format!(
            "dataset has class id {c} but the checkpoint model predicts {num_classes} classes"
        ))),
        _ => Ok(()),
    }
}

fn report_files(dir: &Path, stem: &str, r: &EvalReport) -> Result<()> {
    write_file(&dir.join(format!("{stem}.txt")), &format!("{}\n", r.to_kv()))?;
    write_file(&dir.join(format!("{stem}.csv")), &r.to_csv())
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (cfg, model, store) = ck.restore()?;
    let ds = match &a.data {
        Some(p) => data::read_dataset(p)?,
        None => train::load_splits(&cfg)?.1,
    };
    if ds.image_size % 32 != 0 {
        return Err(Error::Config(format!("image size {} is not a multiple of 32", ds.image_size)));
    }
    check_classes(&ds, cfg.model.num_classes)?;
    create_dir(&cli.out_dir)?;
    println!("event=eval checkpoint={} epoch={} images={}", a.checkpoint.display(), ck.epoch, ds.len());
    if a.threshold_study {
        let (low, high) = train::threshold_study(&model, &store, &ds, 0.001, 0.25, a.nms_iou)?;
        report_files(&cli.out_dir, "eval_conf0.001", &low)?;
        report_files(&cli.out_dir, "eval_conf0.25", &high)?;
        let row = |name: &str, r: &EvalReport| {
            println!(
                "row={name} AP={:.4} AP50={:.4} APs={:.4} APm={:.4} APl={:.4} detections={}",
                r.ap, r.ap50, r.ap_small, r.ap_medium, r.ap_large, r.num_detections
            )
        };
        row("0.001", &low);
        row("0.25", &high);
        println!(
            "row=delta AP={:.4} AP50={:.4} APs={:.4} APm={:.4} APl={:.4} detections={}",
            high.ap - low.ap,
            high.ap50 - low.ap50,
            high.ap_small - low.ap_small,
            high.ap_medium - low.ap_medium,
            high.ap_large - low.ap_large,
            high.num_detections as i64 - low.num_detections as i64
        );
        let mut rows = Vec::new();
        for r in [&low, &high] {
            let c = r.conf_threshold;
            rows.extend(r.rows().into_iter().map(|(k, v)| (format!("{k}@{c}"), v)));
        }
        write_file(&cli.out_dir.join("threshold_study.csv"), &metrics::to_csv(&rows))?;
    } else {
        let r = train::evaluate(&model, &store, &ds, a.conf, a.nms_iou)?;
        report_files(&cli.out_dir, "eval", &r)?;
        println!("{}", r.to_kv());
    }
    Ok(())
}

fn bench_cmd(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let size = a.size.unwrap_or(cfg.data.image_size);
    let (model, store) = Detector::build::<f32>(&cfg.model_spec(), cfg.train.seed)?;
    let shape = [a.batch, 3, size, size];
    let graph = metrics::trace(&model, &store, &shape)?;
    let params = metrics::count_params(&store);
    let flops = graph.total_flops();
    let lat = metrics::time_forward(&model, &store, &Tensor::<f32>::zeros(&shape), a.reps, a.warmup)?;
    println!(
        "event=bench neck={} upsample={:?} downsample={} conv={} input={}x{}x{}x{}",
        cfg.model.neck.name(),
        cfg.blocks.upsample,
        pnk::config::downsample_name(cfg.blocks.downsample),
        pnk::config::conv_name(cfg.blocks.conv),
        a.batch,
        3,
        size,
        size
    );
    println!("params={params} flops={flops}");
    println!(
        "latency_median_ms={:.3} latency_p95_ms={:.3} reps={} warmup={} hardware=\"{}\"",
        lat.median * 1e3,
        lat.p95 * 1e3,
        lat.samples.len(),
        a.warmup,
        lat.hardware
    );
    let p = metrics::params_by_scope(&store, 2);
    let f = metrics::flops_by_scope(&graph, 2);
    let mut keys: Vec<&String> = p.keys().chain(f.keys()).collect();
    keys.sort();
    keys.dedup();
    println!("{:<28} {:>10} {:>14}", "block", "params", "flops");
    let mut rows = vec![("params".to_string(), params as f64), ("flops".into(), flops as f64)];
    rows.push(("latency_median_s".into(), lat.median));
    rows.push(("latency_p95_s".into(), lat.p95));
    for k in keys {
        let (np, nf) = (p.get(k).copied().unwrap_or(0), f.get(k).copied().unwrap_or(0));
        println!("{k:<28} {np:>10} {nf:>14}");
        rows.push((format!("params:{k}"), np as f64));
        rows.push((format!("flops:{k}"), nf as f64));
    }
    create_dir(&cli.out_dir)?;
    write_file(&cli.out_dir.join("bench.csv"), &metrics::to_csv(&rows))
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<bool> {
    let t0 = std::time::Instant::now();
    let rows = checks::run_suite(&a.scope, a.seeds)?;
    print!("{}", checks::format_table(&rows));
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!("checks={} failed={failed} time_s={:.1}", rows.len(), t0.elapsed().as_secs_f64());
    Ok(failed == 0)
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.cmd {
        Cmd::Synth(a) => synth(cli, a).map(|_| true),
        Cmd::Train => train_cmd(cli).map(|_| true),
        Cmd::Eval(a) => eval_cmd(cli, a).map(|_| true),
        Cmd::Bench(a) => bench_cmd(cli, a).map(|_| true),
        Cmd::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error={} message=\"{e}\"", kind(&e));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Shape { .. } => "shape",
        Error::Config(_) => "config",
        Error::Usage(_) => "usage",
        Error::Format { .. } => "format",
        Error::NonFinite(_) => "non_finite",
        Error::Io { .. } => "io",
    }
}
