//! `ladder`: analysis, memory benchmarks, training and inference for ladder
//! segmentation models.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ladder_core::analyzer::CostReport;
use ladder_core::autograd::{
    compare_policies, measure_peak, CheckpointPolicy, MemoryReport, ParamStore,
};
use ladder_core::dataio::{
    colorize, generate_synthetic, read_ppm, write_ppm, Dataset, LabelMap, SynthSpec, PALETTE,
};
use ladder_core::error::Error;
use ladder_core::kernels::gradcheck::{
    check_kernel, Kernel, GRADCHECK_TOLERANCE, GRADCHECK_TRIALS,
};
use ladder_core::nets::{build, ArchSpec};
use ladder_core::rng::SplitMix64;
use ladder_core::tensor::Tensor;
use ladder_core::trainer::augment::AugmentMode;
use ladder_core::trainer::checkpoint;
use ladder_core::trainer::{
    argmax_classes, evaluate, log_csv, multi_scale_probs, predict_labels, train, Config,
    MultiScale, MS_SCALES,
};

#[derive(Parser, Debug)]
#[command(
    name = "ladder",
    version,
    about = "Ladder-style DenseNet segmentation toolkit"
)]
struct Cli {
    /// Worker threads for kernel parallelism (1 gives bitwise-reproducible baselines).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-block parameter and MAC counts with analytic policy caches.
    Analyze {
        #[arg(long)]
        spec: PathBuf,
        /// Input resolution HxW (default 1024x1024).
        #[arg(long, value_parser = parse_res)]
        res: Option<(usize, usize)>,
    },
    /// Measured peak memory and step time per checkpoint policy.
    Membench {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_parser = parse_res)]
        res: (usize, usize),
        #[arg(long)]
        batch: usize,
        /// A policy name, `custom:...`, or `all`.
        #[arg(long, default_value = "all")]
        policy: String,
    },
    /// Finite-difference checks of the kernel gradients.
    Gradcheck {
        /// Kernel name or `all`.
        #[arg(long, default_value = "all")]
        kernel: String,
        #[arg(long, default_value_t = GRADCHECK_TRIALS)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Gradient equivalence of every checkpoint policy against the baseline.
    Ckptcheck {
        #[arg(long)]
        spec: PathBuf,
        /// Input resolution (default twice the downsampling factor).
        #[arg(long, value_parser = parse_res)]
        res: Option<(usize, usize)>,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes a synthetic shapes dataset.
    MakeDataset {
        #[arg(long)]
        out: PathBuf,
        /// Synthetic data spec, or a full config with a `data` section.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Trains a model and writes config.json, train_log.csv and checkpoint/
    Train(TrainArgs),
    /// mIoU on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Multi-scale inference with horizontal flips.
        #[arg(long)]
        ms: bool,
        /// Comma-separated scales for --ms.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        /// Disables the flips of --ms.
        #[arg(long)]
        no_flip: bool,
    },
    /// Colorized prediction for one PPM image.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ms: bool,
    },
}

/// Flags take precedence over the config file, which takes precedence over defaults.
#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    policy: Option<String>,
    /// none | flip | flip_crop | flip_crop_scale
    #[arg(long)]
    augment: Option<String>,
    /// Trains without auxiliary heads.
    #[arg(long)]
    no_aux: bool,
}

/// Exit code 1 for invalid inputs, 2 for failures while running.
enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Spec(_)
            | Error::InvalidArgument(_)
            | Error::Policy(_)
            | Error::Format(_)
            | Error::Json(_)
            | Error::Shape(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Invalid(msg.into())
}

fn parse_res(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{}`", s))?;
    let h = h.trim().parse::<usize>().map_err(|e| e.to_string())?;
    let w = w.trim().parse::<usize>().map_err(|e| e.to_string())?;
    if h == 0 || w == 0 {
        return Err("resolution must be positive".into());
    }
    Ok((h, w))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {}", path.display(), e)))
}

/// An architecture file, or a full config whose `arch` section is used.
fn load_arch(path: &Path) -> Result<ArchSpec, Failure> {
    let text = read_text(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {}", path.display(), e)))?;
    if value.get("arch").is_some() {
        Ok(Config::from_json(&text)?.arch)
    } else {
        Ok(ArchSpec::from_json(&text)?)
    }
}

fn parse_policy(s: &str) -> Result<CheckpointPolicy, Failure> {
    s.parse::<CheckpointPolicy>()
        .map_err(|e| invalid(e.to_string()))
}

/// Removes a freshly created output path if the command fails.
struct Cleanup {
    path: PathBuf,
    armed: bool,
}

impl Cleanup {
    fn new(path: &Path) -> Self {
        Cleanup {
            path: path.to_path_buf(),
            armed: !path.exists(),
        }
    }

    fn disarm(mut self) {
        self.armed = false;
    }
}

impl Drop for Cleanup {
    fn drop(&mut self) {
        if self.armed {
            let _ = if self.path.is_dir() {
                fs::remove_dir_all(&self.path)
            } else {
                fs::remove_file(&self.path)
            };
        }
    }
}

fn analyze(spec: &Path, res: Option<(usize, usize)>) -> Outcome {
    let arch = load_arch(spec)?;
    let (h, w) = res.unwrap_or((1024, 1024));
    let report = CostReport::new(&arch, h, w)?;
    print!("{}", report.to_table());
    println!();
    print!("{}", report.to_csv());
    Ok(())
}

fn membench(spec: &Path, (h, w): (usize, usize), batch: usize, policy: &str) -> Outcome {
    let arch = load_arch(spec)?;
    if batch == 0 {
        return Err(invalid("batch must be positive"));
    }
    let policies = if policy == "all" {
        CheckpointPolicy::TABLE.to_vec()
    } else {
        vec![parse_policy(policy)?]
    };
    let g = build(&arch, batch, h, w)?;
    let store = ParamStore::init(&g.graph, 0);
    let mut rng = SplitMix64::new(1);
    let x = Tensor::from_fn(&[batch, 3, h, w], |_| rng.uniform(-1.0, 1.0) as f32);
    let mut reports: Vec<(CheckpointPolicy, MemoryReport)> = Vec::new();
    for p in &policies {
        let mut s = store.clone();
        reports.push((p.clone(), measure_peak(&g.graph, &mut s, x.clone(), p)?));
    }
    println!(
        "{:<34} {:>12} {:>10} {:>10} {:>9}",
        "policy", "peak_MB", "recomputes", "fps", "max_batch_5GB"
    );
    for (p, r) in &reports {
        println!(
            "{:<34} {:>12.1} {:>10} {:>10.3} {:>9}",
            p.label(),
            r.peak_total_mb(),
            r.recompute_kernel_invocations,
            r.fps(),
            r.max_batch_for(5 << 30)
        );
    }
    println!();
    println!("{}", MemoryReport::CSV_HEADER);
    for (_, r) in &reports {
        println!("{}", r.csv_row());
    }
    Ok(())
}

fn gradcheck(kernel: &str, trials: usize, seed: u64) -> Outcome {
    let kernels = if kernel == "all" {
        Kernel::ALL.to_vec()
    } else {
        vec![kernel
            .parse::<Kernel>()
            .map_err(|e| invalid(e.to_string()))?]
    };
    let mut failed = 0;
    for k in kernels {
        let r = check_kernel(k, trials, seed)?;
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<24} trials={} max_rel_error={:.3e} tol={:.0e} {}",
            k.name(),
            r.trials,
            r.max_rel_error,
            GRADCHECK_TOLERANCE,
            status
        );
        failed += !r.passed() as usize;
    }
    if failed > 0 {
        return Err(invalid(format!(
            "{} kernel(s) failed the gradient check",
            failed
        )));
    }
    Ok(())
}

fn ckptcheck(
    spec: &Path,
    res: Option<(usize, usize)>,
    batch: usize,
    seed: u64,
    threads: usize,
) -> Outcome {
    let arch = load_arch(spec)?;
    let d = arch.downsample_factor;
    let (h, w) = res.unwrap_or((2 * d, 2 * d));
    let g = build(&arch, batch, h, w)?;
    let store = ParamStore::init(&g.graph, seed);
    let mut rng = SplitMix64::derive(seed, &[7]);
    let x = Tensor::from_fn(&[batch, 3, h, w], |_| rng.uniform(-1.0, 1.0) as f32);
    let diffs = compare_policies(&g.graph, &store, &x, &CheckpointPolicy::TABLE, seed)?;
    // bitwise agreement is only guaranteed with a single worker
    let bitwise = threads == 1;
    let mut failed = 0;
    for d in &diffs {
        let ok = if bitwise {
            d.max_abs_diff == 0.0
        } else {
            d.max_rel_diff <= 1e-6
        };
        println!(
            "policy={} max_abs_diff={} max_rel_diff={:.3e} recomputes={} {}",
            d.policy.name(),
            d.max_abs_diff,
            d.max_rel_diff,
            d.recomputes,
            if ok { "ok" } else { "MISMATCH" }
        );
        failed += !ok as usize;
    }
    if failed > 0 {
        return Err(invalid(format!(
            "{} policy(ies) disagree with the baseline",
            failed
        )));
    }
    Ok(())
}

/// A synthetic data spec, or a full config whose `data` section is used.
fn load_synth(path: Option<&Path>) -> Result<SynthSpec, Failure> {
    let Some(path) = path else {
        return Ok(SynthSpec::default());
    };
    let text = read_text(path)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {}", path.display(), e)))?;
    let spec = if value.get("data").is_some()
        || value.get("arch").is_some()
        || value.get("train").is_some()
    {
        Config::from_json(&text)?.data
    } else {
        serde_json::from_value::<SynthSpec>(value).map_err(|e| invalid(e.to_string()))?
    };
    spec.validate()?;
    Ok(spec)
}

fn make_dataset(out: &Path, spec: Option<&Path>) -> Outcome {
    let spec = load_synth(spec)?;
    let guard = Cleanup::new(out);
    let meta = generate_synthetic(&spec, out)?;
    guard.disarm();
    println!("images={}", meta.train_count + meta.val_count);
    println!(
        "mean_pixel={:.6},{:.6},{:.6}",
        meta.mean_pixel[0], meta.mean_pixel[1], meta.mean_pixel[2]
    );
    println!("out={}", out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Outcome {
    let mut cfg = Config::from_json(&read_text(&a.config)?)?;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.train.batch = v;
    }
    if let Some(v) = a.lr {
        cfg.train.base_lr = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if let Some(p) = &a.policy {
        cfg.train.policy = parse_policy(p)?;
    }
    if let Some(m) = &a.augment {
        cfg.train.augment =
            serde_json::from_value::<AugmentMode>(serde_json::Value::String(m.clone()))
                .map_err(|e| invalid(e.to_string()))?;
    }
    if a.no_aux {
        cfg.arch.aux_heads = false;
    }
    cfg.validate()?;
    let data = Dataset::open(&a.data)?;
    let guard = Cleanup::new(&a.out);
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("config.json"), cfg.to_json() + "\n")?;
    let outcome = train(&cfg, &data, |e| eprintln!("{}", e.csv_row()))?;
    fs::write(a.out.join("train_log.csv"), log_csv(&outcome.log))?;
    let manifest = checkpoint::save(&outcome.model, &a.out.join("checkpoint"), Some(&data.meta))?;
    guard.disarm();
    if let Some(m) = &outcome.final_miou {
        println!("final_miou={:.6}", m.mean);
    }
    println!("checksum={}", manifest.checksum);
    println!(
        "checkpoint={}",
        a.out
            .join("checkpoint")
            .join(checkpoint::MANIFEST)
            .display()
    );
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, ms: bool, scales: Option<Vec<f64>>, no_flip: bool) -> Outcome {
    let mut model = checkpoint::load(ckpt)?;
    let ds = Dataset::open(data)?;
    if ds.val().is_empty() {
        return Err(invalid("dataset has no validation images"));
    }
    if ds.meta.num_classes != model.spec.num_classes {
        return Err(invalid(format!(
            "dataset has {} classes, model {}",
            ds.meta.num_classes, model.spec.num_classes
        )));
    }
    let settings = MultiScale {
        scales: scales.unwrap_or_else(|| MS_SCALES.to_vec()),
        flips: !no_flip,
    };
    if settings.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(invalid("scales must be positive"));
    }
    let conf = evaluate(
        &mut model,
        ds.val(),
        ds.meta.mean_pixel,
        ms.then_some(&settings),
    )?;
    let report = conf.miou()?;
    let mut out = String::new();
    for (c, iou) in report.per_class.iter().enumerate() {
        let name = ds
            .meta
            .class_names
            .get(c)
            .cloned()
            .unwrap_or_else(|| c.to_string());
        let v = iou
            .map(|v| format!("{:.6}", v))
            .unwrap_or_else(|| "absent".into());
        let _ = writeln!(out, "iou.{:02}.{}={}", c, name, v);
    }
    let _ = writeln!(out, "miou={:.6}", report.mean);
    let _ = writeln!(out, "pixels={}", conf.total());
    print!("{}", out);
    Ok(())
}

fn infer(ckpt: &Path, image: &Path, out: &Path, ms: bool) -> Outcome {
    let manifest = checkpoint::read_manifest(ckpt)?;
    let mut model = checkpoint::load(ckpt)?;
    let (mean, palette) = match &manifest.data {
        Some(m) => (m.mean_pixel, m.palette.clone()),
        None => ([0.5; 3], PALETTE.to_vec()),
    };
    if palette.len() < model.spec.num_classes {
        return Err(invalid(format!(
            "palette has {} colours for {} classes",
            palette.len(),
            model.spec.num_classes
        )));
    }
    let img = read_ppm(image)?;
    let pred = if ms {
        argmax_classes(&multi_scale_probs(
            &mut model, &img, mean, &MS_SCALES, true,
        )?)?
    } else {
        predict_labels(&mut model, &img, mean)?
    };
    let labels = LabelMap {
        height: img.height,
        width: img.width,
        data: pred,
    };
    let guard = Cleanup::new(out);
    write_ppm(out, &colorize(&labels, &palette)?)?;
    guard.disarm();
    Ok(())
}

fn dispatch(cli: Cli, threads: usize) -> Outcome {
    match cli.command {
        Command::Analyze { spec, res } => analyze(&spec, res),
        Command::Membench {
            spec,
            res,
            batch,
            policy,
        } => membench(&spec, res, batch, &policy),
        Command::Gradcheck {
            kernel,
            trials,
            seed,
        } => gradcheck(&kernel, trials, seed),
        Command::Ckptcheck {
            spec,
            res,
            batch,
            seed,
        } => ckptcheck(&spec, res, batch, seed, threads),
        Command::MakeDataset { out, spec } => make_dataset(&out, spec.as_deref()),
        Command::Train(a) => run_train(&a),
        Command::Eval {
            checkpoint,
            data,
            ms,
            scales,
            no_flip,
        } => eval(&checkpoint, &data, ms, scales, no_flip),
        Command::Infer {
            checkpoint,
            image,
            out,
            ms,
        } => infer(&checkpoint, &image, &out, ms),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {}", e);
            return ExitCode::from(2);
        }
    };
    let threads = pool.current_num_threads();
    match pool.install(|| dispatch(cli, threads)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {}", m);
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {}", m);
            ExitCode::from(2)
        }
    }
}
