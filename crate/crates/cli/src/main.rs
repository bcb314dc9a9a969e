use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use msflow_core::data::{
    flow_to_color, generate_dataset, load_dataset, load_sample, read_flo, read_image, read_manifest, write_flo,
    write_image, write_manifest, DataError, MotionBounds, MotionSpec,
};
use msflow_core::evaluator::{EpeReport, BOUNDARY_THRESHOLD};
use msflow_core::model::{parse_key_values, predict, ModelConfig, ModelError, ModelParams};
use msflow_core::tensor::TensorError;
use msflow_core::trainer::{TrainConfig, TrainError, TrainEvent, Trainer};
use msflow_core::verify::{network_suite, operation_suite};

#[derive(Parser)]
#[command(name = "msflow", version, about = "Multi-scale correlation optical flow")]
struct Cli {
    /// Seed for data generation, initialization and batch sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` settings file; command-line flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic image pairs with exact flow and a manifest.
    GenData(GenDataArgs),
    /// Train on a manifest and write checkpoints and a metrics log.
    Train(TrainArgs),
    /// Predict flow for every pair in a manifest, or for one pair.
    Predict(PredictArgs),
    /// Compare predicted flow files against ground truth.
    Eval(EvalArgs),
    /// Render a flow file as a color-coded image.
    Viz(VizArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Translation bound in pixels.
    #[arg(long)]
    max_translation: Option<f64>,
    #[arg(long)]
    max_rotation: Option<f64>,
    #[arg(long)]
    max_scale_delta: Option<f64>,
    /// Every pair is an exact copy with zero flow.
    #[arg(long)]
    identity: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Start from these weights instead of a seeded initialization.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Multiplier on every schedule length.
    #[arg(long, value_name = "S")]
    scale_factor: Option<f64>,
    /// Weight of the reconstruction term in the second phase; 0 disables it.
    #[arg(long, value_name = "V")]
    lambda: Option<f64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Constant learning rate in place of the schedule.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    no_augment: bool,
    /// Architecture preset: `default` or `tiny`.
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
    /// Pairs to predict; writes `pred_00000.flo`, ... into `--out`.
    #[arg(long, value_name = "PATH", conflicts_with_all = ["image_a", "image_b"])]
    manifest: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_name = "PATH", requires = "image_b")]
    image_a: Option<PathBuf>,
    #[arg(long, value_name = "PATH", requires = "image_a")]
    image_b: Option<PathBuf>,
    /// Architecture file; defaults to `model.cfg` beside the checkpoint.
    #[arg(long, value_name = "PATH")]
    model_config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth manifest.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,
    /// Directory holding `pred_00000.flo`, ... in manifest order.
    #[arg(long, value_name = "DIR")]
    pred: PathBuf,
    /// Writes `report.txt` and `report.kv` here.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Motion-boundary threshold on the flow gradient magnitude.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long, value_name = "PATH")]
    flow: PathBuf,
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Magnitude mapped to full saturation; defaults to the 99th percentile.
    #[arg(long)]
    max_magnitude: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Skip the per-operation checks.
    #[arg(long)]
    network_only: bool,
    #[arg(long)]
    preset: Option<String>,
}

#[derive(Debug, Clone, Copy)]
enum Exit {
    Usage = 1,
    Data = 2,
    Numeric = 3,
}

struct Failure {
    exit: Exit,
    error: anyhow::Error,
}

type CliResult<T = ()> = Result<T, Failure>;

trait Classify<T> {
    fn or_exit(self, exit: Exit) -> CliResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn or_exit(self, exit: Exit) -> CliResult<T> {
        self.map_err(|e| Failure { exit, error: e.into() })
    }
}

fn fail<T>(exit: Exit, error: anyhow::Error) -> CliResult<T> {
    Err(Failure { exit, error })
}

fn model_exit(e: &ModelError) -> Exit {
    match e {
        ModelError::Config(_) | ModelError::Param(_) => Exit::Usage,
        ModelError::Tensor(TensorError::NonFinite(_)) => Exit::Numeric,
        _ => Exit::Data,
    }
}

fn train_exit(e: &TrainError) -> Exit {
    match e {
        TrainError::Config(_) => Exit::Usage,
        TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. } => Exit::Numeric,
        TrainError::Tensor(TensorError::NonFinite(_)) => Exit::Numeric,
        TrainError::Model(m) => model_exit(m),
        _ => Exit::Data,
    }
}

/// Settings resolved from defaults, then `--config`, then flags.
struct Settings {
    model: ModelConfig,
    train: TrainConfig,
    gen: GenSettings,
    tau: f64,
    model_keys_set: bool,
}

struct GenSettings {
    count: usize,
    height: usize,
    width: usize,
    bounds: MotionBounds,
    identity: bool,
    seed: u64,
}

impl Settings {
    fn load(cli: &Cli) -> CliResult<Self> {
        let mut s = Settings {
            model: ModelConfig::tiny(),
            train: TrainConfig::default(),
            gen: GenSettings {
                count: 200,
                height: 64,
                width: 64,
                bounds: MotionBounds::default(),
                identity: false,
                seed: 0,
            },
            tau: BOUNDARY_THRESHOLD,
            model_keys_set: false,
        };
        if let Some(path) = &cli.config {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .or_exit(Exit::Data)?;
            let pairs = parse_key_values(&text)
                .map_err(|e| anyhow!("{}: {e}", path.display()))
                .or_exit(Exit::Usage)?;
            for (key, value) in pairs {
                s.apply(&key, &value)
                    .with_context(|| format!("{}", path.display()))
                    .or_exit(Exit::Usage)?;
            }
        }
        if let Some(seed) = cli.seed {
            s.train.seed = seed;
            s.gen.seed = seed;
        }
        Ok(s)
    }

    fn apply(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> anyhow::Result<V>
        where
            V::Err: std::error::Error + Send + Sync + 'static,
        {
            value.parse().with_context(|| format!("{key} = {value}"))
        }
        if key == "seed" {
            self.gen.seed = num(key, value)?;
        }
        if self.model.apply(key, value)? {
            self.model_keys_set = true;
            return Ok(());
        }
        if self.train.apply(key, value)? {
            return Ok(());
        }
        match key {
            "count" => self.gen.count = num(key, value)?,
            "height" => self.gen.height = num(key, value)?,
            "width" => self.gen.width = num(key, value)?,
            "max_translation" => self.gen.bounds.max_translation = num(key, value)?,
            "max_rotation" => self.gen.bounds.max_rotation_deg = num(key, value)?,
            "max_scale_delta" => self.gen.bounds.max_scale_delta = num(key, value)?,
            "min_foreground" => self.gen.bounds.min_foreground = num(key, value)?,
            "max_foreground" => self.gen.bounds.max_foreground = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            _ => return Err(anyhow!("unknown setting `{key}`")),
        }
        Ok(())
    }

    fn set_preset(&mut self, preset: &Option<String>) -> CliResult {
        if let Some(p) = preset {
            self.model.apply("preset", p).or_exit(Exit::Usage)?;
            self.model_keys_set = true;
        }
        Ok(())
    }
}

fn print_resolved(title: &str, body: &str) {
    println!("# {title}");
    print!("{body}");
    if !body.ends_with('\n') {
        println!();
    }
    println!();
}

fn gen_data(mut s: Settings, a: &GenDataArgs) -> CliResult {
    let g = &mut s.gen;
    g.count = a.count.unwrap_or(g.count);
    g.height = a.height.unwrap_or(g.height);
    g.width = a.width.unwrap_or(g.width);
    g.identity |= a.identity;
    if let Some(v) = a.max_translation {
        g.bounds.max_translation = v;
    }
    if let Some(v) = a.max_rotation {
        g.bounds.max_rotation_deg = v;
    }
    if let Some(v) = a.max_scale_delta {
        g.bounds.max_scale_delta = v;
    }
    let mut text = String::new();
    let _ = writeln!(text, "seed = {}", g.seed);
    let _ = writeln!(text, "count = {}", g.count);
    let _ = writeln!(text, "height = {}\nwidth = {}", g.height, g.width);
    if g.identity {
        let _ = writeln!(text, "motion = identity");
    } else {
        let b = &g.bounds;
        let _ = writeln!(text, "max_translation = {}", b.max_translation);
        let _ = writeln!(text, "max_rotation = {}", b.max_rotation_deg);
        let _ = writeln!(text, "max_scale_delta = {}", b.max_scale_delta);
        let _ = writeln!(text, "min_foreground = {}\nmax_foreground = {}", b.min_foreground, b.max_foreground);
    }
    print_resolved("gen-data", &text);

    let motion = if g.identity {
        MotionSpec::identity()
    } else {
        MotionSpec::Random(g.bounds.clone())
    };
    let manifest = generate_dataset(&a.out, g.count, g.seed, g.height, g.width, &motion).map_err(|e| {
        let exit = match e {
            DataError::Motion(_) => Exit::Usage,
            _ => Exit::Data,
        };
        Failure { exit, error: e.into() }
    })?;
    println!("wrote {} pairs, manifest {}", g.count, manifest.display());
    Ok(())
}

fn train(mut s: Settings, a: &TrainArgs) -> CliResult {
    s.set_preset(&a.preset)?;
    let t = &mut s.train;
    if let Some(v) = a.scale_factor {
        t.schedule.scale = v;
    }
    if let Some(v) = a.lambda {
        t.lambda = v;
    }
    if a.iterations.is_some() {
        t.iterations = a.iterations;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if a.lr.is_some() {
        t.constant_lr = a.lr;
    }
    if a.no_augment {
        t.augment = None;
    }
    s.model.validate().or_exit(Exit::Usage)?;
    s.train.validate().or_exit(Exit::Usage)?;
    print_resolved("model", &s.model.to_text());
    print_resolved("train", &s.train.to_string());

    let entries = read_manifest(&a.manifest).or_exit(Exit::Data)?;
    let dataset = load_dataset(&a.manifest).or_exit(Exit::Data)?;
    let mut trainer = Trainer::new(&s.model, &s.train).output_dir(&a.out);
    if let Some(path) = &a.checkpoint {
        let p = ModelParams::load(path, &s.model)
            .map_err(|e| Failure {
                exit: model_exit(&e),
                error: anyhow::Error::new(e).context(format!("loading {}", path.display())),
            })?;
        trainer = trainer.initial_params(p);
    }
    let report_every = (s.train.total_iterations() / 20).max(1);
    let outcome = trainer
        .run(&dataset, |event| match event {
            TrainEvent::Iteration(r) if r.iteration % report_every == 0 || r.epe_val.is_some() => println!("{r}"),
            TrainEvent::SkippedStep { iteration, param } => {
                eprintln!("warning: iteration {iteration}: non-finite gradient for `{param}`, step skipped")
            }
            _ => {}
        })
        .map_err(|e| Failure {
            exit: train_exit(&e),
            error: e.into(),
        })?;

    let val: Vec<_> = outcome.val_indices.iter().map(|&i| entries[i].clone()).collect();
    let val_manifest = a.out.join("val_manifest.txt");
    write_manifest(&val_manifest, &val).or_exit(Exit::Data)?;
    println!(
        "trained {} iterations in {:.1}s ({} train / {} validation pairs, {} skipped steps)",
        s.train.total_iterations(),
        outcome.seconds,
        outcome.train_indices.len(),
        outcome.val_indices.len(),
        outcome.skipped_steps.len()
    );
    if let Some(e) = outcome.final_val_epe {
        println!("final validation EPE: {e:.6}");
    }
    println!("checkpoint: {}", a.out.join("final.ckpt").display());
    println!("validation manifest: {}", val_manifest.display());
    Ok(())
}

fn load_model(s: &mut Settings, checkpoint: &Path, explicit: Option<&Path>) -> CliResult<ModelParams<f32>> {
    let beside = checkpoint.parent().unwrap_or(Path::new("")).join("model.cfg");
    let source = explicit.map(Path::to_path_buf).or_else(|| beside.exists().then_some(beside));
    if let Some(path) = source {
        if s.model_keys_set {
            return fail(
                Exit::Usage,
                anyhow!("architecture keys in --config conflict with {}", path.display()),
            );
        }
        let text = fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))
            .or_exit(Exit::Data)?;
        s.model = ModelConfig::from_text(&text)
            .with_context(|| format!("{}", path.display()))
            .or_exit(Exit::Data)?;
    }
    s.model.validate().or_exit(Exit::Usage)?;
    ModelParams::load(checkpoint, &s.model).map_err(|e| Failure {
        exit: model_exit(&e),
        error: anyhow::Error::new(e).context(format!("loading {}", checkpoint.display())),
    })
}

fn predict_pair(params: &ModelParams<f32>, cfg: &ModelConfig, a: &Path, b: &Path, out: &Path) -> CliResult {
    let ia = read_image(a).or_exit(Exit::Data)?;
    let ib = read_image(b).or_exit(Exit::Data)?;
    if ia.shape() != ib.shape() {
        return fail(
            Exit::Data,
            anyhow!("{} is {} but {} is {}", a.display(), ia.shape(), b.display(), ib.shape()),
        );
    }
    let flow = predict(params, cfg, &ia, &ib).map_err(|e| Failure {
        exit: model_exit(&e),
        error: anyhow::Error::new(e).context(format!("predicting {}", a.display())),
    })?;
    if !flow.is_finite() {
        return fail(Exit::Numeric, anyhow!("non-finite flow predicted for {}", a.display()));
    }
    write_flo(out, &flow).or_exit(Exit::Data)
}

fn predict_cmd(mut s: Settings, a: &PredictArgs) -> CliResult {
    let params = load_model(&mut s, &a.checkpoint, a.model_config.as_deref())?;
    print_resolved("model", &s.model.to_text());
    fs::create_dir_all(&a.out)
        .with_context(|| format!("creating {}", a.out.display()))
        .or_exit(Exit::Data)?;
    match (&a.manifest, &a.image_a, &a.image_b) {
        (Some(m), _, _) => {
            let entries = read_manifest(m).or_exit(Exit::Data)?;
            for (i, e) in entries.iter().enumerate() {
                predict_pair(&params, &s.model, &e.image_a, &e.image_b, &a.out.join(format!("pred_{i:05}.flo")))?;
            }
            println!("wrote {} predictions to {}", entries.len(), a.out.display());
        }
        (None, Some(ia), Some(ib)) => {
            let out = a.out.join("pred_00000.flo");
            predict_pair(&params, &s.model, ia, ib, &out)?;
            println!("wrote {}", out.display());
        }
        _ => return fail(Exit::Usage, anyhow!("predict needs --manifest or both --image-a and --image-b")),
    }
    Ok(())
}

fn eval_cmd(s: Settings, a: &EvalArgs) -> CliResult {
    let tau = a.tau.unwrap_or(s.tau);
    if !(tau > 0.0) {
        return fail(Exit::Usage, anyhow!("tau must be positive, got {tau}"));
    }
    print_resolved("eval", &format!("tau = {tau}\n"));
    let entries = read_manifest(&a.manifest).or_exit(Exit::Data)?;
    let mut total: Option<EpeReport> = None;
    for (i, e) in entries.iter().enumerate() {
        let gt = load_sample(e).or_exit(Exit::Data)?;
        let path = a.pred.join(format!("pred_{i:05}.flo"));
        let pred = read_flo(&path).or_exit(Exit::Data)?;
        let mask = gt.valid_mask();
        let report = EpeReport::evaluate(&pred, &gt.flow, Some(&mask), tau)
            .with_context(|| format!("{} against {}", path.display(), e.flow.display()))
            .or_exit(Exit::Data)?;
        match &mut total {
            Some(t) => t.merge(&report),
            None => total = Some(report),
        }
    }
    let report = total.ok_or_else(|| anyhow!("{} lists no pairs", a.manifest.display())).or_exit(Exit::Data)?;
    print!("{}", report.to_table());
    print!("{}", report.to_key_values());
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir)
            .and_then(|_| fs::write(dir.join("report.txt"), report.to_table()))
            .and_then(|_| fs::write(dir.join("report.kv"), report.to_key_values()))
            .with_context(|| format!("writing report to {}", dir.display()))
            .or_exit(Exit::Data)?;
    }
    Ok(())
}

fn viz(a: &VizArgs) -> CliResult {
    if let Some(m) = a.max_magnitude {
        if !(m > 0.0) {
            return fail(Exit::Usage, anyhow!("max magnitude must be positive, got {m}"));
        }
    }
    let flow = read_flo(&a.flow).or_exit(Exit::Data)?;
    let image = flow_to_color(&flow, a.max_magnitude);
    write_image(&a.out, &image).or_exit(Exit::Data)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn gradcheck(mut s: Settings, a: &GradcheckArgs) -> CliResult {
    s.set_preset(&a.preset)?;
    s.model.validate().or_exit(Exit::Usage)?;
    print_resolved("model", &s.model.to_text());
    let mut entries = Vec::new();
    if !a.network_only {
        entries.extend(operation_suite().or_exit(Exit::Numeric)?);
    }
    entries.extend(network_suite(&s.model, s.train.seed).or_exit(Exit::Numeric)?);
    let mut worst = 0.0f64;
    let mut failed = 0;
    for e in &entries {
        let status = if e.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:<4} {:<36} max rel error {:.3e} (tolerance {:.0e})",
            e.name, e.report.max_rel_error, e.tolerance
        );
        worst = worst.max(e.report.max_rel_error);
        failed += usize::from(!e.passed());
    }
    println!("max relative error: {worst:.3e}");
    if failed > 0 {
        return fail(Exit::Numeric, anyhow!("{failed} of {} gradient checks failed", entries.len()));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let settings = Settings::load(&cli)?;
    match &cli.command {
        Command::GenData(a) => gen_data(settings, a),
        Command::Train(a) => train(settings, a),
        Command::Predict(a) => predict_cmd(settings, a),
        Command::Eval(a) => eval_cmd(settings, a),
        Command::Viz(a) => viz(a),
        Command::Gradcheck(a) => gradcheck(settings, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { Exit::Usage as u8 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.exit as u8)
        }
    }
}
