use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use scatsense::datasets::{load_idx, read_pgm, resize_dataset, write_pgm};
use scatsense::decoder::{self, DecoderModel, TrainMode};
use scatsense::entropy::dataset_entropy;
use scatsense::measurement::{from_binary, from_csv, measure_dataset, to_binary, to_csv};
use scatsense::nist::{self, render_csv, render_table, run_battery, BitStream, Quantization, TestParams};
use scatsense::patterns::{hadamard_patterns_for, make_mask, FovMask, FovStrategy};
use scatsense::scattering::{build_operator, encode_operator, scatter, scatter_dataset};
use scatsense::{LabeledDataset, ScatterConfig, ScatterFamily};
use scatsense_cli::config::{validate_config, OptimizerName, TrainSpec, OUTPUT_ROOT_ENV};
use scatsense_cli::runner::{rerun_manifest, run_experiment, write_atomic, RunError};

#[derive(Parser)]
#[command(name = "scatsense", version, about = "Scattering-enhanced single-pixel sensing toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a Hadamard pattern set and write it as binary (and optionally PGMs).
    Patterns(PatternsArgs),
    /// Scatter a PGM image.
    Scatter(ScatterArgs),
    /// Measure an IDX dataset into a CSV (and optionally binary) file.
    Measure(MeasureArgs),
    /// Mean image entropy of an IDX dataset.
    Entropy(EntropyArgs),
    /// Train a decoder on measurements (or end to end on images).
    Train(TrainArgs),
    /// Accuracy of a saved decoder.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients.
    Gradcheck(GradcheckArgs),
    /// Run the randomness battery on a bitstream or measurement file.
    Nist(NistArgs),
    /// Run an experiment from a config file or a previous run's manifest.
    Run(RunArgs),
    /// Check a config file and list every problem.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct MaskArgs {
    #[arg(long, default_value = "full")]
    strategy: FovStrategy,
    /// Window width (a_central) or grid count (b_interleaved).
    #[arg(long)]
    param: Option<usize>,
}

#[derive(Args)]
struct ScatterOpts {
    #[arg(long, default_value = "scatnet_like")]
    family: ScatterFamily,
    #[arg(long, default_value_t = 0.0)]
    strength: f64,
    #[arg(long, default_value_t = 0)]
    scatter_seed: u64,
    #[arg(long)]
    kernel_max_radius: Option<usize>,
}

impl ScatterOpts {
    fn config(&self) -> anyhow::Result<ScatterConfig> {
        let mut c = ScatterConfig::new(self.family, self.strength, self.scatter_seed)?;
        if let Some(r) = self.kernel_max_radius {
            c = c.with_kernel_max_radius(r)?;
        }
        Ok(c)
    }
}

#[derive(Args)]
struct DataArgs {
    /// IDX image file.
    #[arg(long)]
    images: PathBuf,
    /// IDX label file.
    #[arg(long)]
    labels: PathBuf,
    /// Use only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
    /// Resize to WIDTHxHEIGHT (nearest neighbour).
    #[arg(long, value_parser = parse_dims)]
    resize: Option<(usize, usize)>,
}

impl DataArgs {
    fn load(&self) -> anyhow::Result<LabeledDataset> {
        let mut ds = load_idx(&self.images, &self.labels)?;
        if let Some(n) = self.limit {
            ds = ds.take(n);
        }
        if let Some((w, h)) = self.resize {
            ds = resize_dataset(&ds, w, h)?;
        }
        Ok(ds)
    }
}

fn parse_optimizer(s: &str) -> Result<OptimizerName, String> {
    match s {
        "adam" => Ok(OptimizerName::Adam),
        "sgd" => Ok(OptimizerName::Sgd),
        _ => Err(format!("unknown optimizer {s:?} (expected adam or sgd)")),
    }
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    let p = |v: &str| v.parse::<usize>().map_err(|e| e.to_string());
    Ok((p(w)?, p(h)?))
}

#[derive(Args)]
struct PatternsArgs {
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write each pattern as a PGM into this directory.
    #[arg(long)]
    pgm_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ScatterArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    scatter: ScatterOpts,
    /// Write the operator (kernel or transfer matrix) here.
    #[arg(long)]
    operator: Option<PathBuf>,
}

#[derive(Args)]
struct MeasureArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    scatter: ScatterOpts,
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long)]
    rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the binary form here.
    #[arg(long)]
    binary: Option<PathBuf>,
}

#[derive(Args)]
struct EntropyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    scatter: ScatterOpts,
    /// Per-image entropies as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainOpts {
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value = "adam", value_parser = parse_optimizer)]
    optimizer: OptimizerName,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct InputChoice {
    /// Measurement CSV (label, values...).
    #[arg(long)]
    data: Option<PathBuf>,
    /// IDX images for end-to-end models (with --labels and mask flags).
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    input: InputChoice,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, value_parser = parse_dims)]
    resize: Option<(usize, usize)>,
    #[command(flatten)]
    mask: MaskArgs,
    /// Learn this many patterns jointly with the decoder (needs --images).
    #[arg(long)]
    end_to_end: Option<usize>,
    #[command(flatten)]
    train: TrainOpts,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch losses as CSV.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Export learned patterns (end-to-end only).
    #[arg(long)]
    patterns_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    input: InputChoice,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long, value_parser = parse_dims)]
    resize: Option<(usize, usize)>,
    #[command(flatten)]
    mask: MaskArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 64)]
    inputs: usize,
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Pattern count for the end-to-end model.
    #[arg(long, default_value_t = 16)]
    patterns: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct NistArgs {
    /// Packed bitstream file.
    #[arg(long, conflicts_with = "measurements")]
    bits: Option<PathBuf>,
    /// Measurement CSV or binary file (quantized first).
    #[arg(long)]
    measurements: Option<PathBuf>,
    #[arg(long, default_value = "affine16")]
    quantization: Quantization,
    /// Also run Runs and LongestRun.
    #[arg(long)]
    include_runs: bool,
    /// Write nist.csv, nist.txt (and the quantized stream) here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "source")]
struct RunSource {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: RunSource,
    /// Output directory (overrides the config and the output root).
    #[arg(long, env = OUTPUT_ROOT_ENV, hide_env_values = true)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    config: PathBuf,
}

/// Error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self { code: 3, error }
    }
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        Self {
            code: e.exit_code() as u8,
            error: e.into(),
        }
    }
}

fn config_error(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Patterns(a) => cmd_patterns(a),
        Command::Scatter(a) => cmd_scatter(a),
        Command::Measure(a) => cmd_measure(a),
        Command::Entropy(a) => cmd_entropy(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Nist(a) => cmd_nist(a),
        Command::Run(a) => cmd_run(a),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_patterns(a: PatternsArgs) -> Result<(), Failure> {
    let ps = hadamard_patterns_for(a.width, a.height, a.mask.strategy, a.mask.param, a.rate, a.seed)
        .map_err(|e| config_error(e.into()))?;
    write_atomic(&a.out, &ps.encode()).context("writing patterns")?;
    if let Some(dir) = &a.pgm_dir {
        ps.write_pgm_stack(dir).context("writing pattern images")?;
    }
    println!("{} patterns over {} ({} active pixels)", ps.len(), ps.mask().descriptor(), ps.mask().n_active());
    Ok(())
}

fn cmd_scatter(a: ScatterArgs) -> Result<(), Failure> {
    let cfg = a.scatter.config().map_err(config_error)?;
    let img = read_pgm(&a.input).context("reading input")?;
    let op = build_operator(&cfg, img.width(), img.height()).map_err(anyhow::Error::from)?;
    let out = scatter(&op, &img).map_err(anyhow::Error::from)?;
    write_pgm(&out, &a.out).context("writing output")?;
    if let Some(p) = &a.operator {
        write_atomic(p, &encode_operator(&op)).context("writing operator")?;
    }
    Ok(())
}

fn cmd_measure(a: MeasureArgs) -> Result<(), Failure> {
    let cfg = a.scatter.config().map_err(config_error)?;
    let ds = a.data.load()?;
    let (w, h) = ds.dims().ok_or_else(|| anyhow!("dataset is empty"))?;
    let ps = hadamard_patterns_for(w, h, a.mask.strategy, a.mask.param, a.rate, a.seed)
        .map_err(|e| config_error(e.into()))?;
    let op = build_operator(&cfg, w, h).map_err(anyhow::Error::from)?;
    let ds = scatter_dataset(&op, &ds).map_err(anyhow::Error::from)?;
    let meas = measure_dataset(&ds, &ps, a.snr_db, a.seed).map_err(anyhow::Error::from)?;
    write_atomic(&a.out, to_csv(&meas).as_bytes()).context("writing CSV")?;
    if let Some(p) = &a.binary {
        write_atomic(p, &to_binary(&meas).map_err(anyhow::Error::from)?).context("writing binary")?;
    }
    println!("{} vectors of {} values ({})", meas.len(), ps.len(), ps.mask().descriptor());
    Ok(())
}

fn cmd_entropy(a: EntropyArgs) -> Result<(), Failure> {
    let cfg = a.scatter.config().map_err(config_error)?;
    let ds = a.data.load()?;
    let (w, h) = ds.dims().ok_or_else(|| anyhow!("dataset is empty"))?;
    let op = build_operator(&cfg, w, h).map_err(anyhow::Error::from)?;
    let ds = scatter_dataset(&op, &ds).map_err(anyhow::Error::from)?;
    let rep = dataset_entropy(&ds).map_err(anyhow::Error::from)?;
    if let Some(p) = &a.out {
        let mut csv = String::from("index,entropy\n");
        for (i, e) in rep.per_image.iter().enumerate() {
            csv.push_str(&format!("{i},{e}\n"));
        }
        write_atomic(p, csv.as_bytes()).context("writing CSV")?;
    }
    println!("{} images at {w}x{h}: mean entropy {:.4} bits", rep.per_image.len(), rep.mean);
    Ok(())
}

/// Inputs and labels from a measurement CSV or from images under a mask.
fn load_inputs(
    input: &InputChoice,
    labels: &Option<PathBuf>,
    limit: Option<usize>,
    resize: Option<(usize, usize)>,
    mask: &MaskArgs,
) -> anyhow::Result<(ndarray::Array2<f64>, Vec<usize>, Option<FovMask>)> {
    if let Some(path) = &input.data {
        let (ls, mut rows) = from_csv(&fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?;
        let mut ls = ls
            .into_iter()
            .map(|l| l.ok_or_else(|| anyhow!("{}: every row needs a label", path.display())))
            .collect::<anyhow::Result<Vec<usize>>>()?;
        if let Some(n) = limit {
            rows.truncate(n);
            ls.truncate(n);
        }
        return Ok((decoder::stack_rows(&rows)?, ls, None));
    }
    let images = input.images.as_ref().expect("clap group");
    let data = DataArgs {
        images: images.clone(),
        labels: labels.clone().expect("clap requires"),
        limit,
        resize,
    };
    let ds = data.load()?;
    let (w, h) = ds.dims().ok_or_else(|| anyhow!("dataset is empty"))?;
    let m = make_mask(mask.strategy, w, h, mask.param)?;
    let rows: Vec<Vec<f64>> = ds
        .images()
        .iter()
        .map(|im| m.active().iter().map(|&p| f64::from(im.pixels()[p])).collect())
        .collect();
    Ok((decoder::stack_rows(&rows)?, ds.labels().to_vec(), Some(m)))
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    if a.end_to_end.is_some() && a.input.images.is_none() {
        return Err(config_error(anyhow!("--end-to-end needs --images and --labels")));
    }
    let (x, labels, mask) = load_inputs(&a.input, &a.labels, a.limit, a.resize, &a.mask)?;
    let classes = labels.iter().max().map_or(1, |&l| l + 1).max(2);
    let mode = match a.end_to_end {
        Some(patterns) => TrainMode::EndToEnd { patterns },
        None => TrainMode::FixedPatterns,
    };
    let spec = TrainSpec {
        epochs: a.train.epochs,
        batch_size: a.train.batch_size,
        learning_rate: a.train.learning_rate,
        optimizer: a.train.optimizer,
        hidden: a.train.hidden,
    };
    let cfg = spec.to_config(a.train.seed, mode);
    cfg.validate().map_err(|e| config_error(e.into()))?;
    let fit = decoder::train(x.view(), &labels, classes, &cfg).map_err(anyhow::Error::from)?;
    write_atomic(&a.out, &fit.model.to_bytes()).context("writing model")?;
    if let Some(p) = &a.loss_csv {
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in fit.loss_curve.iter().enumerate() {
            csv.push_str(&format!("{},{l}\n", i + 1));
        }
        write_atomic(p, csv.as_bytes()).context("writing losses")?;
    }
    if let (Some(p), Some(mask)) = (&a.patterns_out, mask) {
        if let Some(ps) = fit.model.learned_patterns(mask, a.train.seed) {
            write_atomic(p, &ps.map_err(anyhow::Error::from)?.encode()).context("writing patterns")?;
        }
    }
    let acc = decoder::evaluate(&fit.model, x.view(), &labels).map_err(anyhow::Error::from)?;
    println!(
        "final loss {:.6}, training accuracy {acc:.4}",
        fit.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let model = DecoderModel::load(&a.model).map_err(anyhow::Error::from)?;
    let (x, labels, _) = load_inputs(&a.input, &a.labels, a.limit, a.resize, &a.mask)?;
    let acc = decoder::evaluate(&model, x.view(), &labels).map_err(anyhow::Error::from)?;
    println!("accuracy {acc:.4} on {} samples", labels.len());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let mut rng = scatsense::Rng::new(a.seed);
    let x: Vec<f64> = (0..a.inputs).map(|_| rng.gaussian()).collect();
    let fixed = DecoderModel::new(a.inputs, a.hidden, a.classes, None, a.seed);
    let e_fixed = decoder::grad_check(&fixed, &x, 0, a.seed).map_err(anyhow::Error::from)?;

    let pixels: Vec<f64> = (0..a.inputs * 20).map(|_| rng.next_f64() * 255.0).collect();
    let batch = ndarray::Array2::from_shape_vec((20, a.inputs), pixels).expect("shape");
    let mut e2e = DecoderModel::new(a.inputs, a.hidden, a.classes, Some(a.patterns), a.seed);
    e2e.fit_standardization(batch.view());
    let row = batch.row(0).to_vec();
    let e_e2e = decoder::grad_check(&e2e, &row, a.classes - 1, a.seed).map_err(anyhow::Error::from)?;

    println!("fixed patterns: max relative error {e_fixed:.3e}");
    println!("end to end:     max relative error {e_e2e:.3e}");
    if e_fixed.max(e_e2e) >= 1e-4 {
        return Err(anyhow!("gradient check failed (threshold 1e-4)").into());
    }
    Ok(())
}

fn cmd_nist(a: NistArgs) -> Result<(), Failure> {
    let bits = match (&a.bits, &a.measurements) {
        (Some(p), None) => BitStream::read(p).map_err(anyhow::Error::from)?,
        (None, Some(p)) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let rows = if p.extension().is_some_and(|e| e == "csv") {
                from_csv(std::str::from_utf8(&bytes).context("CSV is not UTF-8")?)
                    .map_err(anyhow::Error::from)?
                    .1
            } else {
                from_binary(&bytes).map_err(anyhow::Error::from)?
            };
            let values: Vec<f64> = rows.into_iter().flatten().collect();
            nist::quantize_values(&values, a.quantization).map_err(anyhow::Error::from)?
        }
        _ => return Err(config_error(anyhow!("give exactly one of --bits or --measurements"))),
    };
    let params = TestParams {
        include_runs: a.include_runs,
        ..TestParams::default()
    };
    let report = run_battery(&bits, &params);
    let cond = [("stream", &report)];
    print!("{}", render_table(&cond));
    if let Some(dir) = &a.out_dir {
        write_atomic(&dir.join("nist.csv"), render_csv(&cond).as_bytes()).context("writing report")?;
        write_atomic(&dir.join("nist.txt"), render_table(&cond).as_bytes()).context("writing report")?;
        if a.measurements.is_some() {
            write_atomic(&dir.join("stream.bits"), &bits.encode()).context("writing bitstream")?;
        }
    }
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<(), Failure> {
    let summary = match (&a.source.config, &a.source.manifest) {
        (Some(path), None) => {
            let cfg = validate_config(path).map_err(|e| config_error(e.into()))?;
            let dir = match (&cfg.output_dir, &a.out) {
                (_, Some(o)) if cfg.output_dir.is_none() => o.join(cfg.name()),
                _ => cfg.resolve_output_dir(),
            };
            let mut cfg = cfg;
            cfg.anchor_paths(&std::env::current_dir().context("current directory")?);
            run_experiment(&cfg, &dir)?
        }
        (None, Some(path)) => rerun_manifest(path, a.out.as_deref())?,
        _ => unreachable!("clap group"),
    };
    for f in &summary.manifest.outputs {
        println!("{}", summary.out_dir.join(&f.file).display());
    }
    println!("{}", summary.out_dir.join("manifest.json").display());
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> Result<(), Failure> {
    let cfg = validate_config(&a.config).map_err(|e| config_error(e.into()))?;
    println!(
        "{}: ok ({}, output {})",
        a.config.display(),
        cfg.kind.name(),
        Path::new(&cfg.resolve_output_dir()).display()
    );
    Ok(())
}
