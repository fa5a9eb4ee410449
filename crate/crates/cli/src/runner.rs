//! Experiment execution: every kind writes its CSVs atomically, then a
//! `manifest.json` that is enough to re-run the experiment.

use std::fmt::Write as _;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use scatsense::datasets::{load_idx, resize_dataset, resize_nearest, DatasetError};
use scatsense::decoder::{self, TrainMode};
use scatsense::entropy::dataset_entropy;
use scatsense::measurement::{measure, measure_dataset};
use scatsense::nist::{self, render_csv, render_table, run_battery, BatteryReport, TestParams};
use scatsense::patterns::{hadamard_patterns_for, make_mask, FovMask, PatternSet};
use scatsense::scattering::{build_operator, scatter, scatter_dataset, ScatterOperator};
use scatsense::{LabeledDataset, ScatterConfig};
use serde::{Deserialize, Serialize};

use crate::config::{check, ConfigError, ExperimentConfig, ExperimentKind};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 3 for stage failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Manifest { .. } => 2,
            Self::Stage { .. } => 3,
        }
    }
}

fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> RunError {
    move |e| RunError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

pub fn fnv1a64(bytes: &[u8]) -> String {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    format!("{:016x}", h.finish())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub file: String,
    pub bytes: usize,
    pub fnv1a64: String,
}

/// Per-cell derived quantities recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub seed: u64,
    pub scatter_seed: u64,
    pub strength: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_active: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub kind: ExperimentKind,
    pub name: String,
    pub config: ExperimentConfig,
    pub train_images: usize,
    pub test_images: usize,
    pub cells: Vec<Cell>,
    pub outputs: Vec<OutputFile>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self, RunError> {
        let err = |message: String| RunError::Manifest {
            path: path.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<OutputFile>,
}

impl Outputs {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), RunError> {
        write_atomic(&self.dir.join(name), bytes).map_err(stage("write"))?;
        self.files.push(OutputFile {
            file: name.to_string(),
            bytes: bytes.len(),
            fnv1a64: fnv1a64(bytes),
        });
        Ok(())
    }
}

struct Data {
    train: LabeledDataset,
    test: Option<LabeledDataset>,
    dims: (usize, usize),
}

fn load_data(cfg: &ExperimentConfig, native: bool) -> Result<Data, RunError> {
    let ds = &cfg.dataset;
    let load = |images: &Path, labels: &Path, n: usize| -> Result<LabeledDataset, DatasetError> {
        let full = load_idx(images, labels)?;
        let part = full.take(n);
        match ds.resize_to() {
            Some((w, h)) if !native => resize_dataset(&part, w, h),
            _ => Ok(part),
        }
    };
    let train = load(&ds.train_images, &ds.train_labels, ds.train_size).map_err(stage("ingest"))?;
    let test = match (&ds.test_images, &ds.test_labels) {
        (Some(i), Some(l)) => Some(load(i, l, ds.test_size).map_err(stage("ingest"))?),
        _ => None,
    };
    let dims = train.dims().ok_or_else(|| stage("ingest")("training set is empty"))?;
    Ok(Data { train, test, dims })
}

fn operator(cfg: &ExperimentConfig, strength: f64, seed: u64, dims: (usize, usize)) -> Result<ScatterOperator, RunError> {
    let mut sc = ScatterConfig::new(cfg.scatter.family, strength, seed).map_err(stage("scatter"))?;
    if let Some(r) = cfg.scatter.kernel_max_radius {
        sc = sc.with_kernel_max_radius(r).map_err(stage("scatter"))?;
    }
    build_operator(&sc, dims.0, dims.1).map_err(stage("scatter"))
}

fn features(ds: &LabeledDataset, ps: &PatternSet, snr: Option<f64>, seed: u64) -> Result<Array2<f64>, RunError> {
    let meas = measure_dataset(ds, ps, snr, seed).map_err(stage("measure"))?;
    let rows: Vec<Vec<f64>> = meas.into_iter().map(|m| m.values).collect();
    decoder::stack_rows(&rows).map_err(stage("measure"))
}

fn active_pixels(ds: &LabeledDataset, mask: &FovMask) -> Result<Array2<f64>, RunError> {
    let rows: Vec<Vec<f64>> = ds
        .images()
        .iter()
        .map(|im| mask.active().iter().map(|&p| f64::from(im.pixels()[p])).collect())
        .collect();
    decoder::stack_rows(&rows).map_err(stage("measure"))
}

fn scatter_seed(cfg: &ExperimentConfig, seed: u64) -> u64 {
    cfg.scatter.seed.unwrap_or(seed)
}

/// Noise stream seed for the test split, distinct from the training split's.
fn test_noise_seed(seed: u64) -> u64 {
    !seed
}

/// Run `cfg`, writing into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary, RunError> {
    check(cfg)?;
    fs::create_dir_all(out_dir).map_err(stage("write"))?;
    let mut out = Outputs {
        dir: out_dir.to_path_buf(),
        files: Vec::new(),
    };
    let data = load_data(cfg, false)?;
    let cells = match cfg.kind {
        ExperimentKind::RateSweep | ExperimentKind::WidthSweep | ExperimentKind::StrengthSweep => {
            run_sweep(cfg, &data, &mut out)?
        }
        ExperimentKind::EntropyReport => run_entropy(cfg, &data, &mut out)?,
        ExperimentKind::NistReport => run_nist(cfg, &data, &mut out)?,
        ExperimentKind::E2eCompare => run_e2e(cfg, &data, &mut out)?,
    };
    let manifest = Manifest {
        tool: "scatsense".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        kind: cfg.kind,
        name: cfg.name().to_string(),
        config: cfg.clone(),
        train_images: data.train.len(),
        test_images: data.test.as_ref().map_or(0, |t| t.len()),
        cells,
        outputs: out.files,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out_dir.join("manifest.json"), json.as_bytes()).map_err(stage("write"))?;
    Ok(RunSummary {
        out_dir: out_dir.to_path_buf(),
        manifest,
    })
}

/// Re-run the experiment recorded in a manifest. Outputs go to `out_dir`,
/// or next to the manifest when `None`.
pub fn rerun_manifest(path: &Path, out_dir: Option<&Path>) -> Result<RunSummary, RunError> {
    let manifest = Manifest::load(path)?;
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    run_experiment(&manifest.config, &dir)
}

fn run_sweep(cfg: &ExperimentConfig, data: &Data, out: &mut Outputs) -> Result<Vec<Cell>, RunError> {
    let test = data.test.as_ref().expect("validated: test set present");
    let (w, h) = data.dims;
    let mut csv = String::from("seed,family,strength,strategy,param,rate,m,n_active,final_loss,test_accuracy\n");
    let mut cells = Vec::new();
    // (strength, param, rate) -> accuracies over seeds, in first-seen order.
    let mut groups: Vec<((f64, usize, f64), Vec<f64>)> = Vec::new();

    for &seed in &cfg.seeds {
        for &strength in &cfg.scatter.strengths {
            let op = operator(cfg, strength, scatter_seed(cfg, seed), data.dims)?;
            let train = scatter_dataset(&op, &data.train).map_err(stage("scatter"))?;
            let test = scatter_dataset(&op, test).map_err(stage("scatter"))?;
            for param in cfg.mask.param_list() {
                for &rate in &cfg.rates {
                    let ps = hadamard_patterns_for(w, h, cfg.mask.strategy, param, rate, seed)
                        .map_err(stage("patterns"))?;
                    let xtr = features(&train, &ps, cfg.noise.snr_db, seed)?;
                    let xte = features(&test, &ps, cfg.noise.snr_db, test_noise_seed(seed))?;
                    let tc = cfg.train.to_config(seed, TrainMode::FixedPatterns);
                    let fit = decoder::train(xtr.view(), train.labels(), train.num_classes(), &tc)
                        .map_err(stage("train"))?;
                    let acc = decoder::evaluate(&fit.model, xte.view(), test.labels()).map_err(stage("eval"))?;
                    let loss = *fit.loss_curve.last().expect("at least one epoch");
                    let mask = ps.mask();
                    eprintln!(
                        "[{}] seed {seed} strength {strength} {} rate {rate}: m={} accuracy {acc:.4}",
                        cfg.name(),
                        mask.descriptor(),
                        ps.len()
                    );
                    let _ = writeln!(
                        csv,
                        "{seed},{},{strength},{},{},{rate},{},{},{loss},{acc}",
                        cfg.scatter.family.name(),
                        cfg.mask.strategy.name(),
                        mask.param(),
                        ps.len(),
                        mask.n_active()
                    );
                    let key = (strength, mask.param(), rate);
                    match groups.iter_mut().find(|(k, _)| *k == key) {
                        Some((_, v)) => v.push(acc),
                        None => groups.push((key, vec![acc])),
                    }
                    cells.push(Cell {
                        seed,
                        scatter_seed: scatter_seed(cfg, seed),
                        strength,
                        mask: Some(mask.descriptor()),
                        rate: Some(rate),
                        m: Some(ps.len()),
                        n_active: Some(mask.n_active()),
                    });
                }
            }
        }
    }
    let mut summary = String::from("strength,param,rate,seeds,mean_accuracy\n");
    for ((strength, param, rate), accs) in &groups {
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let _ = writeln!(summary, "{strength},{param},{rate},{},{mean}", accs.len());
    }
    out.write("accuracy.csv", csv.as_bytes())?;
    out.write("summary.csv", summary.as_bytes())?;
    Ok(cells)
}

fn run_entropy(cfg: &ExperimentConfig, data: &Data, out: &mut Outputs) -> Result<Vec<Cell>, RunError> {
    let mut csv = String::from("seed,width,height,family,strength,images,mean_entropy\n");
    let mut cells = Vec::new();
    if cfg.dataset.resize_to().is_some() {
        let native = load_data(cfg, true)?;
        let (w, h) = native.dims;
        let rep = dataset_entropy(&native.train).map_err(stage("entropy"))?;
        let _ = writeln!(csv, ",{w},{h},none,0,{},{}", rep.per_image.len(), rep.mean);
    }
    let (w, h) = data.dims;
    for &seed in &cfg.seeds {
        for &strength in &cfg.scatter.strengths {
            let op = operator(cfg, strength, scatter_seed(cfg, seed), data.dims)?;
            let ds = scatter_dataset(&op, &data.train).map_err(stage("scatter"))?;
            let rep = dataset_entropy(&ds).map_err(stage("entropy"))?;
            eprintln!("[{}] seed {seed} strength {strength}: mean entropy {:.4}", cfg.name(), rep.mean);
            let _ = writeln!(
                csv,
                "{seed},{w},{h},{},{strength},{},{}",
                cfg.scatter.family.name(),
                rep.per_image.len(),
                rep.mean
            );
            cells.push(Cell {
                seed,
                scatter_seed: scatter_seed(cfg, seed),
                strength,
                mask: None,
                rate: None,
                m: None,
                n_active: None,
            });
        }
    }
    out.write("entropy.csv", csv.as_bytes())?;
    Ok(cells)
}

fn condition_name(seed: u64, strength: f64, seeds: usize) -> String {
    let base = if strength == 0.0 {
        "without scatter".to_string()
    } else {
        format!("with scatter {strength}")
    };
    if seeds > 1 {
        format!("seed {seed} {base}")
    } else {
        base
    }
}

fn run_nist(cfg: &ExperimentConfig, data: &Data, out: &mut Outputs) -> Result<Vec<Cell>, RunError> {
    let n = &cfg.nist;
    let source = data.test.as_ref().unwrap_or(&data.train);
    let img = source
        .images()
        .get(n.image_index)
        .ok_or_else(|| stage("ingest")(format!("image_index {} out of range", n.image_index)))?;
    let img = resize_nearest(img, n.image_size, n.image_size).map_err(stage("ingest"))?;
    let dims = (n.image_size, n.image_size);
    let params = TestParams {
        include_runs: n.include_runs,
        ..TestParams::default()
    };
    let mut reports: Vec<(String, BatteryReport)> = Vec::new();
    let mut cells = Vec::new();
    let mut summary = String::from("seed,strength,stream_bits,applicable,passed\n");
    for &seed in &cfg.seeds {
        let ps = hadamard_patterns_for(dims.0, dims.1, scatsense::FovStrategy::Full, None, n.rate, seed)
            .map_err(stage("patterns"))?;
        for (i, &strength) in cfg.scatter.strengths.iter().enumerate() {
            let op = operator(cfg, strength, scatter_seed(cfg, seed), dims)?;
            let field = scatter(&op, &img).map_err(stage("scatter"))?;
            let meas = measure(&field, &ps).map_err(stage("measure"))?;
            let bits = nist::quantize(&[meas], n.quantization).map_err(stage("quantize"))?;
            out.write(&format!("ciphertext_seed{seed}_{i}.bits"), &bits.encode())?;
            let report = run_battery(&bits, &params);
            eprintln!(
                "[{}] seed {seed} strength {strength}: {} bits, {}/{} tests passed",
                cfg.name(),
                bits.len(),
                report.pass_count(),
                report.entries.len()
            );
            let _ = writeln!(
                summary,
                "{seed},{strength},{},{},{}",
                bits.len(),
                report.applicable(),
                report.pass_count()
            );
            reports.push((condition_name(seed, strength, cfg.seeds.len()), report));
            cells.push(Cell {
                seed,
                scatter_seed: scatter_seed(cfg, seed),
                strength,
                mask: Some(ps.mask().descriptor()),
                rate: Some(n.rate),
                m: Some(ps.len()),
                n_active: Some(ps.mask().n_active()),
            });
        }
    }
    let conditions: Vec<(&str, &BatteryReport)> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
    out.write("nist.csv", render_csv(&conditions).as_bytes())?;
    out.write("nist.txt", render_table(&conditions).as_bytes())?;
    out.write("nist_summary.csv", summary.as_bytes())?;
    Ok(cells)
}

fn run_e2e(cfg: &ExperimentConfig, data: &Data, out: &mut Outputs) -> Result<Vec<Cell>, RunError> {
    let test = data.test.as_ref().expect("validated: test set present");
    let (w, h) = data.dims;
    let mut csv = String::from(
        "seed,strength,strategy,param,rate,m,n_active,hadamard_accuracy,learned_accuracy,patterns_file\n",
    );
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for &strength in &cfg.scatter.strengths {
            let op = operator(cfg, strength, scatter_seed(cfg, seed), data.dims)?;
            let train = scatter_dataset(&op, &data.train).map_err(stage("scatter"))?;
            let test = scatter_dataset(&op, test).map_err(stage("scatter"))?;
            for param in cfg.mask.param_list() {
                let mask = make_mask(cfg.mask.strategy, w, h, param).map_err(stage("patterns"))?;
                let ptr = active_pixels(&train, &mask)?;
                let pte = active_pixels(&test, &mask)?;
                for &rate in &cfg.rates {
                    let ps = hadamard_patterns_for(w, h, cfg.mask.strategy, param, rate, seed)
                        .map_err(stage("patterns"))?;
                    let m = ps.len();
                    let xtr = features(&train, &ps, cfg.noise.snr_db, seed)?;
                    let xte = features(&test, &ps, cfg.noise.snr_db, test_noise_seed(seed))?;
                    let fixed = decoder::train(
                        xtr.view(),
                        train.labels(),
                        train.num_classes(),
                        &cfg.train.to_config(seed, TrainMode::FixedPatterns),
                    )
                    .map_err(stage("train"))?;
                    let h_acc = decoder::evaluate(&fixed.model, xte.view(), test.labels()).map_err(stage("eval"))?;
                    let learned = decoder::train(
                        ptr.view(),
                        train.labels(),
                        train.num_classes(),
                        &cfg.train.to_config(seed, TrainMode::EndToEnd { patterns: m }),
                    )
                    .map_err(stage("train"))?;
                    let l_acc = decoder::evaluate(&learned.model, pte.view(), test.labels()).map_err(stage("eval"))?;
                    let file = format!("learned_{}.bin", cells.len());
                    let exported = learned
                        .model
                        .learned_patterns(mask.clone(), seed)
                        .expect("end-to-end model has patterns")
                        .map_err(stage("patterns"))?;
                    out.write(&file, &exported.encode())?;
                    eprintln!(
                        "[{}] seed {seed} strength {strength} rate {rate}: m={m} hadamard {h_acc:.4} learned {l_acc:.4}",
                        cfg.name()
                    );
                    let _ = writeln!(
                        csv,
                        "{seed},{strength},{},{},{rate},{m},{},{h_acc},{l_acc},{file}",
                        cfg.mask.strategy.name(),
                        mask.param(),
                        mask.n_active()
                    );
                    cells.push(Cell {
                        seed,
                        scatter_seed: scatter_seed(cfg, seed),
                        strength,
                        mask: Some(mask.descriptor()),
                        rate: Some(rate),
                        m: Some(m),
                        n_active: Some(mask.n_active()),
                    });
                }
            }
        }
    }
    out.write("e2e.csv", csv.as_bytes())?;
    Ok(cells)
}
