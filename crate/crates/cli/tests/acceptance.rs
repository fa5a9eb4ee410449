//! Acceptance checks, one PASS/FAIL line each.
//!
//! MNIST is read from `$SCATSENSE_MNIST_DIR` (default `data/mnist` at the
//! workspace root); criteria that need it print SKIP when it is missing.
//! Failures are reported but only change the exit status when
//! `SCATSENSE_ACCEPTANCE_STRICT=1`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use scatsense::datasets::{load_idx, resize_nearest, Image};
use scatsense::decoder::{grad_check, DecoderModel, GRADCHECK_SAMPLES};
use scatsense::entropy::{dataset_entropy, entropy_report, image_entropy};
use scatsense::nist::stats::{cumulative_sums, frequency};
use scatsense::nist::{run_battery, BitStream, TestParams, Verdict};
use scatsense::patterns::hadamard_matrix;
use scatsense::scattering::{build_operator, scatter};
use scatsense::{Rng, ScatterConfig, ScatterFamily};
use scatsense_cli::config::parse_config;
use scatsense_cli::runner::{rerun_manifest, run_experiment};

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Mnist {
    dir: PathBuf,
}

impl Mnist {
    fn locate() -> Option<Self> {
        let dir = std::env::var_os("SCATSENSE_MNIST_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
        let ok = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]
            .iter()
            .all(|f| dir.join(f).is_file());
        ok.then_some(Self { dir })
    }

    fn file(&self, name: &str) -> String {
        self.dir.join(name).display().to_string()
    }

    fn dataset_block(&self, train: usize, test: usize, resize: usize) -> String {
        format!(
            "[dataset]\ntrain_images = {:?}\ntrain_labels = {:?}\ntest_images = {:?}\ntest_labels = {:?}\n\
             resize = [{resize}, {resize}]\ntrain_size = {train}\ntest_size = {test}\n",
            self.file("train-images-idx3-ubyte"),
            self.file("train-labels-idx1-ubyte"),
            self.file("t10k-images-idx3-ubyte"),
            self.file("t10k-labels-idx1-ubyte"),
        )
    }
}

fn ok(pass: bool, msg: String) -> Outcome {
    if pass {
        Outcome::Pass(msg)
    } else {
        Outcome::Fail(msg)
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

/// Parse a config, run it into a fresh temp dir and return the output dir.
fn run(toml: &str) -> Result<(tempfile::TempDir, PathBuf), String> {
    let cfg = parse_config(toml, Path::new("acceptance.toml")).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = tmp.path().join(cfg.name());
    run_experiment(&cfg, &out).map_err(|e| e.to_string())?;
    Ok((tmp, out))
}

/// Rows of a CSV file as header-keyed lookups.
fn csv_rows(path: &Path) -> Vec<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).expect("output CSV");
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or("").split(',').map(String::from).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(String::from)).collect())
        .collect()
}

fn field(row: &[(String, String)], name: &str) -> f64 {
    row.iter()
        .find(|(k, _)| k == name)
        .and_then(|(_, v)| v.parse().ok())
        .unwrap_or_else(|| panic!("missing numeric column {name}"))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// Independent error-function oracle: Maclaurin series for small arguments,
// Lentz continued fraction for the tail.
fn erfc_oracle(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc_oracle(-x);
    }
    if x < 2.5 {
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        return 1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum;
    }
    let tiny = 1e-300;
    let mut f = x;
    let (mut c, mut d) = (x, 0.0);
    for k in 1..300 {
        let a = k as f64 / 2.0;
        d = x + a * d;
        d = if d.abs() < tiny { tiny } else { d };
        c = x + a / c;
        c = if c.abs() < tiny { tiny } else { c };
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    (-x * x).exp() / (f * std::f64::consts::PI.sqrt())
}

fn phi(x: f64) -> f64 {
    0.5 * erfc_oracle(-x / std::f64::consts::SQRT_2)
}

fn cusum_oracle(bits: &[u8]) -> f64 {
    let n = bits.len() as f64;
    let (mut s, mut z) = (0i64, 0i64);
    for &b in bits {
        s += if b == 1 { 1 } else { -1 };
        z = z.max(s.abs());
    }
    let z = z as f64;
    // Summation bounds truncate toward zero, as in the reference code; floor
    // bounds give 0.41158 instead of the published 0.4116588 for 1011010111.
    let lo1 = ((-n / z + 1.0) / 4.0).trunc() as i64;
    let hi = ((n / z - 1.0) / 4.0).trunc() as i64;
    let lo2 = ((-n / z - 3.0) / 4.0).trunc() as i64;
    let a: f64 = (lo1..=hi)
        .map(|k| phi((4 * k + 1) as f64 * z / n.sqrt()) - phi((4 * k - 1) as f64 * z / n.sqrt()))
        .sum();
    let b: f64 = (lo2..=hi)
        .map(|k| phi((4 * k + 3) as f64 * z / n.sqrt()) - phi((4 * k + 1) as f64 * z / n.sqrt()))
        .sum();
    1.0 - a + b
}

fn bits_of(s: &str) -> Vec<u8> {
    s.bytes().map(|c| c - b'0').collect()
}

fn prng_stream(n: usize, seed: u64) -> BitStream {
    let mut rng = Rng::new(seed);
    let bits: Vec<u8> = (0..n.div_ceil(64))
        .flat_map(|_| {
            let w = rng.next_u64();
            (0..64).map(move |i| ((w >> i) & 1) as u8)
        })
        .take(n)
        .collect();
    BitStream::from_bits(&bits)
}

fn hadamard_exactness() -> Outcome {
    let t = Instant::now();
    let mut bad = Vec::new();
    for n in 1..=10u32 {
        let h = hadamard_matrix(n).expect("order within limit");
        let size = h.size();
        let scale = 1i64 << n;
        let exact = (0..size).all(|i| {
            let ri = h.row(i);
            (0..size).all(|j| {
                let dot: i64 = ri.iter().zip(h.row(j)).map(|(&a, &b)| i64::from(a) * i64::from(b)).sum();
                dot == if i == j { scale } else { 0 }
            })
        });
        if !exact {
            bad.push(n);
        }
    }
    let el = t.elapsed();
    ok(
        bad.is_empty() && within(el, 5),
        format!("H*H^T == 2^n I for n=1..10, failures {bad:?}, {:.2}s (limit 5s)", el.as_secs_f64()),
    )
}

fn entropy_anchors(mnist: Option<&Mnist>) -> Outcome {
    let t = Instant::now();
    let constant = image_entropy(&Image::filled(16, 16, 77).unwrap());
    let ramp = image_entropy(&Image::new(16, 16, (0..=255u8).collect()).unwrap());
    let anchors = constant == 0.0 && ramp == 8.0;
    let Some(m) = mnist else {
        return Outcome::Skip(format!(
            "constant {constant}, uniform {ramp}; MNIST not found for the dataset anchor"
        ));
    };
    let ds = load_idx(&m.dir.join("train-images-idx3-ubyte"), &m.dir.join("train-labels-idx1-ubyte"))
        .expect("MNIST train set");
    let rep = dataset_entropy(&ds).expect("nonempty");
    let el = t.elapsed();
    ok(
        anchors && (rep.mean - 3.09).abs() <= 0.15 && within(el, 60),
        format!(
            "constant {constant}, uniform {ramp}, MNIST train mean {:.4} over {} images (target 3.09 +- 0.15), {:.1}s",
            rep.mean,
            ds.len(),
            el.as_secs_f64()
        ),
    )
}

fn entropy_boost(mnist: Option<&Mnist>) -> Outcome {
    let Some(m) = mnist else {
        return Outcome::Skip("MNIST not found".into());
    };
    let t = Instant::now();
    let ds = load_idx(&m.dir.join("train-images-idx3-ubyte"), &m.dir.join("train-labels-idx1-ubyte"))
        .expect("MNIST train set");
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    Rng::new(0).shuffle(&mut idx);
    let sample: Vec<Image> = idx[..100]
        .iter()
        .map(|&i| resize_nearest(&ds.images()[i], 64, 64).unwrap())
        .collect();
    let op = build_operator(&ScatterConfig::new(ScatterFamily::ScatnetLike, 0.75, 0).unwrap(), 64, 64).unwrap();
    let scattered: Vec<Image> = sample.iter().map(|im| scatter(&op, im).unwrap()).collect();
    let before = entropy_report(&sample).unwrap().mean;
    let after = entropy_report(&scattered).unwrap().mean;
    let el = t.elapsed();
    ok(
        after - before >= 1.5 && within(el, 30),
        format!(
            "mean entropy {before:.3} -> {after:.3} bits (+{:.3}, need >= 1.5), {:.1}s",
            after - before,
            el.as_secs_f64()
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let t = Instant::now();
    let mut rng = Rng::new(11);
    let x: Vec<f64> = (0..64).map(|_| rng.gaussian()).collect();
    let fixed = DecoderModel::new(64, 32, 10, None, 3);
    let e_fixed = grad_check(&fixed, &x, 4, 1).unwrap();

    let pixels: Vec<f64> = (0..64 * 30).map(|_| (rng.next_f64() * 256.0).floor()).collect();
    let batch = ndarray::Array2::from_shape_vec((30, 64), pixels).unwrap();
    let mut e2e = DecoderModel::new(64, 32, 10, Some(16), 3);
    e2e.fit_standardization(batch.view());
    let e_e2e = grad_check(&e2e, &batch.row(0).to_vec(), 7, 1).unwrap();
    let el = t.elapsed();
    ok(
        e_fixed < 1e-4 && e_e2e < 1e-4 && GRADCHECK_SAMPLES >= 200 && within(el, 30),
        format!(
            "max rel error fixed {e_fixed:.2e}, end-to-end {e_e2e:.2e} ({GRADCHECK_SAMPLES} params each), {:.1}s",
            el.as_secs_f64()
        ),
    )
}

fn desk_sensing(mnist: Option<&Mnist>) -> Outcome {
    let Some(m) = mnist else {
        return Outcome::Skip("MNIST not found".into());
    };
    let t = Instant::now();
    let toml = format!(
        "kind = \"rate_sweep\"\nname = \"desk\"\nrates = [0.1]\nseeds = [0]\n{}\n[scatter]\nstrengths = [0.0]\n",
        m.dataset_block(5000, 1000, 64)
    );
    let (_tmp, out) = match run(&toml) {
        Ok(v) => v,
        Err(e) => return Outcome::Fail(e),
    };
    let acc = field(&csv_rows(&out.join("accuracy.csv"))[0], "test_accuracy");
    let el = t.elapsed();
    ok(
        acc >= 0.85 && within(el, 600),
        format!("test accuracy {acc:.4} at rate 0.1 (floor 0.85), {:.1}s", el.as_secs_f64()),
    )
}

fn scattering_benefit(mnist: Option<&Mnist>) -> Outcome {
    let Some(m) = mnist else {
        return Outcome::Skip("MNIST not found".into());
    };
    let t = Instant::now();
    let toml = format!(
        "kind = \"width_sweep\"\nname = \"benefit\"\nrates = [0.05]\nseeds = [0, 1, 2]\n{}\n\
         [scatter]\nfamily = \"scatnet_like\"\nstrengths = [0.0, 0.75]\n[mask]\nstrategy = \"a_central\"\nparams = [32]\n",
        m.dataset_block(5000, 1000, 64)
    );
    let (_tmp, out) = match run(&toml) {
        Ok(v) => v,
        Err(e) => return Outcome::Fail(e),
    };
    let rows = csv_rows(&out.join("accuracy.csv"));
    let by = |s: f64| -> Vec<f64> {
        rows.iter()
            .filter(|r| field(r, "strength") == s)
            .map(|r| field(r, "test_accuracy"))
            .collect()
    };
    let (plain, scat) = (by(0.0), by(0.75));
    ok(
        mean(&scat) >= mean(&plain),
        format!(
            "seed-mean accuracy without {:.4} {plain:?}, with 0.75 {:.4} {scat:?}, {:.1}s",
            mean(&plain),
            mean(&scat),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn learned_benefit(mnist: Option<&Mnist>) -> Outcome {
    let Some(m) = mnist else {
        return Outcome::Skip("MNIST not found".into());
    };
    let t = Instant::now();
    let toml = format!(
        "kind = \"e2e_compare\"\nname = \"learned\"\nrates = [0.005]\nseeds = [0, 1, 2]\n{}\n[scatter]\nstrengths = [0.0]\n",
        m.dataset_block(5000, 1000, 64)
    );
    let (_tmp, out) = match run(&toml) {
        Ok(v) => v,
        Err(e) => return Outcome::Fail(e),
    };
    let rows = csv_rows(&out.join("e2e.csv"));
    let had: Vec<f64> = rows.iter().map(|r| field(r, "hadamard_accuracy")).collect();
    let learned: Vec<f64> = rows.iter().map(|r| field(r, "learned_accuracy")).collect();
    ok(
        mean(&learned) >= mean(&had),
        format!(
            "rate 0.005 (m={}) seed-mean Hadamard {:.4} {had:?}, learned {:.4} {learned:?}, {:.1}s",
            field(&rows[0], "m"),
            mean(&had),
            mean(&learned),
            t.elapsed().as_secs_f64()
        ),
    )
}

fn nist_oracles() -> Outcome {
    let t = Instant::now();
    let eps = bits_of("1011010101");
    let freq = frequency(&eps).p_values[0];
    let freq_oracle = erfc_oracle(2.0 / (2.0 * 10.0f64).sqrt());
    let cusum = cumulative_sums(&eps).p_values[0];
    let cusum_or = cusum_oracle(&eps);
    // The 0.4117 anchor is the forward value for 1011010111 (max excursion 4).
    let anchor_seq = bits_of("1011010111");
    let anchor = cumulative_sums(&anchor_seq).p_values[0];
    let anchor_or = cusum_oracle(&anchor_seq);
    let four = |a: f64, b: f64| (a - b).abs() < 5e-5;
    let oracles = four(freq, freq_oracle)
        && four(freq, 0.5271)
        && four(cusum, cusum_or)
        && four(anchor, anchor_or)
        && four(anchor, 0.4117);

    let zeros = run_battery(&BitStream::from_bits(&vec![0u8; 1 << 20]), &TestParams::default());
    let zero_passes = zeros.pass_count();
    let zero_ran = zeros.entries.iter().filter(|e| matches!(e.verdict, Verdict::Ran(_))).count();

    let prng: Vec<usize> = (0..5)
        .map(|s| run_battery(&prng_stream(1 << 20, s), &TestParams::default()).pass_count())
        .collect();
    let el = t.elapsed();
    ok(
        oracles && zero_passes == 0 && zero_ran > 0 && prng.iter().all(|&p| p >= 10) && within(el, 300),
        format!(
            "Frequency {freq:.4} (oracle {freq_oracle:.4}); CumulativeSums 1011010101 {cusum:.4} (oracle {cusum_or:.4}), \
             1011010111 {anchor:.7} (oracle {anchor_or:.7}, anchor 0.4117); all-zeros passes {zero_passes}/{zero_ran}; \
             PRNG passes {prng:?} of 12; {:.1}s",
            el.as_secs_f64()
        ),
    )
}

fn encryption_ordering(mnist: Option<&Mnist>) -> Outcome {
    let Some(m) = mnist else {
        return Outcome::Skip("MNIST not found".into());
    };
    let t = Instant::now();
    let toml = format!(
        "kind = \"nist_report\"\nname = \"cipher\"\nseeds = [0]\n{}\n[scatter]\nstrengths = [0.0, 0.75]\n\
         [nist]\nimage_index = 0\nimage_size = 1000\nrate = 1.0\n",
        m.dataset_block(10, 10, 64)
    );
    let (_tmp, out) = match run(&toml) {
        Ok(v) => v,
        Err(e) => return Outcome::Fail(e),
    };
    let rows = csv_rows(&out.join("nist_summary.csv"));
    let count = |s: f64| {
        rows.iter()
            .find(|r| field(r, "strength") == s)
            .map(|r| (field(r, "passed"), field(r, "applicable"), field(r, "stream_bits")))
            .expect("condition row")
    };
    let (plain, scat) = (count(0.0), count(0.75));
    let el = t.elapsed();
    ok(
        scat.0 >= plain.0 && within(el, 1800),
        format!(
            "{} bits per stream; passes without scatter {}/{}, with 0.75 {}/{}, {:.1}s",
            plain.2,
            plain.0,
            plain.1,
            scat.0,
            scat.1,
            el.as_secs_f64()
        ),
    )
}

fn determinism(mnist: Option<&Mnist>) -> Outcome {
    let Some(m) = mnist else {
        return Outcome::Skip("MNIST not found".into());
    };
    let data = m.dataset_block(300, 100, 32);
    let configs = [
        format!("kind = \"rate_sweep\"\nrates = [0.05, 0.1]\nseeds = [0, 1]\n{data}\n[train]\nepochs = 2\n[noise]\nsnr_db = 20.0\n"),
        format!("kind = \"width_sweep\"\nseeds = [0]\n{data}\n[mask]\nstrategy = \"b_interleaved\"\nparams = [8, 16]\n[train]\nepochs = 2\n"),
        format!("kind = \"strength_sweep\"\nseeds = [0]\n{data}\n[scatter]\nfamily = \"monte_like\"\nstrengths = [0.0, 0.3, 0.9]\n[train]\nepochs = 2\n"),
        format!("kind = \"entropy_report\"\nseeds = [0, 1]\n{data}"),
        format!("kind = \"nist_report\"\nseeds = [0]\n{data}\n[nist]\nimage_size = 128\n"),
        format!("kind = \"e2e_compare\"\nseeds = [0]\n{data}\n[scatter]\nfamily = \"transfer_matrix\"\n[train]\nepochs = 2\n"),
    ];
    let mut compared = 0;
    let mut diffs = Vec::new();
    for toml in &configs {
        let (tmp, out) = match run(toml) {
            Ok(v) => v,
            Err(e) => return Outcome::Fail(e),
        };
        let again = tmp.path().join("rerun");
        if let Err(e) = rerun_manifest(&out.join("manifest.json"), Some(&again)) {
            return Outcome::Fail(e.to_string());
        }
        for entry in std::fs::read_dir(&out).unwrap() {
            let p = entry.unwrap().path();
            if p.extension().is_some_and(|e| e == "csv") {
                compared += 1;
                let name = p.file_name().unwrap();
                if std::fs::read(&p).unwrap() != std::fs::read(again.join(name)).unwrap() {
                    diffs.push(format!("{}/{}", out.file_name().unwrap().to_string_lossy(), name.to_string_lossy()));
                }
            }
        }
    }
    ok(
        diffs.is_empty() && compared > 0,
        format!("{compared} CSV outputs across {} experiment kinds, differing: {diffs:?}", configs.len()),
    )
}

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    // libtest-style flags (e.g. --nocapture, filters) are accepted and ignored.
    let mnist = Mnist::locate();
    let criteria: [(&str, Check); 10] = [
        ("hadamard exactness", Box::new(hadamard_exactness)),
        ("entropy anchors", Box::new(|| entropy_anchors(mnist.as_ref()))),
        ("entropy boost", Box::new(|| entropy_boost(mnist.as_ref()))),
        ("gradient correctness", Box::new(gradient_correctness)),
        ("desk-scale sensing", Box::new(|| desk_sensing(mnist.as_ref()))),
        ("scattering benefit", Box::new(|| scattering_benefit(mnist.as_ref()))),
        ("learned-pattern benefit", Box::new(|| learned_benefit(mnist.as_ref()))),
        ("NIST oracle agreement", Box::new(nist_oracles)),
        ("encryption ordering", Box::new(|| encryption_ordering(mnist.as_ref()))),
        ("determinism", Box::new(|| determinism(mnist.as_ref()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (tag, msg) = match check() {
            Outcome::Pass(m) => ("PASS", m),
            Outcome::Fail(m) => {
                failed += 1;
                ("FAIL", m)
            }
            Outcome::Skip(m) => ("SKIP", m),
        };
        println!("{tag} {:>2} {name}: {msg}", i + 1);
    }
    println!("{failed} of {} criteria failed", criteria.len());
    if failed > 0 && std::env::var("SCATSENSE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
