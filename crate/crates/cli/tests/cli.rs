use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scatsense::datasets::write_idx;
use scatsense::{Image, LabeledDataset, Rng};
use scatsense_cli::config::{check, parse_config, ConfigError};
use scatsense_cli::runner::{rerun_manifest, run_experiment, Manifest};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scatsense"))
}

/// Ten classes, each a bright vertical bar at its own column, plus noise.
fn synthetic(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = Rng::new(seed);
    let (w, h) = (16, 16);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 10;
        let col = 1 + label;
        let pixels = (0..w * h)
            .map(|p| {
                let x = p % w;
                let base = if x == col || x == col + 1 { 180 } else { 10 };
                (base + rng.below(60)) as u8
            })
            .collect();
        images.push(Image::new(w, h, pixels).unwrap());
        labels.push(label);
    }
    LabeledDataset::new(images, labels, 10).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path();
        write_idx(&synthetic(200, 1), &p.join("train-img"), &p.join("train-lbl")).unwrap();
        write_idx(&synthetic(60, 2), &p.join("test-img"), &p.join("test-lbl")).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn dataset(&self) -> String {
        format!(
            "[dataset]\ntrain_images = {:?}\ntrain_labels = {:?}\ntest_images = {:?}\ntest_labels = {:?}\n\
             resize = [16, 16]\ntrain_size = 200\ntest_size = 60\n",
            self.path("train-img"),
            self.path("train-lbl"),
            self.path("test-img"),
            self.path("test-lbl")
        )
    }

    fn write_config(&self, name: &str, body: &str) -> PathBuf {
        let p = self.path(name);
        fs::write(&p, body).unwrap();
        p
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn config_round_trips_through_toml() {
    let fx = Fixture::new();
    let text = format!(
        "kind = \"width_sweep\"\nrates = [0.25]\nseeds = [3, 4]\n{}\n[mask]\nstrategy = \"a_central\"\nparams = [8, 12]\n\
         [train]\nepochs = 2\noptimizer = \"sgd\"\n[noise]\nsnr_db = 25.0\n",
        fx.dataset()
    );
    let cfg = parse_config(&text, Path::new("a.toml")).unwrap();
    check(&cfg).unwrap();
    let again = parse_config(&cfg.to_toml(), Path::new("b.toml")).unwrap();
    assert_eq!(cfg, again);
}

#[test]
fn validation_lists_every_error() {
    let fx = Fixture::new();
    let cfg = fx.write_config(
        "bad.toml",
        "kind = \"rate_sweep\"\nrates = [0.0, 1.5]\nseeds = []\n[dataset]\ntrain_images = \"/nope/img\"\n\
         train_labels = \"/nope/lbl\"\n[scatter]\nstrengths = [2.0]\n[mask]\nstrategy = \"full\"\nparams = [4]\n",
    );
    let out = bin().args(["validate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let err = stderr(&out);
    for field in [
        "dataset.train_images",
        "dataset.train_labels",
        "dataset.test_images",
        "rates[0]",
        "rates[1]",
        "seeds",
        "scatter.strengths[0]",
        "mask.params",
    ] {
        assert!(err.contains(field), "missing {field} in:\n{err}");
    }
}

#[test]
fn parse_errors_report_line_and_column() {
    let fx = Fixture::new();
    let cfg = fx.write_config("typo.toml", "kind = \"rate_sweep\"\nratez = [0.1]\n");
    let out = bin().args(["validate", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("typo.toml:2:1"), "{}", stderr(&out));

    let e = parse_config("kind = 3\n", Path::new("x.toml")).unwrap_err();
    assert!(matches!(e, ConfigError::Parse { line: 1, .. }));
}

#[test]
fn sweep_runs_and_learns_synthetic_classes() {
    let fx = Fixture::new();
    let cfg = fx.write_config(
        "sweep.toml",
        &format!(
            "kind = \"rate_sweep\"\nname = \"bars\"\nrates = [0.25]\nseeds = [0]\n{}\n[train]\nepochs = 15\n",
            fx.dataset()
        ),
    );
    let out_root = fx.path("runs");
    let out = bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&out_root).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let dir = out_root.join("bars");
    assert!(stdout(&out).contains("manifest.json"));

    let acc = fs::read_to_string(dir.join("accuracy.csv")).unwrap();
    let lines: Vec<&str> = acc.lines().collect();
    assert_eq!(lines.len(), 3, "{acc}");
    for row in &lines[1..] {
        let a: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
        assert!(a > 0.8, "accuracy {a} on separable bars: {row}");
    }

    let manifest = Manifest::load(&dir.join("manifest.json")).unwrap();
    assert_eq!(manifest.cells.len(), 2);
    assert_eq!(manifest.train_images, 200);
    for f in &manifest.outputs {
        assert_eq!(fs::metadata(dir.join(&f.file)).unwrap().len() as usize, f.bytes);
    }
}

#[test]
fn manifest_rerun_is_byte_identical() {
    let fx = Fixture::new();
    for (i, body) in [
        "kind = \"strength_sweep\"\nseeds = [0, 1]\n[scatter]\nfamily = \"monte_like\"\nstrengths = [0.0, 0.5]\n\
         [train]\nepochs = 2\n[noise]\nsnr_db = 15.0\n",
        "kind = \"entropy_report\"\n[scatter]\nfamily = \"transfer_matrix\"\n",
        "kind = \"nist_report\"\n[nist]\nimage_size = 64\nquantization = \"median\"\n",
        "kind = \"e2e_compare\"\nrates = [0.1]\n[train]\nepochs = 2\n",
    ]
    .iter()
    .enumerate()
    {
        // The dataset table must come after the top-level keys.
        let (top, rest) = body.split_at(body.find("\n[").map_or(body.len(), |i| i + 1));
        let text = format!("{top}{}{rest}", fx.dataset());
        let cfg = parse_config(&text, Path::new("c.toml")).unwrap();
        let first = fx.path(&format!("first{i}"));
        let second = fx.path(&format!("second{i}"));
        run_experiment(&cfg, &first).unwrap();
        rerun_manifest(&first.join("manifest.json"), Some(&second)).unwrap();
        let mut csvs = 0;
        for e in fs::read_dir(&first).unwrap() {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap();
            if name == "manifest.json" {
                continue;
            }
            csvs += usize::from(p.extension().is_some_and(|x| x == "csv"));
            assert_eq!(fs::read(&p).unwrap(), fs::read(second.join(name)).unwrap(), "{} differs", p.display());
        }
        assert!(csvs > 0);
    }
}

#[test]
fn stage_commands_chain() {
    let fx = Fixture::new();
    let meas = fx.path("m.csv");
    let out = bin()
        .args(["measure", "--images"])
        .arg(fx.path("train-img"))
        .arg("--labels")
        .arg(fx.path("train-lbl"))
        .args(["--rate", "0.25", "--strength", "0.5", "--out"])
        .arg(&meas)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("200 vectors of 64 values"), "{}", stdout(&out));

    let model = fx.path("model.bin");
    let out = bin()
        .arg("train")
        .arg("--data")
        .arg(&meas)
        .args(["--epochs", "10", "--hidden", "32", "--out"])
        .arg(&model)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));

    let out = bin().arg("eval").arg("--model").arg(&model).arg("--data").arg(&meas).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("accuracy "));

    let out = bin().arg("nist").arg("--measurements").arg(&meas).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("Passed"));

    let out = bin().args(["gradcheck", "--inputs", "12", "--hidden", "6", "--patterns", "4"]).output().unwrap();
    assert!(out.status.success(), "{}", stdout(&out));
}

#[test]
fn end_to_end_training_from_images() {
    let fx = Fixture::new();
    let model = fx.path("e2e.bin");
    let pats = fx.path("learned.bin");
    let out = bin()
        .arg("train")
        .arg("--images")
        .arg(fx.path("train-img"))
        .arg("--labels")
        .arg(fx.path("train-lbl"))
        .args(["--end-to-end", "8", "--epochs", "30", "--hidden", "32", "--out"])
        .arg(&model)
        .arg("--patterns-out")
        .arg(&pats)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(pats.is_file());
    let out = bin()
        .arg("eval")
        .arg("--model")
        .arg(&model)
        .arg("--images")
        .arg(fx.path("test-img"))
        .arg("--labels")
        .arg(fx.path("test-lbl"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let acc: f64 = stdout(&out).split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(acc > 0.8, "{acc}");
}

#[test]
fn missing_input_is_a_stage_failure() {
    let fx = Fixture::new();
    let out = bin().arg("nist").arg("--bits").arg(fx.path("absent.bits")).output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}
