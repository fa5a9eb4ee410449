use scatsense::decoder::{evaluate, stack_rows, train, DecoderModel, TrainConfig, TrainMode};
use scatsense::measurement::{from_binary, from_csv, measure_dataset, to_binary, to_csv};
use scatsense::nist::{quantize, run_battery, BitStream, Quantization, TestKind, TestParams, Verdict};
use scatsense::patterns::{hadamard_patterns_for, make_mask, FovStrategy};
use scatsense::scattering::{build_operator, scatter_dataset};
use scatsense::{Image, LabeledDataset, Rng, ScatterConfig, ScatterFamily};

/// Four classes of 16x16 images, one bright quadrant each, with noise.
fn quadrants(n: usize, seed: u64) -> LabeledDataset {
    let mut rng = Rng::new(seed);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let q = i % 4;
        let pixels = (0..256)
            .map(|p| {
                let (x, y) = (p % 16, p / 16);
                let hit = (x >= 8) as usize + 2 * (y >= 8) as usize == q;
                (if hit { 170 } else { 20 } + rng.below(80)) as u8
            })
            .collect();
        images.push(Image::new(16, 16, pixels).unwrap());
        labels.push(q);
    }
    LabeledDataset::new(images, labels, 4).unwrap()
}

fn features(ds: &LabeledDataset, family: ScatterFamily, strength: f64, rate: f64) -> ndarray::Array2<f64> {
    let op = build_operator(&ScatterConfig::new(family, strength, 5).unwrap(), 16, 16).unwrap();
    let ds = scatter_dataset(&op, ds).unwrap();
    let ps = hadamard_patterns_for(16, 16, FovStrategy::Full, None, rate, 5).unwrap();
    let rows: Vec<Vec<f64>> = measure_dataset(&ds, &ps, None, 5).unwrap().into_iter().map(|m| m.values).collect();
    stack_rows(&rows).unwrap()
}

#[test]
fn every_family_supports_classification() {
    let (tr, te) = (quadrants(160, 1), quadrants(80, 2));
    let cfg = TrainConfig { epochs: 30, hidden: 32, ..TrainConfig::default() };
    for family in [ScatterFamily::MonteLike, ScatterFamily::ScatnetLike, ScatterFamily::TransferMatrix] {
        let fit = train(features(&tr, family, 0.5, 0.1).view(), tr.labels(), 4, &cfg).unwrap();
        let acc = evaluate(&fit.model, features(&te, family, 0.5, 0.1).view(), te.labels()).unwrap();
        assert!(acc > 0.9, "{}: {acc}", family.name());
    }
}

#[test]
fn training_is_deterministic() {
    let tr = quadrants(64, 3);
    let x = features(&tr, ScatterFamily::ScatnetLike, 0.75, 0.25);
    let cfg = TrainConfig { epochs: 3, hidden: 16, seed: 9, ..TrainConfig::default() };
    let a = train(x.view(), tr.labels(), 4, &cfg).unwrap();
    let b = train(x.view(), tr.labels(), 4, &cfg).unwrap();
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    assert_eq!(a.loss_curve, b.loss_curve);
}

#[test]
fn end_to_end_model_exports_patterns_over_mask() {
    let tr = quadrants(120, 4);
    let mask = make_mask(FovStrategy::ACentral, 16, 16, Some(12)).unwrap();
    let rows: Vec<Vec<f64>> = tr
        .images()
        .iter()
        .map(|im| mask.active().iter().map(|&p| f64::from(im.pixels()[p])).collect())
        .collect();
    let x = stack_rows(&rows).unwrap();
    let cfg = TrainConfig { epochs: 60, learning_rate: 3e-3, hidden: 16, mode: TrainMode::EndToEnd { patterns: 6 }, ..TrainConfig::default() };
    let fit = train(x.view(), tr.labels(), 4, &cfg).unwrap();
    let acc = evaluate(&fit.model, x.view(), tr.labels()).unwrap();
    assert!(acc > 0.9, "{acc} {:?}", fit.loss_curve);
    let ps = fit.model.learned_patterns(mask.clone(), 0).unwrap().unwrap();
    assert_eq!(ps.len(), 6);
    assert_eq!(ps.mask(), &mask);
    let again = DecoderModel::from_bytes(&fit.model.to_bytes()).unwrap();
    assert_eq!(again.to_bytes(), fit.model.to_bytes());
}

#[test]
fn measurement_files_round_trip_into_ciphertext() {
    let ds = quadrants(8, 6);
    let ps = hadamard_patterns_for(16, 16, FovStrategy::BInterleaved, Some(8), 1.0, 2).unwrap();
    let meas = measure_dataset(&ds, &ps, Some(30.0), 2).unwrap();
    let (labels, rows) = from_csv(&to_csv(&meas)).unwrap();
    assert_eq!(labels, ds.labels().iter().map(|&l| Some(l)).collect::<Vec<_>>());
    assert_eq!(rows, from_binary(&to_binary(&meas).unwrap()).unwrap());
    assert_eq!(rows[3], meas[3].values);

    let bits = quantize(&meas, Quantization::Affine16).unwrap();
    assert_eq!(bits.len(), 16 * 8 * ps.len());
    assert_eq!(BitStream::decode(&bits.encode()).unwrap(), bits);
    // 8192 bits: long enough for Frequency, far too short for Universal.
    let report = run_battery(&bits, &TestParams::default());
    assert!(matches!(report.get(TestKind::Frequency).unwrap().verdict, Verdict::Ran(_)));
    assert!(matches!(report.get(TestKind::Universal).unwrap().verdict, Verdict::Skipped { .. }));
    assert!(report.applicable() < 12);
}
