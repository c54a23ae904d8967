use heparin_core::dynamics::{simulate, GlobalDecayRates, Label, PatientParams};
use heparin_core::estimation::ObservationSeries;
use heparin_core::evaluation::{
    argmax_label, binary_roc, confusion, epochs, evaluate_cohort, persistence_series, pooled_binary,
    predict_label_probs, reading_label_probs, roc, Averaging, EpochPrediction, EvaluationConfig, LabelSeries,
};
use heparin_core::simulator::synth::titration_record;
use heparin_core::simulator::{synthetic_domains, PatientTruth, SynthRanges};
use heparin_core::dosing::BleedRisk;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::{mann_whitney_auc, table};

fn patient(b: f64, yb: f64) -> PatientParams<f64> {
    PatientParams {
        alpha: 0.5,
        k: 1500.0,
        b,
        y0: yb,
        yb0: yb,
        yb,
    }
}

fn epoch(truth: Label, probs: [f64; 3]) -> EpochPrediction {
    EpochPrediction {
        start: 0,
        hour: 1,
        truth,
        predicted: argmax_label(&probs),
        probs,
        confident: true,
    }
}

fn random_series<G: Rng>(rng: &mut G, n: usize, informative: bool) -> Vec<LabelSeries> {
    let epochs = (0..n)
        .map(|_| {
            let truth = Label::ALL[rng.gen_range(0..3)];
            let mut p: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
            if informative {
                p[truth.index()] += 0.6;
            }
            let s: f64 = p.iter().sum();
            epoch(truth, p.map(|v| v / s))
        })
        .collect();
    vec![LabelSeries {
        patient_id: "x".into(),
        epochs,
    }]
}

#[test]
fn label_probabilities_partition() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let p = reading_label_probs(rng.gen_range(0.0..300.0), rng.gen_range(20.0..45.0), rng.gen_range(0.1..20.0));
        assert!(p.iter().all(|&v| v >= 0.0));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn mixture_examples() {
    let g = GlobalDecayRates::default();
    let d = synthetic_domains();
    // Constant infusion holding a sensitive patient near the middle of the band.
    let doses = vec![700.0; 48];
    let mid = patient(0.0031, 30.0);
    let y = simulate(&mid, &g, &doses, &d).unwrap().y();
    assert!(y[48] > 50.0 && y[48] < 70.0, "{}", y[48]);
    let p = predict_label_probs(&table(&[(mid, 1.0)]), &doses, 48, 0.01, &g, &d).unwrap();
    assert!(p[1] > 0.999);
    let low = patient(0.0005, 30.0);
    let high = patient(0.008, 30.0);
    let p = predict_label_probs(&table(&[(low, 1.0), (high, 1.0)]), &doses, 48, 0.01, &g, &d).unwrap();
    assert!((p[0] - 0.5).abs() < 1e-6 && (p[2] - 0.5).abs() < 1e-6 && p[1] < 1e-6, "{p:?}");
    assert!(predict_label_probs(&table(&[(mid, 1.0)]), &doses, 49, 1.0, &g, &d).is_err());
}

#[test]
fn micro_two_paths_and_mann_whitney() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in [30, 200, 1000] {
        let s = random_series(&mut rng, n, true);
        let micro = roc(&s, Averaging::Micro).unwrap();
        let (scores, pos) = pooled_binary(&s);
        assert_eq!(scores.len(), 3 * n);
        let (_, direct) = binary_roc(&scores, &pos).unwrap();
        assert_eq!(micro.auc, direct);
        let pairs: Vec<(f64, bool)> = scores.iter().copied().zip(pos.iter().copied()).collect();
        assert!((micro.auc - mann_whitney_auc(&pairs).unwrap()).abs() < 1e-12);
        for c in [&micro, &roc(&s, Averaging::Macro).unwrap()] {
            assert!(c.points.windows(2).all(|w| w[1].0 >= w[0].0 && w[1].1 >= w[0].1));
            assert_eq!(c.points.first(), Some(&(0.0, 0.0)));
            assert_eq!(c.points.last(), Some(&(1.0, 1.0)));
            assert!((0.0..=1.0).contains(&c.auc));
        }
    }
}

#[test]
fn ties_count_half() {
    let scores = [0.5, 0.5, 0.5, 0.9];
    let pos = [true, false, false, true];
    let (_, auc) = binary_roc(&scores, &pos).unwrap();
    let pairs: Vec<_> = scores.iter().copied().zip(pos).collect();
    assert!((auc - mann_whitney_auc(&pairs).unwrap()).abs() < 1e-12);
    assert!(binary_roc(&[0.1, 0.2], &[true, true]).is_none());
}

#[test]
fn perfect_and_random_scores() {
    let perfect: Vec<EpochPrediction> = (0..90)
        .map(|i| {
            let l = Label::ALL[i % 3];
            let mut p = [0.0; 3];
            p[l.index()] = 1.0;
            epoch(l, p)
        })
        .collect();
    let s = vec![LabelSeries {
        patient_id: "p".into(),
        epochs: perfect,
    }];
    assert_eq!(roc(&s, Averaging::Micro).unwrap().auc, 1.0);
    assert_eq!(roc(&s, Averaging::Macro).unwrap().auc, 1.0);
    let c = confusion(&s).unwrap();
    let diag: f64 = (0..3).map(|i| c.matrix[i][i]).sum();
    assert!((diag - 1.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let r = random_series(&mut rng, 10_000, false);
    assert!((roc(&r, Averaging::Micro).unwrap().auc - 0.5).abs() < 0.03);
    assert!((roc(&r, Averaging::Macro).unwrap().auc - 0.5).abs() < 0.03);
    // Scrambled predictions spread each true class evenly.
    let c = confusion(&r).unwrap();
    let total: f64 = c.matrix.iter().flatten().sum();
    assert!((total - 1.0).abs() < 1e-9);
    for row in c.matrix {
        let share: f64 = row.iter().sum();
        for v in row {
            assert!((v / share - 1.0 / 3.0).abs() < 0.05);
        }
    }
}

#[test]
fn single_class_data() {
    let e: Vec<EpochPrediction> = (0..20).map(|i| epoch(Label::Therapeutic, [0.1, 0.5 + i as f64 * 0.01, 0.4 - i as f64 * 0.01])).collect();
    let s = vec![LabelSeries {
        patient_id: "one".into(),
        epochs: e,
    }];
    assert!(roc(&s, Averaging::Micro).is_ok());
    let m = roc(&s, Averaging::Macro);
    // Every class lacks one outcome; nothing is left to average.
    assert!(m.is_err() || m.unwrap().skipped.len() == 3);
}

fn record_with_labels(ys: &[f64], spacing: usize) -> ObservationSeries<f64> {
    let obs: Vec<(usize, f64)> = ys.iter().enumerate().map(|(i, &y)| (1 + i * spacing, y)).collect();
    let h = obs.last().unwrap().0;
    ObservationSeries::new(vec![0.0; h], obs, 1.0).unwrap()
}

#[test]
fn persistence_examples() {
    // One reading per 4-hour epoch.
    let constant = record_with_labels(&[60.0; 12], 4);
    let s = persistence_series("c", &constant, 30.0, 4, 1).unwrap();
    assert!(s.epochs.iter().all(|e| e.predicted == e.truth && e.confident));
    let alternating: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 30.0 } else { 90.0 }).collect();
    let s = persistence_series("a", &record_with_labels(&alternating, 4), 30.0, 4, 1).unwrap();
    assert!(s.epochs.iter().all(|e| e.predicted != e.truth));
    // Readings every 8 hours leave every other epoch without a previous label.
    let sparse = record_with_labels(&[60.0; 6], 8);
    let s = persistence_series("s", &sparse, 30.0, 4, 1).unwrap();
    let blind: Vec<_> = s.epochs.iter().filter(|e| !e.confident).collect();
    assert!(!blind.is_empty());
    assert!(blind.iter().all(|e| e.predicted == Label::Therapeutic && e.probs == [1.0 / 3.0; 3]));
    assert_eq!(epochs(&sparse, 4, 1).len(), s.epochs.len());
}

#[test]
fn noiseless_on_grid_predictions_are_mostly_right() {
    let ranges = SynthRanges::default();
    let mut cfg = EvaluationConfig::for_ranges(&ranges);
    cfg.workers = 1;
    let b_grid = cfg.b_values.clone();
    let (g, d) = (cfg.estimation.gammas, cfg.estimation.domains.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cohort: Vec<PatientTruth> = (0..4)
        .map(|i| {
            let yb = rng.gen_range(25.0..40.0);
            let params = PatientParams {
                alpha: ranges.alphas[i % 2],
                k: rng.gen_range(800.0..2500.0),
                b: b_grid[rng.gen_range(0..b_grid.len())],
                y0: yb,
                yb0: yb,
                yb,
            };
            let weight = 80.0;
            let record = titration_record(&params, weight, 1e-3, 120, (4, 6), 0.0, true, &g, &d, &mut rng);
            PatientTruth {
                id: format!("grid-{i}"),
                params,
                noise_scale: 1e-3,
                weight_kg: weight,
                bleed_risk: BleedRisk::Low,
                record,
            }
        })
        .collect();
    let report = evaluate_cohort(&cohort, &cfg).unwrap();
    let all: Vec<&EpochPrediction> = report.model_series.iter().flat_map(|s| &s.epochs).collect();
    let right = all.iter().filter(|e| e.predicted == e.truth).count();
    assert!(right as f64 >= 0.9 * all.len() as f64, "{right} of {}", all.len());
    let c = &report.model.confusion;
    assert!((c.matrix.iter().flatten().sum::<f64>() - 1.0).abs() < 1e-9);
}
