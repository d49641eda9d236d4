use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stattn::data::{generate_synthetic_cohort, preprocess, split_folds, FeatureSequence, PreprocessOptions, SynthConfig};
use stattn::layers::Variant;
use stattn::training::{cross_validate, evaluate_auc, train_one, CvData, TrainConfig};

fn cohort(synth: &SynthConfig, seed: u64) -> Vec<FeatureSequence> {
    let s = generate_synthetic_cohort(synth, seed).unwrap();
    preprocess(&s.cohort, &PreprocessOptions::default()).unwrap().sequences
}

/// Train, validation and test sequences of fold 0.
fn fold0(seqs: &[FeatureSequence], seed: u64) -> [Vec<FeatureSequence>; 3] {
    let labels: Vec<(String, bool)> = seqs.iter().map(|s| (s.patient_id.clone(), s.label)).collect();
    let split = split_folds(&labels, 5, 0.2, seed).unwrap();
    let pick = |ids: &[String]| -> Vec<FeatureSequence> {
        ids.iter().map(|id| seqs.iter().find(|s| &s.patient_id == id).unwrap().clone()).collect()
    };
    let f = &split.folds[0];
    [pick(&f.train), pick(&f.validation), pick(&f.test)]
}

#[test]
fn two_patient_memorization_drives_loss_down_for_every_variant() {
    let seqs = cohort(&SynthConfig { n_patients: 2, ..SynthConfig::default() }, 3);
    let mut pair = seqs.clone();
    pair[0].label = true;
    pair[1].label = false;
    for variant in Variant::NEURAL {
        let cfg = TrainConfig {
            variant,
            hidden: 8,
            lr_start: 3e-2,
            lr_end: 1e-2,
            ..TrainConfig::default()
        };
        let out = train_one(&pair, &pair, &cfg).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|e| e.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{variant}: {losses:?}");
        assert!(*losses.last().unwrap() < 0.05, "{variant}: final loss {}", losses.last().unwrap());
    }
}

#[test]
fn selected_checkpoint_has_the_best_validation_auc() {
    let seqs = cohort(&SynthConfig { n_patients: 80, ..SynthConfig::default() }, 5);
    let [train, val, _] = fold0(&seqs, 5);
    let cfg = TrainConfig {
        variant: Variant::LstmTemporal,
        epochs: 12,
        hidden: 8,
        ..TrainConfig::default()
    };
    let out = train_one(&train, &val, &cfg).unwrap();
    let best = out.checkpoint.val_auc;
    assert!(out.history.iter().all(|e| e.val_auc <= best));
    let first = out.history.iter().position(|e| e.val_auc == best).unwrap();
    assert_eq!(out.checkpoint.epoch, first);
    // the stored parameters are the ones that scored that AUC
    let model = out.checkpoint.model().unwrap();
    assert_eq!(evaluate_auc(&model, &val).unwrap(), best);
}

#[test]
fn cohort_order_does_not_change_the_report() {
    let seqs = cohort(&SynthConfig { n_patients: 40, ..SynthConfig::default() }, 8);
    let cfg = TrainConfig {
        variant: Variant::Lstm,
        epochs: 3,
        hidden: 6,
        folds: 3,
        ..TrainConfig::default()
    };
    let a = cross_validate(&CvData { sequences: seqs.clone(), clinical: None }, &cfg).unwrap();
    let mut shuffled = seqs;
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let b = cross_validate(&CvData { sequences: shuffled, clinical: None }, &cfg).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.fold_auc.len(), 3);
    let mean = a.report.fold_auc.iter().sum::<f64>() / 3.0;
    assert_eq!(a.report.mean_auc, mean);
}

#[test]
fn strong_linear_signal_is_learned() {
    // only the admission severity drives the label, almost deterministically
    let synth = SynthConfig {
        motif_coef: 0.0,
        long_range_coef: 0.0,
        severity_coef: 4.0,
        intercept: 0.0,
        noise: 0.2,
        ..SynthConfig::default()
    };
    let seqs = cohort(&synth, 21);
    let [train, val, _] = fold0(&seqs, 21);
    let out = train_one(&train, &val, &TrainConfig { variant: Variant::Lstm, ..TrainConfig::default() }).unwrap();
    assert!(out.checkpoint.val_auc > 0.8, "best validation AUC {}", out.checkpoint.val_auc);
}

#[test]
fn null_signal_stays_near_chance() {
    let synth = SynthConfig::default().null();
    let mut vals = Vec::new();
    for seed in 0..3 {
        let seqs = cohort(&synth, 100 + seed);
        let [train, val, test] = fold0(&seqs, seed);
        let cfg = TrainConfig {
            variant: Variant::Lstm,
            seed,
            ..TrainConfig::default()
        };
        // the best validation AUC is a max over epochs, so score held-out rows
        let model = train_one(&train, &val, &cfg).unwrap().checkpoint.model().unwrap();
        vals.push(evaluate_auc(&model, &test).unwrap());
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((mean - 0.5).abs() <= 0.1, "test AUCs {vals:?}");
}
