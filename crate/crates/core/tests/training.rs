use redreg::checkpoint;
use redreg::config::{DataSource, Method, RunConfig, SyntheticSource};
use redreg::data::{generate_synthetic, Dataset, SynthConfig};
use redreg::model::{Architecture, ModelState};
use redreg::telemetry::{RecordKind, TelemetryRecord};
use redreg::trainer::{evaluate, prepare_data, train_collect, train_from};
use redreg::{Error, Modality, RngState};

fn small(method: Method) -> RunConfig {
    RunConfig {
        method,
        seed: 11,
        epochs: 6,
        batch_size: 32,
        data: DataSource::Synthetic(SyntheticSource { n: 400, ..Default::default() }),
        ..Default::default()
    }
}

fn epochs(records: &[TelemetryRecord]) -> Vec<&TelemetryRecord> {
    records.iter().filter(|r| r.kind == Some(RecordKind::Epoch)).collect()
}

#[test]
fn untrained_model_is_near_chance() {
    let test = generate_synthetic(&SynthConfig { n: 400, k: 4, ..Default::default() }).unwrap();
    for seed in 0..5 {
        let model = ModelState::init(&Architecture::default(), [16, 16], 4, &mut RngState::new(seed)).unwrap();
        let acc = evaluate(&model, &test).unwrap().accuracy;
        assert!((0.15..=0.35).contains(&acc), "seed {seed}: accuracy {acc}");
    }
}

#[test]
fn infinite_threshold_reproduces_joint_bitwise() {
    let joint = small(Method::Joint);
    let mut redreg = small(Method::Redreg);
    redreg.gate.r_threshold = f64::INFINITY;
    let (tr, te) = prepare_data(&joint).unwrap();
    let (a, ra) = train_collect(&joint, &tr, Some(&te)).unwrap();
    let (b, rb) = train_collect(&redreg, &tr, Some(&te)).unwrap();
    assert_eq!(checkpoint::to_string(&a.model), checkpoint::to_string(&b.model));
    assert_eq!(ra.len(), rb.len());
    for (x, y) in ra.iter().zip(&rb) {
        let y = TelemetryRecord { method: x.method.clone(), ..y.clone() };
        assert_eq!(x.to_json_line(), y.to_json_line());
    }
}

/// Both modalities see the same features through the same encoder, so the
/// paired cosine starts at 1 and the gate can open.
fn mirrored_run() -> (RunConfig, Vec<TelemetryRecord>) {
    let mut cfg = small(Method::Redreg);
    cfg.epochs = 8;
    cfg.monitor.gamma = 0.0;
    cfg.gate.tau_min = 0.01;
    cfg.gate.tau_max = 0.02;
    let base = generate_synthetic(&SynthConfig { n: 400, k: 4, seed: 5, ..Default::default() }).unwrap();
    let x = base.features(Modality::A).clone();
    let ds = Dataset::new(x.clone(), x, base.labels().to_vec(), 4).unwrap();
    let mut model = ModelState::init(&cfg.model, [16, 16], 4, &mut RngState::new(9)).unwrap();
    let enc = model.encoders[0].clone();
    model = ModelState::from_params([enc.clone(), enc], model.head.clone());
    let mut records = Vec::new();
    train_from(&cfg, model, &ds, None, |r| records.push(r.clone())).unwrap();
    (cfg, records)
}

#[test]
fn gated_steps_keep_the_descent_identity() {
    let (_, records) = mirrored_run();
    let gated: Vec<&TelemetryRecord> = records
        .iter()
        .filter(|r| r.kind == Some(RecordKind::Batch))
        .filter(|r| r.gate_a == Some(1) || r.gate_v == Some(1))
        .collect();
    assert!(!gated.is_empty(), "gate never opened");
    for r in gated {
        for m in Modality::ALL {
            if r.gate(m) == Some(1) {
                let ratio = r.descent(m).expect("gated step logs the descent ratio");
                assert!((ratio - 1.0).abs() <= 1e-8, "epoch {} batch {:?}: {ratio}", r.epoch, r.batch);
            } else {
                assert!(r.descent(m).is_none());
            }
        }
    }
}

#[test]
fn gate_only_opens_for_the_dominant_modality() {
    let (_, records) = mirrored_run();
    let eps = epochs(&records);
    for r in records.iter().filter(|r| r.epoch >= 2) {
        let dominant = eps[r.epoch - 1].dominant.unwrap();
        assert_ne!(r.gate(dominant.other()), Some(1), "epoch {}", r.epoch);
    }
}

#[test]
fn every_epoch_has_one_monitor_refresh() {
    let (cfg, records) = mirrored_run();
    let eps = epochs(&records);
    assert_eq!(eps.len(), cfg.epochs);
    for (t, r) in eps.iter().enumerate() {
        assert_eq!(r.epoch, t);
        assert!(r.red_a.is_some() && r.red_v.is_some());
        if t >= 2 {
            assert!(r.r_a.is_some() && r.r_v.is_some() && r.tau.is_some());
        }
    }
    assert!(records.iter().filter(|r| r.kind == Some(RecordKind::Batch)).all(|r| r.loss.unwrap().is_finite()));
}

#[test]
fn strong_modality_has_larger_gradients_early() {
    let mut wins = 0;
    for seed in 0..5 {
        let cfg = RunConfig {
            method: Method::Joint,
            seed,
            epochs: 3,
            data: DataSource::Synthetic(SyntheticSource { n: 2000, k: 4, snr_a: 2.0, snr_v: 0.5, ..Default::default() }),
            ..Default::default()
        };
        let (tr, _) = prepare_data(&cfg).unwrap();
        let (_, records) = train_collect(&cfg, &tr, None).unwrap();
        let first: Vec<&TelemetryRecord> = records.iter().filter(|r| r.epoch == 0 && r.kind == Some(RecordKind::Batch)).collect();
        let mean = |f: fn(&TelemetryRecord) -> Option<f64>| first.iter().map(|r| f(r).unwrap()).sum::<f64>() / first.len() as f64;
        if mean(|r| r.gnorm_a) / mean(|r| r.gnorm_v) > 1.0 {
            wins += 1;
        }
    }
    assert!(wins >= 4, "gradient ratio above 1 in {wins}/5 seeds");
}

#[test]
fn identical_configs_give_identical_bytes() {
    let cfg = small(Method::Redreg);
    let (tr, te) = prepare_data(&cfg).unwrap();
    let (a, ra) = train_collect(&cfg, &tr, Some(&te)).unwrap();
    let (b, rb) = train_collect(&cfg, &tr, Some(&te)).unwrap();
    assert_eq!(checkpoint::to_string(&a.model), checkpoint::to_string(&b.model));
    let lines = |rs: &[TelemetryRecord]| rs.iter().map(|r| r.to_json_line()).collect::<Vec<_>>();
    assert_eq!(lines(&ra), lines(&rb));
}

#[test]
fn divergence_aborts_with_a_record() {
    let mut cfg = small(Method::Joint);
    cfg.optimizer.lr = 1e9;
    let (tr, _) = prepare_data(&cfg).unwrap();
    let mut records = Vec::new();
    let err = redreg::trainer::train(&cfg, &tr, None, |r| records.push(r.clone())).unwrap_err();
    assert!(matches!(err, Error::Diverged { .. }));
    assert_eq!(records.last().unwrap().kind, Some(RecordKind::Diverged));
}

#[test]
fn mismatched_model_is_rejected() {
    let cfg = small(Method::Joint);
    let (tr, _) = prepare_data(&cfg).unwrap();
    let model = ModelState::init(&cfg.model, [8, 16], 4, &mut RngState::new(0)).unwrap();
    assert!(matches!(train_from(&cfg, model, &tr, None, |_| {}), Err(Error::Shape(_))));
    let model = ModelState::init(&cfg.model, [16, 16], 3, &mut RngState::new(0)).unwrap();
    assert!(train_from(&cfg, model, &tr, None, |_| {}).is_err());
}
