//! Training loop, evaluation and multi-run comparison.
//!
//! Epochs 0 and 1 are warmup: monitor values are still computed and logged
//! but the gate is not evaluated. From epoch 2 on, the gate uses the
//! monitor refresh made at the end of the previous epoch together with the
//! current threshold `τ(t)`. Gated steps replace the dominant encoder's
//! gradient by the controlled update before momentum accumulation.

use serde::Serialize;

use crate::config::{DataSource, Method, RunConfig};
use crate::data::{generate_synthetic, load_csv, make_batches, split_indices, Dataset};
use crate::error::{Error, Result};
use crate::gating::{decide, threshold_schedule, CoinfoProxy, GateDecision};
use crate::model::{branch_logits, encode, forward, forward_backward, ModelState};
use crate::monitor::{batch_correct_prob, dominant_modality, MonitorState};
use crate::numerics::{dot, norm, softmax_rows, Matrix, RngState};
use crate::regulate::{anchor_direction, controlled_update, project_orthogonal, sgd_momentum_step, update_anchor};
use crate::telemetry::{RecordKind, TelemetryRecord};
use crate::{Modality, NUM_MODALITIES};

/// Loss values above this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

// RNG stream ids derived from the run seed.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_MONITOR: u64 = 3;
const STREAM_PROBE: u64 = 4;
const STREAM_PROJECTION: u64 = 5;
const STREAM_SPLIT: u64 = 6;

/// Held-out metrics.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Accuracy of each branch classifier.
    pub branch_accuracy: [f64; NUM_MODALITIES],
    pub macro_f1: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Confusion matrix and F1: macro-averaged over classes, or the positive
/// class (label 1) when `K = 2`.
pub fn confusion_and_f1(pred: &[usize], labels: &[usize], k: usize) -> (Vec<Vec<usize>>, f64) {
    let mut conf = vec![vec![0usize; k]; k];
    for (&p, &y) in pred.iter().zip(labels) {
        conf[y][p] += 1;
    }
    let f1_of = |c: usize| {
        let tp = conf[c][c];
        let fp: usize = (0..k).map(|r| conf[r][c]).sum::<usize>() - tp;
        let fn_: usize = conf[c].iter().sum::<usize>() - tp;
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * tp as f64 / denom as f64
        }
    };
    let f1 = if k == 2 {
        f1_of(1)
    } else {
        (0..k).map(f1_of).sum::<f64>() / k as f64
    };
    (conf, f1)
}

pub fn evaluate(model: &ModelState, dataset: &Dataset) -> Result<EvalReport> {
    let pass = forward(model, &dataset.as_batch())?;
    let labels = dataset.labels();
    let pred: Vec<usize> = pass.logits.row_iter().map(argmax).collect();
    let branch_pred = |m: Modality| -> Vec<usize> { pass.branch_logits[m.index()].row_iter().map(argmax).collect() };
    let (confusion, macro_f1) = confusion_and_f1(&pred, labels, model.num_classes());
    Ok(EvalReport {
        accuracy: accuracy(&pred, labels),
        branch_accuracy: [accuracy(&branch_pred(Modality::A), labels), accuracy(&branch_pred(Modality::V), labels)],
        macro_f1,
        confusion,
    })
}

/// Builds the dataset named by the config and splits it into (train, test).
pub fn prepare_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let full = match &cfg.data {
        DataSource::Synthetic(s) => generate_synthetic(&s.synth_config(cfg.seed))?,
        DataSource::Csv(c) => load_csv(&c.features_a, &c.features_v, &c.labels)?,
    };
    let split_seed = RngState::new(cfg.seed).fork(STREAM_SPLIT).seed;
    let (tr, te) = split_indices(full.labels(), full.num_classes(), cfg.train_fraction, split_seed)?;
    Ok((full.subset(&tr), full.subset(&te)))
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelState,
    /// Last-epoch held-out report, when an eval set was given.
    pub report: Option<EvalReport>,
}

fn probe_indices(n: usize, size: usize, rng: RngState) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng;
    rng.shuffle(&mut idx);
    idx.truncate(size.min(n));
    idx.sort_unstable();
    idx
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs the training loop, streaming telemetry records to `sink`.
///
/// On divergence a `diverged` record is emitted before the error returns.
pub fn train<F>(cfg: &RunConfig, train_set: &Dataset, eval_set: Option<&Dataset>, sink: F) -> Result<TrainOutcome>
where
    F: FnMut(&TelemetryRecord),
{
    cfg.validate()?;
    let root = RngState::new(cfg.seed);
    let input_dims = [
        train_set.features(Modality::A).cols(),
        train_set.features(Modality::V).cols(),
    ];
    let model = ModelState::init(&cfg.model, input_dims, train_set.num_classes(), &mut root.fork(STREAM_INIT))?;
    train_from(cfg, model, train_set, eval_set, sink)
}

/// Like [`train`], but starts from the given model and its optimizer
/// buffers instead of a fresh initialization. `cfg.model` is ignored.
pub fn train_from<F>(
    cfg: &RunConfig,
    mut model: ModelState,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    mut sink: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&TelemetryRecord),
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(crate::error::invalid("training set is empty"));
    }
    for m in Modality::ALL {
        let (want, got) = (model.encoder(m).input_dim(), train_set.features(m).cols());
        if want != got {
            return Err(crate::error::shape(format!("encoder {m} expects {want} features, dataset has {got}")));
        }
    }
    if model.num_classes() != train_set.num_classes() {
        return Err(crate::error::shape(format!(
            "model has {} classes, dataset has {}",
            model.num_classes(),
            train_set.num_classes()
        )));
    }
    let root = RngState::new(cfg.seed);
    let shuffle_seed = root.fork(STREAM_SHUFFLE).seed;
    let mut monitor = MonitorState::new(cfg.monitor.clone(), root.fork(STREAM_MONITOR));
    let probe_idx = probe_indices(train_set.len(), cfg.monitor.probe_size, root.fork(STREAM_PROBE));
    let probe = train_set.batch(&probe_idx);
    let coinfo = CoinfoProxy::new(
        model.encoder(Modality::A).output_dim(),
        model.encoder(Modality::V).output_dim(),
        &mut root.fork(STREAM_PROJECTION),
    );
    let method = cfg.method.name().to_string();
    let mut anchors: [Vec<f64>; NUM_MODALITIES] = [model.anchors[0].flatten(), model.anchors[1].flatten()];
    let mut last_epoch_sim: Option<f64> = None;
    let mut report = None;

    for epoch in 0..cfg.epochs {
        let decision: Option<GateDecision> = if epoch >= 2 {
            let dominant = dominant_modality(&monitor)?;
            let r = [monitor.reading(Modality::A).r, monitor.reading(Modality::V).r];
            let tau = threshold_schedule(epoch, cfg.epochs, &cfg.gate)?;
            let sim = last_epoch_sim.unwrap_or(f64::NEG_INFINITY);
            let mut d = decide(dominant, r, sim, tau, cfg.gate.r_threshold);
            if cfg.method == Method::Joint {
                d.gate = [false; NUM_MODALITIES];
            }
            Some(d)
        } else {
            None
        };
        let gate_bits = decision.as_ref().map(|d| d.gate);

        let plan = make_batches(train_set.len(), cfg.batch_size, shuffle_seed, epoch)?;
        let mut batch_p: [Vec<f64>; NUM_MODALITIES] = [Vec::new(), Vec::new()];
        let mut batch_sim = Vec::with_capacity(plan.len());

        for (bi, idx) in plan.batches.iter().enumerate() {
            let batch = train_set.batch(idx);
            let (pass, grads) = forward_backward(&model, &batch, cfg.unimodal_weight)?;
            if !grads.loss.is_finite() || grads.loss > DIVERGENCE_LIMIT {
                sink(&TelemetryRecord {
                    epoch,
                    batch: Some(bi),
                    kind: Some(RecordKind::Diverged),
                    method: method.clone(),
                    loss: Some(grads.loss),
                    ..Default::default()
                });
                return Err(Error::Diverged { epoch, batch: bi, loss: grads.loss });
            }
            let p = [
                batch_correct_prob(&pass.branch_probs[0], &batch.labels)?,
                batch_correct_prob(&pass.branch_probs[1], &batch.labels)?,
            ];
            let sim = coinfo.similarity(&pass.z[0], &pass.z[1], cfg.gate.eps)?;
            batch_p[0].push(p[0]);
            batch_p[1].push(p[1]);
            batch_sim.push(sim);

            let mut dperp_norm = [None; NUM_MODALITIES];
            let mut descent = [None; NUM_MODALITIES];
            for m in Modality::ALL {
                let i = m.index();
                let g = &grads.encoders[i];
                let mut w = model.encoders[i].flatten();
                let step = if gate_bits.is_some_and(|b| b[i]) {
                    let d = anchor_direction(&w, &anchors[i])?;
                    let d_perp = project_orthogonal(&d, g, cfg.regulation.eps)?;
                    let gt = controlled_update(g, true, &d_perp, cfg.regulation.beta)?;
                    dperp_norm[i] = Some(norm(&d_perp));
                    let gg = dot(g, g);
                    descent[i] = Some(if gg > 0.0 { dot(&gt, g) / gg } else { 1.0 });
                    gt
                } else {
                    g.clone()
                };
                let mut v = model.encoder_velocity[i].flatten();
                sgd_momentum_step(&mut w, &mut v, &step, cfg.optimizer.lr, cfg.optimizer.momentum)?;
                model.encoders[i].assign_flat(&w)?;
                model.encoder_velocity[i].assign_flat(&v)?;
            }
            head_step(&mut model, &grads.head_weight, &grads.head_bias, cfg)?;

            sink(&TelemetryRecord {
                epoch,
                batch: Some(bi),
                kind: Some(RecordKind::Batch),
                method: method.clone(),
                loss: Some(grads.loss),
                p_a: Some(p[0]),
                p_v: Some(p[1]),
                sim: Some(sim),
                tau: decision.as_ref().map(|d| d.tau),
                gate_a: gate_bits.map(|b| b[0] as u8),
                gate_v: gate_bits.map(|b| b[1] as u8),
                gnorm_a: Some(grads.norms[0]),
                gnorm_v: Some(grads.norms[1]),
                dperp_a: dperp_norm[0],
                dperp_v: dperp_norm[1],
                descent_a: descent[0],
                descent_v: descent[1],
                ..Default::default()
            });
        }

        let epoch_p = [mean(&batch_p[0]), mean(&batch_p[1])];
        let epoch_sim = mean(&batch_sim);
        last_epoch_sim = Some(epoch_sim);
        monitor.refresh(epoch_p, &model, [&probe.xa, &probe.xv])?;
        let dominant = dominant_modality(&monitor)?;

        for (i, anchor) in anchors.iter_mut().enumerate() {
            update_anchor(anchor, &model.encoders[i].flatten(), cfg.regulation.anchor_decay)?;
            model.anchors[i].assign_flat(anchor)?;
        }

        let eval = match eval_set {
            Some(ds) => Some(evaluate(&model, ds)?),
            None => None,
        };
        let ra = monitor.reading(Modality::A).clone();
        let rv = monitor.reading(Modality::V).clone();
        sink(&TelemetryRecord {
            epoch,
            batch: None,
            kind: Some(RecordKind::Epoch),
            method: method.clone(),
            loss: None,
            p_a: ra.p,
            p_v: rv.p,
            pbar_a: ra.pbar,
            pbar_v: rv.pbar,
            s_a: ra.growth,
            s_v: rv.growth,
            red_a: ra.red,
            red_v: rv.red,
            r_a: ra.r,
            r_v: rv.r,
            sim: Some(epoch_sim),
            tau: decision.as_ref().map(|d| d.tau),
            gate_a: gate_bits.map(|b| b[0] as u8),
            gate_v: gate_bits.map(|b| b[1] as u8),
            rlc_a: ra.rlc,
            rlc_v: rv.rlc,
            dominant: Some(dominant),
            acc: eval.as_ref().map(|e| e.accuracy),
            acc_a: eval.as_ref().map(|e| e.branch_accuracy[0]),
            acc_v: eval.as_ref().map(|e| e.branch_accuracy[1]),
            f1: eval.as_ref().map(|e| e.macro_f1),
            ..Default::default()
        });
        report = eval;
    }
    Ok(TrainOutcome { model, report })
}

fn head_step(model: &mut ModelState, gw: &Matrix, gb: &[f64], cfg: &RunConfig) -> Result<()> {
    let (lr, mu) = (cfg.optimizer.lr, cfg.optimizer.momentum);
    let mut w = model.head.weight.as_slice().to_vec();
    let mut v = model.head_velocity.weight.as_slice().to_vec();
    sgd_momentum_step(&mut w, &mut v, gw.as_slice(), lr, mu)?;
    if w.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("head update"));
    }
    model.head.weight.as_mut_slice().copy_from_slice(&w);
    model.head_velocity.weight.as_mut_slice().copy_from_slice(&v);
    let mut b = model.head.bias.clone();
    let mut vb = model.head_velocity.bias.clone();
    sgd_momentum_step(&mut b, &mut vb, gb, lr, mu)?;
    model.head.bias = b;
    model.head_velocity.bias = vb;
    Ok(())
}

/// Trains and returns every telemetry record with the outcome.
pub fn train_collect(cfg: &RunConfig, train_set: &Dataset, eval_set: Option<&Dataset>) -> Result<(TrainOutcome, Vec<TelemetryRecord>)> {
    let mut records = Vec::new();
    let out = train(cfg, train_set, eval_set, |r| records.push(r.clone()))?;
    Ok((out, records))
}

/// Probe-batch branch logits and representations; handy for inspection.
pub fn probe_outputs(model: &ModelState, x: &Matrix, m: Modality) -> Result<(Matrix, Matrix)> {
    let z = encode(model.encoder(m), x)?;
    let f = branch_logits(model, &z, m)?;
    Ok((z, softmax_rows(&f)))
}

/// One row of the per-run summary CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub seed: u64,
    pub acc: f64,
    pub acc_a: f64,
    pub acc_v: f64,
    pub f1: f64,
    pub gap: f64,
}

pub const SUMMARY_HEADER: &str = "method,seed,acc,acc_a,acc_v,f1,gap";

impl SummaryRow {
    pub fn from_report(method: Method, seed: u64, r: &EvalReport) -> Self {
        SummaryRow {
            method,
            seed,
            acc: r.accuracy,
            acc_a: r.branch_accuracy[0],
            acc_v: r.branch_accuracy[1],
            f1: r.macro_f1,
            gap: r.branch_accuracy[0] - r.branch_accuracy[1],
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.method, self.seed, self.acc, self.acc_a, self.acc_v, self.f1, self.gap
        )
    }

    pub fn parse_csv(line: &str) -> Result<SummaryRow> {
        let cells: Vec<&str> = line.trim().split(',').collect();
        if cells.len() != 7 {
            return Err(crate::error::invalid(format!("summary row needs 7 cells: {line:?}")));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| crate::error::invalid(format!("bad number {s:?}"))) };
        Ok(SummaryRow {
            method: cells[0].parse()?,
            seed: cells[1].parse().map_err(|_| crate::error::invalid(format!("bad seed {:?}", cells[1])))?,
            acc: num(cells[2])?,
            acc_a: num(cells[3])?,
            acc_v: num(cells[4])?,
            f1: num(cells[5])?,
            gap: num(cells[6])?,
        })
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Trains one configuration on its own data and returns the summary row
/// plus the full telemetry.
pub fn run_once(cfg: &RunConfig) -> Result<(SummaryRow, TrainOutcome, Vec<TelemetryRecord>)> {
    let (train_set, test_set) = prepare_data(cfg)?;
    let (out, records) = train_collect(cfg, &train_set, Some(&test_set))?;
    let report = out.report.clone().expect("eval set was provided");
    Ok((SummaryRow::from_report(cfg.method, cfg.seed, &report), out, records))
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(v: &[f64]) -> MeanStd {
        let m = mean(v);
        let std = if v.len() > 1 {
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        MeanStd { mean: m, std }
    }
}

/// Per-method aggregate of summary rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodAggregate {
    pub method: Method,
    pub runs: usize,
    pub acc: MeanStd,
    pub acc_a: MeanStd,
    pub acc_v: MeanStd,
    pub f1: MeanStd,
    pub gap: MeanStd,
}

pub const AGGREGATE_HEADER: &str =
    "method,runs,acc_mean,acc_std,acc_a_mean,acc_a_std,acc_v_mean,acc_v_std,f1_mean,f1_std,gap_mean,gap_std";

impl MethodAggregate {
    pub fn to_csv(&self) -> String {
        let cols = [self.acc, self.acc_a, self.acc_v, self.f1, self.gap]
            .iter()
            .map(|m| format!("{},{}", m.mean, m.std))
            .collect::<Vec<_>>()
            .join(",");
        format!("{},{},{}", self.method, self.runs, cols)
    }
}

/// Groups rows by method, in first-appearance order.
pub fn aggregate(rows: &[SummaryRow]) -> Vec<MethodAggregate> {
    let mut methods: Vec<Method> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods
        .into_iter()
        .map(|method| {
            let sel: Vec<&SummaryRow> = rows.iter().filter(|r| r.method == method).collect();
            let col = |f: fn(&SummaryRow) -> f64| MeanStd::of(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
            MethodAggregate {
                method,
                runs: sel.len(),
                acc: col(|r| r.acc),
                acc_a: col(|r| r.acc_a),
                acc_v: col(|r| r.acc_v),
                f1: col(|r| r.f1),
                gap: col(|r| r.gap),
            }
        })
        .collect()
}

/// Result of running several methods over several seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<SummaryRow>,
    pub aggregates: Vec<MethodAggregate>,
}

/// Runs every (method, seed) pair sequentially, methods outermost.
pub fn compare_runs(cfg: &RunConfig, methods: &[Method], seeds: &[u64]) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(crate::error::invalid("compare needs at least one seed"));
    }
    let mut rows = Vec::with_capacity(methods.len() * seeds.len());
    for &method in methods {
        for &seed in seeds {
            let run = RunConfig { method, seed, ..cfg.clone() };
            rows.push(run_once(&run)?.0);
        }
    }
    let aggregates = aggregate(&rows);
    Ok(Comparison { rows, aggregates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SyntheticSource;

    #[test]
    fn perfect_and_degenerate_predictors() {
        let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let (conf, f1) = confusion_and_f1(&labels, &labels, 4);
        assert_eq!(f1, 1.0);
        assert_eq!(accuracy(&labels, &labels), 1.0);
        assert_eq!((0..4).map(|i| conf[i][i]).sum::<usize>(), 8);

        let zeros = vec![0; 8];
        let (_, f1) = confusion_and_f1(&zeros, &labels, 4);
        assert_eq!(accuracy(&zeros, &labels), 0.25);
        assert!((f1 - 0.1).abs() < 1e-15);
    }

    #[test]
    fn binary_f1_uses_positive_class() {
        let labels = [0, 0, 1, 1];
        let pred = [0, 1, 1, 1];
        let (_, f1) = confusion_and_f1(&pred, &labels, 2);
        // tp=2 fp=1 fn=0
        assert!((f1 - 0.8).abs() < 1e-15);
    }

    fn small_cfg(method: Method) -> RunConfig {
        RunConfig {
            method,
            epochs: 4,
            batch_size: 16,
            data: DataSource::Synthetic(SyntheticSource { n: 120, ..Default::default() }),
            ..Default::default()
        }
    }

    #[test]
    fn warmup_epochs_have_no_gate_evaluations() {
        let cfg = small_cfg(Method::Redreg);
        let (train_set, test_set) = prepare_data(&cfg).unwrap();
        let (_, recs) = train_collect(&cfg, &train_set, Some(&test_set)).unwrap();
        for r in &recs {
            if r.epoch < 2 {
                assert!(r.tau.is_none() && r.gate_a.is_none() && r.gate_v.is_none());
            } else {
                assert!(r.tau.is_some() && r.gate_a.is_some());
            }
        }
        let epochs = recs.iter().filter(|r| r.kind == Some(RecordKind::Epoch)).count();
        assert_eq!(epochs, 4);
    }

    #[test]
    fn joint_never_gates() {
        let cfg = small_cfg(Method::Joint);
        let (train_set, test_set) = prepare_data(&cfg).unwrap();
        let (_, recs) = train_collect(&cfg, &train_set, Some(&test_set)).unwrap();
        assert!(recs.iter().all(|r| r.gate_a.unwrap_or(0) == 0 && r.gate_v.unwrap_or(0) == 0));
        assert!(recs.iter().all(|r| r.dperp_a.is_none() && r.dperp_v.is_none()));
    }

    #[test]
    fn compare_single_run_matches_report() {
        let cfg = small_cfg(Method::Joint);
        let cmp = compare_runs(&cfg, &[Method::Joint], &[0]).unwrap();
        let (row, out, _) = run_once(&cfg).unwrap();
        assert_eq!(cmp.rows, vec![row.clone()]);
        let r = out.report.unwrap();
        assert_eq!(cmp.aggregates[0].acc.mean, r.accuracy);
        assert_eq!(cmp.aggregates[0].acc.std, 0.0);
        assert!(compare_runs(&cfg, &[Method::Joint], &[]).is_err());
    }

    #[test]
    fn summary_rows_round_trip() {
        let row = SummaryRow { method: Method::Redreg, seed: 4, acc: 0.1 + 0.2, acc_a: 0.75, acc_v: 0.5, f1: 0.3, gap: 0.25 };
        assert_eq!(SummaryRow::parse_csv(&row.to_csv()).unwrap(), row);
    }
}
