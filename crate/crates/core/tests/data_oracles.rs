use redreg::data::{generate_synthetic, split, Dataset, SynthConfig};
use redreg::Modality;

/// Nearest-class-mean probe fit on `train`, scored on `test`. For isotropic
/// Gaussian classes this is the linear Bayes rule up to estimation error.
fn probe_accuracy(train: &Dataset, test: &Dataset, m: Modality) -> f64 {
    let k = train.num_classes();
    let x = train.features(m);
    let d = x.cols();
    let mut means = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (row, &y) in x.row_iter().zip(train.labels()) {
        counts[y] += 1;
        for (acc, v) in means[y].iter_mut().zip(row) {
            *acc += v;
        }
    }
    for (mean, &c) in means.iter_mut().zip(&counts) {
        mean.iter_mut().for_each(|v| *v /= c as f64);
    }
    let xt = test.features(m);
    let mut correct = 0;
    for (row, &y) in xt.row_iter().zip(test.labels()) {
        let pred = (0..k)
            .min_by(|&a, &b| {
                let da: f64 = row.iter().zip(&means[a]).map(|(u, v)| (u - v).powi(2)).sum();
                let db: f64 = row.iter().zip(&means[b]).map(|(u, v)| (u - v).powi(2)).sum();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        correct += usize::from(pred == y);
    }
    correct as f64 / test.len() as f64
}

fn probes(snr_a: f64, snr_v: f64, seed: u64) -> (f64, f64) {
    let cfg = SynthConfig { n: 2000, k: 4, d_a: 16, d_v: 16, snr_a, snr_v, seed };
    let ds = generate_synthetic(&cfg).unwrap();
    let (train, test) = split(&ds, 0.5, seed + 1000).unwrap();
    (probe_accuracy(&train, &test, Modality::A), probe_accuracy(&train, &test, Modality::V))
}

#[test]
fn equal_snr_gives_matching_probes() {
    let (mut sa, mut sv) = (0.0, 0.0);
    for seed in 0..5 {
        let (a, v) = probes(1.0, 1.0, seed);
        sa += a;
        sv += v;
    }
    let diff = (sa - sv).abs() / 5.0;
    assert!(diff < 0.03, "mean probe difference {diff}");
}

#[test]
fn imbalanced_snr_separates_probes() {
    let (mut sa, mut sv) = (0.0, 0.0);
    for seed in 0..5 {
        let (a, v) = probes(2.0, 0.5, seed);
        sa += a;
        sv += v;
    }
    let gap = (sa - sv) / 5.0;
    assert!(gap >= 0.10, "mean probe gap {gap}");
}

#[test]
fn probe_accuracy_rises_with_snr() {
    let grid = [0.25, 0.5, 1.0, 2.0];
    let mut inversions = 0;
    for seed in 0..5 {
        let accs: Vec<f64> = grid.iter().map(|&s| probes(s, s, seed).0).collect();
        inversions += accs.windows(2).filter(|w| w[1] < w[0]).count();
    }
    assert!(inversions <= 1, "{inversions} inversions");
}
