//! Temperature scaling and ECE checked against brute-force evaluations.

#![allow(dead_code)]

use p2c_core::diffcore::softmax;
use p2c_core::metrics::{apply_temperature, ece, fit_temperature, temperature_grid, TEMPERATURE_MAX, TEMPERATURE_MIN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize, k: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..k).map(|_| rng.random_range(-scale..scale)).collect()).collect()
}

pub fn temperature_never_changes_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let val = random_logits(&mut rng, 200, 3, 4.0);
    let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..3)).collect();
    let fitted = fit_temperature(&val, &labels);
    assert!(fitted > 0.0);
    let probe = random_logits(&mut rng, 1000, 3, 6.0);
    for t in [fitted, TEMPERATURE_MIN, TEMPERATURE_MAX] {
        let tempered = apply_temperature(&probe, t);
        for (z, p) in probe.iter().zip(&tempered) {
            assert_eq!(argmax(z), argmax(p), "temperature {t} changed {z:?}");
        }
    }
}

pub fn ece_with_one_example_per_bin_is_the_per_example_gap() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let n = 50;
    let bins = 2 * n;
    // binary confidences live in [0.5, 1]; put example i in bin n + i
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let lo = (n + i) as f64 / bins as f64;
        let hi = (n + i + 1) as f64 / bins as f64;
        let c = lo + (hi - lo) * rng.random_range(0.1..0.9);
        let first = rng.random::<bool>();
        probs.push(if first { vec![c, 1.0 - c] } else { vec![1.0 - c, c] });
        labels.push(rng.random_range(0..2));
    }
    let report = ece(&probs, &labels, bins);
    assert!(report.bins.iter().all(|b| b.count <= 1));
    assert_eq!(report.bins.iter().map(|b| b.count).sum::<usize>(), n);
    let brute: f64 = probs
        .iter()
        .zip(&labels)
        .map(|(p, &y)| {
            let pred = argmax(p);
            let correct = if pred == y { 1.0 } else { 0.0 };
            (correct - p[pred]).abs()
        })
        .sum::<f64>()
        / n as f64;
    assert!((report.ece - brute).abs() < 1e-12, "{} vs {brute}", report.ece);
}

pub fn ece_ignores_example_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let logits = random_logits(&mut rng, 300, 4, 3.0);
    let probs: Vec<Vec<f64>> = logits.iter().map(|z| softmax(z)).collect();
    let labels: Vec<usize> = (0..300).map(|_| rng.random_range(0..4)).collect();
    let a = ece(&probs, &labels, 15).ece;
    let mut idx: Vec<usize> = (0..300).collect();
    idx.reverse();
    let b = ece(&idx.iter().map(|&i| probs[i].clone()).collect::<Vec<_>>(), &idx.iter().map(|&i| labels[i]).collect::<Vec<_>>(), 15).ece;
    assert!((a - b).abs() < 1e-12);
}

fn grid_step() -> f64 {
    let g = temperature_grid();
    g[1] / g[0]
}

pub fn calibrated_logits_fit_unit_temperature() {
    // labels drawn from softmax(z): z is already calibrated
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let logits = random_logits(&mut rng, 20_000, 3, 3.0);
    let labels: Vec<usize> = logits
        .iter()
        .map(|z| {
            let p = softmax(z);
            let u = rng.random::<f64>();
            let mut acc = 0.0;
            p.iter().position(|&v| {
                acc += v;
                u < acc
            })
            .unwrap_or(2)
        })
        .collect();
    let t = fit_temperature(&logits, &labels);
    assert!((t.ln()).abs() < 0.05 + grid_step().ln(), "fitted {t}");
    let scaled: Vec<Vec<f64>> = logits.iter().map(|z| z.iter().map(|v| 3.0 * v).collect()).collect();
    let t3 = fit_temperature(&scaled, &labels);
    assert!((t3 / (3.0 * t)).ln().abs() <= grid_step().ln() * 1.01, "{t3} vs 3 x {t}");
}

pub fn single_example_fits_an_endpoint() {
    let t = fit_temperature(&[vec![2.0, 0.0]], &[0]);
    assert_eq!(t, TEMPERATURE_MIN);
    let t = fit_temperature(&[vec![2.0, 0.0]], &[1]);
    assert_eq!(t, TEMPERATURE_MAX);
}
