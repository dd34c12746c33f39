//! Closed-form values of every loss and metric, checked against independent
//! evaluations written out here from first principles.

#![allow(dead_code, clippy::approx_constant)]

use p2c_core::baselines::{
    agreement_weight, cskd_consistency, cskd_loss, filter_mask, filtered_loss, label_smoothing_target,
    margin_hinge_loss, max_entropy_loss, multi_annotator_loss, multi_annotator_predict, soft_label_loss,
    vanilla_loss, weighted_loss, AnnotationRecord,
};
use p2c_core::losses::{
    bradley_terry, consistency_margin, consistency_plain, diversity_loss, p2c_loss, preference_bce,
    preference_loss_from_scores, ConsistencyConfig, LossWeights, Orientation, PairBatch, PairExample,
};
use p2c_core::metrics::{accuracy_family, ece, l1_to_soft_labels, mcc};
use p2c_core::model::{featurize, FeatureConfig, ModelConfig, ModelState};
use p2c_core::prefsources::extractive_label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXACT: f64 = 1e-10;
const QUOTED: f64 = 1e-6;

fn rec(c: &[u32]) -> AnnotationRecord {
    AnnotationRecord::new(c.to_vec())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// --- preference model -------------------------------------------------------

pub fn bradley_terry_table() {
    assert_eq!(bradley_terry(0.3, 0.3), 0.5);
    assert!(close(bradley_terry(3f64.ln(), 0.0), 0.75, EXACT));
    // exp(h1) / (exp(h0) + exp(h1)) evaluated directly
    let direct = 2f64.exp() / (1f64.exp() + 2f64.exp());
    assert!(close(bradley_terry(2.0, 1.0), direct, EXACT));
    assert!(close(bradley_terry(2.0, 1.0), 0.731059, QUOTED));
}

pub fn bradley_terry_normalizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let (a, b) = (rng.random_range(-50.0..=50.0), rng.random_range(-50.0..=50.0));
        let s = bradley_terry(a, b) + bradley_terry(b, a);
        assert!((s - 1.0).abs() <= 1e-12, "{a} {b}: {s}");
    }
}

pub fn preference_bce_table() {
    assert!(close(preference_bce(0.5, 0.5), std::f64::consts::LN_2, EXACT));
    assert!(close(preference_bce(0.75, 1.0), -(0.75f64.ln()), EXACT));
    assert!(close(preference_bce(0.75, 1.0), 0.287682, QUOTED));
    let direct = -(0.3 * 0.8f64.ln() + 0.7 * 0.2f64.ln());
    assert!(close(preference_bce(0.8, 0.3), direct, EXACT));
}

pub fn score_form_matches_probability_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..1000 {
        let (h1, h0) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let y = [0.0, 0.5, 1.0][rng.random_range(0..3)];
        let a = preference_loss_from_scores(h1, h0, y);
        let b = preference_bce(bradley_terry(h1, h0), y);
        // forming 1 - p loses ~1e-12 when p is near 1; the score form does not
        assert!(close(a, b, 1e-9), "{h1} {h0} {y}");
    }
}

fn random_same_majority_records(rng: &mut ChaCha8Rng, k: usize) -> (AnnotationRecord, AnnotationRecord) {
    let draw = |rng: &mut ChaCha8Rng| {
        let mut c = vec![0u32; k];
        for _ in 0..5 {
            c[rng.random_range(0..k)] += 1;
        }
        AnnotationRecord::new(c)
    };
    loop {
        let (a, b) = (draw(rng), draw(rng));
        if a.majority() == b.majority() {
            return (a, b);
        }
    }
}

pub fn pair_swap_antisymmetry_on_random_records() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..1000 {
        let k = rng.random_range(2..=3);
        let (r1, r0) = random_same_majority_records(&mut rng, k);
        let (pref, m) = extractive_label(&r1, &r0);
        let (pref_sw, m_sw) = extractive_label(&r0, &r1);
        assert_eq!(pref_sw, 1.0 - pref);
        for (a, b) in m.iter().zip(&m_sw) {
            assert_eq!(*a, -*b);
        }
        let (h1, h0) = (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
        assert_eq!(preference_loss_from_scores(h1, h0, pref), preference_loss_from_scores(h0, h1, pref_sw));
    }
}

pub fn diversity_table() {
    assert_eq!(diversity_loss(&[[0.3, 0.7]; 3]), 0.0);
    // both directed KLs by hand
    let kl_ab = 0.8 * (0.8f64 / 0.2).ln() + 0.2 * (0.2f64 / 0.8).ln();
    let kl_ba = 0.2 * (0.2f64 / 0.8).ln() + 0.8 * (0.8f64 / 0.2).ln();
    let expected = -(kl_ab + kl_ba) / 2.0;
    let got = diversity_loss(&[[0.8, 0.2], [0.2, 0.8]]);
    assert!(close(got, expected, EXACT));
    assert!(close(got, -0.6 * 4f64.ln(), EXACT));
    assert!(close(got, -0.831777, QUOTED));
}

pub fn consistency_tables() {
    use Orientation::Intuitive;
    assert_eq!(consistency_plain(0.8, 0.6, 1.0, Intuitive), 0.0);
    assert!(close(consistency_plain(0.5, 0.7, 1.0, Intuitive), 0.2, EXACT));
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..100 {
        let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
        assert!(close(consistency_plain(a, b, 0.5, Intuitive), 0.5 * (a - b).abs(), EXACT));
    }
    assert_eq!(consistency_margin(&[0.9, 0.1], &[0.2, 0.8], &[0.0, 0.0], Intuitive).unwrap(), 0.0);
    assert!(close(consistency_margin(&[0.9, 0.1], &[0.5, 0.5], &[0.4, -0.4], Intuitive).unwrap(), 0.0, EXACT));
    assert!(close(consistency_margin(&[0.5, 0.5], &[0.5, 0.5], &[0.4, -0.4], Intuitive).unwrap(), 0.4, EXACT));
}

pub fn composite_objective_is_sum_of_terms() {
    let features = FeatureConfig { ngram_orders: vec![1], bucket_count: 8, ..FeatureConfig::default() };
    let config = ModelConfig { emb_dim: 2, hidden_dim: 2, pref_hidden: 2, pref_heads: 2, ..ModelConfig::new(features.clone(), 2) };
    let model = ModelState::init(config, 3).unwrap();
    let (f1, f0) = (featurize("clearly great", &features), featurize("fine i guess", &features));
    let (r1, r0) = (rec(&[5, 0]), rec(&[3, 2]));
    let (pref, margins) = extractive_label(&r1, &r0);
    let batch = PairBatch::new(vec![PairExample { x1: &f1, x0: &f0, y_task: 0, y_pref: pref, margins: Some(margins.clone()) }]);
    let weights = LossWeights { lambda_div: 0.3, lambda_cons: 0.7, heads: 2 };
    let got = p2c_loss(&model, &batch, None, &weights, ConsistencyConfig::default()).unwrap();

    let probs = model.predict_proba(&[&f1, &f0]).unwrap();
    let task = (vanilla_loss(&probs[0], 0) + vanilla_loss(&probs[1], 0)) / 2.0;
    let heads: Vec<f64> = (0..2)
        .map(|t| {
            let h1 = model.preference_scores(&[&f1], &[0], t).unwrap()[0];
            let h0 = model.preference_scores(&[&f0], &[0], t).unwrap()[0];
            bradley_terry(h1, h0)
        })
        .collect();
    let pref_terms: Vec<f64> = heads.iter().map(|&p| preference_bce(p, pref)).collect();
    let div = diversity_loss(&heads.iter().map(|&p| [p, 1.0 - p]).collect::<Vec<_>>());
    let cons = consistency_margin(&probs[0], &probs[1], &margins, Orientation::Intuitive).unwrap();
    let total = task + pref_terms.iter().sum::<f64>() + 0.3 * div + 0.7 * cons;

    assert!(close(got.task, task, EXACT));
    for (a, b) in got.pref_per_head.iter().zip(&pref_terms) {
        assert!(close(*a, *b, EXACT));
    }
    assert!(close(got.div, div, EXACT));
    assert!(close(got.cons, cons, EXACT));
    assert!(close(got.total, total, EXACT), "{} vs {total}", got.total);

    // disabling every auxiliary term leaves cross-entropy on the pair members
    let none = LossWeights { lambda_div: 0.0, lambda_cons: 0.0, heads: 0 };
    let plain = p2c_loss(&model, &batch, None, &none, ConsistencyConfig::default()).unwrap();
    assert!(close(plain.total, task, EXACT));
}

// --- comparison objectives --------------------------------------------------

pub fn vanilla_soft_margin_tables() {
    assert!(vanilla_loss(&[1.0, 0.0], 0) < 1e-10);
    assert!(close(vanilla_loss(&[0.5, 0.5], 0), 2f64.ln(), EXACT));
    assert!(close(vanilla_loss(&[0.9, 0.1], 1), 2.302585, QUOTED));
    let q = rec(&[3, 2]).soft_label();
    assert_eq!(q, vec![0.6, 0.4]);
    let entropy = -(0.6 * 0.6f64.ln() + 0.4 * 0.4f64.ln());
    assert!(close(soft_label_loss(&q, &q), entropy, EXACT));
    assert!(close(soft_label_loss(&[0.5, 0.5], &q), 2f64.ln(), EXACT));
    assert_eq!(margin_hinge_loss(&q, &q), 0.0);
    assert!(close(margin_hinge_loss(&[0.4, 0.6], &q), 0.2, EXACT));
    assert_eq!(margin_hinge_loss(&[0.0, 1.0], &[1.0, 0.0]), 1.0);
}

pub fn filter_and_weight_tables() {
    assert!(!filter_mask(&rec(&[3, 2])));
    assert!(filter_mask(&rec(&[4, 1])));
    assert!(filter_mask(&rec(&[5, 0])));
    assert_eq!(filtered_loss(&[0.5, 0.5], 0, &rec(&[3, 2])), 0.0);
    assert!(close(filtered_loss(&[0.5, 0.5], 0, &rec(&[4, 1])), 2f64.ln(), EXACT));
    assert!(close(agreement_weight(&rec(&[4, 1])), 0.8, EXACT));
    assert_eq!(agreement_weight(&rec(&[5, 0])), 1.0);
    assert!(close(weighted_loss(&[0.5, 0.5], 0, &rec(&[3, 2])), 0.6 * 2f64.ln(), EXACT));
    assert!(close(weighted_loss(&[0.5, 0.5], 0, &rec(&[3, 2])), 0.415888, QUOTED));
}

pub fn multi_annotator_table() {
    let r = rec(&[3, 2]);
    assert_eq!(r.annotator_slots(), vec![0, 0, 0, 1, 1]);
    let heads: Vec<Vec<f64>> = vec![vec![0.7, 0.3], vec![0.6, 0.4], vec![0.9, 0.1], vec![0.2, 0.8], vec![0.5, 0.5]];
    let expected = -(0.7f64.ln() + 0.6f64.ln() + 0.9f64.ln() + 0.8f64.ln() + 0.5f64.ln()) / 5.0;
    assert!(close(multi_annotator_loss(&heads, &r).unwrap(), expected, EXACT));
    let same = vec![vec![0.3, 0.7]; 5];
    assert_eq!(multi_annotator_predict(&same), vec![0.3, 0.7]);
    assert!(multi_annotator_loss(&heads[..4], &r).is_err());
}

pub fn cskd_table() {
    let e = 1f64.exp();
    let (hi, lo) = (e / (1.0 + e), 1.0 / (1.0 + e));
    let expected = -(lo * hi.ln() + hi * lo.ln());
    let got = cskd_consistency(&[4.0, 0.0], &[0.0, 4.0], 4.0);
    assert!(close(got, expected, EXACT));
    assert!(close(got, 1.04432, 1e-5));
    // equal predictions: the term is the entropy of the tempered target
    let z = [1.0, -0.5, 2.0];
    let p: Vec<f64> = {
        let ex: Vec<f64> = z.iter().map(|v| (v / 2.0f64).exp()).collect();
        let s: f64 = ex.iter().sum();
        ex.iter().map(|v| v / s).collect()
    };
    let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
    assert!(close(cskd_consistency(&z, &z, 2.0), entropy, EXACT));
    // very high temperature: both sides uniform
    assert!(close(cskd_consistency(&[3.0, -2.0], &[-1.0, 5.0], 1e9), 2f64.ln(), 1e-8));
    let ce = -(1.0 / (1.0 + (-4f64).exp())).ln();
    assert!(close(cskd_loss(&[4.0, 0.0], &[0.0, 4.0], 0, 4.0), ce + expected, EXACT));
}

pub fn smoothing_and_entropy_tables() {
    assert_eq!(label_smoothing_target(1, 0.0, 3), vec![0.0, 1.0, 0.0]);
    let t = label_smoothing_target(0, 0.1, 3);
    assert!(close(t[0], 0.9, EXACT) && close(t[1], 0.05, EXACT) && close(t[2], 0.05, EXACT));
    let expected = -(0.9f64.ln()) + (0.9 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
    assert!(close(max_entropy_loss(&[0.9, 0.1], 0, 1.0), expected, EXACT));
    assert!(close(max_entropy_loss(&[0.9, 0.1], 0, 1.0), -0.219722, QUOTED));
    assert_eq!(max_entropy_loss(&[0.9, 0.1], 0, 0.0), vanilla_loss(&[0.9, 0.1], 0));
    let u = [1.0 / 3.0; 3];
    assert!(close(max_entropy_loss(&u, 0, 1.0) - vanilla_loss(&u, 0), -(3f64.ln()), EXACT));
}

// --- metrics ----------------------------------------------------------------

pub fn accuracy_family_table() {
    let perfect = accuracy_family(&[0, 1, 1, 0], &[0, 1, 1, 0], 2);
    assert_eq!((perfect.accuracy, perfect.balanced_accuracy, perfect.worst_group_accuracy), (1.0, 1.0, 1.0));
    // class 0 recall 1.0, class 1 recall 0.5
    let f = accuracy_family(&[0, 0, 1, 0], &[0, 0, 1, 1], 2);
    assert!(close(f.balanced_accuracy, 0.75, EXACT));
    assert!(close(f.worst_group_accuracy, 0.5, EXACT));
    let c = accuracy_family(&[0; 6], &[0, 1, 0, 1, 0, 1], 2);
    assert_eq!((c.accuracy, c.balanced_accuracy, c.worst_group_accuracy), (0.5, 0.5, 0.0));
}

fn mcc_binary_formula(tp: f64, tn: f64, fp: f64, fn_: f64) -> f64 {
    (tp * tn - fp * fn_) / ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt()
}

pub fn mcc_table() {
    assert_eq!(mcc(&[0, 1, 2], &[0, 1, 2], 3), 1.0);
    let expand = |tp: usize, tn: usize, fp: usize, fn_: usize| {
        let mut p = Vec::new();
        let mut l = Vec::new();
        for (n, pred, lab) in [(tp, 1, 1), (tn, 0, 0), (fp, 1, 0), (fn_, 0, 1)] {
            p.extend(std::iter::repeat_n(pred, n));
            l.extend(std::iter::repeat_n(lab, n));
        }
        (p, l)
    };
    let (p, l) = expand(10, 10, 10, 10);
    assert_eq!(mcc(&p, &l, 2), 0.0);
    let (p, l) = expand(40, 40, 10, 10);
    assert!(close(mcc(&p, &l, 2), 0.6, EXACT));
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        let (tp, tn, fp, fn_) = (rng.random_range(1..30), rng.random_range(1..30), rng.random_range(1..30), rng.random_range(1..30));
        let (p, l) = expand(tp, tn, fp, fn_);
        let oracle = mcc_binary_formula(tp as f64, tn as f64, fp as f64, fn_ as f64);
        assert!(close(mcc(&p, &l, 2), oracle, EXACT));
    }
}

pub fn ece_table() {
    assert_eq!(ece(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0, 1], 10).ece, 0.0);
    let two = ece(&[vec![0.6, 0.4], vec![0.2, 0.8]], &[0, 0], 1);
    assert!(close(two.ece, 0.2, EXACT));
    assert_eq!(two.bins.iter().map(|b| b.count).sum::<usize>(), 2);
}

pub fn l1_table() {
    assert_eq!(l1_to_soft_labels(&[vec![0.6, 0.4]], &[rec(&[3, 2])]), 0.0);
    assert!(close(l1_to_soft_labels(&[vec![1.0, 0.0]], &[rec(&[3, 2])]), 0.8, EXACT));
    let probs = [vec![0.7, 0.3], vec![0.1, 0.9]];
    let recs = [rec(&[4, 1]), rec(&[2, 3])];
    let expected = ((0.7f64 - 0.8).abs() + (0.3f64 - 0.2).abs() + (0.1f64 - 0.4).abs() + (0.9f64 - 0.6).abs()) / 2.0;
    assert!(close(l1_to_soft_labels(&probs, &recs), expected, EXACT));
}
