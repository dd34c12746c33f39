//! Random small instances of every training objective, each checked against
//! central differences. Shared by the gradient tests and the acceptance run.

use p2c_core::baselines::{
    agreement_weight, filter_mask, graph_cskd, graph_margin_hinge, graph_max_entropy, graph_multi_annotator,
    graph_soft, graph_vanilla, graph_weighted, label_smoothing_target, AnnotationRecord, CSKD_TEMPERATURE,
};
use p2c_core::diffcore::{finite_diff_check, FiniteDiffReport, Graph, NodeId, ParamId, Tensor};
use p2c_core::losses::{
    build_p2c_graph, ConsistencyConfig, ConsistencyVariant, LossWeights, Orientation, PairBatch, PairExample,
    TaskBatch,
};
use p2c_core::model::{featurize, FeatureConfig, ModelConfig, ModelState, SparseFeatures};
use p2c_core::prefsources::extractive_label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 20;
const TRIALS: usize = 40;

pub struct CaseReport {
    pub what: String,
    pub instance: u64,
    pub report: FiniteDiffReport,
}

type Sink = Vec<CaseReport>;
type Case = fn(u64, &mut Sink);

/// Every objective by name; each entry checks one random instance.
pub const CASES: [(&str, Case); 10] = [
    ("p2c", p2c_objective),
    ("vanilla", vanilla),
    ("soft", soft),
    ("margin", margin),
    ("filter", filter),
    ("weight", weight),
    ("label_smooth", label_smooth),
    ("max_entropy", max_entropy),
    ("cskd", cskd),
    ("multi_annotator", multi_annotator),
];

/// Runs one named case over all instances.
pub fn run_case(name: &str) -> Sink {
    let (_, case) = CASES.iter().find(|(n, _)| *n == name).expect("known case");
    let mut sink = Vec::new();
    for seed in 0..INSTANCES {
        case(seed, &mut sink);
    }
    sink
}

fn random_record(rng: &mut ChaCha8Rng, k: usize, class: usize) -> AnnotationRecord {
    loop {
        let mut c = vec![0u32; k];
        for _ in 0..5 {
            let y = if rng.random::<f64>() < 0.6 { class } else { rng.random_range(0..k) };
            c[y] += 1;
        }
        let r = AnnotationRecord::new(c);
        if r.majority() == class {
            return r;
        }
    }
}

/// Texts carry a unique token so that no two rows share a representation
/// (identical rows would put the consistency hinges exactly on their kink).
fn random_text(rng: &mut ChaCha8Rng, row: usize) -> String {
    let n = rng.random_range(1..5);
    let mut words: Vec<String> = (0..n).map(|_| format!("t{}", rng.random_range(0..12))).collect();
    words.push(format!("u{row}"));
    words.join(" ")
}

struct Instance {
    model: ModelState,
    feats: Vec<SparseFeatures>,
    labels: Vec<usize>,
    records: Vec<AnnotationRecord>,
}

/// `K ∈ {2, 3}`, hidden width `d ∈ 2..=8`, `T ∈ 0..=3` preference heads.
fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = rng.random_range(2..=3);
    let d = rng.random_range(2..=8);
    let t = rng.random_range(0..=3);
    let features = FeatureConfig { ngram_orders: vec![1], bucket_count: 32, ..FeatureConfig::default() };
    let config = ModelConfig {
        emb_dim: d,
        hidden_dim: d,
        pref_hidden: d,
        pref_heads: t,
        ..ModelConfig::new(features.clone(), k)
    };
    let model = ModelState::init(config, seed).unwrap();
    let n = 6;
    let feats: Vec<SparseFeatures> = (0..n).map(|i| featurize(&random_text(&mut rng, i), &features)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let records = labels.iter().map(|&y| random_record(&mut rng, k, y)).collect();
    Instance { model, feats, labels, records }
}

fn check(g: &Graph, out: NodeId, params: &[Tensor], seed: u64, what: &str, sink: &mut Sink) {
    let report = finite_diff_check(g, out, params, EPS, TRIALS, seed).unwrap();
    sink.push(CaseReport { what: what.to_owned(), instance: seed, report });
}

/// Builds `objective(logits)` on the instance's classification head and checks it.
fn check_head_objective(
    seed: u64,
    what: &str,
    sink: &mut Sink,
    mut objective: impl FnMut(&mut Graph, NodeId, &Instance) -> NodeId,
) {
    let inst = instance(seed);
    let mut g = Graph::new();
    let bound = inst.model.bind(&mut g);
    let refs: Vec<&SparseFeatures> = inst.feats.iter().collect();
    let rep = bound.encode(&mut g, &refs).unwrap();
    let logits = bound.logits(&mut g, rep, 0).unwrap();
    let out = objective(&mut g, logits, &inst);
    check(&g, out, inst.model.params(), seed, what, sink);
}

fn p2c_objective(seed: u64, sink: &mut Sink) {
    let inst = instance(seed);
    let k = inst.model.num_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    for variant in [ConsistencyVariant::Margin, ConsistencyVariant::Plain] {
        for orientation in [Orientation::Intuitive, Orientation::Literal] {
            let pairs: Vec<PairExample> = (0..3)
                .map(|i| {
                    let (a, b) = (i, i + 3);
                    let y = inst.labels[a];
                    let r1 = &inst.records[a];
                    let r0 = random_record(&mut rng, k, y);
                    let (pref, margins) = extractive_label(r1, &r0);
                    PairExample {
                        x1: &inst.feats[a],
                        x0: &inst.feats[b],
                        y_task: y,
                        y_pref: if variant == ConsistencyVariant::Plain { rng.random() } else { pref },
                        margins: Some(margins),
                    }
                })
                .collect();
            let batch = PairBatch::new(pairs);
            let task = TaskBatch { features: inst.feats.iter().collect(), labels: inst.labels.clone() };
            for task_batch in [None, Some(&task)] {
                let mut g = Graph::new();
                let bound = inst.model.bind(&mut g);
                let weights = LossWeights { lambda_div: 0.7, lambda_cons: 1.3, heads: inst.model.pref_heads() };
                let nodes = build_p2c_graph(
                    &mut g,
                    &bound,
                    &batch,
                    task_batch,
                    &weights,
                    ConsistencyConfig { variant, orientation },
                )
                .unwrap();
                let what = format!("p2c {variant:?} {orientation:?} task={}", task_batch.is_some());
                check(&g, nodes.total, inst.model.params(), seed, &what, sink);
            }
        }
    }
}

fn soft_labels(inst: &Instance) -> Vec<Vec<f64>> {
    inst.records.iter().map(AnnotationRecord::soft_label).collect()
}

fn vanilla(seed: u64, sink: &mut Sink) {
    check_head_objective(seed, "vanilla", sink, |g, z, inst| graph_vanilla(g, z, &inst.labels).unwrap());
    raw_linear(seed, sink);
}

/// Cross-entropy plus max-entropy on a bare linear map, no encoder between.
fn raw_linear(seed: u64, sink: &mut Sink) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d, k) = (5, rng.random_range(2..=8), rng.random_range(2..=3));
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = Tensor::matrix(d, k, (0..d * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let mut g = Graph::new();
    let xc = g.constant(Tensor::matrix(n, d, x).unwrap()).unwrap();
    let wp = g.param(ParamId(0), d, k);
    let z = g.matmul(xc, wp).unwrap();
    let a = graph_vanilla(&mut g, z, &labels).unwrap();
    let b = graph_max_entropy(&mut g, z, &labels, 1.0).unwrap();
    let out = g.add(a, b).unwrap();
    check(&g, out, &[w], seed, "linear", sink);
}

fn soft(seed: u64, sink: &mut Sink) {
    check_head_objective(seed, "soft", sink, |g, z, inst| graph_soft(g, z, &soft_labels(inst)).unwrap());
}

fn margin(seed: u64, sink: &mut Sink) {
    check_head_objective(seed, "margin", sink, |g, z, inst| graph_margin_hinge(g, z, &soft_labels(inst)).unwrap());
}

fn filter(seed: u64, sink: &mut Sink) {
    check_head_objective(seed, "filter", sink, |g, z, inst| {
        let w: Vec<f64> = inst.records.iter().map(|r| f64::from(u8::from(filter_mask(r)))).collect();
        graph_weighted(g, z, &inst.labels, &w).unwrap()
    });
}

fn weight(seed: u64, sink: &mut Sink) {
    check_head_objective(seed, "weight", sink, |g, z, inst| {
        let w: Vec<f64> = inst.records.iter().map(agreement_weight).collect();
        graph_weighted(g, z, &inst.labels, &w).unwrap()
    });
}

fn label_smooth(seed: u64, sink: &mut Sink) {
    check_head_objective(seed, "label_smooth", sink, |g, z, inst| {
        let k = inst.model.num_classes();
        let t: Vec<Vec<f64>> = inst.labels.iter().map(|&y| label_smoothing_target(y, 0.1, k)).collect();
        graph_soft(g, z, &t).unwrap()
    });
}

fn max_entropy(seed: u64, sink: &mut Sink) {
    check_head_objective(seed, "max_entropy", sink, |g, z, inst| {
        graph_max_entropy(g, z, &inst.labels, 0.5).unwrap()
    });
}

fn cskd(seed: u64, sink: &mut Sink) {
    // The partner side is detached, so its logits enter as constants;
    // otherwise central differences would also move the target.
    let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
    check_head_objective(seed, "cskd", sink, |g, z, inst| {
        let k = inst.model.num_classes();
        let n = inst.labels.len();
        let partner: Vec<f64> = (0..n * k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let xhat = g.constant(Tensor::matrix(n, k, partner).unwrap()).unwrap();
        graph_cskd(g, z, xhat, &inst.labels, CSKD_TEMPERATURE).unwrap()
    });
}

fn multi_annotator(seed: u64, sink: &mut Sink) {
    let base = instance(seed);
    let config = ModelConfig { task_heads: 5, ..base.model.config.clone() };
    let model = ModelState::init(config, seed).unwrap();
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let refs: Vec<&SparseFeatures> = base.feats.iter().collect();
    let rep = bound.encode(&mut g, &refs).unwrap();
    let heads: Vec<NodeId> = (0..5).map(|h| bound.logits(&mut g, rep, h).unwrap()).collect();
    let slots: Vec<Vec<usize>> = (0..5).map(|h| base.records.iter().map(|r| r.annotator_slots()[h]).collect()).collect();
    let out = graph_multi_annotator(&mut g, &heads, &slots).unwrap();
    check(&g, out, model.params(), seed, "multi_annotator", sink);
}
