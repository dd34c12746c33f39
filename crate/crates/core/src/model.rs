//! Hashed n-gram encoder with a classification head and preference heads.
//!
//! The encoder averages embedding rows of the active hash buckets
//! (count-weighted) and passes the result through a two-layer tanh MLP.
//! The classifier is an affine head on the representation; every
//! preference head is a two-layer tanh MLP over `[representation; one-hot label]`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::hash::Hasher;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use base64::Engine;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{softmax, DiffError, Graph, NodeId, ParamId, Tensor};
use crate::rng::{SeedStream, StreamRng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Subset of `{1, 2}`.
    pub ngram_orders: Vec<u8>,
    /// Must be a power of two.
    pub bucket_count: usize,
    pub max_tokens: usize,
    pub hash_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { ngram_orders: vec![1, 2], bucket_count: 1 << 18, max_tokens: 256, hash_seed: 0 }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.bucket_count.is_power_of_two() {
            return Err(Error::config(format!(
                "bucket_count {} is not a power of two",
                self.bucket_count
            )));
        }
        if self.ngram_orders.is_empty() || self.ngram_orders.iter().any(|o| !(1..=2).contains(o)) {
            return Err(Error::config("ngram_orders must be a non-empty subset of {1, 2}"));
        }
        if self.max_tokens == 0 {
            return Err(Error::config("max_tokens must be positive"));
        }
        Ok(())
    }

    fn bucket(&self, kind: u8, gram: &[&str]) -> u32 {
        let mut h = fnv::FnvHasher::with_key(0xcbf2_9ce4_8422_2325 ^ self.hash_seed);
        h.write_u8(kind);
        for (i, tok) in gram.iter().enumerate() {
            if i > 0 {
                h.write_u8(0x1f);
            }
            h.write(tok.as_bytes());
        }
        // fold the high bits in; FNV's low bits mix poorly
        let v = h.finish();
        ((v ^ (v >> 29) ^ (v >> 47)) as usize & (self.bucket_count - 1)) as u32
    }
}

/// Sparse bucket counts, sorted by bucket.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseFeatures(pub Vec<(u32, f64)>);

impl SparseFeatures {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|(_, c)| c).sum()
    }
}

/// Lowercased tokens split on anything that is not alphanumeric.
pub fn tokenize(text: &str, max_tokens: usize) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .take(max_tokens)
        .map(str::to_lowercase)
        .collect()
}

pub fn featurize(text: &str, fx: &FeatureConfig) -> SparseFeatures {
    let tokens = tokenize(text, fx.max_tokens);
    let refs: Vec<&str> = tokens.iter().map(String::as_str).collect();
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for &order in &fx.ngram_orders {
        let n = order as usize;
        if refs.len() < n {
            continue;
        }
        for gram in refs.windows(n) {
            *counts.entry(fx.bucket(order, gram)).or_default() += 1.0;
        }
    }
    SparseFeatures(counts.into_iter().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub features: FeatureConfig,
    pub emb_dim: usize,
    /// Representation dimension `d`.
    pub hidden_dim: usize,
    pub num_classes: usize,
    /// Number of preference heads `T` (0 disables preference learning).
    pub pref_heads: usize,
    pub pref_hidden: usize,
    /// Number of classification heads; more than one only for the
    /// multi-annotator baseline.
    pub task_heads: usize,
}

impl ModelConfig {
    pub fn new(features: FeatureConfig, num_classes: usize) -> Self {
        Self {
            features,
            emb_dim: 64,
            hidden_dim: 64,
            num_classes,
            pref_heads: 3,
            pref_hidden: 64,
            task_heads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        if self.emb_dim == 0 || self.hidden_dim == 0 || self.pref_hidden == 0 {
            return Err(Error::config("layer widths must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("need at least 2 classes"));
        }
        if self.task_heads == 0 {
            return Err(Error::config("need at least one classification head"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Mlp {
    l1: Affine,
    l2: Affine,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embedding: ParamId,
    encoder: Mlp,
    task: Vec<Affine>,
    pref: Vec<Mlp>,
}

/// Parameters plus the layout that addresses them.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
    layout: Layout,
    /// Post-hoc softmax temperature fitted on validation data.
    pub temperature: f64,
}

struct Init<'a> {
    names: &'a mut Vec<String>,
    params: &'a mut Vec<Tensor>,
}

impl Init<'_> {
    fn push(&mut self, name: String, t: Tensor) -> ParamId {
        self.names.push(name);
        self.params.push(t);
        ParamId(self.params.len() - 1)
    }

    fn affine(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut StreamRng) -> Affine {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
        };
        let w = Tensor::matrix(fan_in, fan_out, draw(fan_in * fan_out)).expect("shape");
        let b = Tensor::row(&draw(fan_out));
        Affine { w: self.push(format!("{name}.w"), w), b: self.push(format!("{name}.b"), b) }
    }
}

impl ModelState {
    /// Randomly initialised model. The encoder and first classification head
    /// come from the `init` substream; each preference head and each extra
    /// classification head has its own substream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let seeds = SeedStream::new(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut init = Init { names: &mut names, params: &mut params };

        let mut rng = seeds.substream(SeedStream::INIT);
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        let table: Vec<f64> = (0..config.features.bucket_count * config.emb_dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        let embedding = init.push(
            "embedding".into(),
            Tensor::matrix(config.features.bucket_count, config.emb_dim, table)?,
        );
        let encoder = Mlp {
            l1: init.affine("encoder.l1", config.emb_dim, config.hidden_dim, &mut rng),
            l2: init.affine("encoder.l2", config.hidden_dim, config.hidden_dim, &mut rng),
        };
        let mut task = vec![init.affine("task0", config.hidden_dim, config.num_classes, &mut rng)];
        for t in 1..config.task_heads {
            let mut r = seeds.indexed("init-task", t);
            task.push(init.affine(&format!("task{t}"), config.hidden_dim, config.num_classes, &mut r));
        }
        let mut pref = Vec::with_capacity(config.pref_heads);
        for t in 0..config.pref_heads {
            let mut r = seeds.indexed("init-pref", t);
            let fan_in = config.hidden_dim + config.num_classes;
            pref.push(Mlp {
                l1: init.affine(&format!("pref{t}.l1"), fan_in, config.pref_hidden, &mut r),
                l2: init.affine(&format!("pref{t}.l2"), config.pref_hidden, 1, &mut r),
            });
        }
        Ok(Self { config, names, params, layout: Layout { embedding, encoder, task, pref }, temperature: 1.0 })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn pref_heads(&self) -> usize {
        self.layout.pref.len()
    }

    pub fn task_heads(&self) -> usize {
        self.layout.task.len()
    }

    /// Parameters belonging to preference heads.
    pub fn pref_param_ids(&self) -> Vec<ParamId> {
        self.layout
            .pref
            .iter()
            .flat_map(|m| [m.l1.w, m.l1.b, m.l2.w, m.l2.b])
            .collect()
    }

    /// Adds this model's parameters as leaves of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> BoundModel {
        let leaf = |g: &mut Graph, id: ParamId, p: &[Tensor]| {
            let t = &p[id.0];
            g.param(id, t.rows(), t.cols())
        };
        let p = &self.params;
        let aff = |g: &mut Graph, a: Affine| BoundAffine { w: leaf(g, a.w, p), b: leaf(g, a.b, p) };
        let mlp = |g: &mut Graph, m: Mlp| BoundMlp { l1: aff(g, m.l1), l2: aff(g, m.l2) };
        BoundModel {
            embedding: leaf(graph, self.layout.embedding, p),
            emb_dim: self.config.emb_dim,
            num_classes: self.config.num_classes,
            encoder: mlp(graph, self.layout.encoder),
            task: self.layout.task.iter().map(|&a| aff(graph, a)).collect(),
            pref: self.layout.pref.iter().map(|&m| mlp(graph, m)).collect(),
        }
    }

    /// Representations `g(x)` for a batch, evaluated without recording gradients.
    pub fn encode(&self, feats: &[&SparseFeatures]) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = self.bind(&mut g);
        let rep = m.encode(&mut g, feats)?;
        Ok(g.forward(&self.params)?.value(rep).clone())
    }

    /// Logits of every classification head, `[head][example][class]`.
    pub fn head_logits(&self, feats: &[&SparseFeatures]) -> Result<Vec<Tensor>> {
        if feats.is_empty() {
            return Ok(vec![]);
        }
        let mut g = Graph::new();
        let m = self.bind(&mut g);
        let rep = m.encode(&mut g, feats)?;
        let heads: Vec<NodeId> =
            (0..m.task.len()).map(|h| m.logits(&mut g, rep, h)).collect::<Result<_, _>>()?;
        let ev = g.forward(&self.params)?;
        Ok(heads.iter().map(|&h| ev.value(h).clone()).collect())
    }

    /// Class probabilities per example. With several classification heads
    /// this is the mean of the head softmaxes.
    pub fn predict_proba(&self, feats: &[&SparseFeatures]) -> Result<Vec<Vec<f64>>> {
        let logits = self.predict_logits(feats)?;
        Ok(logits.iter().map(|z| softmax(z)).collect())
    }

    /// Logits whose softmax is the model's prediction. For an ensemble of
    /// heads these are the log of the averaged probabilities.
    pub fn predict_logits(&self, feats: &[&SparseFeatures]) -> Result<Vec<Vec<f64>>> {
        let heads = self.head_logits(feats)?;
        let n = feats.len();
        if heads.len() == 1 {
            return Ok((0..n).map(|i| heads[0].row_slice(i).to_vec()).collect());
        }
        let k = self.config.num_classes;
        Ok((0..n)
            .map(|i| {
                let mut mean = vec![0.0; k];
                for h in &heads {
                    for (m, p) in mean.iter_mut().zip(softmax(h.row_slice(i))) {
                        *m += p / heads.len() as f64;
                    }
                }
                mean.iter().map(|p| p.max(1e-300).ln()).collect()
            })
            .collect())
    }

    /// Preference scores `h_t(x, y)` of one head for a batch.
    pub fn preference_scores(
        &self,
        feats: &[&SparseFeatures],
        labels: &[usize],
        head: usize,
    ) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let m = self.bind(&mut g);
        let rep = m.encode(&mut g, feats)?;
        let s = m.preference_score(&mut g, rep, labels, head)?;
        Ok(g.forward(&self.params)?.value(s).data().to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, &self.to_checkpoint())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        Self::from_checkpoint(ck)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let b64 = base64::engine::general_purpose::STANDARD;
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            temperature: self.temperature,
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(name, t)| {
                    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                    StoredParam { name: name.clone(), shape: t.shape().to_vec(), data: b64.encode(bytes) }
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::validation(format!("not a checkpoint: format '{}'", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::validation(format!("unsupported checkpoint version {}", ck.version)));
        }
        let mut model = Self::init(ck.config, 0)?;
        if ck.params.len() != model.params.len() {
            return Err(Error::validation("checkpoint parameter count does not match config"));
        }
        let b64 = base64::engine::general_purpose::STANDARD;
        for ((stored, name), slot) in ck.params.into_iter().zip(&model.names).zip(&mut model.params) {
            if &stored.name != name || stored.shape != slot.shape() {
                return Err(Error::validation(format!("checkpoint parameter '{}' mismatch", stored.name)));
            }
            let bytes = b64
                .decode(stored.data.as_bytes())
                .map_err(|e| Error::validation(format!("parameter '{name}': {e}")))?;
            if bytes.len() != slot.numel() * 8 {
                return Err(Error::validation(format!("parameter '{name}': wrong byte length")));
            }
            for (v, chunk) in slot.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
                *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        model.temperature = ck.temperature;
        Ok(model)
    }
}

pub const CHECKPOINT_FORMAT: &str = "p2c-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model: config, temperature and little-endian `f64` arrays
/// (base64) so that checkpoints round-trip bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub temperature: f64,
    pub params: Vec<StoredParam>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: String,
}

#[derive(Clone, Copy, Debug)]
struct BoundAffine {
    w: NodeId,
    b: NodeId,
}

impl BoundAffine {
    fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, DiffError> {
        let y = g.matmul(x, self.w)?;
        g.add_row(y, self.b)
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundMlp {
    l1: BoundAffine,
    l2: BoundAffine,
}

impl BoundMlp {
    fn apply(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, DiffError> {
        let h = self.l1.apply(g, x)?;
        let h = g.tanh(h);
        self.l2.apply(g, h)
    }
}

/// Model parameters bound as leaves of one graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    embedding: NodeId,
    emb_dim: usize,
    num_classes: usize,
    encoder: BoundMlp,
    task: Vec<BoundAffine>,
    pref: Vec<BoundMlp>,
}

impl BoundModel {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pref_heads(&self) -> usize {
        self.pref.len()
    }

    pub fn task_heads(&self) -> usize {
        self.task.len()
    }

    /// Count-weighted mean embedding per example, `[n, emb_dim]`.
    fn embed(&self, g: &mut Graph, feats: &[&SparseFeatures]) -> Result<NodeId, DiffError> {
        let buckets: BTreeSet<u32> = feats.iter().flat_map(|f| f.0.iter().map(|&(b, _)| b)).collect();
        if buckets.is_empty() {
            return g.constant(Tensor::zeros(&[feats.len(), self.emb_dim]));
        }
        let col: BTreeMap<u32, usize> = buckets.iter().enumerate().map(|(i, &b)| (b, i)).collect();
        let width = buckets.len();
        let mut weights = vec![0.0; feats.len() * width];
        for (i, f) in feats.iter().enumerate() {
            let total = f.total();
            for &(b, c) in &f.0 {
                weights[i * width + col[&b]] = c / total;
            }
        }
        let rows = g.index_select(self.embedding, buckets.iter().map(|&b| b as usize).collect())?;
        let w = g.constant(Tensor::matrix(feats.len(), width, weights)?)?;
        g.matmul(w, rows)
    }

    /// `g(x)`, shape `[n, d]`.
    pub fn encode(&self, g: &mut Graph, feats: &[&SparseFeatures]) -> Result<NodeId, DiffError> {
        let e = self.embed(g, feats)?;
        self.encoder.apply(g, e)
    }

    /// Logits of classification head `head`, shape `[n, K]`.
    pub fn logits(&self, g: &mut Graph, rep: NodeId, head: usize) -> Result<NodeId, DiffError> {
        self.task[head].apply(g, rep)
    }

    /// `h_t([g(x); onehot(y)])`, shape `[n, 1]`.
    pub fn preference_score(
        &self,
        g: &mut Graph,
        rep: NodeId,
        labels: &[usize],
        head: usize,
    ) -> Result<NodeId, DiffError> {
        let mlp = self.pref.get(head).ok_or_else(|| {
            DiffError::Shape(format!("preference head {head} out of range (T = {})", self.pref.len()))
        })?;
        let n = g.shape(rep)[0];
        if labels.len() != n {
            return Err(DiffError::Shape(format!("{} labels for {n} rows", labels.len())));
        }
        let mut onehot = vec![0.0; n * self.num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= self.num_classes {
                return Err(DiffError::Shape(format!("label {y} out of range")));
            }
            onehot[i * self.num_classes + y] = 1.0;
        }
        let oh = g.constant(Tensor::matrix(n, self.num_classes, onehot)?)?;
        let x = g.concat_cols(rep, oh)?;
        mlp.apply(g, x)
    }
}
