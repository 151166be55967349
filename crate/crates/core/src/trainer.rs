//! Mini-batch training of the heads and attention maps.
//!
//! Neighborhoods are built once up front from the frozen embeddings. Every
//! step draws neighbors, rebuilds prototypes and pseudo-labels under the
//! current parameters, evaluates the objective and applies one optimizer
//! update. All randomness comes from one seeded generator, and parallel work
//! is reduced in a fixed order, so runs are bit-identical across thread counts.

use std::fmt::Write as _;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding_io::{l2_normalize, DatasetBundle, EmbeddingMatrix};
use crate::error::{McaError, Result};
use crate::knn_index::{topk_cross_modal, topk_in_modal, NeighborIndex};
use crate::losses_grad::{attention_outputs, grad_total, Batch, EntropySign, LossBreakdown, LossConfig, Problem};
use crate::metrics::MetricReport;
use crate::model_core::{head_forward, image_prototypes, text_prototypes, ModelParams, SoftAssignment};
use crate::scalar::Scalar;
use crate::semantic_space::{SemanticSpace, SpaceConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Where image prototypes are averaged each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeScope {
    #[default]
    Batch,
    Full,
}

/// Every knob of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub c: usize,
    pub k_i: usize,
    pub k_s: usize,
    pub k_p: usize,
    pub tau_ia: f64,
    pub tau_pa: f64,
    pub eta: f64,
    pub lambda_a: f64,
    pub lambda_pa: f64,
    pub lambda_sa: f64,
    pub gamma_r: usize,
    pub gamma_h: u32,
    pub rho_u: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub entropy_sign: EntropySign,
    pub use_bias: bool,
    pub prototype_scope: PrototypeScope,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 100,
            batch_size: 128,
            c: 3,
            k_i: 5,
            k_s: 20,
            k_p: 10,
            tau_ia: 0.05,
            tau_pa: 0.6,
            eta: 10.0,
            lambda_a: 1.0,
            lambda_pa: 1.0,
            lambda_sa: 1.0,
            gamma_r: 1000,
            gamma_h: 10,
            rho_u: 0.05,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            entropy_sign: EntropySign::Balancing,
            use_bias: true,
            prototype_scope: PrototypeScope::Batch,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(McaError::InvalidArgument(what.to_string()));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and >= 0");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.c == 0 {
            return bad("epochs, batch-size and c must be >= 1");
        }
        if self.k_i == 0 || self.k_s == 0 || self.k_p == 0 || self.gamma_r == 0 {
            return bad("k-i, k-s, k-p and gamma-r must be >= 1");
        }
        if !(self.tau_ia > 0.0) || !(self.tau_pa > 0.0) {
            return bad("temperatures must be > 0");
        }
        if !(self.rho_u >= 0.0) {
            return bad("rho-u must be >= 0");
        }
        for (name, v) in [("eta", self.eta), ("lambda-a", self.lambda_a), ("lambda-pa", self.lambda_pa), ("lambda-sa", self.lambda_sa)] {
            if !v.is_finite() {
                return bad(&format!("{name} must be finite"));
            }
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            eta: self.eta,
            lambda_a: self.lambda_a,
            lambda_pa: self.lambda_pa,
            lambda_sa: self.lambda_sa,
            tau_ia: self.tau_ia,
            tau_pa: self.tau_pa,
            entropy_sign: self.entropy_sign,
            use_bias: self.use_bias,
        }
    }

    pub fn space_config(&self) -> SpaceConfig {
        SpaceConfig {
            c: self.c,
            rho_u: self.rho_u,
            gamma_r: self.gamma_r,
            gamma_h: self.gamma_h,
            seed: self.seed,
            ..SpaceConfig::default()
        }
    }

    /// Applies `key=value` overrides (kebab- or snake-case keys).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let value = value.trim();
        let mut json = serde_json::to_value(&*self).expect("config serializes");
        let obj = json.as_object_mut().expect("config is an object");
        let slot = obj
            .get_mut(&key)
            .ok_or_else(|| McaError::InvalidArgument(format!("unknown config key {key:?}")))?;
        let parsed = match slot {
            serde_json::Value::String(_) => serde_json::Value::String(value.to_string()),
            _ => serde_json::from_str(value)
                .map_err(|_| McaError::InvalidArgument(format!("bad value {value:?} for {key}")))?,
        };
        *slot = parsed;
        *self = serde_json::from_value(json)
            .map_err(|e| McaError::InvalidArgument(format!("bad value {value:?} for {key}: {e}")))?;
        Ok(())
    }

    /// Parses a `key=value` file; blank lines and `#` comments are ignored.
    pub fn apply_kv_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| McaError::InvalidArgument(format!("config line {}: expected key=value", n + 1)))?;
            self.apply_kv(k, v)?;
        }
        Ok(())
    }
}

/// Shuffled partition of `0..n` into batches; the last batch may be short.
pub fn sample_batch(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Frozen inputs of a run: normalized embeddings and precomputed neighborhoods.
#[derive(Debug, Clone)]
pub struct TrainContext<T> {
    pub images: EmbeddingMatrix<T>,
    pub words: EmbeddingMatrix<T>,
    pub img_neighbors: NeighborIndex<T>,
    pub txt_neighbors: NeighborIndex<T>,
    pub k_p: usize,
}

impl<T: Scalar> TrainContext<T> {
    /// Normalizes both modalities and builds the neighborhoods. `k_s` and
    /// `k_p` are capped at the number of words.
    pub fn new(images: &EmbeddingMatrix<T>, space: &SemanticSpace<T>, cfg: &TrainConfig) -> Result<Self> {
        if space.is_empty() {
            return Err(McaError::Empty("semantic space is empty".into()));
        }
        let images = l2_normalize(images)?;
        let words = l2_normalize(&space.kept_embeddings)?;
        let m = words.n();
        let k_s = cfg.k_s.min(m);
        let k_p = cfg.k_p.min(m);
        if k_s < cfg.k_s || k_p < cfg.k_p {
            log::warn!("semantic space has {m} words; using k_s = {k_s}, k_p = {k_p}");
        }
        let img_neighbors = topk_in_modal(&images, cfg.k_i)?;
        let txt_neighbors = topk_cross_modal(&images, &words, k_s)?;
        Ok(Self {
            images,
            words,
            img_neighbors,
            txt_neighbors,
            k_p,
        })
    }

    pub fn problem(&self) -> Problem<'_, T> {
        Problem {
            images: &self.images,
            words: &self.words,
        }
    }

    pub fn n(&self) -> usize {
        self.images.n()
    }

    /// Image-head assignments for every training image.
    pub fn assignments(&self, params: &ModelParams<T>) -> Result<SoftAssignment<T>> {
        head_forward(&params.image_head, self.images.data().view())
    }

    pub fn all_txt_neighbors(&self) -> Vec<Vec<usize>> {
        (0..self.n()).map(|i| self.txt_neighbors.indices(i).collect()).collect()
    }
}

/// Draws neighbors and fixes prototypes and pseudo-labels for one step.
pub fn build_batch<T: Scalar>(
    ctx: &TrainContext<T>,
    params: &ModelParams<T>,
    rows: &[usize],
    scope: PrototypeScope,
    rng: &mut ChaCha8Rng,
) -> Result<Batch<T>> {
    let mut img_partner = Vec::with_capacity(rows.len());
    let mut txt_partner = Vec::with_capacity(rows.len());
    let mut txt_neighbors = Vec::with_capacity(rows.len());
    for &i in rows {
        let nb = ctx.img_neighbors.neighbors(i);
        img_partner.push(nb[rng.random_range(0..nb.len())].index);
        let tn: Vec<usize> = ctx.txt_neighbors.indices(i).collect();
        txt_partner.push(tn[rng.random_range(0..tn.len())]);
        txt_neighbors.push(tn);
    }
    let u_b = ctx.images.data().select(Axis(0), rows);
    let h_img = match scope {
        PrototypeScope::Batch => {
            let q = head_forward(&params.image_head, u_b.view())?;
            image_prototypes(&q, u_b.view())?
        }
        PrototypeScope::Full => {
            let q = ctx.assignments(params)?;
            image_prototypes(&q, ctx.images.data().view())?
        }
    };
    let prototypes = text_prototypes(&h_img, &ctx.words, ctx.k_p)?;
    let p_prime = attention_outputs(u_b.view(), &ctx.words, &txt_neighbors, params)?;
    Ok(Batch {
        rows: rows.to_vec(),
        img_partner,
        txt_partner,
        txt_neighbors,
        pseudo_labels: p_prime.hard_labels(),
        prototypes,
    })
}

/// First-order optimizer over the flattened parameter vector.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, len: usize) -> Self {
        Self {
            kind,
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [T], grads: &[T]) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.iter_mut().zip(grads) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.t += 1;
                let bc1 = T::one() - self.beta1.powi(self.t);
                let bc2 = T::one() - self.beta2.powi(self.t);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params: ModelParams<T>,
    pub step: usize,
    pub epoch: usize,
    pub optimizer: Optimizer<T>,
    pub rng: ChaCha8Rng,
    pub history: Vec<LossBreakdown<T>>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: ModelParams<T>, cfg: &TrainConfig) -> Self {
        let len = params.len();
        Self {
            params,
            step: 0,
            epoch: 0,
            optimizer: Optimizer::new(cfg.optimizer, cfg.lr, len),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            history: Vec::new(),
        }
    }
}

/// Parameter initialization seed derived from the run seed.
pub fn init_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// One optimizer step on the given rows. On failure the parameters are left
/// at their last good value.
pub fn train_step<T: Scalar>(
    ctx: &TrainContext<T>,
    state: &mut TrainState<T>,
    rows: &[usize],
    cfg: &TrainConfig,
) -> Result<LossBreakdown<T>> {
    let batch = build_batch(ctx, &state.params, rows, cfg.prototype_scope, &mut state.rng)?;
    let (losses, grads) = grad_total(&ctx.problem(), &batch, &state.params, &cfg.loss_config())?;
    let mut flat = state.params.to_vec();
    state.optimizer.update(&mut flat, &grads.to_vec());
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(McaError::Numeric(format!("non-finite parameters after step {}", state.step)));
    }
    state.params.set_from_slice(&flat);
    state.step += 1;
    state.history.push(losses);
    Ok(losses)
}

/// Runs the remaining epochs of `state`, calling `on_epoch` after each. On
/// error `state` still holds the last good parameters.
pub fn run_epochs<T: Scalar>(
    ctx: &TrainContext<T>,
    cfg: &TrainConfig,
    state: &mut TrainState<T>,
    mut on_epoch: impl FnMut(&TrainContext<T>, &TrainState<T>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if state.params.c() != cfg.c || state.params.d() != ctx.images.d() {
        return Err(McaError::Shape("parameters do not match c or d".into()));
    }
    if !cfg.use_bias {
        state.params.image_head.bias.fill(T::zero());
        state.params.text_head.bias.fill(T::zero());
    }
    let batch_size = cfg.batch_size.min(ctx.n());
    while state.epoch < cfg.epochs {
        for rows in sample_batch(ctx.n(), batch_size, &mut state.rng) {
            train_step(ctx, state, &rows, cfg)?;
        }
        state.epoch += 1;
        on_epoch(ctx, state)?;
    }
    Ok(())
}

/// Trains from `params` for `cfg.epochs` epochs.
pub fn train_with<T: Scalar>(
    ctx: &TrainContext<T>,
    cfg: &TrainConfig,
    params: ModelParams<T>,
    on_epoch: impl FnMut(&TrainContext<T>, &TrainState<T>) -> Result<()>,
) -> Result<TrainState<T>> {
    let mut state = TrainState::new(params, cfg);
    run_epochs(ctx, cfg, &mut state, on_epoch)?;
    Ok(state)
}

/// Bit-exact copy of a [`TrainState`] for resuming; floats are kept as IEEE
/// bits so a resumed run continues exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSnapshot {
    pub c: usize,
    pub d: usize,
    pub step: usize,
    pub epoch: usize,
    params: Vec<u64>,
    adam_t: i32,
    adam_m: Vec<u64>,
    adam_v: Vec<u64>,
    rng_seed: [u8; 32],
    rng_stream: u64,
    rng_word_pos: [u64; 2],
    history: Vec<[u64; 7]>,
}

fn bits<T: Scalar>(v: &[T]) -> Vec<u64> {
    v.iter().map(|x| x.to_f64_lossy().to_bits()).collect()
}

fn unbits<T: Scalar>(v: &[u64]) -> Vec<T> {
    v.iter().map(|&b| T::lit(f64::from_bits(b))).collect()
}

impl<T: Scalar> TrainState<T> {
    pub fn snapshot(&self) -> TrainSnapshot {
        let pos = self.rng.get_word_pos();
        TrainSnapshot {
            c: self.params.c(),
            d: self.params.d(),
            step: self.step,
            epoch: self.epoch,
            params: bits(&self.params.to_vec()),
            adam_t: self.optimizer.t,
            adam_m: bits(&self.optimizer.m),
            adam_v: bits(&self.optimizer.v),
            rng_seed: self.rng.get_seed(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: [(pos >> 64) as u64, pos as u64],
            history: self
                .history
                .iter()
                .map(|l| {
                    [
                        l.l_consistency,
                        l.l_entropy_term,
                        l.l_instance,
                        l.l_prototype,
                        l.l_semantic,
                        l.l_attention,
                        l.l_total,
                    ]
                    .map(|x| x.to_f64_lossy().to_bits())
                })
                .collect(),
        }
    }

    /// Rebuilds a state; optimizer kind and learning rate come from `cfg`.
    pub fn from_snapshot(snap: &TrainSnapshot, cfg: &TrainConfig) -> Result<Self> {
        let mut params = ModelParams::zeros(snap.c, snap.d);
        let len = params.len();
        if snap.params.len() != len || snap.adam_m.len() != len || snap.adam_v.len() != len {
            return Err(McaError::Metadata("snapshot sizes do not match c and d".into()));
        }
        params.set_from_slice(&unbits::<T>(&snap.params));
        let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, len);
        optimizer.t = snap.adam_t;
        optimizer.m = unbits(&snap.adam_m);
        optimizer.v = unbits(&snap.adam_v);
        let mut rng = ChaCha8Rng::from_seed(snap.rng_seed);
        rng.set_stream(snap.rng_stream);
        rng.set_word_pos(((snap.rng_word_pos[0] as u128) << 64) | snap.rng_word_pos[1] as u128);
        let history = snap
            .history
            .iter()
            .map(|h| {
                let f = |i: usize| T::lit(f64::from_bits(h[i]));
                LossBreakdown {
                    l_consistency: f(0),
                    l_entropy_term: f(1),
                    l_instance: f(2),
                    l_prototype: f(3),
                    l_semantic: f(4),
                    l_attention: f(5),
                    l_total: f(6),
                }
            })
            .collect();
        Ok(Self {
            params,
            step: snap.step,
            epoch: snap.epoch,
            optimizer,
            rng,
            history,
        })
    }
}

/// Final parameters plus hard assignments of the training images.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub state: TrainState<T>,
    pub assignments: Vec<usize>,
}

pub fn train<T: Scalar>(
    dataset: &DatasetBundle<T>,
    space: &SemanticSpace<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    let ctx = TrainContext::new(&dataset.images, space, cfg)?;
    let params = ModelParams::init(cfg.c, ctx.images.d(), init_seed(cfg.seed));
    let state = train_with(&ctx, cfg, params, |_, _| Ok(()))?;
    let assignments = ctx.assignments(&state.params)?.hard_labels();
    Ok(TrainOutcome { state, assignments })
}

/// Hard cluster predictions of the image head.
pub fn predict<T: Scalar>(params: &ModelParams<T>, images: &EmbeddingMatrix<T>) -> Result<Vec<usize>> {
    let u = l2_normalize(images)?;
    Ok(head_forward(&params.image_head, u.data().view())?.hard_labels())
}

/// ACC/NMI/ARI of the image head against the dataset labels.
pub fn evaluate<T: Scalar>(params: &ModelParams<T>, dataset: &DatasetBundle<T>) -> Result<MetricReport> {
    let labels = dataset
        .labels
        .as_ref()
        .ok_or_else(|| McaError::Metadata("dataset has no labels to evaluate against".into()))?;
    let pred = predict(params, &dataset.images)?;
    MetricReport::compute(&pred, labels)
}

/// Seeded shuffle split into `(train, held_out)` row indices, each sorted.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_5EED);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let held = ((n as f64) * fraction.clamp(0.0, 1.0)).round() as usize;
    let mut test = order[..held].to_vec();
    let mut train = order[held..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// `step,l_I,l_ia,l_pa,l_sa,l_total`; `l_sa` is the whole semantic block.
pub fn loss_log_csv<T: Scalar>(history: &[LossBreakdown<T>]) -> String {
    let mut out = String::from("step,l_I,l_ia,l_pa,l_sa,l_total\n");
    for (step, l) in history.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            step + 1,
            l.consistency_block(),
            l.l_instance,
            l.l_prototype,
            l.semantic_block(),
            l.l_total
        )
        .expect("string write");
    }
    out
}
