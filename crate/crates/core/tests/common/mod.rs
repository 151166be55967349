//! Oracles and fixtures shared by the integration and acceptance tests.
//! Everything here is written independently of the library code it checks.

#![allow(dead_code)]

use std::collections::HashMap;

use mca::embedding_io::EmbeddingMatrix;
use mca::losses_grad::{
    attention_outputs, grad_total, loss_attention_train, loss_total, Batch, LossBreakdown, LossConfig, Problem,
};
use mca::model_core::{head_forward, image_prototypes, text_prototypes, ModelParams, SoftAssignment};
use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample(StandardNormal))
}

pub fn unit_rows(mut a: Array2<f64>) -> Array2<f64> {
    for mut r in a.rows_mut() {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        r.mapv_inplace(|v| v / norm);
    }
    a
}

// ---------------------------------------------------------------------------
// kNN

fn plain_dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Full sort of every candidate by similarity (descending), index ascending on ties.
pub fn brute_topk(queries: &Array2<f64>, keys: &Array2<f64>, k: usize, exclude_self: bool) -> Vec<Vec<usize>> {
    let keys: Vec<Vec<f64>> = keys.rows().into_iter().map(|r| r.to_vec()).collect();
    queries
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, q)| {
            let q = q.to_vec();
            let mut all: Vec<(usize, f64)> = keys
                .iter()
                .enumerate()
                .filter(|(j, _)| !(exclude_self && *j == i))
                .map(|(j, key)| (j, plain_dot(&q, key)))
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            all.into_iter().take(k).map(|(j, _)| j).collect()
        })
        .collect()
}

/// Random table with some duplicated rows so exact ties occur.
pub fn table_with_ties(rows: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut a = gaussian(rows, d, rng);
    for _ in 0..rows / 5 {
        let (src, dst) = (rng.random_range(0..rows), rng.random_range(0..rows));
        let row = a.row(src).to_owned();
        a.row_mut(dst).assign(&row);
    }
    a
}

// ---------------------------------------------------------------------------
// metrics

fn permutations(k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(k - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, k - 1);
            out.push(q);
        }
    }
    out
}

/// Best accuracy over every relabeling of the predictions.
pub fn acc_by_enumeration(pred: &[usize], truth: &[usize]) -> f64 {
    let k = pred.iter().chain(truth).max().map_or(0, |m| m + 1);
    let best = permutations(k)
        .into_iter()
        .map(|perm| pred.iter().zip(truth).filter(|(p, t)| perm[**p] == **t).count())
        .max()
        .unwrap_or(0);
    best as f64 / pred.len() as f64
}

/// Adjusted Rand index from explicit pair counts.
pub fn ari_by_pairs(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len();
    let (mut a, mut b, mut c, mut d) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..n {
        for j in i + 1..n {
            match (pred[i] == pred[j], truth[i] == truth[j]) {
                (true, true) => a += 1.0,
                (true, false) => b += 1.0,
                (false, true) => c += 1.0,
                (false, false) => d += 1.0,
            }
        }
    }
    let denom = (a + b) * (b + d) + (a + c) * (c + d);
    if denom == 0.0 {
        return if b == 0.0 && c == 0.0 { 1.0 } else { 0.0 };
    }
    2.0 * (a * d - b * c) / denom
}

/// `I(P;T) / sqrt(H(P) H(T))` from joint frequencies.
pub fn nmi_by_formula(pred: &[usize], truth: &[usize]) -> f64 {
    let n = pred.len() as f64;
    let mut joint: HashMap<(usize, usize), f64> = HashMap::new();
    let mut pp: HashMap<usize, f64> = HashMap::new();
    let mut pt: HashMap<usize, f64> = HashMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *joint.entry((p, t)).or_default() += 1.0 / n;
        *pp.entry(p).or_default() += 1.0 / n;
        *pt.entry(t).or_default() += 1.0 / n;
    }
    let h = |m: &HashMap<usize, f64>| -m.values().map(|v| v * v.ln()).sum::<f64>();
    let (hp, ht) = (h(&pp), h(&pt));
    if pp.len() == 1 && pt.len() == 1 {
        return 1.0;
    }
    if pp.len() == 1 || pt.len() == 1 {
        return 0.0;
    }
    let mi: f64 = joint.iter().map(|(&(p, t), &v)| v * (v / (pp[&p] * pt[&t])).ln()).sum();
    mi / (hp * ht).sqrt()
}

pub fn random_labels(n: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..c)).collect()
}

// ---------------------------------------------------------------------------
// gradients

pub const GRAD_C: usize = 4;
pub const GRAD_D: usize = 16;
pub const GRAD_BATCH: usize = 8;
pub const FD_STEP: f64 = 1e-4;

pub struct GradFixture {
    pub images: EmbeddingMatrix<f64>,
    pub words: EmbeddingMatrix<f64>,
    pub batch: Batch<f64>,
    pub params: ModelParams<f64>,
}

impl GradFixture {
    pub fn new(seed: u64) -> Self {
        let (n, m, k_s) = (24, 20, 4);
        let mut r = rng(seed);
        let images = EmbeddingMatrix::new(unit_rows(gaussian(n, GRAD_D, &mut r))).unwrap();
        let words = EmbeddingMatrix::new(unit_rows(gaussian(m, GRAD_D, &mut r))).unwrap();
        let mut params = ModelParams::<f64>::init(GRAD_C, GRAD_D, seed);
        params.image_head.weight = gaussian(GRAD_C, GRAD_D, &mut r) * 1.5;
        params.text_head.weight = gaussian(GRAD_C, GRAD_D, &mut r) * 1.5;
        params.image_head.bias = gaussian(1, GRAD_C, &mut r).row(0).to_owned() * 0.2;
        params.text_head.bias = gaussian(1, GRAD_C, &mut r).row(0).to_owned() * 0.2;
        params.w_img = Array2::eye(GRAD_D) + gaussian(GRAD_D, GRAD_D, &mut r) * 0.3;
        params.w_txt = Array2::eye(GRAD_D) + gaussian(GRAD_D, GRAD_D, &mut r) * 0.3;

        let rows = sample(&mut r, n, GRAD_BATCH).into_vec();
        let img_partner = (0..GRAD_BATCH).map(|_| r.random_range(0..n)).collect();
        let txt_partner = (0..GRAD_BATCH).map(|_| r.random_range(0..m)).collect();
        let txt_neighbors = (0..GRAD_BATCH).map(|_| sample(&mut r, m, k_s).into_vec()).collect();
        let pseudo_labels = (0..GRAD_BATCH).map(|_| r.random_range(0..GRAD_C)).collect();
        let q = head_forward(&params.image_head, images.data().view()).unwrap();
        let h_img = image_prototypes(&q, images.data().view()).unwrap();
        let prototypes = text_prototypes(&h_img, &words, 3).unwrap();
        let batch = Batch {
            rows,
            img_partner,
            txt_partner,
            txt_neighbors,
            pseudo_labels,
            prototypes,
        };
        Self {
            images,
            words,
            batch,
            params,
        }
    }

    fn problem(&self) -> Problem<'_, f64> {
        Problem {
            images: &self.images,
            words: &self.words,
        }
    }

    pub fn loss(&self, params: &ModelParams<f64>, cfg: &LossConfig) -> LossBreakdown<f64> {
        loss_total(&self.problem(), &self.batch, params, cfg).unwrap()
    }

    /// The attention-training term with its target `q` frozen at the base
    /// parameters, as the optimizer sees it.
    pub fn frozen_attention(&self, params: &ModelParams<f64>) -> f64 {
        let u = self.images.data().select(Axis(0), &self.batch.rows);
        let q_base: SoftAssignment<f64> = head_forward(&self.params.image_head, u.view()).unwrap();
        let p_prime = attention_outputs(u.view(), &self.words, &self.batch.txt_neighbors, params).unwrap();
        loss_attention_train(&q_base, &p_prime).unwrap()
    }

    pub fn grad(&self, cfg: &LossConfig) -> Vec<f64> {
        grad_total(&self.problem(), &self.batch, &self.params, cfg).unwrap().1.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Piece {
    Consistency,
    Instance,
    Prototype,
    Semantic,
    Total,
}

impl Piece {
    pub const ALL: [Piece; 5] = [Piece::Consistency, Piece::Instance, Piece::Prototype, Piece::Semantic, Piece::Total];
}

fn weights(a: f64, pa: f64, sa: f64) -> LossConfig {
    LossConfig {
        lambda_a: a,
        lambda_pa: pa,
        lambda_sa: sa,
        ..LossConfig::default()
    }
}

/// Max elementwise relative error between the analytic gradient of one loss
/// and its central difference. Denominators are floored at 1e-6. The
/// attention-training target is held fixed, matching its stop-gradient.
pub fn grad_check(seed: u64, piece: Piece) -> f64 {
    let fx = GradFixture::new(seed);
    let (with, without): (LossConfig, Option<LossConfig>) = match piece {
        Piece::Consistency => (weights(0.0, 0.0, 0.0), None),
        Piece::Instance => (weights(1.0, 0.0, 0.0), Some(weights(0.0, 0.0, 0.0))),
        Piece::Prototype => (weights(1.0, 1.0, 0.0), Some(weights(1.0, 0.0, 0.0))),
        Piece::Semantic => (weights(1.0, 0.0, 1.0), Some(weights(1.0, 0.0, 0.0))),
        Piece::Total => (LossConfig::default(), None),
    };
    let att_weight = match piece {
        Piece::Semantic => 1.0,
        Piece::Total => with.lambda_a * with.lambda_sa,
        _ => 0.0,
    };
    let value = |l: &LossBreakdown<f64>, params: &ModelParams<f64>| {
        let raw = match piece {
            Piece::Consistency | Piece::Total => l.l_total,
            Piece::Instance => l.l_instance,
            Piece::Prototype => l.l_prototype,
            Piece::Semantic => l.semantic_block(),
        };
        if att_weight == 0.0 {
            raw
        } else {
            raw - att_weight * l.l_attention + att_weight * fx.frozen_attention(params)
        }
    };
    let mut analytic = fx.grad(&with);
    if let Some(base) = &without {
        for (a, b) in analytic.iter_mut().zip(fx.grad(base)) {
            *a -= b;
        }
    }
    let theta = fx.params.to_vec();
    let mut worst = 0.0f64;
    let mut probe = fx.params.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let mut at = |delta: f64| {
            let mut t = theta.clone();
            t[i] += delta;
            probe.set_from_slice(&t);
            value(&fx.loss(&probe, &with), &probe)
        };
        let fd = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
        let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
