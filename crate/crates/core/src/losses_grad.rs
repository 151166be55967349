//! Alignment objectives and their analytic gradients.
//!
//! Each loss has a kernel that works on probability matrices and returns the
//! value together with the gradient w.r.t. those matrices. [`grad_total`]
//! chains the kernels back through the softmax heads and the attention maps.
//!
//! Prototypes and pseudo-labels are carried in the [`Batch`] and treated as
//! constants, so every loss here is a pure function of the parameters.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_io::EmbeddingMatrix;
use crate::error::{McaError, Result};
use crate::knn_index::NeighborIndex;
use crate::model_core::{
    attention_with_keys, head_forward, LinearHead, ModelParams, PrototypePair, SoftAssignment,
};
use crate::scalar::{log_sum_exp, Scalar};

/// Sign of the cluster-balance term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntropySign {
    /// `+eta * sum(qbar log qbar)`: minimizing pushes `qbar` toward uniform.
    #[default]
    Balancing,
    /// `-eta * sum(qbar log qbar)`, the form that rewards collapse.
    Literal,
}

impl EntropySign {
    fn factor<T: Scalar>(self) -> T {
        match self {
            EntropySign::Balancing => T::one(),
            EntropySign::Literal => -T::one(),
        }
    }
}

/// Trade-offs and temperatures of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub eta: f64,
    pub lambda_a: f64,
    pub lambda_pa: f64,
    pub lambda_sa: f64,
    pub tau_ia: f64,
    pub tau_pa: f64,
    pub entropy_sign: EntropySign,
    pub use_bias: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eta: 10.0,
            lambda_a: 1.0,
            lambda_pa: 1.0,
            lambda_sa: 1.0,
            tau_ia: 0.05,
            tau_pa: 0.6,
            entropy_sign: EntropySign::Balancing,
            use_bias: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossBreakdown<T> {
    pub l_consistency: T,
    pub l_entropy_term: T,
    pub l_instance: T,
    pub l_prototype: T,
    pub l_semantic: T,
    /// Soft cross-entropy that trains the attention maps.
    pub l_attention: T,
    pub l_total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn consistency_block(&self) -> T {
        self.l_consistency + self.l_entropy_term
    }

    /// Semantic block: pseudo-label cross-entropy plus the attention term.
    pub fn semantic_block(&self) -> T {
        self.l_semantic + self.l_attention
    }

    pub fn compose(&mut self, cfg: &LossConfig) {
        let (la, lpa, lsa) = (T::lit(cfg.lambda_a), T::lit(cfg.lambda_pa), T::lit(cfg.lambda_sa));
        self.l_total = self.consistency_block()
            + la * (self.l_instance + lpa * self.l_prototype + lsa * self.semantic_block());
    }
}

/// Gradients with the shapes of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T> {
    pub d_phi: LinearHead<T>,
    pub d_theta: LinearHead<T>,
    pub d_w_img: Array2<T>,
    pub d_w_txt: Array2<T>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn zeros(c: usize, d: usize) -> Self {
        Self {
            d_phi: LinearHead::zeros(c, d),
            d_theta: LinearHead::zeros(c, d),
            d_w_img: Array2::zeros((d, d)),
            d_w_txt: Array2::zeros((d, d)),
        }
    }

    /// Same block order as [`ModelParams::to_vec`].
    pub fn to_vec(&self) -> Vec<T> {
        let as_params = ModelParams {
            image_head: self.d_phi.clone(),
            text_head: self.d_theta.clone(),
            w_img: self.d_w_img.clone(),
            w_txt: self.d_w_txt.clone(),
        };
        as_params.to_vec()
    }

    pub fn check_finite(&self) -> Result<()> {
        let blocks: [(&str, Box<dyn Iterator<Item = &T>>); 6] = [
            ("phi.weight", Box::new(self.d_phi.weight.iter())),
            ("phi.bias", Box::new(self.d_phi.bias.iter())),
            ("theta.weight", Box::new(self.d_theta.weight.iter())),
            ("theta.bias", Box::new(self.d_theta.bias.iter())),
            ("w_img", Box::new(self.d_w_img.iter())),
            ("w_txt", Box::new(self.d_w_txt.iter())),
        ];
        for (name, mut it) in blocks {
            if it.any(|v| !v.is_finite()) {
                return Err(McaError::Numeric(format!("non-finite gradient in {name}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// kernels: value and gradient w.r.t. probability inputs

/// `-mean_i log(a_i . b_i)`.
pub fn consistency_kernel<T: Scalar>(
    a: ArrayView2<'_, T>,
    b: ArrayView2<'_, T>,
) -> Result<(T, Array2<T>, Array2<T>)> {
    let n = a.nrows();
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut ga = Array2::zeros(a.raw_dim());
    let mut gb = Array2::zeros(b.raw_dim());
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let dot = a.row(i).dot(&b.row(i));
        if !(dot > T::zero()) {
            return Err(McaError::Numeric(format!("neighbor pair {i} has zero agreement; log(0)")));
        }
        terms.push(-dot.ln());
        ga.row_mut(i).assign(&(&b.row(i) * (-inv_n / dot)));
        gb.row_mut(i).assign(&(&a.row(i) * (-inv_n / dot)));
    }
    Ok((crate::scalar::ordered_sum(&terms) * inv_n, ga, gb))
}

/// `sign * eta * sum_l qbar_l log qbar_l` with `qbar` the column mean.
pub fn entropy_kernel<T: Scalar>(q: ArrayView2<'_, T>, eta: T, sign: EntropySign) -> (T, Array2<T>) {
    let n = T::from_usize_lossy(q.nrows());
    let qbar = q.mean_axis(Axis(0)).expect("non-empty");
    let scale = sign.factor::<T>() * eta;
    let value = scale * qbar.iter().map(|&v| v * v.clamped_ln()).sum::<T>();
    let dqbar: Array1<T> = qbar.mapv(|v| {
        if v > T::log_floor() {
            scale * (v.ln() + T::one())
        } else {
            scale * T::log_floor().ln()
        }
    });
    let g = Array2::from_shape_fn(q.raw_dim(), |(_, l)| dqbar[l] / n);
    (value, g)
}

/// Contrastive term whose partition excludes the positive index.
/// Returns the per-row value and `d/d logit` over `logits` (already divided by tau).
fn excluded_positive_row<T: Scalar>(logits: &[T], pos: usize) -> (T, Vec<T>) {
    let others = logits.iter().enumerate().filter(|(l, _)| *l != pos).map(|(_, &v)| v);
    let lse = log_sum_exp(others);
    let grad: Vec<T> = logits
        .iter()
        .enumerate()
        .map(|(l, &v)| if l == pos { -T::one() } else { (v - lse).exp() })
        .collect();
    (-logits[pos] + lse, grad)
}

/// `-mean_i [q_i.p_pos/tau - log sum_{l != pos} exp(q_i.p_l/tau)]`.
pub fn instance_kernel<T: Scalar>(
    q: ArrayView2<'_, T>,
    p: ArrayView2<'_, T>,
    positives: &[usize],
    tau: T,
) -> Result<(T, Array2<T>, Array2<T>)> {
    let m = p.nrows();
    if m < 2 {
        return Err(McaError::InvalidArgument("instance alignment needs at least two texts".into()));
    }
    let n = q.nrows();
    let inv_n = T::one() / T::from_usize_lossy(n);
    let sims = q.dot(&p.t()) / tau;
    let mut gq = Array2::zeros(q.raw_dim());
    let mut gp = Array2::zeros(p.raw_dim());
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let row = sims.row(i).to_vec();
        let (v, d_logit) = excluded_positive_row(&row, positives[i]);
        terms.push(v);
        for (l, &g) in d_logit.iter().enumerate() {
            let g = g * inv_n / tau;
            if g != T::zero() {
                gq.row_mut(i).scaled_add(g, &p.row(l));
                gp.row_mut(l).scaled_add(g, &q.row(i));
            }
        }
    }
    Ok((crate::scalar::ordered_sum(&terms) * inv_n, gq, gp))
}

/// `-mean_j [rI_j.rS_j/tau - log sum_{l != j} exp(rI_j.rS_l/tau)]`.
pub fn prototype_kernel<T: Scalar>(
    rho_img: ArrayView2<'_, T>,
    rho_txt: ArrayView2<'_, T>,
    tau: T,
) -> Result<(T, Array2<T>, Array2<T>)> {
    let c = rho_img.nrows();
    if c < 2 {
        return Err(McaError::InvalidArgument("prototype alignment needs c >= 2".into()));
    }
    let positives: Vec<usize> = (0..c).collect();
    let (v, gi, gt) = instance_kernel(rho_img, rho_txt, &positives, tau)?;
    Ok((v, gi, gt))
}

/// `mean_i -log q_{i, y_i}` with the log argument floored at 1e-12.
pub fn semantic_kernel<T: Scalar>(q: ArrayView2<'_, T>, labels: &[usize]) -> (T, Array2<T>) {
    let n = q.nrows();
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut g = Array2::zeros(q.raw_dim());
    let mut terms = Vec::with_capacity(n);
    for (i, &y) in labels.iter().enumerate() {
        let v = q[[i, y]];
        terms.push(-v.clamped_ln());
        if v > T::log_floor() {
            g[[i, y]] = -inv_n / v;
        }
    }
    (crate::scalar::ordered_sum(&terms) * inv_n, g)
}

/// `mean_i -sum_l t_il log p_il`, gradient w.r.t. `p` only.
pub fn soft_ce_kernel<T: Scalar>(target: ArrayView2<'_, T>, pred: ArrayView2<'_, T>) -> (T, Array2<T>) {
    let n = target.nrows();
    let inv_n = T::one() / T::from_usize_lossy(n);
    let mut g = Array2::zeros(pred.raw_dim());
    let mut terms = Vec::with_capacity(n);
    for i in 0..n {
        let mut row = T::zero();
        for l in 0..pred.ncols() {
            let (t, p) = (target[[i, l]], pred[[i, l]]);
            row -= t * p.clamped_ln();
            if p > T::log_floor() {
                g[[i, l]] = -inv_n * t / p;
            }
        }
        terms.push(row);
    }
    (crate::scalar::ordered_sum(&terms) * inv_n, g)
}

// ---------------------------------------------------------------------------
// loss functions on whole assignments

fn check_draws<T: Scalar>(neighbors: &NeighborIndex<T>, draws: &[usize], n: usize) -> Result<()> {
    if draws.len() != n || neighbors.len() != n {
        return Err(McaError::Shape("one draw and one neighborhood per sample required".into()));
    }
    for (i, &j) in draws.iter().enumerate() {
        if !neighbors.contains(i, j) {
            return Err(McaError::InvalidArgument(format!("draw {j} is not a neighbor of sample {i}")));
        }
    }
    Ok(())
}

/// Image consistency loss over all samples, balance term included.
pub fn loss_consistency<T: Scalar>(
    q: &SoftAssignment<T>,
    img_neighbors: &NeighborIndex<T>,
    draws: &[usize],
    eta: T,
    sign: EntropySign,
) -> Result<T> {
    check_draws(img_neighbors, draws, q.n())?;
    let partners = q.probs().select(Axis(0), draws);
    let (cons, _, _) = consistency_kernel(q.probs().view(), partners.view())?;
    let (ent, _) = entropy_kernel(q.probs().view(), eta, sign);
    Ok(cons + ent)
}

/// Instance-level alignment of each image with one sampled neighboring text.
pub fn loss_instance_align<T: Scalar>(
    q: &SoftAssignment<T>,
    p: &SoftAssignment<T>,
    cross_neighbors: &NeighborIndex<T>,
    draws: &[usize],
    tau_ia: T,
) -> Result<T> {
    check_draws(cross_neighbors, draws, q.n())?;
    Ok(instance_kernel(q.probs().view(), p.probs().view(), draws, tau_ia)?.0)
}

/// Prototype-level alignment through both heads.
pub fn loss_prototype_align<T: Scalar>(
    protos: &PrototypePair<T>,
    params: &ModelParams<T>,
    tau_pa: T,
) -> Result<T> {
    let ri = head_forward(&params.image_head, protos.h_img.view())?;
    let rs = head_forward(&params.text_head, protos.h_txt.view())?;
    Ok(prototype_kernel(ri.probs().view(), rs.probs().view(), tau_pa)?.0)
}

/// Cross-entropy of the image assignments against one-hot pseudo-labels.
pub fn loss_semantic_align<T: Scalar>(q: &SoftAssignment<T>, q_pseudo: &SoftAssignment<T>) -> Result<T> {
    if q.probs().dim() != q_pseudo.probs().dim() {
        return Err(McaError::Shape("pseudo-labels and assignments differ in shape".into()));
    }
    let labels = q_pseudo.hard_labels();
    Ok(semantic_kernel(q.probs().view(), &labels).0)
}

/// Cross-entropy of attention outputs against the (detached) image assignments.
pub fn loss_attention_train<T: Scalar>(q: &SoftAssignment<T>, p_prime: &SoftAssignment<T>) -> Result<T> {
    if q.probs().dim() != p_prime.probs().dim() {
        return Err(McaError::Shape("attention outputs and assignments differ in shape".into()));
    }
    Ok(soft_ce_kernel(q.probs().view(), p_prime.probs().view()).0)
}

// ---------------------------------------------------------------------------
// the full objective on a mini-batch

/// Image and word embeddings the batch indexes into.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a, T> {
    pub images: &'a EmbeddingMatrix<T>,
    pub words: &'a EmbeddingMatrix<T>,
}

/// Everything a step needs besides the parameters. Draws, pseudo-labels and
/// prototypes are fixed when the batch is assembled.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub rows: Vec<usize>,
    /// Sampled image neighbor of each row.
    pub img_partner: Vec<usize>,
    /// Sampled neighboring word of each row (index into the word matrix).
    pub txt_partner: Vec<usize>,
    /// All `k_S` neighboring words of each row, for attention.
    pub txt_neighbors: Vec<Vec<usize>>,
    pub pseudo_labels: Vec<usize>,
    pub prototypes: PrototypePair<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn validate(&self, problem: &Problem<'_, T>, params: &ModelParams<T>) -> Result<()> {
        let b = self.rows.len();
        if b == 0 {
            return Err(McaError::Empty("empty batch".into()));
        }
        if [self.img_partner.len(), self.txt_partner.len(), self.txt_neighbors.len(), self.pseudo_labels.len()]
            .iter()
            .any(|&l| l != b)
        {
            return Err(McaError::Shape("batch fields disagree in length".into()));
        }
        if problem.images.d() != params.d() || problem.words.d() != params.d() {
            return Err(McaError::Shape("embedding dimension differs from parameters".into()));
        }
        let (n, m) = (problem.images.n(), problem.words.n());
        if self.rows.iter().chain(&self.img_partner).any(|&i| i >= n)
            || self.txt_partner.iter().any(|&j| j >= m)
            || self.txt_neighbors.iter().flatten().any(|&j| j >= m)
            || self.txt_neighbors.iter().any(Vec::is_empty)
            || self.pseudo_labels.iter().any(|&y| y >= params.c())
        {
            return Err(McaError::InvalidArgument("batch index out of range".into()));
        }
        Ok(())
    }
}

struct Forward<T> {
    u_b: Array2<T>,
    u_n: Array2<T>,
    q_b: Array2<T>,
    q_n: Array2<T>,
    p: Array2<T>,
    rho_img: Array2<T>,
    rho_txt: Array2<T>,
    keys: Array2<T>,
    attention: Vec<crate::model_core::AttentionTrace<T>>,
    p_prime: Array2<T>,
}

fn forward<T: Scalar>(problem: &Problem<'_, T>, batch: &Batch<T>, params: &ModelParams<T>) -> Result<Forward<T>> {
    batch.validate(problem, params)?;
    let u_b = problem.images.data().select(Axis(0), &batch.rows);
    let u_n = problem.images.data().select(Axis(0), &batch.img_partner);
    let q_b = head_forward(&params.image_head, u_b.view())?.probs().clone();
    let q_n = head_forward(&params.image_head, u_n.view())?.probs().clone();
    let words = problem.words.data();
    let p = head_forward(&params.text_head, words.view())?.probs().clone();
    let rho_img = head_forward(&params.image_head, batch.prototypes.h_img.view())?.probs().clone();
    let rho_txt = head_forward(&params.text_head, batch.prototypes.h_txt.view())?.probs().clone();
    let keys = words.dot(&params.w_txt.t());
    let attention: Vec<_> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let nb = &batch.txt_neighbors[i];
            let query = params.w_img.dot(&u_b.row(i));
            attention_with_keys(
                query,
                keys.select(Axis(0), nb).view(),
                p.select(Axis(0), nb).view(),
            )
        })
        .collect();
    let mut p_prime = Array2::zeros(q_b.raw_dim());
    for (i, tr) in attention.iter().enumerate() {
        p_prime.row_mut(i).assign(&tr.combined);
    }
    Ok(Forward {
        u_b,
        u_n,
        q_b,
        q_n,
        p,
        rho_img,
        rho_txt,
        keys,
        attention,
        p_prime,
    })
}

struct Upstream<T> {
    breakdown: LossBreakdown<T>,
    g_qb: Array2<T>,
    g_qn: Array2<T>,
    g_p: Array2<T>,
    g_rho_img: Array2<T>,
    g_rho_txt: Array2<T>,
    g_pprime: Array2<T>,
}

fn losses<T: Scalar>(f: &Forward<T>, batch: &Batch<T>, cfg: &LossConfig) -> Result<Upstream<T>> {
    let (la, lpa, lsa) = (T::lit(cfg.lambda_a), T::lit(cfg.lambda_pa), T::lit(cfg.lambda_sa));
    let (l_cons, g_cons_b, g_qn) = consistency_kernel(f.q_b.view(), f.q_n.view())?;
    let (l_ent, g_ent) = entropy_kernel(f.q_b.view(), T::lit(cfg.eta), cfg.entropy_sign);
    let (l_ia, g_ia_q, g_ia_p) = instance_kernel(f.q_b.view(), f.p.view(), &batch.txt_partner, T::lit(cfg.tau_ia))?;
    let (l_pa, g_ri, g_rs) = prototype_kernel(f.rho_img.view(), f.rho_txt.view(), T::lit(cfg.tau_pa))?;
    let (l_sa, g_sa) = semantic_kernel(f.q_b.view(), &batch.pseudo_labels);
    let (l_att, g_pp) = soft_ce_kernel(f.q_b.view(), f.p_prime.view());

    let mut breakdown = LossBreakdown {
        l_consistency: l_cons,
        l_entropy_term: l_ent,
        l_instance: l_ia,
        l_prototype: l_pa,
        l_semantic: l_sa,
        l_attention: l_att,
        l_total: T::zero(),
    };
    breakdown.compose(cfg);
    if !breakdown.l_total.is_finite() {
        return Err(McaError::Numeric("non-finite total loss".into()));
    }

    let g_qb = g_cons_b + &g_ent + &(g_ia_q * la) + &(g_sa * (la * lsa));
    Ok(Upstream {
        breakdown,
        g_qb,
        g_qn,
        g_p: g_ia_p * la,
        g_rho_img: g_ri * (la * lpa),
        g_rho_txt: g_rs * (la * lpa),
        g_pprime: g_pp * (la * lsa),
    })
}

/// Value of the full objective on a batch.
pub fn loss_total<T: Scalar>(
    problem: &Problem<'_, T>,
    batch: &Batch<T>,
    params: &ModelParams<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown<T>> {
    let f = forward(problem, batch, params)?;
    Ok(losses(&f, batch, cfg)?.breakdown)
}

fn softmax_backward<T: Scalar>(probs: &Array2<T>, upstream: &Array2<T>) -> Array2<T> {
    let dots = (probs * upstream).sum_axis(Axis(1));
    let mut dz = upstream.clone();
    for (mut row, &d) in dz.rows_mut().into_iter().zip(dots.iter()) {
        row -= d;
    }
    dz * probs
}

fn accumulate_head<T: Scalar>(grad: &mut LinearHead<T>, dz: &Array2<T>, inputs: &Array2<T>) {
    grad.weight += &dz.t().dot(inputs);
    grad.bias += &dz.sum_axis(Axis(0));
}

/// Loss breakdown and exact gradients of the total objective.
pub fn grad_total<T: Scalar>(
    problem: &Problem<'_, T>,
    batch: &Batch<T>,
    params: &ModelParams<T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown<T>, GradientSet<T>)> {
    let f = forward(problem, batch, params)?;
    let up = losses(&f, batch, cfg)?;
    let (c, d) = (params.c(), params.d());
    let mut grads = GradientSet::zeros(c, d);
    let mut g_p = up.g_p.clone();

    // attention backprop; per-row pieces in parallel, accumulation in row order
    let pieces: Vec<(Array1<T>, Vec<T>)> = f
        .attention
        .par_iter()
        .enumerate()
        .map(|(i, tr)| {
            let nb = &batch.txt_neighbors[i];
            let g = up.g_pprime.row(i);
            let d_alpha: Vec<T> = nb.iter().map(|&j| g.dot(&f.p.row(j))).collect();
            let mean: T = tr.weights.iter().zip(&d_alpha).map(|(&a, &da)| a * da).sum();
            let d_score: Vec<T> = tr.weights.iter().zip(&d_alpha).map(|(&a, &da)| a * (da - mean)).collect();
            let mut d_query = Array1::zeros(d);
            for (&j, &ds) in nb.iter().zip(&d_score) {
                d_query.scaled_add(ds, &f.keys.row(j));
            }
            (d_query, d_score)
        })
        .collect();
    let mut d_keys = Array2::<T>::zeros(f.keys.raw_dim());
    let mut d_query_rows = Array2::<T>::zeros((batch.len(), d));
    for (i, (d_query, d_score)) in pieces.iter().enumerate() {
        let tr = &f.attention[i];
        let g = up.g_pprime.row(i);
        for ((&j, &ds), &alpha) in batch.txt_neighbors[i].iter().zip(d_score).zip(tr.weights.iter()) {
            g_p.row_mut(j).scaled_add(alpha, &g);
            d_keys.row_mut(j).scaled_add(ds, &tr.query);
        }
        d_query_rows.row_mut(i).assign(d_query);
    }
    grads.d_w_img = d_query_rows.t().dot(&f.u_b);
    grads.d_w_txt = d_keys.t().dot(problem.words.data());

    let dz_b = softmax_backward(&f.q_b, &up.g_qb);
    let dz_n = softmax_backward(&f.q_n, &up.g_qn);
    let dz_ri = softmax_backward(&f.rho_img, &up.g_rho_img);
    accumulate_head(&mut grads.d_phi, &dz_b, &f.u_b);
    accumulate_head(&mut grads.d_phi, &dz_n, &f.u_n);
    accumulate_head(&mut grads.d_phi, &dz_ri, &batch.prototypes.h_img);

    let dz_p = softmax_backward(&f.p, &g_p);
    let dz_rs = softmax_backward(&f.rho_txt, &up.g_rho_txt);
    accumulate_head(&mut grads.d_theta, &dz_p, problem.words.data());
    accumulate_head(&mut grads.d_theta, &dz_rs, &batch.prototypes.h_txt);

    if !cfg.use_bias {
        grads.d_phi.bias.fill(T::zero());
        grads.d_theta.bias.fill(T::zero());
    }
    grads.check_finite()?;
    Ok((up.breakdown, grads))
}

/// Attention outputs `p'` for every row of a batch under the current parameters.
pub fn attention_outputs<T: Scalar>(
    u: ArrayView2<'_, T>,
    words: &EmbeddingMatrix<T>,
    txt_neighbors: &[Vec<usize>],
    params: &ModelParams<T>,
) -> Result<SoftAssignment<T>> {
    let p = head_forward(&params.text_head, words.data().view())?;
    let keys = words.data().dot(&params.w_txt.t());
    let rows: Vec<Array1<T>> = (0..u.nrows())
        .into_par_iter()
        .map(|i| {
            let nb = &txt_neighbors[i];
            attention_with_keys(
                params.w_img.dot(&u.row(i)),
                keys.select(Axis(0), nb).view(),
                p.probs().select(Axis(0), nb).view(),
            )
            .combined
        })
        .collect();
    let mut out = Array2::zeros((u.nrows(), params.c()));
    for (i, r) in rows.iter().enumerate() {
        out.slice_mut(s![i, ..]).assign(r);
    }
    Ok(SoftAssignment::from_trusted(out))
}
