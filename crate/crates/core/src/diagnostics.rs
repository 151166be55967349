//! Empirical assumption audit and the generalization-bound constants.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{McaError, Result};
use crate::knn_index::NeighborIndex;
use crate::model_core::{head_forward, ModelParams, SoftAssignment};
use crate::scalar::Scalar;
use crate::trainer::TrainContext;

/// Label attached to `C` wherever it is reported.
pub const C_CONST_LABEL: &str = "unidentified constant from Lagrange mean value argument";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionAudit {
    /// Smallest `q_i . q_j` over image neighbor pairs.
    pub mu_i: f64,
    /// Smallest `q_i . p_j` over image-to-word neighbor pairs.
    pub mu_c: f64,
    /// Largest `max_k q_ik` over images.
    pub mu_p: f64,
    /// Largest number of images that list one image among their neighbors.
    pub k_i_prime: usize,
}

fn dot<T: Scalar>(a: ndarray::ArrayView1<'_, T>, b: ndarray::ArrayView1<'_, T>) -> f64 {
    a.dot(&b).to_f64_lossy()
}

/// Exact scan over every neighbor pair.
pub fn audit_assumptions<T: Scalar>(
    q: &SoftAssignment<T>,
    p: &SoftAssignment<T>,
    img_neighbors: &NeighborIndex<T>,
    cross_neighbors: &NeighborIndex<T>,
) -> Result<AssumptionAudit> {
    let n = q.n();
    if img_neighbors.is_empty() || cross_neighbors.is_empty() || n == 0 {
        return Err(McaError::Empty("audit needs non-empty assignments and neighborhoods".into()));
    }
    if img_neighbors.len() != n || cross_neighbors.len() != n {
        return Err(McaError::Shape(format!(
            "{n} assignments but neighborhoods over {} and {} queries",
            img_neighbors.len(),
            cross_neighbors.len()
        )));
    }
    if q.c() != p.c() {
        return Err(McaError::Shape("image and text assignments disagree on c".into()));
    }
    let out_of_range = |idx: &NeighborIndex<T>, bound: usize| idx.rows().iter().flatten().any(|nb| nb.index >= bound);
    if out_of_range(img_neighbors, n) || out_of_range(cross_neighbors, p.n()) {
        return Err(McaError::Shape("neighbor index outside the assignment rows".into()));
    }

    let per_row: Vec<(f64, f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let qi = q.row(i);
            let mi = img_neighbors
                .indices(i)
                .map(|j| dot(qi, q.row(j)))
                .fold(f64::INFINITY, f64::min);
            let mc = cross_neighbors
                .indices(i)
                .map(|j| dot(qi, p.row(j)))
                .fold(f64::INFINITY, f64::min);
            let mp = qi.iter().map(|v| v.to_f64_lossy()).fold(f64::NEG_INFINITY, f64::max);
            (mi, mc, mp)
        })
        .collect();
    let mut reverse = vec![0usize; n];
    for row in img_neighbors.rows() {
        for nb in row {
            reverse[nb.index] += 1;
        }
    }
    let (mut mu_i, mut mu_c, mut mu_p) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (mi, mc, mp) in per_row {
        mu_i = mu_i.min(mi);
        mu_c = mu_c.min(mc);
        mu_p = mu_p.max(mp);
    }
    Ok(AssumptionAudit {
        mu_i,
        mu_c,
        mu_p,
        k_i_prime: reverse.into_iter().max().unwrap_or(0),
    })
}

/// Audit of trained parameters over the neighborhoods a run was trained with.
pub fn audit_run<T: Scalar>(ctx: &TrainContext<T>, params: &ModelParams<T>) -> Result<AssumptionAudit> {
    let q = head_forward(&params.image_head, ctx.images.data().view())?;
    let p = head_forward(&params.text_head, ctx.words.data().view())?;
    audit_assumptions(&q, &p, &ctx.img_neighbors, &ctx.txt_neighbors)
}

/// Quantities the bound depends on besides the audit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    pub c: usize,
    pub tau_ia: f64,
    pub tau_pa: f64,
    pub eta: f64,
    pub lambda_a: f64,
    pub lambda_pa: f64,
    pub lambda_sa: f64,
    pub l_is: f64,
    pub l_i: f64,
    pub m_u: f64,
    /// See [`C_CONST_LABEL`].
    pub c_const: f64,
    pub delta: f64,
}

impl Default for BoundInputs {
    fn default() -> Self {
        Self {
            n: 1,
            m: 1,
            d: 1,
            c: 1,
            tau_ia: 0.05,
            tau_pa: 0.6,
            eta: 10.0,
            lambda_a: 1.0,
            lambda_pa: 1.0,
            lambda_sa: 1.0,
            l_is: 1.0,
            l_i: 1.0,
            m_u: 1.0,
            c_const: 1.0,
            delta: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub audit: AssumptionAudit,
    pub inputs: BoundInputs,
    pub c_tilde_1: f64,
    pub c_tilde_2: f64,
    /// `c1/sqrt(n)`, `c2 sqrt(log(1/delta)/(2n))` and `2 d L_IS M_u / (n tau_pa)`.
    pub margin_terms: [f64; 3],
    pub margin: f64,
}

/// Evaluates both constants and the three additive margin terms.
pub fn bound_constants(audit: &AssumptionAudit, inputs: &BoundInputs) -> Result<BoundReport> {
    if !(audit.mu_i > 0.0) {
        return Err(McaError::Assumption(format!(
            "image neighborhood consistency bound violated: mu_I = {} must be > 0",
            audit.mu_i
        )));
    }
    if !(audit.mu_p > 0.0) {
        return Err(McaError::Assumption(format!(
            "image prediction confidence bound violated: mu_p = {} must be > 0",
            audit.mu_p
        )));
    }
    if !(inputs.delta > 0.0 && inputs.delta < 1.0) {
        return Err(McaError::InvalidArgument(format!("delta = {} must lie in (0, 1)", inputs.delta)));
    }
    if inputs.n == 0 {
        return Err(McaError::InvalidArgument("n must be >= 1".into()));
    }
    if !(inputs.tau_ia > 0.0 && inputs.tau_pa > 0.0) {
        return Err(McaError::InvalidArgument("temperatures must be > 0".into()));
    }
    let BoundInputs {
        n,
        m,
        d,
        c,
        tau_ia,
        tau_pa,
        eta,
        lambda_a,
        lambda_pa,
        lambda_sa,
        l_is,
        l_i,
        m_u,
        c_const,
        delta,
    } = *inputs;
    let (n, m, d, c) = (n as f64, m as f64, d as f64, c as f64);
    let k_prime = audit.k_i_prime as f64;
    let log_inv_mu_i = (1.0 / audit.mu_i).ln();
    let log_inv_mu_p = (1.0 / audit.mu_p).ln();
    let semantic = 2.0 * lambda_a * lambda_sa * c * log_inv_mu_p;

    let c_tilde_1 = 2.0 / audit.mu_i
        + 2.0 * eta * c_const
        + 2.0 * lambda_a * m / tau_ia
        + 2.0 * lambda_a * lambda_pa * d * l_is * m_u / tau_pa
        + semantic;
    let c_tilde_2 = (2.0 + 2.0 * k_prime) * log_inv_mu_i
        + eta * c_const
        + 2.0 * lambda_a * (1.0 - audit.mu_c) / tau_ia
        + lambda_a * lambda_pa * d * c * l_i * m_u * m_u / tau_pa
        + semantic;
    let margin_terms = [
        c_tilde_1 / n.sqrt(),
        c_tilde_2 * ((1.0 / delta).ln() / (2.0 * n)).sqrt(),
        2.0 * d * l_is * m_u / (n * tau_pa),
    ];
    Ok(BoundReport {
        audit: *audit,
        inputs: *inputs,
        c_tilde_1,
        c_tilde_2,
        margin_terms,
        margin: margin_terms.iter().sum(),
    })
}

impl BoundReport {
    fn rows(&self) -> Vec<(&'static str, String)> {
        let a = &self.audit;
        let i = &self.inputs;
        vec![
            ("mu_I", a.mu_i.to_string()),
            ("mu_C", a.mu_c.to_string()),
            ("mu_p", a.mu_p.to_string()),
            ("k_I_prime", a.k_i_prime.to_string()),
            ("n", i.n.to_string()),
            ("m", i.m.to_string()),
            ("d", i.d.to_string()),
            ("c", i.c.to_string()),
            ("tau_ia", i.tau_ia.to_string()),
            ("tau_pa", i.tau_pa.to_string()),
            ("eta", i.eta.to_string()),
            ("lambda_a", i.lambda_a.to_string()),
            ("lambda_pa", i.lambda_pa.to_string()),
            ("lambda_sa", i.lambda_sa.to_string()),
            ("L_IS", i.l_is.to_string()),
            ("L_I", i.l_i.to_string()),
            ("M_u", i.m_u.to_string()),
            ("C", i.c_const.to_string()),
            ("delta", i.delta.to_string()),
            ("c_tilde_1", self.c_tilde_1.to_string()),
            ("c_tilde_2", self.c_tilde_2.to_string()),
            ("margin_term_1", self.margin_terms[0].to_string()),
            ("margin_term_2", self.margin_terms[1].to_string()),
            ("margin_term_3", self.margin_terms[2].to_string()),
            ("margin", self.margin.to_string()),
        ]
    }

    /// `quantity,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("quantity,value\n");
        for (k, v) in self.rows() {
            out.push_str(k);
            out.push(',');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for BoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.rows() {
            writeln!(f, "{k:<14} {v}")?;
        }
        write!(f, "(C: {C_CONST_LABEL})")
    }
}
