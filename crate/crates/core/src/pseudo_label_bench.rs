//! Compares three ways of producing pseudo-labels during training.
//!
//! * `Smp`: argmax of the image head alone.
//! * `Pmcp`: nearest text prototype by raw cosine similarity.
//! * `Mca`: the learned attention over neighboring words.
//!
//! All three are scored with Hungarian-matched accuracy after every epoch of
//! one MCA training run, so their traces share the same parameters.

use std::fmt;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_io::{l2_normalize, DatasetBundle, EmbeddingMatrix};
use crate::error::{McaError, Result};
use crate::losses_grad::attention_outputs;
use crate::metrics::accuracy_hungarian;
use crate::model_core::{head_forward, image_prototypes, text_prototypes, ModelParams, PrototypePair, SoftAssignment};
use crate::scalar::{argmax, Scalar};
use crate::semantic_space::SemanticSpace;
use crate::trainer::{init_seed, train_with, TrainConfig, TrainContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Labeler {
    Smp,
    Pmcp,
    Mca,
}

impl Labeler {
    pub const ALL: [Labeler; 3] = [Labeler::Smp, Labeler::Pmcp, Labeler::Mca];

    pub fn name(self) -> &'static str {
        match self {
            Labeler::Smp => "SMP",
            Labeler::Pmcp => "PMCP",
            Labeler::Mca => "MCA",
        }
    }
}

impl fmt::Display for Labeler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-epoch accuracy of one labeler in one seeded run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelerRun {
    pub method: Labeler,
    pub seed: u64,
    pub trace: Vec<f64>,
}

impl LabelerRun {
    pub fn final_acc(&self) -> f64 {
        self.trace.last().copied().unwrap_or(0.0)
    }
}

pub fn label_smp<T: Scalar>(q: &SoftAssignment<T>) -> Vec<usize> {
    q.hard_labels()
}

/// Nearest text prototype `h^S` by cosine similarity.
pub fn label_pmcp<T: Scalar>(u: &EmbeddingMatrix<T>, protos: &PrototypePair<T>) -> Result<Vec<usize>> {
    if protos.h_txt.nrows() == 0 {
        return Err(McaError::Empty("no text prototypes".into()));
    }
    if protos.h_txt.ncols() != u.d() {
        return Err(McaError::Shape(format!(
            "prototypes have d = {} but images have d = {}",
            protos.h_txt.ncols(),
            u.d()
        )));
    }
    let h = EmbeddingMatrix::new(protos.h_txt.clone()).and_then(|m| l2_normalize(&m))?;
    let u = l2_normalize(u)?;
    let sims = u.data().dot(&h.data().t());
    Ok(sims
        .rows()
        .into_iter()
        .map(|r| argmax(r.as_slice().expect("row-major product")))
        .collect())
}

/// Attention over each image's neighboring words, then argmax.
pub fn label_mca<T: Scalar>(ctx: &TrainContext<T>, params: &ModelParams<T>) -> Result<Vec<usize>> {
    let p_prime = attention_outputs(
        ctx.images.data().view(),
        &ctx.words,
        &ctx.all_txt_neighbors(),
        params,
    )?;
    Ok(p_prime.hard_labels())
}

/// Labels from all three methods under the current parameters.
pub fn label_all<T: Scalar>(ctx: &TrainContext<T>, params: &ModelParams<T>) -> Result<[Vec<usize>; 3]> {
    let q = head_forward(&params.image_head, ctx.images.data().view())?;
    let h_img = image_prototypes(&q, ctx.images.data().view())?;
    let protos = text_prototypes(&h_img, &ctx.words, ctx.k_p)?;
    Ok([
        label_smp(&q),
        label_pmcp(&ctx.images, &protos)?,
        label_mca(ctx, params)?,
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub train: TrainConfig,
    /// Runs use seeds `train.seed .. train.seed + repeats`.
    pub repeats: usize,
}

/// Trains once per seed and records every labeler's accuracy after each epoch.
pub fn run_bench<T: Scalar>(
    dataset: &DatasetBundle<T>,
    space: &SemanticSpace<T>,
    cfg: &BenchConfig,
) -> Result<Vec<LabelerRun>> {
    let truth = dataset
        .labels
        .as_ref()
        .ok_or_else(|| McaError::Metadata("bench needs ground-truth labels".into()))?;
    if cfg.repeats == 0 {
        return Err(McaError::InvalidArgument("repeats must be >= 1".into()));
    }
    let ctx = TrainContext::new(&dataset.images, space, &cfg.train)?;
    let per_seed: Vec<Result<Vec<LabelerRun>>> = (0..cfg.repeats as u64)
        .into_par_iter()
        .map(|r| {
            let seed = cfg.train.seed + r;
            let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
            let mut traces = [Vec::new(), Vec::new(), Vec::new()];
            let params = ModelParams::init(train_cfg.c, ctx.images.d(), init_seed(seed));
            train_with(&ctx, &train_cfg, params, |ctx, state| {
                for (trace, labels) in traces.iter_mut().zip(label_all(ctx, &state.params)?) {
                    trace.push(accuracy_hungarian(&labels, truth)?);
                }
                Ok(())
            })?;
            Ok(Labeler::ALL
                .into_iter()
                .zip(traces)
                .map(|(method, trace)| LabelerRun { method, seed, trace })
                .collect())
        })
        .collect();
    let mut runs = Vec::new();
    for r in per_seed {
        runs.extend(r?);
    }
    Ok(runs)
}

/// Mean final accuracy per labeler, in [`Labeler::ALL`] order.
pub fn mean_final(runs: &[LabelerRun]) -> [(Labeler, f64); 3] {
    Labeler::ALL.map(|m| {
        let finals: Vec<f64> = runs.iter().filter(|r| r.method == m).map(LabelerRun::final_acc).collect();
        let mean = if finals.is_empty() {
            0.0
        } else {
            finals.iter().sum::<f64>() / finals.len() as f64
        };
        (m, mean)
    })
}

/// `method,seed,epoch,acc`, epochs counted from 1.
pub fn bench_csv(runs: &[LabelerRun]) -> String {
    let mut out = String::from("method,seed,epoch,acc\n");
    for run in runs {
        for (e, acc) in run.trace.iter().enumerate() {
            writeln!(out, "{},{},{},{}", run.method, run.seed, e + 1, acc).expect("string write");
        }
    }
    out
}
