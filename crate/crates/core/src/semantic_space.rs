//! Construction of the filtered noun space used as the text side of alignment.
//!
//! Two stages: a uniqueness filter against k-means image centers, then a
//! depth filter over the noun taxonomy that drops the shallow, generic levels.

use std::fmt;

use ndarray::{Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::embedding_io::{l2_normalize, DatasetBundle, EmbeddingMatrix, VocabularyBundle};
use crate::error::{McaError, Result};
use crate::scalar::Scalar;
use crate::taxonomy::TaxonomyTree;

#[derive(Debug, Clone)]
pub struct KMeansResult<T> {
    pub centers: Array2<T>,
    pub assignments: Vec<usize>,
    pub inertia: T,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<T>,
    pub iterations: usize,
}

fn sq_dist<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    a.iter().zip(b.iter()).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn nearest_center<T: Scalar>(x: ArrayView1<'_, T>, centers: &Array2<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (j, c) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_plus_plus<T: Scalar>(data: &Array2<T>, c: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let n = data.nrows();
    let mut centers = Array2::zeros((c, data.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&data.row(first));
    let mut dist: Vec<f64> = (0..n)
        .map(|i| sq_dist(data.row(i), data.row(first)).to_f64_lossy())
        .collect();
    for k in 1..c {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(k).assign(&data.row(pick));
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), data.row(pick)).to_f64_lossy());
        }
    }
    centers
}

/// Lloyd iterations from a seeded k-means++ start.
///
/// An empty cluster is re-seeded at the point farthest from its current
/// center (lowest index on ties).
pub fn kmeans_fit<T: Scalar>(
    m: &EmbeddingMatrix<T>,
    c: usize,
    seed: u64,
    max_iter: usize,
    tol: T,
) -> Result<KMeansResult<T>> {
    let data = m.data();
    let n = data.nrows();
    if c == 0 || c > n {
        return Err(McaError::InvalidArgument(format!("k-means needs 1 <= c <= n ({n}), got {c}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_plus_plus(data, c, &mut rng);
    let mut trace = Vec::new();
    let mut assignments = vec![0usize; n];
    let mut iterations = 0;

    loop {
        let nearest: Vec<(usize, T)> = (0..n)
            .into_par_iter()
            .map(|i| nearest_center(data.row(i), &centers))
            .collect();
        for (a, (j, _)) in assignments.iter_mut().zip(&nearest) {
            *a = *j;
        }
        let inertia: T = nearest.iter().fold(T::zero(), |s, (_, d)| s + *d);
        trace.push(inertia);
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        let mut sums = Array2::<T>::zeros(centers.raw_dim());
        let mut counts = vec![0usize; c];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            let mut row = sums.row_mut(a);
            row += &data.row(i);
        }
        let mut next = centers.clone();
        for j in 0..c {
            if counts[j] > 0 {
                let mean = &sums.row(j) / T::from_usize_lossy(counts[j]);
                next.row_mut(j).assign(&mean);
            } else {
                let far = (0..n)
                    .map(|i| (i, nearest[i].1))
                    .fold((0, T::neg_infinity()), |best, cur| if cur.1 > best.1 { cur } else { best });
                next.row_mut(j).assign(&data.row(far.0));
            }
        }
        let shift = (0..c)
            .map(|j| sq_dist(next.row(j), centers.row(j)).sqrt())
            .fold(T::zero(), T::max);
        centers = next;
        if shift < tol {
            // final assignment against the converged centers
            let nearest: Vec<(usize, T)> = (0..n)
                .into_par_iter()
                .map(|i| nearest_center(data.row(i), &centers))
                .collect();
            for (a, (j, _)) in assignments.iter_mut().zip(&nearest) {
                *a = *j;
            }
            trace.push(nearest.iter().fold(T::zero(), |s, (_, d)| s + *d));
            break;
        }
    }
    let inertia = *trace.last().expect("at least one assignment step");
    Ok(KMeansResult {
        centers,
        assignments,
        inertia,
        inertia_trace: trace,
        iterations,
    })
}

/// Margin between the two largest cosine similarities of a word to the centers.
///
/// This is the single place the uniqueness definition lives; swap it here.
pub fn uniqueness_margin<T: Scalar>(word: ArrayView1<'_, T>, centers: &Array2<T>) -> T {
    let mut s1 = T::neg_infinity();
    let mut s2 = T::neg_infinity();
    for c in centers.rows() {
        let s = word.dot(&c);
        if s > s1 {
            s2 = s1;
            s1 = s;
        } else if s > s2 {
            s2 = s;
        }
    }
    s1 - s2
}

/// Uniqueness score of every vocabulary word. Centers must be unit rows.
pub fn uniqueness_scores<T: Scalar>(vocab: &VocabularyBundle<T>, centers: &Array2<T>) -> Result<Vec<T>> {
    if centers.nrows() < 2 {
        return Err(McaError::InvalidArgument("uniqueness needs at least two centers".into()));
    }
    if centers.ncols() != vocab.embeddings.d() {
        return Err(McaError::Shape("center dimension differs from vocabulary".into()));
    }
    Ok(vocab
        .embeddings
        .data()
        .rows()
        .into_iter()
        .map(|w| uniqueness_margin(w, centers))
        .collect())
}

/// Indices (vocabulary order) of the words surviving the uniqueness stage:
/// score above `rho_u`, then the `gamma_r` nearest survivors of each center.
pub fn uniqueness_filter<T: Scalar>(
    vocab: &VocabularyBundle<T>,
    centers: &Array2<T>,
    rho_u: T,
    gamma_r: usize,
) -> Result<Vec<usize>> {
    if rho_u < T::zero() || gamma_r == 0 {
        return Err(McaError::InvalidArgument("need rho_u >= 0 and gamma_r >= 1".into()));
    }
    let scores = uniqueness_scores(vocab, centers)?;
    let unique: Vec<usize> = (0..vocab.m()).filter(|&j| scores[j] > rho_u).collect();
    if unique.is_empty() {
        return Err(McaError::Empty(format!(
            "no word has uniqueness above {rho_u}; lower rho_u"
        )));
    }
    let mut selected = vec![false; vocab.m()];
    for center in centers.rows() {
        let mut ranked: Vec<(usize, T)> = unique
            .iter()
            .map(|&j| (j, vocab.embeddings.row(j).dot(&center)))
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
        for &(j, _) in ranked.iter().take(gamma_r) {
            selected[j] = true;
        }
    }
    Ok((0..vocab.m()).filter(|&j| selected[j]).collect())
}

/// Per-word record of how the word fared in each stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WordProvenance {
    pub word: String,
    pub depth: Option<u32>,
    pub uniqueness: Option<f64>,
    pub passed_uniqueness: bool,
    pub passed_hierarchy: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageReport {
    pub stage: String,
    pub kept: usize,
    pub dropped: usize,
}

/// The filtered vocabulary: row `i` of `kept_embeddings` is `kept_words[i]`.
#[derive(Debug, Clone)]
pub struct SemanticSpace<T> {
    pub kept_words: Vec<String>,
    pub kept_embeddings: EmbeddingMatrix<T>,
    /// Position of each kept word in the source vocabulary.
    pub source_index: Vec<usize>,
    pub provenance: Vec<WordProvenance>,
    pub stages: Vec<StageReport>,
}

impl<T: Scalar> SemanticSpace<T> {
    /// A space taken as-is, e.g. one previously written to disk.
    pub fn from_embeddings(embeddings: EmbeddingMatrix<T>) -> Self {
        let words = embeddings.ids().to_vec();
        let provenance = words
            .iter()
            .map(|w| WordProvenance {
                word: w.clone(),
                depth: None,
                uniqueness: None,
                passed_uniqueness: true,
                passed_hierarchy: true,
            })
            .collect();
        Self {
            source_index: (0..words.len()).collect(),
            kept_words: words,
            kept_embeddings: embeddings,
            provenance,
            stages: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.kept_words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_words.is_empty()
    }

    pub fn report(&self) -> SpaceReport<'_> {
        SpaceReport(&self.stages)
    }

    /// `word,depth,uniqueness,kept_flag` over the whole input vocabulary.
    pub fn provenance_csv(&self) -> String {
        let mut out = String::from("word,depth,uniqueness,kept_flag\n");
        for p in &self.provenance {
            let depth = p.depth.map_or_else(|| "inf".to_string(), |d| d.to_string());
            let uniq = p.uniqueness.map_or_else(String::new, |u| format!("{u}"));
            out.push_str(&format!("{},{},{},{}\n", p.word, depth, uniq, u8::from(p.passed_hierarchy)));
        }
        out
    }
}

pub struct SpaceReport<'a>(&'a [StageReport]);

impl fmt::Display for SpaceReport<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12}{:>8}{:>9}", "stage", "kept", "dropped")?;
        for s in self.0 {
            writeln!(f, "{:<12}{:>8}{:>9}", s.stage, s.kept, s.dropped)?;
        }
        Ok(())
    }
}

/// Drops candidates at depth `1..=gamma_h`; keeps deeper words and orphans.
pub fn hierarchy_filter<T: Scalar>(
    vocab: &VocabularyBundle<T>,
    candidates: &[usize],
    tree: &TaxonomyTree,
    gamma_h: u32,
) -> Result<SemanticSpace<T>> {
    let kept: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|&j| match tree.depth(&vocab.words[j]) {
            Some(d) => d > gamma_h,
            None => true,
        })
        .collect();
    if kept.is_empty() {
        log::warn!("hierarchy filter with gamma_h = {gamma_h} removed every candidate");
    }
    let mut in_candidates = vec![false; vocab.m()];
    for &j in candidates {
        in_candidates[j] = true;
    }
    let mut in_kept = vec![false; vocab.m()];
    for &j in &kept {
        in_kept[j] = true;
    }
    let provenance = vocab
        .words
        .iter()
        .enumerate()
        .map(|(j, w)| WordProvenance {
            word: w.clone(),
            depth: tree.depth(w),
            uniqueness: None,
            passed_uniqueness: in_candidates[j],
            passed_hierarchy: in_kept[j],
        })
        .collect();
    let embeddings = vocab.embeddings.select(&kept);
    Ok(SemanticSpace {
        kept_words: kept.iter().map(|&j| vocab.words[j].clone()).collect(),
        kept_embeddings: embeddings,
        source_index: kept.clone(),
        provenance,
        stages: vec![StageReport {
            stage: "hierarchy".into(),
            kept: kept.len(),
            dropped: candidates.len() - kept.len(),
        }],
    })
}

/// Knobs of semantic-space construction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpaceConfig {
    pub c: usize,
    pub rho_u: f64,
    pub gamma_r: usize,
    pub gamma_h: u32,
    pub seed: u64,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            c: 3,
            rho_u: 0.05,
            gamma_r: 1000,
            gamma_h: 10,
            seed: 0,
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,
        }
    }
}

/// k-means on the images, uniqueness filter, then hierarchy filter.
pub fn build_semantic_space<T: Scalar>(
    dataset: &DatasetBundle<T>,
    vocab: &VocabularyBundle<T>,
    config: &SpaceConfig,
) -> Result<SemanticSpace<T>> {
    if dataset.images.d() != vocab.embeddings.d() {
        return Err(McaError::Shape("image and word dimensions differ".into()));
    }
    let images = l2_normalize(&dataset.images)?;
    let vocab = vocab.normalized()?;
    let km = kmeans_fit(&images, config.c, config.seed, config.kmeans_max_iter, T::lit(config.kmeans_tol))?;
    let centers = normalized_rows(&km.centers)?;
    let scores = uniqueness_scores(&vocab, &centers)?;
    let candidates = uniqueness_filter(&vocab, &centers, T::lit(config.rho_u), config.gamma_r)?;
    let mut space = hierarchy_filter(&vocab, &candidates, &vocab.taxonomy, config.gamma_h)?;
    for (p, s) in space.provenance.iter_mut().zip(&scores) {
        p.uniqueness = Some(s.to_f64_lossy());
    }
    let m = vocab.m();
    space.stages = vec![
        StageReport {
            stage: "input".into(),
            kept: m,
            dropped: 0,
        },
        StageReport {
            stage: "uniqueness".into(),
            kept: candidates.len(),
            dropped: m - candidates.len(),
        },
        StageReport {
            stage: "hierarchy".into(),
            kept: space.len(),
            dropped: candidates.len() - space.len(),
        },
    ];
    Ok(space)
}

pub(crate) fn normalized_rows<T: Scalar>(m: &Array2<T>) -> Result<Array2<T>> {
    let mut out = m.clone();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > T::zero()) {
            return Err(McaError::ZeroRow { row: i });
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}
