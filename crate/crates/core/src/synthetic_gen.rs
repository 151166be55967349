//! Paired image/text embeddings with known clusters and a planted taxonomy.
//!
//! Each cluster `k` owns three orthonormal directions: `a_k` (seen only by
//! images), `b_k` (the shared cross-modal region) and `c_k` (seen only by the
//! words of its lineage). A word of lineage `k` sits at `b_r + λ c_k`, where the
//! region `r` is `k` unless the word is misaligned, in which case `r` is a random
//! other cluster. An image of class `k` is drawn around one of its class's leaf
//! words: `separation · a_k + b_r`. Misaligned concepts therefore drag their
//! images into a foreign region, which is what fools raw cross-modal
//! similarity, while the taxonomy keeps every word under its true lineage.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding_io::{DatasetBundle, EmbeddingMatrix, VocabularyBundle};
use crate::error::{McaError, Result};
use crate::scalar::Scalar;
use crate::taxonomy::{TaxonomyTree, ROOT};

/// Number of shared ancestors between `ROOT` and the per-cluster chains.
pub const GENERIC_LEVELS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub c: usize,
    /// Images per cluster.
    pub n_img: usize,
    /// Words per lineage, chain nodes and leaves together.
    pub words_per_cluster: usize,
    pub d: usize,
    /// Weight of the image-only direction relative to the shared region.
    pub separation: f64,
    /// Expected norm of the Gaussian noise added to a unit clean vector.
    pub noise: f64,
    pub misalignment_rate: f64,
    /// Weight of the lineage direction in word embeddings.
    pub lineage_weight: f64,
    pub taxonomy_depth: u32,
    /// Depth of the shallowest leaf; leaves are spread over
    /// `leaf_min_depth..=taxonomy_depth`.
    pub leaf_min_depth: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            c: 3,
            n_img: 200,
            words_per_cluster: 24,
            d: 64,
            separation: 2.0,
            noise: 0.15,
            misalignment_rate: 0.2,
            lineage_weight: 0.75,
            taxonomy_depth: 12,
            leaf_min_depth: 11,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(McaError::InvalidArgument(msg));
        if self.c < 2 {
            return bad(format!("need at least 2 clusters, got {}", self.c));
        }
        if self.n_img == 0 {
            return bad("n-img must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.misalignment_rate) {
            return bad(format!("misalignment rate {} outside [0, 1]", self.misalignment_rate));
        }
        if !(self.separation > 0.0) || !self.separation.is_finite() {
            return bad(format!("separation must be > 0, got {}", self.separation));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad(format!("noise must be >= 0, got {}", self.noise));
        }
        if !(self.lineage_weight >= 0.0) || !self.lineage_weight.is_finite() {
            return bad(format!("lineage weight must be >= 0, got {}", self.lineage_weight));
        }
        if 3 * self.c > self.d {
            return bad(format!(
                "{} clusters need {} orthogonal directions but d = {}",
                self.c,
                3 * self.c,
                self.d
            ));
        }
        let first_chain = GENERIC_LEVELS + 1;
        if self.taxonomy_depth <= first_chain {
            return bad(format!("taxonomy depth must exceed {first_chain}"));
        }
        if self.leaf_min_depth <= first_chain || self.leaf_min_depth > self.taxonomy_depth {
            return bad(format!(
                "leaf depth must lie in ({first_chain}, {}]",
                self.taxonomy_depth
            ));
        }
        if self.words_per_cluster < self.chain_len() + 1 {
            return bad(format!(
                "words per cluster must be at least {} for this depth",
                self.chain_len() + 1
            ));
        }
        Ok(())
    }

    /// Internal nodes per lineage, one per depth in `GENERIC_LEVELS+1 .. taxonomy_depth`.
    pub fn chain_len(&self) -> usize {
        (self.taxonomy_depth - GENERIC_LEVELS - 1) as usize
    }

    pub fn leaves_per_cluster(&self) -> usize {
        self.words_per_cluster.saturating_sub(self.chain_len())
    }
}

/// What the generator planted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub image_labels: Vec<usize>,
    /// Index of the leaf word each image was drawn around.
    pub image_concept: Vec<usize>,
    /// Cluster whose lineage a word belongs to; `None` for shared ancestors.
    pub word_lineage: Vec<Option<usize>>,
    /// Cluster region a word's embedding was placed in.
    pub word_region: Vec<Option<usize>>,
    pub misaligned: Vec<bool>,
}

impl SynthTruth {
    pub fn misaligned_fraction_of_images(&self) -> f64 {
        let bad = self.image_concept.iter().filter(|&&w| self.misaligned[w]).count();
        bad as f64 / self.image_concept.len().max(1) as f64
    }
}

#[derive(Debug, Clone)]
pub struct SynthData<T> {
    pub dataset: DatasetBundle<T>,
    pub vocabulary: VocabularyBundle<T>,
    pub truth: SynthTruth,
}

/// `k` orthonormal vectors in `R^d` from Gram–Schmidt on Gaussian draws.
pub fn orthonormal_directions(k: usize, d: usize, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    if k > d {
        return Err(McaError::InvalidArgument(format!("cannot fit {k} orthogonal directions in d = {d}")));
    }
    let mut out = Array2::<f64>::zeros((k, d));
    let mut i = 0;
    while i < k {
        let mut v: Array1<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for j in 0..i {
            let proj = v.dot(&out.row(j));
            v.scaled_add(-proj, &out.row(j));
        }
        let norm = v.dot(&v).sqrt();
        // a draw almost inside the span so far is discarded and redrawn
        if norm < 1e-6 {
            continue;
        }
        out.row_mut(i).assign(&(v / norm));
        i += 1;
    }
    Ok(out)
}

fn noisy_unit(clean: &Array1<f64>, noise: f64, rng: &mut ChaCha8Rng) -> Array1<f64> {
    let d = clean.len();
    let clean = clean / clean.dot(clean).sqrt();
    let scale = noise / (d as f64).sqrt();
    let mut v = clean;
    if scale > 0.0 {
        for x in v.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *x += scale * e;
        }
    }
    let norm = v.dot(&v).sqrt();
    v / norm
}

fn pick_misaligned(count: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let bad = ((count as f64) * rate).round() as usize;
    let mut flags: Vec<bool> = (0..count).map(|i| i < bad).collect();
    flags.shuffle(rng);
    flags
}

/// Draws a dataset, vocabulary and taxonomy from `cfg`.
pub fn generate<T: Scalar>(cfg: &SynthConfig) -> Result<SynthData<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.c;
    let dirs = orthonormal_directions(3 * c, cfg.d, &mut rng)?;
    let a = |k: usize| dirs.row(k).to_owned();
    let b = |k: usize| dirs.row(c + k).to_owned();
    let lin = |k: usize| dirs.row(2 * c + k).to_owned();

    let mut words: Vec<String> = Vec::new();
    let mut rows: Vec<Array1<f64>> = Vec::new();
    let mut edges: Vec<(String, String)> = Vec::new();
    let mut word_lineage = Vec::new();
    let mut word_region = Vec::new();
    let mut misaligned = Vec::new();

    // shared ancestors sit at the centroid of all regions
    let mut centroid = Array1::<f64>::zeros(cfg.d);
    for k in 0..c {
        centroid += &b(k);
    }
    let mut parent = ROOT.to_string();
    for level in 1..=GENERIC_LEVELS {
        let name = format!("generic{level}");
        edges.push((name.clone(), parent.clone()));
        rows.push(noisy_unit(&centroid, cfg.noise * 0.25, &mut rng));
        words.push(name.clone());
        word_lineage.push(None);
        word_region.push(None);
        misaligned.push(false);
        parent = name;
    }
    let top = parent;

    let chain = cfg.chain_len();
    let leaves = cfg.leaves_per_cluster();
    let leaf_span = (cfg.taxonomy_depth - cfg.leaf_min_depth + 1) as usize;
    let mut leaf_index: Vec<Vec<usize>> = vec![Vec::new(); c];
    for k in 0..c {
        let chain_bad = pick_misaligned(chain, cfg.misalignment_rate, &mut rng);
        let leaf_bad = pick_misaligned(leaves, cfg.misalignment_rate, &mut rng);
        let region_of = |bad: bool, rng: &mut ChaCha8Rng| {
            if bad {
                let r = rng.random_range(0..c - 1);
                if r >= k {
                    r + 1
                } else {
                    r
                }
            } else {
                k
            }
        };
        let mut chain_names = Vec::with_capacity(chain);
        let mut parent = top.clone();
        for (j, &bad) in chain_bad.iter().enumerate() {
            let depth = GENERIC_LEVELS as usize + 1 + j;
            let name = format!("c{k}_node{depth}");
            let r = region_of(bad, &mut rng);
            let clean = &b(r) + &(&lin(k) * cfg.lineage_weight);
            rows.push(noisy_unit(&clean, cfg.noise, &mut rng));
            edges.push((name.clone(), parent.clone()));
            words.push(name.clone());
            word_lineage.push(Some(k));
            word_region.push(Some(r));
            misaligned.push(bad);
            chain_names.push(name.clone());
            parent = name;
        }
        for (j, &bad) in leaf_bad.iter().enumerate() {
            // a leaf at depth D hangs off the chain node at depth D-1
            let depth = cfg.leaf_min_depth as usize + j % leaf_span;
            let parent = &chain_names[depth - GENERIC_LEVELS as usize - 2];
            let name = format!("c{k}_leaf{j}");
            let r = region_of(bad, &mut rng);
            let clean = &b(r) + &(&lin(k) * cfg.lineage_weight);
            rows.push(noisy_unit(&clean, cfg.noise, &mut rng));
            edges.push((name.clone(), parent.clone()));
            leaf_index[k].push(words.len());
            words.push(name);
            word_lineage.push(Some(k));
            word_region.push(Some(r));
            misaligned.push(bad);
        }
    }

    let mut images: Vec<(usize, usize, Array1<f64>)> = Vec::with_capacity(c * cfg.n_img);
    for (k, own) in leaf_index.iter().enumerate() {
        for _ in 0..cfg.n_img {
            let w = own[rng.random_range(0..own.len())];
            let r = word_region[w].expect("leaves have a region");
            let clean = &(&a(k) * cfg.separation) + &b(r);
            images.push((k, w, noisy_unit(&clean, cfg.noise, &mut rng)));
        }
    }
    images.shuffle(&mut rng);

    let n = images.len();
    let mut img = Array2::<T>::zeros((n, cfg.d));
    let mut image_labels = Vec::with_capacity(n);
    let mut image_concept = Vec::with_capacity(n);
    for (i, (k, w, u)) in images.into_iter().enumerate() {
        img.row_mut(i).assign(&u.mapv(T::lit));
        image_labels.push(k);
        image_concept.push(w);
    }
    let ids = (0..n).map(|i| format!("img{i:05}")).collect();
    let dataset = DatasetBundle::new(EmbeddingMatrix::with_ids(img, ids)?, Some(image_labels.clone()), c)?;

    let mut txt = Array2::<T>::zeros((rows.len(), cfg.d));
    for (i, v) in rows.iter().enumerate() {
        txt.row_mut(i).assign(&v.mapv(T::lit));
    }
    let tree = TaxonomyTree::from_edges(&edges, &words)?;
    let vocabulary = VocabularyBundle::new(EmbeddingMatrix::with_ids(txt, words)?, tree);

    Ok(SynthData {
        dataset,
        vocabulary,
        truth: SynthTruth {
            image_labels,
            image_concept,
            word_lineage,
            word_region,
            misaligned,
        },
    })
}

/// Zero-shot labels: the lineage of each image's most similar lineage word.
pub fn nearest_word_labels<T: Scalar>(data: &SynthData<T>) -> Vec<usize> {
    let words = data.vocabulary.embeddings.data();
    let imgs = data.dataset.images.data();
    imgs.rows()
        .into_iter()
        .map(|u| {
            let mut best: Option<(usize, T)> = None;
            for (w, v) in words.rows().into_iter().enumerate() {
                let Some(k) = data.truth.word_lineage[w] else { continue };
                let s = u.dot(&v);
                if best.is_none_or(|(_, bs)| s > bs) {
                    best = Some((k, s));
                }
            }
            best.map_or(0, |(k, _)| k)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::accuracy_hungarian;

    fn small(rate: f64, noise: f64) -> SynthConfig {
        SynthConfig {
            n_img: 30,
            misalignment_rate: rate,
            noise,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn directions_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dirs = orthonormal_directions(9, 16, &mut rng).unwrap();
        let gram = dirs.dot(&dirs.t());
        for i in 0..9 {
            for j in 0..9 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_many_clusters_for_dimension() {
        let cfg = SynthConfig { c: 10, d: 16, ..SynthConfig::default() };
        assert!(generate::<f64>(&cfg).is_err());
    }

    #[test]
    fn shapes_and_unit_rows() {
        let data = generate::<f64>(&small(0.2, 0.15)).unwrap();
        assert_eq!(data.dataset.images.n(), 90);
        assert_eq!(data.vocabulary.m(), GENERIC_LEVELS as usize + 3 * 24);
        assert!(data.dataset.images.is_normalized(1e-12));
        assert!(data.vocabulary.embeddings.is_normalized(1e-12));
        assert_eq!(data.vocabulary.taxonomy.max_depth(), 12);
    }

    #[test]
    fn noiseless_aligned_images_see_their_own_lineage() {
        let data = generate::<f64>(&small(0.0, 0.0)).unwrap();
        assert_eq!(nearest_word_labels(&data), data.truth.image_labels);
    }

    #[test]
    fn same_seed_same_bits() {
        let a = generate::<f32>(&small(0.3, 0.15)).unwrap();
        let b = generate::<f32>(&small(0.3, 0.15)).unwrap();
        assert_eq!(a.dataset.images, b.dataset.images);
        assert_eq!(a.vocabulary.embeddings, b.vocabulary.embeddings);
        assert_eq!(a.truth, b.truth);
    }

    #[test]
    fn misaligned_words_keep_their_lineage_parent() {
        let data = generate::<f64>(&small(1.0, 0.15)).unwrap();
        let tree = &data.vocabulary.taxonomy;
        for (w, name) in data.vocabulary.words.iter().enumerate() {
            if let Some(k) = data.truth.word_lineage[w] {
                assert!(data.truth.misaligned[w]);
                assert_ne!(data.truth.word_region[w], Some(k));
                let parent = tree.parent(name).unwrap();
                assert!(parent.starts_with(&format!("c{k}_")) || parent.starts_with("generic"));
            }
        }
    }

    #[test]
    fn full_misalignment_is_near_chance_zero_shot() {
        let cfg = SynthConfig { c: 10, d: 64, n_img: 100, words_per_cluster: 90, misalignment_rate: 1.0, ..SynthConfig::default() };
        let data = generate::<f64>(&cfg).unwrap();
        let acc = accuracy_hungarian(&nearest_word_labels(&data), &data.truth.image_labels).unwrap();
        assert!((acc - 0.1).abs() <= 0.1, "acc {acc}");
    }
}
