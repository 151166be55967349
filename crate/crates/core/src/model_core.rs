//! Forward computations of the cluster heads, the attention pseudo-labeler
//! and the image/text prototypes.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding_io::{write_file, EmbeddingMatrix};
use crate::error::{McaError, Result};
use crate::scalar::{argmax, softmax_in_place, Scalar};

/// Linear map `d -> c` followed by a row softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead<T> {
    /// `c x d`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> LinearHead<T> {
    pub fn zeros(c: usize, d: usize) -> Self {
        Self {
            weight: Array2::zeros((c, d)),
            bias: Array1::zeros(c),
        }
    }

    pub fn c(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d(&self) -> usize {
        self.weight.ncols()
    }

    pub fn logits(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut z = x.dot(&self.weight.t());
        z += &self.bias;
        z
    }
}

/// Every trainable parameter: image head, text head and the two attention maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub image_head: LinearHead<T>,
    pub text_head: LinearHead<T>,
    /// `d x d`, applied to image embeddings.
    pub w_img: Array2<T>,
    /// `d x d`, applied to word embeddings.
    pub w_txt: Array2<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Heads drawn uniformly from `±1/sqrt(d)` with zero bias, attention maps
    /// at the identity so the first pseudo-labels are plain neighbor voting.
    pub fn init(c: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d as f64).sqrt();
        let mut draw = |rows: usize| {
            Array2::from_shape_fn((rows, d), |_| T::lit(rng.random_range(-bound..bound)))
        };
        let image_w = draw(c);
        let text_w = draw(c);
        Self {
            image_head: LinearHead {
                weight: image_w,
                bias: Array1::zeros(c),
            },
            text_head: LinearHead {
                weight: text_w,
                bias: Array1::zeros(c),
            },
            w_img: Array2::eye(d),
            w_txt: Array2::eye(d),
        }
    }

    pub fn zeros(c: usize, d: usize) -> Self {
        Self {
            image_head: LinearHead::zeros(c, d),
            text_head: LinearHead::zeros(c, d),
            w_img: Array2::zeros((d, d)),
            w_txt: Array2::zeros((d, d)),
        }
    }

    pub fn c(&self) -> usize {
        self.image_head.c()
    }

    pub fn d(&self) -> usize {
        self.image_head.d()
    }

    pub fn len(&self) -> usize {
        let (c, d) = (self.c(), self.d());
        2 * (c * d + c) + 2 * d * d
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Named parameter blocks in checkpoint order.
    pub fn blocks(&self) -> [(&'static str, &[T]); 6] {
        [
            ("phi.weight", self.image_head.weight.as_slice().expect("standard layout")),
            ("phi.bias", self.image_head.bias.as_slice().expect("standard layout")),
            ("theta.weight", self.text_head.weight.as_slice().expect("standard layout")),
            ("theta.bias", self.text_head.bias.as_slice().expect("standard layout")),
            ("w_img", self.w_img.as_slice().expect("standard layout")),
            ("w_txt", self.w_txt.as_slice().expect("standard layout")),
        ]
    }

    pub fn blocks_mut(&mut self) -> [(&'static str, &mut [T]); 6] {
        [
            ("phi.weight", self.image_head.weight.as_slice_mut().expect("standard layout")),
            ("phi.bias", self.image_head.bias.as_slice_mut().expect("standard layout")),
            ("theta.weight", self.text_head.weight.as_slice_mut().expect("standard layout")),
            ("theta.bias", self.text_head.bias.as_slice_mut().expect("standard layout")),
            ("w_img", self.w_img.as_slice_mut().expect("standard layout")),
            ("w_txt", self.w_txt.as_slice_mut().expect("standard layout")),
        ]
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.blocks().iter().flat_map(|(_, b)| b.iter().copied()).collect()
    }

    pub fn set_from_slice(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let mut at = 0;
        for (_, block) in self.blocks_mut() {
            let len = block.len();
            block.copy_from_slice(&flat[at..at + len]);
            at += len;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let conv1 = |a: &Array1<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        let conv2 = |a: &Array2<T>| a.mapv(|v| U::lit(v.to_f64_lossy()));
        ModelParams {
            image_head: LinearHead {
                weight: conv2(&self.image_head.weight),
                bias: conv1(&self.image_head.bias),
            },
            text_head: LinearHead {
                weight: conv2(&self.text_head.weight),
                bias: conv1(&self.text_head.bias),
            },
            w_img: conv2(&self.w_img),
            w_txt: conv2(&self.w_txt),
        }
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCAP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// `MCAP`, version, `c`, `d`, then phi, theta, W^I, W^S as little-endian f32.
pub fn encode_params<T: Scalar>(params: &ModelParams<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * params.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.c() as u32).to_le_bytes());
    out.extend_from_slice(&(params.d() as u32).to_le_bytes());
    for (_, block) in params.blocks() {
        for v in block {
            out.extend_from_slice(&v.to_f32_lossy().to_le_bytes());
        }
    }
    out
}

pub fn decode_params<T: Scalar>(bytes: &[u8], path: &Path) -> Result<ModelParams<T>> {
    if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(McaError::format(path, "not an MCAP checkpoint"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes")) as usize;
    if word(4) != CHECKPOINT_VERSION as usize {
        return Err(McaError::format(path, format!("unsupported checkpoint version {}", word(4))));
    }
    let (c, d) = (word(8), word(12));
    if c == 0 || d == 0 {
        return Err(McaError::format(path, "zero cluster count or dimension"));
    }
    let mut params = ModelParams::<T>::zeros(c, d);
    if bytes.len() != 16 + 4 * params.len() {
        return Err(McaError::format(path, "checkpoint payload length does not match header"));
    }
    let flat: Vec<T> = bytes[16..]
        .chunks_exact(4)
        .map(|ch| T::lit(f32::from_le_bytes(ch.try_into().expect("four bytes")) as f64))
        .collect();
    params.set_from_slice(&flat);
    Ok(params)
}

pub fn save_params<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_params(params))
}

pub fn load_params<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| McaError::io(path, e))?;
    decode_params(&bytes, path)
}

/// Row-stochastic `n x c` matrix of cluster probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAssignment<T> {
    probs: Array2<T>,
}

impl<T: Scalar> SoftAssignment<T> {
    pub fn tolerance(c: usize) -> T {
        T::lit(1e-6).max(T::epsilon() * T::from_usize_lossy(8 * c.max(1)))
    }

    /// Validates non-negativity and unit row sums.
    pub fn new(probs: Array2<T>) -> Result<Self> {
        let tol = Self::tolerance(probs.ncols());
        for (i, row) in probs.rows().into_iter().enumerate() {
            if row.iter().any(|&v| !(v >= T::zero()) || !v.is_finite()) {
                return Err(McaError::InvalidArgument(format!("row {i} has a negative or non-finite entry")));
            }
            let s: T = row.sum();
            if (s - T::one()).abs() > tol {
                return Err(McaError::InvalidArgument(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { probs })
    }

    pub(crate) fn from_trusted(probs: Array2<T>) -> Self {
        Self { probs }
    }

    /// One-hot rows for the given labels.
    pub fn one_hot(labels: &[usize], c: usize) -> Self {
        let mut probs = Array2::zeros((labels.len(), c));
        for (i, &l) in labels.iter().enumerate() {
            probs[[i, l]] = T::one();
        }
        Self { probs }
    }

    pub fn probs(&self) -> &Array2<T> {
        &self.probs
    }

    pub fn n(&self) -> usize {
        self.probs.nrows()
    }

    pub fn c(&self) -> usize {
        self.probs.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, T> {
        self.probs.row(i)
    }

    pub fn hard_labels(&self) -> Vec<usize> {
        self.probs
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("contiguous row")))
            .collect()
    }

    /// Column means, the cluster-size distribution.
    pub fn mean(&self) -> Array1<T> {
        self.probs.mean_axis(Axis(0)).expect("non-empty assignment")
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            probs: self.probs.select(Axis(0), rows),
        }
    }
}

/// Row-wise softmax of the head's affine map.
pub fn head_forward<T: Scalar>(head: &LinearHead<T>, emb: ArrayView2<'_, T>) -> Result<SoftAssignment<T>> {
    if emb.ncols() != head.d() {
        return Err(McaError::Shape(format!("embedding dimension {} vs head {}", emb.ncols(), head.d())));
    }
    let mut z = head.logits(emb);
    if z.iter().any(|v| !v.is_finite()) {
        return Err(McaError::Numeric("non-finite logits in head forward".into()));
    }
    for mut row in z.rows_mut() {
        softmax_in_place(row.as_slice_mut().expect("contiguous row"));
    }
    Ok(SoftAssignment { probs: z })
}

/// Intermediate values of one attention evaluation, kept for backprop.
#[derive(Debug, Clone)]
pub struct AttentionTrace<T> {
    /// `W^I u`
    pub query: Array1<T>,
    /// softmax weights over the neighbors
    pub weights: Array1<T>,
    pub combined: Array1<T>,
}

/// Attention over pre-projected keys (`W^S v_j` rows). Scores are the raw
/// bilinear form, without a `1/sqrt(d)` scale.
pub fn attention_with_keys<T: Scalar>(
    query: Array1<T>,
    keys: ArrayView2<'_, T>,
    assigns: ArrayView2<'_, T>,
) -> AttentionTrace<T> {
    let mut weights = keys.dot(&query);
    softmax_in_place(weights.as_slice_mut().expect("contiguous"));
    let combined = assigns.t().dot(&weights);
    AttentionTrace {
        query,
        weights,
        combined,
    }
}

/// `p' = sum_j softmax_j((W^I u)^T W^S v_j) p_j` over the neighboring words.
pub fn attention_combine<T: Scalar>(
    u: ArrayView1<'_, T>,
    neighbor_txt_embs: ArrayView2<'_, T>,
    neighbor_txt_assigns: ArrayView2<'_, T>,
    w_img: &Array2<T>,
    w_txt: &Array2<T>,
) -> Result<Array1<T>> {
    let k = neighbor_txt_embs.nrows();
    if k == 0 {
        return Err(McaError::InvalidArgument("attention needs at least one neighbor".into()));
    }
    if neighbor_txt_assigns.nrows() != k
        || neighbor_txt_embs.ncols() != u.len()
        || w_img.dim() != (u.len(), u.len())
        || w_txt.dim() != (u.len(), u.len())
    {
        return Err(McaError::Shape("attention operands disagree in shape".into()));
    }
    let keys = neighbor_txt_embs.dot(&w_txt.t());
    Ok(attention_with_keys(w_img.dot(&u), keys.view(), neighbor_txt_assigns).combined)
}

/// One-hot at the argmax, lowest index on ties.
pub fn pseudo_label<T: Scalar>(p_prime: ArrayView1<'_, T>) -> Array1<T> {
    let mut out = Array1::zeros(p_prime.len());
    out[argmax(&p_prime.to_vec())] = T::one();
    out
}

/// `h_l = sum_i q_il u_i / sum_i q_il`.
pub fn image_prototypes<T: Scalar>(q: &SoftAssignment<T>, u: ArrayView2<'_, T>) -> Result<Array2<T>> {
    if q.n() != u.nrows() {
        return Err(McaError::Shape(format!("{} assignments for {} embeddings", q.n(), u.nrows())));
    }
    let mass = q.probs.sum_axis(Axis(0));
    if let Some(dead) = mass.iter().position(|&m| !(m > T::zero())) {
        return Err(McaError::DeadCluster { cluster: dead });
    }
    let mut h = q.probs.t().dot(&u);
    for (mut row, &m) in h.rows_mut().into_iter().zip(mass.iter()) {
        row.mapv_inplace(|v| v / m);
    }
    Ok(h)
}

/// Image prototypes and their text counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypePair<T> {
    pub h_img: Array2<T>,
    /// Unit rows.
    pub h_txt: Array2<T>,
    /// Word indices averaged into each text prototype.
    pub txt_source: Vec<Vec<usize>>,
}

fn ranked_by_similarity<T: Scalar>(words: &Array2<T>, target: ArrayView1<'_, T>) -> Vec<usize> {
    let sims = words.dot(&target);
    let mut order: Vec<usize> = (0..words.nrows()).collect();
    order.sort_by(|&a, &b| {
        sims[b]
            .partial_cmp(&sims[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// For each image prototype: nearest word, then the normalized mean of that
/// word's `k_p` nearest words (itself included).
pub fn text_prototypes<T: Scalar>(
    h_img: &Array2<T>,
    words: &EmbeddingMatrix<T>,
    k_p: usize,
) -> Result<PrototypePair<T>> {
    let m = words.n();
    if m == 0 {
        return Err(McaError::Empty("semantic space has no words".into()));
    }
    if k_p == 0 || k_p > m {
        return Err(McaError::InvalidArgument(format!("k_p must lie in [1, {m}], got {k_p}")));
    }
    let data = words.data();
    let mut h_txt = Array2::zeros(h_img.raw_dim());
    let mut sources = Vec::with_capacity(h_img.nrows());
    for (l, proto) in h_img.rows().into_iter().enumerate() {
        let nearest = ranked_by_similarity(data, proto)[0];
        let group: Vec<usize> = ranked_by_similarity(data, data.row(nearest))
            .into_iter()
            .take(k_p)
            .collect();
        let mut mean = Array1::<T>::zeros(words.d());
        for &j in &group {
            mean += &data.row(j);
        }
        let norm = mean.dot(&mean).sqrt();
        if !(norm > T::zero()) {
            return Err(McaError::Numeric(format!("text prototype {l} averaged to zero")));
        }
        h_txt.row_mut(l).assign(&(mean / norm));
        sources.push(group);
    }
    Ok(PrototypePair {
        h_img: h_img.clone(),
        h_txt,
        txt_source: sources,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zero_head_is_uniform() {
        let head = LinearHead::<f64>::zeros(4, 3);
        let u = array![[1.0, 0.0, 0.0], [0.0, 0.6, 0.8]];
        let q = head_forward(&head, u.view()).unwrap();
        assert!(q.probs().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn saturated_logit() {
        let mut head = LinearHead::<f64>::zeros(3, 2);
        head.bias[1] = 50.0;
        let q = head_forward(&head, array![[0.3, 0.4]].view()).unwrap();
        assert!((q.row(0)[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_logits_error() {
        let mut head = LinearHead::<f64>::zeros(2, 2);
        head.bias[0] = f64::NAN;
        assert!(matches!(head_forward(&head, array![[1.0, 0.0]].view()), Err(McaError::Numeric(_))));
    }

    #[test]
    fn single_neighbor_attention_copies_assignment() {
        let u = array![0.6, 0.8];
        let v = array![[1.0, 0.0]];
        let p = array![[0.2, 0.5, 0.3]];
        let eye = Array2::eye(2);
        let out = attention_combine(u.view(), v.view(), p.view(), &eye, &eye).unwrap();
        assert_eq!(out, array![0.2, 0.5, 0.3]);
    }

    #[test]
    fn orthogonal_query_averages_neighbors() {
        let u = array![0.0f64, 0.0, 1.0];
        let v = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let p = array![[1.0, 0.0], [0.2, 0.8]];
        let eye = Array2::<f64>::eye(3);
        let out = attention_combine(u.view(), v.view(), p.view(), &eye, &eye).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
        assert!((out[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn pseudo_label_ties_and_plain_case() {
        assert_eq!(pseudo_label(array![0.1, 0.7, 0.2].view()), array![0.0, 1.0, 0.0]);
        assert_eq!(pseudo_label(array![0.5, 0.5].view()), array![1.0, 0.0]);
    }

    #[test]
    fn one_hot_prototypes_are_the_points() {
        let u = array![[1.0, 0.0], [0.0, 1.0]];
        let q = SoftAssignment::one_hot(&[1, 0], 2);
        let h = image_prototypes(&q, u.view()).unwrap();
        assert_eq!(h, array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn uniform_assignment_gives_global_mean() {
        let u = array![[1.0f64, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let q = SoftAssignment::new(Array2::from_elem((3, 2), 0.5)).unwrap();
        let h = image_prototypes(&q, u.view()).unwrap();
        let mean = u.mean_axis(Axis(0)).unwrap();
        for row in h.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dead_cluster_is_named() {
        let q = SoftAssignment::one_hot(&[0, 0], 3);
        let u = array![[1.0, 0.0], [0.0, 1.0]];
        match image_prototypes(&q, u.view()) {
            Err(McaError::DeadCluster { cluster }) => assert_eq!(cluster, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn k_p_one_gives_nearest_word() {
        let words = EmbeddingMatrix::new(array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap();
        let h = array![[0.9, 0.1], [0.1, 0.9]];
        let pair = text_prototypes(&h, &words, 1).unwrap();
        assert_eq!(pair.h_txt.row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(pair.h_txt.row(1).to_vec(), vec![0.0, 1.0]);
        assert_eq!(pair.txt_source, vec![vec![0], vec![1]]);
    }

    #[test]
    fn identical_words_give_that_word() {
        let words = EmbeddingMatrix::new(array![[0.6f64, 0.8], [0.6, 0.8], [0.6, 0.8]]).unwrap();
        let pair = text_prototypes(&array![[1.0, 0.0]], &words, 3).unwrap();
        assert!((pair.h_txt[[0, 0]] - 0.6).abs() < 1e-12);
        assert!((pair.h_txt[[0, 1]] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_and_rejects_garbage() {
        let p = ModelParams::<f32>::init(3, 4, 9);
        let bytes = encode_params(&p);
        let back: ModelParams<f32> = decode_params(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, p);
        assert!(decode_params::<f32>(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(decode_params::<f32>(b"nope", Path::new("x")).is_err());
    }

    #[test]
    fn init_uses_identity_attention() {
        let p = ModelParams::<f64>::init(2, 5, 0);
        assert_eq!(p.w_img, Array2::<f64>::eye(5));
        let bound = 1.0 / 5f64.sqrt();
        assert!(p.image_head.weight.iter().all(|v| v.abs() <= bound));
        assert!(p.image_head.bias.iter().all(|&v| v == 0.0));
    }
}
