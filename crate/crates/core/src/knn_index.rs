//! Exact top-k cosine neighborhoods, in-modal and cross-modal.
//!
//! Inputs are expected to be unit-normalized, so similarities are plain dot
//! products. Ties are broken by lower row index, which keeps training runs
//! reproducible.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use ndarray::ArrayView1;
use rayon::prelude::*;

use crate::embedding_io::EmbeddingMatrix;
use crate::error::{McaError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor<T> {
    pub index: usize,
    pub similarity: T,
}

/// Per-query list of `k` neighbors sorted by similarity, descending.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex<T> {
    k: usize,
    table: Vec<Vec<Neighbor<T>>>,
}

impl<T: Scalar> NeighborIndex<T> {
    /// Wraps a precomputed table, e.g. one loaded from elsewhere or built by hand in tests.
    pub fn from_table(table: Vec<Vec<Neighbor<T>>>) -> Result<Self> {
        let k = table.first().map_or(0, Vec::len);
        if k == 0 || table.iter().any(|r| r.len() != k) {
            return Err(McaError::Shape("neighbor table rows must be non-empty and equal length".into()));
        }
        Ok(Self { k, table })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn neighbors(&self, query: usize) -> &[Neighbor<T>] {
        &self.table[query]
    }

    pub fn indices(&self, query: usize) -> impl Iterator<Item = usize> + '_ {
        self.table[query].iter().map(|n| n.index)
    }

    pub fn contains(&self, query: usize, index: usize) -> bool {
        self.table[query].iter().any(|n| n.index == index)
    }

    pub fn rows(&self) -> &[Vec<Neighbor<T>>] {
        &self.table
    }

    /// Neighborhood restricted to the given query rows, in that order.
    pub fn select_queries(&self, queries: &[usize]) -> Self {
        Self {
            k: self.k,
            table: queries.iter().map(|&q| self.table[q].clone()).collect(),
        }
    }

    /// Writes `query_id,rank,neighbor_id,similarity`.
    pub fn write_csv(&self, query_ids: &[String], key_ids: &[String], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        writeln!(out, "query_id,rank,neighbor_id,similarity").expect("vec write");
        for (q, row) in self.table.iter().enumerate() {
            for (rank, nb) in row.iter().enumerate() {
                writeln!(out, "{},{},{},{}", query_ids[q], rank, key_ids[nb.index], nb.similarity)
                    .expect("vec write");
            }
        }
        crate::embedding_io::write_file(path, &out)
    }
}

fn by_similarity_then_index<T: Scalar>(a: &Neighbor<T>, b: &Neighbor<T>) -> Ordering {
    b.similarity
        .partial_cmp(&a.similarity)
        .unwrap_or(Ordering::Equal)
        .then(a.index.cmp(&b.index))
}

fn top_k_for<T: Scalar>(
    query: ArrayView1<'_, T>,
    keys: &EmbeddingMatrix<T>,
    k: usize,
    exclude: Option<usize>,
) -> Vec<Neighbor<T>> {
    let mut all: Vec<Neighbor<T>> = keys
        .data()
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != exclude)
        .map(|(j, key)| Neighbor {
            index: j,
            similarity: query.dot(&key),
        })
        .collect();
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, by_similarity_then_index);
        all.truncate(k);
    }
    all.sort_by(by_similarity_then_index);
    all
}

/// Top-k neighbors of every row among the other rows of the same matrix.
pub fn topk_in_modal<T: Scalar>(m: &EmbeddingMatrix<T>, k: usize) -> Result<NeighborIndex<T>> {
    let n = m.n();
    if k == 0 || k >= n {
        return Err(McaError::InvalidArgument(format!("k must lie in [1, {}], got {k}", n.saturating_sub(1))));
    }
    let table = (0..n)
        .into_par_iter()
        .map(|i| top_k_for(m.row(i), m, k, Some(i)))
        .collect();
    Ok(NeighborIndex { k, table })
}

/// Top-k keys for every query row; no self exclusion.
pub fn topk_cross_modal<T: Scalar>(
    queries: &EmbeddingMatrix<T>,
    keys: &EmbeddingMatrix<T>,
    k: usize,
) -> Result<NeighborIndex<T>> {
    if queries.d() != keys.d() {
        return Err(McaError::Shape(format!(
            "query dimension {} differs from key dimension {}",
            queries.d(),
            keys.d()
        )));
    }
    if k == 0 || k > keys.n() {
        return Err(McaError::InvalidArgument(format!("k must lie in [1, {}], got {k}", keys.n())));
    }
    let table = (0..queries.n())
        .into_par_iter()
        .map(|i| top_k_for(queries.row(i), keys, k, None))
        .collect();
    Ok(NeighborIndex { k, table })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn orthogonal_rows_have_zero_similarity() {
        let m = EmbeddingMatrix::new(ndarray::Array2::<f64>::eye(3)).unwrap();
        let idx = topk_in_modal(&m, 1).unwrap();
        for q in 0..3 {
            let nb = idx.neighbors(q)[0];
            assert_eq!(nb.similarity, 0.0);
            assert_ne!(nb.index, q);
        }
        // lowest non-self index wins the tie
        assert_eq!(idx.neighbors(0)[0].index, 1);
        assert_eq!(idx.neighbors(1)[0].index, 0);
    }

    #[test]
    fn duplicate_rows_name_each_other() {
        let m = EmbeddingMatrix::new(array![[0.6f64, 0.8], [1.0, 0.0], [0.6, 0.8]]).unwrap();
        let idx = topk_in_modal(&m, 1).unwrap();
        assert_eq!(idx.neighbors(0)[0].index, 2);
        assert_eq!(idx.neighbors(2)[0].index, 0);
        assert!((idx.neighbors(0)[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn k_out_of_range() {
        let m = EmbeddingMatrix::new(ndarray::Array2::<f64>::eye(3)).unwrap();
        assert!(topk_in_modal(&m, 0).is_err());
        assert!(topk_in_modal(&m, 3).is_err());
        assert!(topk_cross_modal(&m, &m, 4).is_err());
    }

    #[test]
    fn query_equal_to_key_comes_first() {
        let mut keys = ndarray::Array2::<f64>::zeros((10, 10));
        for i in 0..10 {
            keys[[i, i]] = 1.0;
        }
        let keys = EmbeddingMatrix::new(keys).unwrap();
        let queries = keys.select(&[7]);
        let idx = topk_cross_modal(&queries, &keys, 3).unwrap();
        assert_eq!(idx.neighbors(0)[0].index, 7);
        assert_eq!(idx.neighbors(0)[0].similarity, 1.0);
    }

    #[test]
    fn k_equal_m_is_a_sorted_permutation() {
        let keys = EmbeddingMatrix::new(array![[1.0f64, 0.0], [0.0, 1.0], [0.6, 0.8], [-1.0, 0.0]]).unwrap();
        let q = EmbeddingMatrix::new(array![[1.0f64, 0.0]]).unwrap();
        let idx = topk_cross_modal(&q, &keys, 4).unwrap();
        let order: Vec<usize> = idx.indices(0).collect();
        assert_eq!(order, vec![0, 2, 1, 3]);
    }

    #[test]
    fn dimension_mismatch() {
        let a = EmbeddingMatrix::new(ndarray::Array2::<f64>::eye(2)).unwrap();
        let b = EmbeddingMatrix::new(ndarray::Array2::<f64>::eye(3)).unwrap();
        assert!(matches!(topk_cross_modal(&a, &b, 1), Err(McaError::Shape(_))));
    }
}
