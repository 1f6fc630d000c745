//! Exact linear assignment by shortest augmenting paths with potentials.

use super::{LossError, Result};
use crate::matrix::Matrix;

/// Query-to-object pairs; queries absent from `pairs` are assigned the
/// no-object class.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(query_index, object_index)`, sorted by query.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &Matrix<f64>) -> f64 {
        self.pairs.iter().map(|&(q, o)| cost.get(q, o)).sum()
    }

    /// Object matched to each query, if any.
    pub fn by_query(&self, n_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_queries];
        for &(q, o) in &self.pairs {
            out[q] = Some(o);
        }
        out
    }
}

/// Minimum-cost injection of objects (columns) into queries (rows) of an
/// `Nq × Nobj` cost matrix with `Nobj ≤ Nq`. Runs in `O(Nobj²·Nq)`.
///
/// The result is a deterministic function of the matrix; among equal-cost
/// optima the one reached by augmenting objects in index order wins.
pub fn hungarian_match(cost: &Matrix<f64>) -> Result<Assignment> {
    let (nq, no) = (cost.rows(), cost.cols());
    if let Some(i) = cost.data().iter().position(|c| !c.is_finite()) {
        return Err(LossError::NonFiniteCost {
            query: i / no.max(1),
            object: i % no.max(1),
        });
    }
    if no > nq {
        return Err(LossError::TooManyObjects {
            objects: no,
            queries: nq,
        });
    }
    if no == 0 {
        return Ok(Assignment::default());
    }
    // Rows of the working problem are objects, columns are queries; both
    // are 1-based with 0 as the virtual source column.
    let a = |obj: usize, q: usize| cost.get(q - 1, obj - 1);
    let mut u = vec![0.0f64; no + 1];
    let mut v = vec![0.0f64; nq + 1];
    let mut p = vec![0usize; nq + 1];
    let mut way = vec![0usize; nq + 1];
    for obj in 1..=no {
        p[0] = obj;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; nq + 1];
        let mut used = vec![false; nq + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=nq {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=nq {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let pairs = (1..=nq).filter(|&j| p[j] != 0).map(|j| (j - 1, p[j] - 1)).collect();
    Ok(Assignment { pairs })
}
