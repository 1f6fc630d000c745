use std::cmp::Ordering;
use std::io::Write;

use crate::matrix::Real;

/// `⌈ρ·n⌉` clamped to `[1, n]`. A product within rounding error of an
/// integer counts as that integer, so `0.07 · 100` gives 7, not 8.
pub fn prototype_count(rho: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let x = rho * n as f64;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * (n as f64).max(1.0) {
        r
    } else {
        x.ceil()
    };
    (k.max(1.0) as usize).min(n)
}

/// Descending score, then ascending index.
fn rank_cmp<T: PartialOrd>(a: (T, usize), b: (T, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Indices of the `⌈ρ·Nv⌉` largest scores in rank order: descending score,
/// ties by lower index.
pub fn select_top_rho(scores: &[f64], rho: f64) -> Vec<usize> {
    let k = prototype_count(rho, scores.len());
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| rank_cmp((scores[a], a), (scores[b], b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx
}

const BUCKETS: usize = 2048;

/// Reusable exact top-k for scores in `[-1, 1]`.
///
/// One pass bins every candidate into a histogram over `[-1, 1]`; the bucket
/// holding the k-th largest score is located from the counts, everything
/// above it is taken as is, and only that boundary bucket is resolved with a
/// comparison-based select. Output indices are ascending.
#[derive(Debug, Default)]
pub(crate) struct TopK<T> {
    counts: Vec<u32>,
    /// Bucket + 1 per key; 0 marks a non-candidate.
    bucket_of: Vec<u16>,
    boundary: Vec<(T, usize)>,
}

impl<T: Real> TopK<T> {
    pub(crate) fn new() -> Self {
        Self {
            counts: vec![0; BUCKETS],
            bucket_of: Vec::new(),
            boundary: Vec::new(),
        }
    }

    #[inline]
    fn bucket(s: T) -> u16 {
        let b = ((s.to_f64() + 1.0) * (BUCKETS as f64 / 2.0)) as isize;
        b.clamp(0, BUCKETS as isize - 1) as u16
    }

    /// Writes the `k` best candidates of `scores` to `out` in ascending index
    /// order. `n_candidates` must equal the number of allowed keys.
    pub(crate) fn select(
        &mut self,
        scores: &[T],
        allowed: Option<&[bool]>,
        n_candidates: usize,
        k: usize,
        out: &mut Vec<usize>,
    ) {
        out.clear();
        debug_assert!(k >= 1 && k <= n_candidates);
        if k == n_candidates {
            match allowed {
                None => out.extend(0..scores.len()),
                Some(m) => out.extend((0..scores.len()).filter(|&j| m[j])),
            }
            return;
        }
        self.counts.fill(0);
        self.bucket_of.resize(scores.len(), 0);
        match allowed {
            None => {
                for (slot, &s) in self.bucket_of.iter_mut().zip(scores) {
                    let b = Self::bucket(s);
                    self.counts[b as usize] += 1;
                    *slot = b + 1;
                }
            }
            Some(m) => {
                for ((slot, &s), &ok) in self.bucket_of.iter_mut().zip(scores).zip(m) {
                    if ok {
                        let b = Self::bucket(s);
                        self.counts[b as usize] += 1;
                        *slot = b + 1;
                    } else {
                        *slot = 0;
                    }
                }
            }
        }
        let mut above = 0usize;
        let mut t = 0usize;
        for b in (0..BUCKETS).rev() {
            let c = self.counts[b] as usize;
            if above + c >= k {
                t = b;
                break;
            }
            above += c;
        }
        let need = k - above;
        let tt = t as u16 + 1;
        self.boundary.clear();
        for (j, &b) in self.bucket_of.iter().enumerate() {
            if b > tt {
                out.push(j);
            } else if b == tt {
                self.boundary.push((scores[j], j));
            }
        }
        if self.boundary.len() > need {
            self.boundary.select_nth_unstable_by(need - 1, |&a, &b| rank_cmp(a, b));
            self.boundary.truncate(need);
        }
        out.extend(self.boundary.iter().map(|&(_, j)| j));
        out.sort_unstable();
    }
}

/// Exact top-`k` of cosine-range scores; indices ascending. Ties resolve
/// toward lower indices.
pub fn top_k_support<T: Real>(scores: &[T], allowed: Option<&[bool]>, k: usize) -> Vec<usize> {
    let n = allowed.map_or(scores.len(), |m| m.iter().filter(|&&b| b).count());
    let mut out = Vec::new();
    if n == 0 || k == 0 {
        return out;
    }
    TopK::new().select(scores, allowed, n, k.min(n), &mut out);
    out
}

/// Prototypes chosen for one (query, head), in rank order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadSelection {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

impl HeadSelection {
    /// Builds the rank-ordered record from an ascending support and the
    /// matching weights.
    pub(crate) fn from_support(support: &[usize], row: &[f64], weights: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..support.len()).collect();
        order.sort_unstable_by(|&a, &b| rank_cmp((row[support[a]], support[a]), (row[support[b]], support[b])));
        Self {
            indices: order.iter().map(|&i| support[i]).collect(),
            scores: order.iter().map(|&i| row[support[i]]).collect(),
            weights: order.iter().map(|&i| weights[i]).collect(),
        }
    }
}

/// Per (query, head) prototype records, query-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrototypeSelection {
    pub heads: usize,
    pub entries: Vec<HeadSelection>,
}

impl PrototypeSelection {
    pub fn n_queries(&self) -> usize {
        if self.heads == 0 {
            0
        } else {
            self.entries.len() / self.heads
        }
    }

    pub fn get(&self, query: usize, head: usize) -> &HeadSelection {
        &self.entries[query * self.heads + head]
    }

    /// CSV with columns `query_id,head,rank,voxel_index,score,weight`.
    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "query_id,head,rank,voxel_index,score,weight")?;
        for (i, e) in self.entries.iter().enumerate() {
            let (q, h) = (i / self.heads, i % self.heads);
            for (r, ((&v, &s), &a)) in e.indices.iter().zip(&e.scores).zip(&e.weights).enumerate() {
                writeln!(w, "{q},{h},{r},{v},{s:e},{a:e}")?;
            }
        }
        Ok(())
    }
}
