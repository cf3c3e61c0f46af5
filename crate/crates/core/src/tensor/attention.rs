//! Grouped multi-head attention over an explicit token partition.
//!
//! A plan lists groups of `(queries, keys)` token indices. Every query attends
//! over the keys of its group; a token that is a query in several groups
//! receives the mean of its per-group outputs, and a token that is never a
//! query receives zeros. Divided space-time attention is expressed as two
//! plans over the same token layout.

use super::Scalar;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPlan {
    tokens: usize,
    groups: Vec<AttentionGroup>,
    /// Output averaging weight per token (1 / number of groups it queries in).
    query_weight: Vec<f64>,
    prob_len: usize,
}

impl AttentionPlan {
    /// Panics if a group references a token outside `0..tokens` or has no keys.
    pub fn new(tokens: usize, groups: Vec<AttentionGroup>) -> Self {
        let mut counts = vec![0usize; tokens];
        let mut prob_len = 0;
        for g in &groups {
            assert!(!g.keys.is_empty(), "attention group without keys");
            for &q in &g.queries {
                assert!(q < tokens, "query index {q} out of range {tokens}");
                counts[q] += 1;
            }
            assert!(g.keys.iter().all(|&k| k < tokens), "key index out of range");
            prob_len += g.queries.len() * g.keys.len();
        }
        let query_weight = counts
            .iter()
            .map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 })
            .collect();
        Self {
            tokens,
            groups,
            query_weight,
            prob_len,
        }
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn groups(&self) -> &[AttentionGroup] {
        &self.groups
    }

    /// Cached probability count for one head.
    pub fn probs_per_head(&self) -> usize {
        self.prob_len
    }

    /// Offset of group `g` inside one head's probability block.
    pub fn group_offset(&self, g: usize) -> usize {
        self.groups[..g]
            .iter()
            .map(|grp| grp.queries.len() * grp.keys.len())
            .sum()
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc = acc + x * y;
    }
    acc
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

/// Forward pass. `qkv` is `[tokens, 3 * dim]` with the q, k, v blocks side by
/// side; returns the `[tokens, dim]` output and the per-head probabilities
/// laid out head-major, then group, then query, then key.
pub(crate) fn forward<T: Scalar>(
    qkv: &[T],
    dim: usize,
    heads: usize,
    plan: &AttentionPlan,
) -> (Vec<T>, Vec<T>) {
    let width = 3 * dim;
    let hd = dim / heads;
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let mut out = vec![T::zero(); plan.tokens * dim];
    let mut probs = vec![T::zero(); plan.prob_len * heads];
    let mut scores: Vec<T> = Vec::new();
    let mut p = 0;
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, dim + h * hd, 2 * dim + h * hd);
        for g in &plan.groups {
            let nk = g.keys.len();
            for &qi in &g.queries {
                let q = &qkv[qi * width + qo..qi * width + qo + hd];
                scores.clear();
                let mut max = T::neg_infinity();
                for &kj in &g.keys {
                    let s = dot(q, &qkv[kj * width + ko..kj * width + ko + hd]) * scale;
                    max = max.max(s);
                    scores.push(s);
                }
                let mut total = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total = total + *s;
                }
                let w = T::lit(plan.query_weight[qi]);
                let dst = &mut out[qi * dim + h * hd..qi * dim + (h + 1) * hd];
                for (j, &kj) in g.keys.iter().enumerate() {
                    let pr = scores[j] / total;
                    probs[p + j] = pr;
                    axpy(w * pr, &qkv[kj * width + vo..kj * width + vo + hd], dst);
                }
                p += nk;
            }
        }
    }
    (out, probs)
}

/// Backward pass; accumulates into `dqkv` (`[tokens, 3 * dim]`).
pub(crate) fn backward<T: Scalar>(
    qkv: &[T],
    probs: &[T],
    dout: &[T],
    dim: usize,
    heads: usize,
    plan: &AttentionPlan,
    dqkv: &mut [T],
) {
    let width = 3 * dim;
    let hd = dim / heads;
    let scale = T::lit(1.0 / (hd as f64).sqrt());
    let mut dp: Vec<T> = Vec::new();
    let mut go = vec![T::zero(); hd];
    let mut p = 0;
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, dim + h * hd, 2 * dim + h * hd);
        for g in &plan.groups {
            let nk = g.keys.len();
            for &qi in &g.queries {
                let w = T::lit(plan.query_weight[qi]);
                for (gv, &d) in go.iter_mut().zip(&dout[qi * dim + h * hd..]) {
                    *gv = w * d;
                }
                let pr = &probs[p..p + nk];
                dp.clear();
                let mut weighted = T::zero();
                for (j, &kj) in g.keys.iter().enumerate() {
                    let v = &qkv[kj * width + vo..kj * width + vo + hd];
                    let d = dot(&go, v);
                    weighted = weighted + d * pr[j];
                    dp.push(d);
                    axpy(pr[j], &go, &mut dqkv[kj * width + vo..kj * width + vo + hd]);
                }
                for (j, &kj) in g.keys.iter().enumerate() {
                    let ds = pr[j] * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let (qrow, krow) = (qi * width, kj * width);
                    for c in 0..hd {
                        let kv = qkv[krow + ko + c];
                        let qv = qkv[qrow + qo + c];
                        dqkv[qrow + qo + c] = dqkv[qrow + qo + c] + ds * kv;
                        dqkv[krow + ko + c] = dqkv[krow + ko + c] + ds * qv;
                    }
                }
                p += nk;
            }
        }
    }
}
