//! Multi-head window attention with a learned relative position bias.

use crate::error::{Error, Result};
use crate::tensor::linear;
use crate::weights::WeightSet;

/// Bias-table row for every (query, key) token pair of a `t x a x a` window.
pub fn relative_index(t: usize, a: usize) -> Vec<usize> {
    let n = t * a * a;
    let coords: Vec<(isize, isize, isize)> = (0..n)
        .map(|i| ((i / (a * a)) as isize, ((i / a) % a) as isize, (i % a) as isize))
        .collect();
    let span = (2 * a - 1) as isize;
    let mut idx = Vec::with_capacity(n * n);
    for &(ti, yi, xi) in &coords {
        for &(tj, yj, xj) in &coords {
            let dt = ti - tj + t as isize - 1;
            let dy = yi - yj + a as isize - 1;
            let dx = xi - xj + a as isize - 1;
            idx.push(((dt * span + dy) * span + dx) as usize);
        }
    }
    idx
}

/// Row-wise `softmax(Q K^T / sqrt(d) + B)` for one head; `q` is `nq x d`,
/// `k` is `nk x d`, `bias` is `nq x nk` or absent.
pub fn attention_probs(q: &[f32], k: &[f32], nq: usize, nk: usize, d: usize, bias: Option<&[f32]>) -> Vec<f32> {
    let scale = 1.0 / (d as f32).sqrt();
    let mut p = vec![0f32; nq * nk];
    for i in 0..nq {
        let qi = &q[i * d..(i + 1) * d];
        let row = &mut p[i * nk..(i + 1) * nk];
        for (j, r) in row.iter_mut().enumerate() {
            let s: f32 = qi.iter().zip(&k[j * d..(j + 1) * d]).map(|(a, b)| a * b).sum();
            *r = s * scale + bias.map_or(0.0, |b| b[i * nk + j]);
        }
        let m = row.iter().fold(f32::NEG_INFINITY, |m, v| m.max(*v));
        let mut z = 0.0;
        for r in row.iter_mut() {
            *r = (*r - m).exp();
            z += *r;
        }
        row.iter_mut().for_each(|r| *r /= z);
    }
    p
}

/// `Attention(Q, K, V) = softmax(Q K^T / sqrt(d) + B) V` for one head.
pub fn attention(q: &[f32], k: &[f32], v: &[f32], nq: usize, nk: usize, d: usize, bias: Option<&[f32]>) -> Vec<f32> {
    let p = attention_probs(q, k, nq, nk, d, bias);
    let mut out = vec![0f32; nq * d];
    for i in 0..nq {
        let o = &mut out[i * d..(i + 1) * d];
        for j in 0..nk {
            let pij = p[i * nk + j];
            for (oc, vc) in o.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *oc += pij * vc;
            }
        }
    }
    out
}

/// Learned projections of one attention module.
pub struct AttentionParams<'a> {
    pub q: (&'a [f32], &'a [f32]),
    pub k: (&'a [f32], &'a [f32]),
    pub v: (&'a [f32], &'a [f32]),
    pub o: (&'a [f32], &'a [f32]),
    /// `entries x heads`.
    pub table: &'a [f32],
    pub heads: usize,
}

impl<'a> AttentionParams<'a> {
    pub fn from_weights(w: &'a WeightSet, prefix: &str, heads: usize) -> Result<Self> {
        let lin = |p: &str| -> Result<(&'a [f32], &'a [f32])> {
            Ok((w.data(&format!("{prefix}.{p}.w"))?, w.data(&format!("{prefix}.{p}.b"))?))
        };
        Ok(Self {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            o: lin("o")?,
            table: w.data(&format!("{prefix}.rel_bias"))?,
            heads,
        })
    }
}

/// Per-head slice `n x d` out of `n x (heads*d)` rows.
fn head_slice(x: &[f32], n: usize, c: usize, h: usize, d: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * d);
    for row in x.chunks_exact(c).take(n) {
        out.extend_from_slice(&row[h * d..(h + 1) * d]);
    }
    out
}

/// Projected multi-head attention inside one window. Queries come from
/// `xq` (`nq x c`), keys and values from `xkv` (`nk x c`); both already
/// layer-normalised. Returns the output projection, `nq x c`, and
/// optionally the per-head probability matrices.
pub fn window_attention(
    xq: &[f32],
    xkv: &[f32],
    nq: usize,
    nk: usize,
    c: usize,
    params: &AttentionParams<'_>,
    rel_index: &[usize],
    mut probs: Option<&mut Vec<Vec<f32>>>,
) -> Result<Vec<f32>> {
    let heads = params.heads;
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Shape(format!("{c} channels not divisible by {heads} heads")));
    }
    if rel_index.len() != nq * nk {
        return Err(Error::Shape(format!(
            "position index covers {} pairs, window has {nq}x{nk}",
            rel_index.len()
        )));
    }
    let d = c / heads;
    let q = linear(xq, nq, c, params.q.0, params.q.1, c);
    let k = linear(xkv, nk, c, params.k.0, params.k.1, c);
    let v = linear(xkv, nk, c, params.v.0, params.v.1, c);
    let mut merged = vec![0f32; nq * c];
    for h in 0..heads {
        let bias: Vec<f32> = rel_index.iter().map(|&r| params.table[r * heads + h]).collect();
        let (qh, kh, vh) = (head_slice(&q, nq, c, h, d), head_slice(&k, nk, c, h, d), head_slice(&v, nk, c, h, d));
        if let Some(p) = probs.as_deref_mut() {
            p.push(attention_probs(&qh, &kh, nq, nk, d, Some(&bias)));
        }
        let out = attention(&qh, &kh, &vh, nq, nk, d, Some(&bias));
        for i in 0..nq {
            merged[i * c + h * d..i * c + (h + 1) * d].copy_from_slice(&out[i * d..(i + 1) * d]);
        }
    }
    Ok(linear(&merged, nq, c, params.o.0, params.o.1, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn output_in_convex_hull_of_values(vals in proptest::collection::vec(-5.0f32..5.0, 3 * 4 * 3 + 2 * 4 * 3)) {
            let (nq, nk, d) = (2, 4, 3);
            let (k, rest) = vals.split_at(nk * d);
            let (v, q) = rest.split_at(nk * d);
            let out = attention(&q[..nq * d], k, v, nq, nk, d, None);
            for i in 0..nq {
                for c in 0..d {
                    let col = (0..nk).map(|j| v[j * d + c]);
                    let (lo, hi) = col.fold((f32::MAX, f32::MIN), |(a, b), x| (a.min(x), b.max(x)));
                    prop_assert!(out[i * d + c] >= lo - 1e-4 && out[i * d + c] <= hi + 1e-4);
                }
            }
        }
    }

    #[test]
    fn uniform_scores_average_values() {
        let (n, d) = (4, 3);
        let q = vec![0.0; n * d];
        let k = vec![0.0; n * d];
        let v: Vec<f32> = (0..n * d).map(|i| i as f32).collect();
        let out = attention(&q, &k, &v, n, n, d, None);
        for i in 0..n {
            for c in 0..d {
                let mean = (0..n).map(|j| v[j * d + c]).sum::<f32>() / n as f32;
                assert!((out[i * d + c] - mean).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn saturated_softmax_selects_row() {
        let d = 2;
        let q = vec![50.0, 0.0];
        let k = vec![0.0, 50.0, 50.0, 0.0, 0.0, -50.0];
        let v = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let out = attention(&q, &k, &v, 1, 3, d, None);
        assert!((out[0] - 3.0).abs() < 1e-5 && (out[1] - 4.0).abs() < 1e-5);
    }

    #[test]
    fn rows_sum_to_one() {
        let (nq, nk, d) = (5, 7, 4);
        let q: Vec<f32> = (0..nq * d).map(|i| (i as f32 * 0.37).sin() * 3.0).collect();
        let k: Vec<f32> = (0..nk * d).map(|i| (i as f32 * 0.91).cos() * 3.0).collect();
        let p = attention_probs(&q, &k, nq, nk, d, None);
        for row in p.chunks(nk) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn relative_index_ranges() {
        let idx = relative_index(1, 3);
        assert_eq!(idx.len(), 81);
        assert_eq!(*idx.iter().max().unwrap(), 24);
        // same position maps to the centre of the table
        assert_eq!(idx[0], 12);
        let idx3 = relative_index(2, 2);
        assert_eq!(*idx3.iter().max().unwrap(), 3 * 9 - 1);
    }
}
