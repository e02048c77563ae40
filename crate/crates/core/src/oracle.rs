//! Single-device reference attention and the log-sum-exp block merge.
//!
//! Scores are scaled by `1 / sqrt(head_dim)`. Query head `h` reads KV head
//! `h / G` with `G = H / H_kv`. Under a causal mask a query at original
//! position `p` admits the keys at positions `<= p`, read from the carried
//! token positions, so any row permutation stays exact. Rows that admit no
//! key produce zero output and an `lse` of negative infinity.

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, Scalar};

/// Partial attention over one key block: normalized output plus the per
/// `(head, query)` log-sum-exp of the scaled scores it covered.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockResult<T> {
    pub out: DenseTensor<T>,
    /// Indexed `head * tokens + token`.
    pub lse: Vec<T>,
}

impl<T: Scalar> BlockResult<T> {
    /// Identity element of [`block_update`]: zero output, `lse = -inf`.
    pub fn empty(heads: usize, head_dim: usize, positions: Vec<usize>) -> Self {
        let tokens = positions.len();
        Self {
            out: DenseTensor::zeros(heads, tokens, head_dim, positions),
            lse: vec![T::neg_infinity(); heads * tokens],
        }
    }

    pub fn lse_at(&self, h: usize, t: usize) -> T {
        self.lse[h * self.out.tokens() + t]
    }
}

/// Gradients of [`full_attention`] with respect to its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub dq: DenseTensor<T>,
    pub dk: DenseTensor<T>,
    pub dv: DenseTensor<T>,
}

fn check_qkv<T: Scalar>(
    q: &DenseTensor<T>,
    k: &DenseTensor<T>,
    v: &DenseTensor<T>,
) -> Result<usize> {
    if k.shape() != v.shape() {
        return Err(Error::Shape(format!(
            "K {:?} and V {:?} differ",
            k.shape(),
            v.shape()
        )));
    }
    if k.positions() != v.positions() {
        return Err(Error::Shape("K and V token positions differ".into()));
    }
    if q.head_dim() != k.head_dim() {
        return Err(Error::Shape(format!(
            "head dim {} for Q, {} for K/V",
            q.head_dim(),
            k.head_dim()
        )));
    }
    if k.heads() == 0 || !q.heads().is_multiple_of(k.heads()) {
        return Err(Error::Divisibility {
            what: "query heads",
            value: q.heads(),
            divisor: k.heads(),
        });
    }
    Ok(q.heads() / k.heads())
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn admitted(causal: bool, q_pos: usize, k_pos: usize) -> bool {
    !causal || k_pos <= q_pos
}

/// Attention of every query row against one key block.
pub fn block_attention<T: Scalar>(
    q: &DenseTensor<T>,
    k: &DenseTensor<T>,
    v: &DenseTensor<T>,
    causal: bool,
) -> Result<BlockResult<T>> {
    let groups = check_qkv(q, k, v)?;
    let scale = T::of_f64(1.0 / (q.head_dim() as f64).sqrt());
    let mut res = BlockResult::empty(q.heads(), q.head_dim(), q.positions().to_vec());
    let mut scores: Vec<(usize, T)> = Vec::with_capacity(k.tokens());

    for h in 0..q.heads() {
        let kvh = h / groups;
        for t in 0..q.tokens() {
            let q_pos = q.positions()[t];
            let q_row = q.row(h, t);
            scores.clear();
            scores.extend(
                (0..k.tokens())
                    .filter(|&j| admitted(causal, q_pos, k.positions()[j]))
                    .map(|j| (j, dot(q_row, k.row(kvh, j)) * scale)),
            );
            if scores.is_empty() {
                continue;
            }
            let max = scores.iter().fold(T::neg_infinity(), |m, &(_, s)| m.max(s));
            let mut sum = T::zero();
            let out = res.out.row_mut(h, t);
            for &(j, s) in &scores {
                let p = (s - max).exp();
                sum = sum + p;
                for (o, &x) in out.iter_mut().zip(v.row(kvh, j)) {
                    *o = *o + p * x;
                }
            }
            for o in out.iter_mut() {
                *o = *o / sum;
            }
            res.lse[h * q.tokens() + t] = max + sum.ln();
        }
    }
    Ok(res)
}

/// Exact attention over the whole key set. Returns the output and the
/// per-`(head, query)` log-sum-exp.
pub fn full_attention<T: Scalar>(
    q: &DenseTensor<T>,
    k: &DenseTensor<T>,
    v: &DenseTensor<T>,
    causal: bool,
) -> Result<(DenseTensor<T>, Vec<T>)> {
    let r = block_attention(q, k, v, causal)?;
    Ok((r.out, r.lse))
}

/// Merges two partial results over disjoint key blocks for the same queries.
pub fn block_update<T: Scalar>(
    acc: &BlockResult<T>,
    blk: &BlockResult<T>,
) -> Result<BlockResult<T>> {
    let mut out = acc.clone();
    merge_into(&mut out, blk)?;
    Ok(out)
}

/// In-place form of [`block_update`].
pub fn merge_into<T: Scalar>(acc: &mut BlockResult<T>, blk: &BlockResult<T>) -> Result<()> {
    if acc.out.shape() != blk.out.shape() || acc.lse.len() != blk.lse.len() {
        return Err(Error::Shape(format!(
            "merging {:?} with {:?}",
            acc.out.shape(),
            blk.out.shape()
        )));
    }
    if acc.out.positions() != blk.out.positions() {
        return Err(Error::Shape("merged blocks cover different queries".into()));
    }
    let tokens = acc.out.tokens();
    for h in 0..acc.out.heads() {
        for t in 0..tokens {
            let i = h * tokens + t;
            let (a, b) = (acc.lse[i], blk.lse[i]);
            if b == T::neg_infinity() {
                continue;
            }
            if a == T::neg_infinity() {
                acc.lse[i] = b;
                acc.out.row_mut(h, t).copy_from_slice(blk.out.row(h, t));
                continue;
            }
            let m = a.max(b);
            let new_lse = m + ((a - m).exp() + (b - m).exp()).ln();
            let wa = (a - new_lse).exp();
            let wb = (b - new_lse).exp();
            let src = blk.out.row(h, t);
            for (o, &x) in acc.out.row_mut(h, t).iter_mut().zip(src) {
                *o = *o * wa + x * wb;
            }
            acc.lse[i] = new_lse;
        }
    }
    Ok(())
}

/// Closed-form gradients of softmax attention.
///
/// With `P` the attention weights and `O` the output of a query row,
/// `dV_j += P_j dO`, `dS_j = P_j (dO . V_j - dO . O)`,
/// `dQ += scale dS_j K_j` and `dK_j += scale dS_j Q`. KV gradients sum over
/// the query heads sharing the KV head.
pub fn attention_backward<T: Scalar>(
    q: &DenseTensor<T>,
    k: &DenseTensor<T>,
    v: &DenseTensor<T>,
    d_out: &DenseTensor<T>,
    causal: bool,
) -> Result<Gradients<T>> {
    let groups = check_qkv(q, k, v)?;
    if d_out.shape() != q.shape() {
        return Err(Error::Shape(format!(
            "dO {:?} does not match Q {:?}",
            d_out.shape(),
            q.shape()
        )));
    }
    let (out, lse) = full_attention(q, k, v, causal)?;
    let scale = T::of_f64(1.0 / (q.head_dim() as f64).sqrt());

    let mut dq = DenseTensor::zeros(q.heads(), q.tokens(), q.head_dim(), q.positions().to_vec());
    let mut dk = DenseTensor::zeros(k.heads(), k.tokens(), k.head_dim(), k.positions().to_vec());
    let mut dv = DenseTensor::zeros(v.heads(), v.tokens(), v.head_dim(), v.positions().to_vec());

    for h in 0..q.heads() {
        let kvh = h / groups;
        for t in 0..q.tokens() {
            let l = lse[h * q.tokens() + t];
            if l == T::neg_infinity() {
                continue;
            }
            let q_pos = q.positions()[t];
            let do_row = d_out.row(h, t);
            let delta = dot(do_row, out.row(h, t));
            for j in 0..k.tokens() {
                if !admitted(causal, q_pos, k.positions()[j]) {
                    continue;
                }
                let p = (dot(q.row(h, t), k.row(kvh, j)) * scale - l).exp();
                let ds = p * (dot(do_row, v.row(kvh, j)) - delta);
                for (g, &x) in dv.row_mut(kvh, j).iter_mut().zip(do_row) {
                    *g = *g + p * x;
                }
                for (g, &x) in dq.row_mut(h, t).iter_mut().zip(k.row(kvh, j)) {
                    *g = *g + scale * ds * x;
                }
                for (g, &x) in dk.row_mut(kvh, j).iter_mut().zip(q.row(h, t)) {
                    *g = *g + scale * ds * x;
                }
            }
        }
    }
    Ok(Gradients { dq, dk, dv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qkv(h: usize, h_kv: usize, s: usize, d: usize, seed: u64) -> [DenseTensor<f64>; 3] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [
            DenseTensor::random(h, s, d, &mut rng),
            DenseTensor::random(h_kv, s, d, &mut rng),
            DenseTensor::random(h_kv, s, d, &mut rng),
        ]
    }

    #[test]
    fn zero_queries_average_visible_values() {
        let [_, k, v] = qkv(2, 1, 6, 3, 1);
        let q = DenseTensor::zeros(2, 6, 3, (0..6).collect());
        let (o, _) = full_attention(&q, &k, &v, true).unwrap();
        for h in 0..2 {
            for t in 0..6 {
                for d in 0..3 {
                    let mean = (0..=t).map(|j| v.get(0, j, d)).sum::<f64>() / (t + 1) as f64;
                    assert!((o.get(h, t, d) - mean).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn single_token_returns_value_row() {
        let [q, k, v] = qkv(2, 2, 1, 4, 2);
        let (o, lse) = full_attention(&q, &k, &v, true).unwrap();
        assert_eq!(o, v);
        // lse = the single scaled score
        for (h, l) in lse.iter().enumerate() {
            let s = dot(q.row(h, 0), k.row(h, 0)) / 2.0;
            assert!((l - s).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let [q, k, v] = qkv(4, 2, 4, 3, 3);
        let k3 = DenseTensor::<f64>::zeros(3, 4, 3, (0..4).collect());
        assert!(full_attention(&q, &k3, &k3, false).is_err());
        assert!(full_attention(&q, &k, &v.select_heads(0..1).unwrap(), false).is_err());
        let d_out = DenseTensor::<f64>::zeros(4, 3, 3, (0..3).collect());
        assert!(attention_backward(&q, &k, &v, &d_out, false).is_err());
    }

    #[test]
    fn empty_mask_rows_are_zero_not_nan() {
        let [q, k, v] = qkv(1, 1, 2, 2, 4);
        let q = q.with_positions(vec![0, 1]).unwrap();
        let k = k.with_positions(vec![5, 6]).unwrap();
        let v = v.with_positions(vec![5, 6]).unwrap();
        let r = block_attention(&q, &k, &v, true).unwrap();
        assert!(r.out.data().iter().all(|&x| x == 0.0));
        assert!(r.lse.iter().all(|&l| l == f64::NEG_INFINITY));
    }

    #[test]
    fn merge_with_empty_accumulator_is_identity() {
        let [q, k, v] = qkv(2, 1, 5, 3, 5);
        let blk = block_attention(&q, &k, &v, true).unwrap();
        let acc = BlockResult::empty(2, 3, q.positions().to_vec());
        assert_eq!(block_update(&acc, &blk).unwrap(), blk);
        assert_eq!(block_update(&blk, &acc).unwrap(), blk);
    }

    #[test]
    fn merge_with_itself_adds_ln2() {
        let [q, k, v] = qkv(2, 2, 5, 3, 6);
        let blk = block_attention(&q, &k, &v, false).unwrap();
        let m = block_update(&blk, &blk).unwrap();
        assert!(m.out.max_abs_diff(&blk.out).unwrap() < 1e-15);
        for (a, b) in m.lse.iter().zip(&blk.lse) {
            assert!((a - b - std::f64::consts::LN_2).abs() < 1e-14);
        }
    }

    #[test]
    fn merge_rejects_mismatched_queries() {
        let [q, k, v] = qkv(1, 1, 4, 2, 7);
        let a = block_attention(&q, &k, &v, false).unwrap();
        let q2 = q.select_tokens(&[1, 0, 2, 3]).unwrap();
        let b = block_attention(&q2, &k, &v, false).unwrap();
        assert!(block_update(&a, &b).is_err());
    }

    #[test]
    fn gqa_with_full_kv_heads_is_mha() {
        let [q, k, v] = qkv(4, 4, 6, 3, 8);
        let (o, _) = full_attention(&q, &k, &v, true).unwrap();
        for h in 0..4 {
            let qh = q.select_heads(h..h + 1).unwrap();
            let kh = k.select_heads(h..h + 1).unwrap();
            let vh = v.select_heads(h..h + 1).unwrap();
            let (oh, _) = full_attention(&qh, &kh, &vh, true).unwrap();
            assert_eq!(oh, o.select_heads(h..h + 1).unwrap());
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero() {
        let [q, k, v] = qkv(4, 2, 6, 3, 9);
        let d_out = DenseTensor::zeros(4, 6, 3, (0..6).collect());
        let g = attention_backward(&q, &k, &v, &d_out, true).unwrap();
        for t in [&g.dq, &g.dk, &g.dv] {
            assert!(t.data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_token_gradients() {
        let [q, k, v] = qkv(2, 2, 1, 3, 10);
        let [d_out, _, _] = qkv(2, 2, 1, 3, 11);
        let g = attention_backward(&q, &k, &v, &d_out, false).unwrap();
        assert_eq!(g.dv, d_out);
        assert!(g.dq.data().iter().all(|x| x.abs() < 1e-15));
        assert!(g.dk.data().iter().all(|x| x.abs() < 1e-15));
    }
}
