//! Dense `(heads, tokens, head_dim)` tensors that remember where each token
//! row came from in the original sequence.

use std::fmt::Debug;
use std::ops::Range;

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};

/// Floating-point element type usable by every numeric path.
pub trait Scalar: Float + Debug + Send + Sync + 'static {
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Row-major `(heads, tokens, head_dim)` tensor. `positions[t]` is the index
/// in the original sequence of token row `t`; it is shared by every head.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T> {
    heads: usize,
    tokens: usize,
    head_dim: usize,
    data: Vec<T>,
    positions: Vec<usize>,
}

impl<T: Scalar> DenseTensor<T> {
    pub fn new(
        heads: usize,
        tokens: usize,
        head_dim: usize,
        data: Vec<T>,
        positions: Vec<usize>,
    ) -> Result<Self> {
        if data.len() != heads * tokens * head_dim {
            return Err(Error::Shape(format!(
                "data has {} elements, shape ({heads}, {tokens}, {head_dim}) needs {}",
                data.len(),
                heads * tokens * head_dim
            )));
        }
        if positions.len() != tokens {
            return Err(Error::Shape(format!(
                "{} positions for {tokens} tokens",
                positions.len()
            )));
        }
        Ok(Self {
            heads,
            tokens,
            head_dim,
            data,
            positions,
        })
    }

    pub fn zeros(heads: usize, tokens: usize, head_dim: usize, positions: Vec<usize>) -> Self {
        assert_eq!(positions.len(), tokens);
        Self {
            heads,
            tokens,
            head_dim,
            data: vec![T::zero(); heads * tokens * head_dim],
            positions,
        }
    }

    /// Uniform entries in `[-1, 1)`, positions `0..tokens`.
    pub fn random<R: Rng>(heads: usize, tokens: usize, head_dim: usize, rng: &mut R) -> Self {
        let data = (0..heads * tokens * head_dim)
            .map(|_| T::of_f64(rng.gen_range(-1.0..1.0)))
            .collect();
        Self {
            heads,
            tokens,
            head_dim,
            data,
            positions: (0..tokens).collect(),
        }
    }

    /// Builds a tensor from a closure over `(head, token, dim)`.
    pub fn from_fn(
        heads: usize,
        tokens: usize,
        head_dim: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Self {
        let mut data = Vec::with_capacity(heads * tokens * head_dim);
        for h in 0..heads {
            for t in 0..tokens {
                for d in 0..head_dim {
                    data.push(f(h, t, d));
                }
            }
        }
        Self {
            heads,
            tokens,
            head_dim,
            data,
            positions: (0..tokens).collect(),
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }
    pub fn tokens(&self) -> usize {
        self.tokens
    }
    pub fn head_dim(&self) -> usize {
        self.head_dim
    }
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.heads, self.tokens, self.head_dim)
    }
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }
    pub fn data(&self) -> &[T] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    fn offset(&self, h: usize, t: usize) -> usize {
        (h * self.tokens + t) * self.head_dim
    }

    pub fn get(&self, h: usize, t: usize, d: usize) -> T {
        self.data[self.offset(h, t) + d]
    }

    pub fn set(&mut self, h: usize, t: usize, d: usize, value: T) {
        let o = self.offset(h, t) + d;
        self.data[o] = value;
    }

    pub fn row(&self, h: usize, t: usize) -> &[T] {
        let o = self.offset(h, t);
        &self.data[o..o + self.head_dim]
    }

    pub fn row_mut(&mut self, h: usize, t: usize) -> &mut [T] {
        let o = self.offset(h, t);
        let d = self.head_dim;
        &mut self.data[o..o + d]
    }

    pub fn with_positions(mut self, positions: Vec<usize>) -> Result<Self> {
        if positions.len() != self.tokens {
            return Err(Error::Shape(format!(
                "{} positions for {} tokens",
                positions.len(),
                self.tokens
            )));
        }
        self.positions = positions;
        Ok(self)
    }

    /// Contiguous head slice.
    pub fn select_heads(&self, heads: Range<usize>) -> Result<Self> {
        if heads.end > self.heads || heads.start > heads.end {
            return Err(Error::Shape(format!(
                "head range {heads:?} out of 0..{}",
                self.heads
            )));
        }
        let start = self.offset(heads.start, 0);
        let end = self.offset(heads.end, 0);
        Ok(Self {
            heads: heads.len(),
            tokens: self.tokens,
            head_dim: self.head_dim,
            data: self.data[start..end].to_vec(),
            positions: self.positions.clone(),
        })
    }

    /// Token rows by local index, in the given order.
    pub fn select_tokens(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.tokens) {
            return Err(Error::Shape(format!(
                "token row {bad} out of 0..{}",
                self.tokens
            )));
        }
        let mut data = Vec::with_capacity(self.heads * rows.len() * self.head_dim);
        for h in 0..self.heads {
            for &t in rows {
                data.extend_from_slice(self.row(h, t));
            }
        }
        Ok(Self {
            heads: self.heads,
            tokens: rows.len(),
            head_dim: self.head_dim,
            data,
            positions: rows.iter().map(|&t| self.positions[t]).collect(),
        })
    }

    pub fn token_range(&self, rows: Range<usize>) -> Result<Self> {
        let rows: Vec<usize> = rows.collect();
        self.select_tokens(&rows)
    }

    /// Concatenates along the token axis. All parts need the same head count
    /// and head dim.
    pub fn concat_tokens(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let (heads, head_dim) = (first.heads, first.head_dim);
        if let Some(p) = parts
            .iter()
            .find(|p| p.heads != heads || p.head_dim != head_dim)
        {
            return Err(Error::Shape(format!(
                "cannot concat tokens of ({}, _, {}) onto ({heads}, _, {head_dim})",
                p.heads, p.head_dim
            )));
        }
        let tokens: usize = parts.iter().map(|p| p.tokens).sum();
        let mut data = Vec::with_capacity(heads * tokens * head_dim);
        for h in 0..heads {
            for p in parts {
                let start = p.offset(h, 0);
                data.extend_from_slice(&p.data[start..start + p.tokens * head_dim]);
            }
        }
        let positions = parts
            .iter()
            .flat_map(|p| p.positions.iter().copied())
            .collect();
        Ok(Self {
            heads,
            tokens,
            head_dim,
            data,
            positions,
        })
    }

    /// Concatenates along the head axis. All parts must carry identical
    /// token positions.
    pub fn concat_heads(parts: &[Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        if let Some(p) = parts
            .iter()
            .find(|p| p.positions != first.positions || p.head_dim != first.head_dim)
        {
            return Err(Error::Shape(format!(
                "cannot concat heads: token positions or head dim differ ({} vs {})",
                p.head_dim, first.head_dim
            )));
        }
        let heads = parts.iter().map(|p| p.heads).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Self {
            heads,
            tokens: first.tokens,
            head_dim: first.head_dim,
            data,
            positions: first.positions.clone(),
        })
    }

    /// Repeats every head `times` times contiguously: head `h` becomes heads
    /// `h * times .. (h + 1) * times`.
    pub fn repeat_heads(&self, times: usize) -> Self {
        let block = self.tokens * self.head_dim;
        let mut data = Vec::with_capacity(self.data.len() * times);
        for h in 0..self.heads {
            let src = &self.data[h * block..(h + 1) * block];
            for _ in 0..times {
                data.extend_from_slice(src);
            }
        }
        Self {
            heads: self.heads * times,
            tokens: self.tokens,
            head_dim: self.head_dim,
            data,
            positions: self.positions.clone(),
        }
    }

    /// Rows reordered so positions ascend.
    pub fn sorted_by_position(&self) -> Self {
        let mut rows: Vec<usize> = (0..self.tokens).collect();
        rows.sort_by_key(|&t| self.positions[t]);
        self.select_tokens(&rows).expect("rows are in range")
    }

    pub fn cast<U: Scalar>(&self) -> DenseTensor<U> {
        DenseTensor {
            heads: self.heads,
            tokens: self.tokens,
            head_dim: self.head_dim,
            data: self.data.iter().map(|x| U::of_f64(x.as_f64())).collect(),
            positions: self.positions.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            data: self.data.iter().map(|&x| f(x)).collect(),
            ..self.clone()
        }
    }

    /// Largest elementwise `|a - b|`, computed in f64. Shapes and positions
    /// must agree.
    pub fn max_abs_diff<U: Scalar>(&self, other: &DenseTensor<U>) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        if self.positions != other.positions {
            return Err(Error::Shape("token positions differ".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> DenseTensor<f64> {
        DenseTensor::from_fn(3, 4, 2, |h, t, d| (100 * h + 10 * t + d) as f64)
    }

    #[test]
    fn new_checks_lengths() {
        assert!(DenseTensor::<f64>::new(2, 2, 2, vec![0.0; 7], vec![0, 1]).is_err());
        assert!(DenseTensor::<f64>::new(2, 2, 2, vec![0.0; 8], vec![0]).is_err());
        assert!(DenseTensor::<f64>::new(2, 2, 2, vec![0.0; 8], vec![0, 1]).is_ok());
    }

    #[test]
    fn head_and_token_slices() {
        let x = sample();
        let h = x.select_heads(1..3).unwrap();
        assert_eq!(h.get(0, 2, 1), 121.0);
        let t = x.select_tokens(&[3, 0]).unwrap();
        assert_eq!(t.positions(), &[3, 0]);
        assert_eq!(t.get(2, 0, 0), 230.0);
        assert!(x.select_heads(2..4).is_err());
        assert!(x.select_tokens(&[4]).is_err());
    }

    #[test]
    fn concat_inverts_split() {
        let x = sample();
        let a = x.token_range(0..1).unwrap();
        let b = x.token_range(1..4).unwrap();
        assert_eq!(DenseTensor::concat_tokens(&[a, b]).unwrap(), x);
        let parts: Vec<_> = (0..3).map(|h| x.select_heads(h..h + 1).unwrap()).collect();
        assert_eq!(DenseTensor::concat_heads(&parts).unwrap(), x);
    }

    #[test]
    fn concat_heads_needs_matching_positions() {
        let x = sample();
        let y = x.select_tokens(&[1, 0, 2, 3]).unwrap();
        assert!(DenseTensor::concat_heads(&[x, y]).is_err());
    }

    #[test]
    fn repeat_is_contiguous() {
        let x = sample().select_heads(0..2).unwrap();
        let r = x.repeat_heads(3);
        assert_eq!(r.heads(), 6);
        for h in 0..6 {
            assert_eq!(r.row(h, 1), x.row(h / 3, 1));
        }
    }

    #[test]
    fn sort_restores_order() {
        let x = sample();
        let y = x.select_tokens(&[2, 0, 3, 1]).unwrap();
        assert_eq!(y.sorted_by_position(), x);
    }

    #[test]
    fn random_is_seeded() {
        let a = DenseTensor::<f64>::random(2, 3, 4, &mut ChaCha8Rng::seed_from_u64(7));
        let b = DenseTensor::<f64>::random(2, 3, 4, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|x| (-1.0..1.0).contains(x)));
    }
}
