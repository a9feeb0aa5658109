//! Dense row-major `f64` tensors.
//!
//! [`Tensor`] is a plain value: shape plus flat data. Gradient tracking
//! lives in [`crate::autodiff`], which wraps tensors in tape-bound handles.

mod io;
pub mod kernels;

pub use io::{load_tensor, read_tensor, save_tensor, write_tensor, TENSOR_MAGIC};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::macs;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting mismatched lengths and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!("non-finite value {} at flat index {i}", data[i])));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernel outputs; only checks length in debug.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_parts(vec![1], vec![v])
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![v; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn zeros_like(other: &Tensor) -> Self {
        Tensor::zeros(&other.shape)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(&mut f).collect())
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape, |_| dist.sample(rng))
    }

    /// Samples i.i.d. `U(lo, hi)` entries.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Tensor::from_parts(shape.to_vec(), self.data.clone()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.numel() as f64
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Elementwise `op(self, other)` with trailing-dimension broadcasting.
    pub fn zip_with(&self, other: &Tensor, op: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        broadcast_binary(self, other, op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_with(other, |a, b| a * b)?;
        macs::add(out.numel() as u64);
        Ok(out)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let out = self.zip_with(other, |a, b| a / b)?;
        macs::add(out.numel() as u64);
        Ok(out)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.map(|v| v + s)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        macs::add(self.numel() as u64);
        self.map(|v| v * s)
    }

    /// Materializes `self` broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let out_shape = broadcast_shape(&self.shape, shape)?;
        if out_shape != shape {
            return Err(Error::shape(format!("cannot broadcast {:?} to {shape:?}", self.shape)));
        }
        let zeros = Tensor::zeros(shape);
        broadcast_binary(self, &zeros, |a, _| a)
    }

    /// Sums broadcast axes away so the result has `target` shape.
    pub fn sum_to_shape(&self, target: &[usize]) -> Result<Tensor> {
        if self.shape == target {
            return Ok(self.clone());
        }
        let bshape = broadcast_shape(&self.shape, target)?;
        if bshape != self.shape {
            return Err(Error::shape(format!("cannot reduce {:?} to {target:?}", self.shape)));
        }
        let n_target: usize = target.iter().product();
        let mut out = vec![0.0; n_target];
        if n_target == 1 {
            out[0] = self.sum();
            return Ok(Tensor::from_parts(target.to_vec(), out));
        }
        // suffix fast path: target equals the trailing dims
        let rank = self.shape.len();
        let trank = target.len();
        if self.shape[rank - trank..] == *target {
            for chunk in self.data.chunks(n_target) {
                for (o, &v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            return Ok(Tensor::from_parts(target.to_vec(), out));
        }
        let tstrides = aligned_strides(target, &self.shape);
        let mut idx = vec![0usize; rank];
        for &v in &self.data {
            let off: usize = idx.iter().zip(&tstrides).map(|(i, s)| i * s).sum();
            out[off] += v;
            increment(&mut idx, &self.shape);
        }
        Ok(Tensor::from_parts(target.to_vec(), out))
    }

    /// Matrix product over the last two axes.
    ///
    /// `self` is `(..., m, k)`; `rhs` is either `(k, n)` (shared across the
    /// batch) or `(..., k, n)` with identical leading axes.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (batch, m, k) = split_matrix(&self.shape)?;
        let (rb, k2, n) = split_matrix(&rhs.shape)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out_shape = self.shape[..self.rank() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        if rhs.rank() == 2 {
            kernels::gemm_nn(&self.data, &rhs.data, &mut out, batch * m, k, n);
        } else {
            if rhs.shape[..rhs.rank() - 2] != self.shape[..self.rank() - 2] || rb != batch {
                return Err(Error::shape(format!(
                    "matmul batch dims differ: {:?} x {:?}",
                    self.shape, rhs.shape
                )));
            }
            for bi in 0..batch {
                kernels::gemm_nn(
                    &self.data[bi * m * k..(bi + 1) * m * k],
                    &rhs.data[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        macs::add((batch * m * k * n) as u64);
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        if rank == 2 && perm == [1, 0] {
            let (r, c) = (self.shape[0], self.shape[1]);
            return Ok(Tensor::from_parts(vec![c, r], kernels::transpose2(&self.data, r, c)));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; rank];
        for _ in 0..self.numel() {
            let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
            increment(&mut idx, &out_shape);
        }
        Ok(Tensor::from_parts(out_shape, out))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(&perm)
    }
}

/// Row-major strides.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides of `shape` laid against the (longer or equal) `out` shape, with
/// 0 on broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < pad || shape[i - pad] == 1 { 0 } else { own[i - pad] })
        .collect()
}

#[inline]
fn increment(idx: &mut [usize], shape: &[usize]) {
    for ax in (0..idx.len()).rev() {
        idx[ax] += 1;
        if idx[ax] < shape[ax] {
            return;
        }
        idx[ax] = 0;
    }
}

fn split_matrix(shape: &[usize]) -> Result<(usize, usize, usize)> {
    let r = shape.len();
    if r < 2 {
        return Err(Error::shape(format!("matmul needs rank >= 2, got {shape:?}")));
    }
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

/// Trailing-dimension broadcast: axes are aligned from the right and each
/// pair must be equal or contain a 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("shapes {a:?} and {b:?} are not broadcast-compatible"))),
        };
    }
    Ok(out)
}

fn broadcast_binary(a: &Tensor, b: &Tensor, op: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| op(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    let out_shape = broadcast_shape(&a.shape, &b.shape)?;
    let n: usize = out_shape.iter().product();
    if b.numel() == 1 && a.numel() == n {
        let y = b.data[0];
        return Ok(Tensor::from_parts(out_shape, a.data.iter().map(|&x| op(x, y)).collect()));
    }
    if a.numel() == 1 && b.numel() == n {
        let x = a.data[0];
        return Ok(Tensor::from_parts(out_shape, b.data.iter().map(|&y| op(x, y)).collect()));
    }
    let rank = out_shape.len();
    if a.numel() == n && out_shape[rank - b.rank()..] == *b.shape {
        let nb = b.numel();
        let data = a.data.iter().enumerate().map(|(i, &x)| op(x, b.data[i % nb])).collect();
        return Ok(Tensor::from_parts(out_shape, data));
    }
    if b.numel() == n && out_shape[rank - a.rank()..] == *a.shape {
        let na = a.numel();
        let data = b.data.iter().enumerate().map(|(i, &y)| op(a.data[i % na], y)).collect();
        return Ok(Tensor::from_parts(out_shape, data));
    }
    let sa = aligned_strides(&a.shape, &out_shape);
    let sb = aligned_strides(&b.shape, &out_shape);
    let mut idx = vec![0usize; rank];
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let (mut oa, mut ob) = (0, 0);
        for ax in 0..rank {
            oa += idx[ax] * sa[ax];
            ob += idx[ax] * sb[ax];
        }
        data.push(op(a.data[oa], b.data[ob]));
        increment(&mut idx, &out_shape);
    }
    Ok(Tensor::from_parts(out_shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(Tensor::new(vec![2, 2], vec![1.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(Tensor::new(vec![2], vec![1.0, f64::NAN]), Err(Error::Numeric(_))));
        assert!(matches!(Tensor::new(vec![1], vec![f64::INFINITY]), Err(Error::Numeric(_))));
    }

    #[test]
    fn elementwise_examples() {
        let a = t(&[3], &[1.0, 2.0, 3.0]);
        let b = t(&[3], &[4.0, 5.0, 6.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[4.0, 10.0, 18.0]);
        assert_eq!(Tensor::zeros(&[2]).add(&Tensor::scalar(5.0)).unwrap().data(), &[5.0, 5.0]);
        assert!(a.mul(&Tensor::zeros_like(&a)).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(a.add(&t(&[2], &[1.0, 1.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_examples() {
        let m = t(&[2, 2], &[1.5, -2.0, 3.0, 0.25]);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(id.matmul(&m).unwrap(), m);
        let r = t(&[1, 2], &[1.0, 2.0]).matmul(&t(&[2, 1], &[3.0, 4.0])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        assert!(matches!(m.matmul(&t(&[3, 1], &[1.0; 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_matches_schoolbook_oracle() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a = Tensor::uniform(&[3, 3], -2.0, 2.0, &mut rng);
            let b = Tensor::uniform(&[3, 3], -2.0, 2.0, &mut rng);
            let c = a.matmul(&b).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for p in 0..3 {
                        s += a.data()[i * 3 + p] * b.data()[p * 3 + j];
                    }
                    assert!((c.data()[i * 3 + j] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn permute_and_sum_to_shape() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k, i, j] == x[i, j, k]
        assert_eq!(p.data()[6 + 3 + 2], x.data()[12 + 2 * 4 + 1]);
        let s = x.sum_to_shape(&[3, 1]).unwrap();
        let want: Vec<f64> = (0..3)
            .map(|j| (0..2).flat_map(|i| (0..4).map(move |k| (i * 12 + j * 4 + k) as f64)).sum())
            .collect();
        assert_eq!(s.data(), &want[..]);
        assert_eq!(x.sum_to_shape(&[1]).unwrap().data(), &[x.sum()]);
    }

    fn explicit_tile(small: &Tensor, shape: &[usize]) -> Tensor {
        // independent tiling by index arithmetic
        let rank = shape.len();
        let pad = rank - small.rank();
        Tensor::from_fn(shape, |flat| {
            let mut rem = flat;
            let mut off = 0;
            let st = strides(shape);
            let own = strides(small.shape());
            for ax in 0..rank {
                let i = rem / st[ax];
                rem %= st[ax];
                if ax >= pad && small.shape()[ax - pad] != 1 {
                    off += i * own[ax - pad];
                }
            }
            small.data()[off]
        })
    }

    proptest! {
        #[test]
        fn broadcast_equals_explicit_tile(
            b in 1usize..4, n in 1usize..5, e in 1usize..5,
            mode in 0usize..4, seed in 0u64..1000
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let big = Tensor::uniform(&[b, n, e], -2.0, 2.0, &mut rng);
            let small_shape: Vec<usize> = match mode {
                0 => vec![e],
                1 => vec![n, e],
                2 => vec![n, 1],
                _ => vec![b, 1, e],
            };
            let small = Tensor::uniform(&small_shape, -2.0, 2.0, &mut rng);
            let tiled = explicit_tile(&small, &[b, n, e]);
            let x = big.mul(&small).unwrap();
            let y = big.mul(&tiled).unwrap();
            prop_assert_eq!(x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            let x = small.sub(&big).unwrap();
            let y = tiled.sub(&big).unwrap();
            prop_assert_eq!(x, y);
        }
    }
}
