//! Dense row-major f64 tensors and the pure math the tape records.
//!
//! Tensors are immutable values: every operation allocates its result. Matmul
//! supports leading batch axes (with rank-2 broadcast on either side); `add`
//! and `mul` broadcast a trailing-suffix shape over leading axes. Anything
//! fancier is out of scope.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("expected {} elements, got {}", n, data.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape { shape, reason: "zero dimension".into() });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Seeded Gaussian fill with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and positive");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        Tensor { shape: shape.to_vec(), data }
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
    pub fn scalar_value(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// 2-D accessor; panics on rank != 2 misuse in internal code paths.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise addition with trailing-suffix broadcast of `other`.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, "add", |a, b| a + b)
    }

    /// Elementwise product with trailing-suffix broadcast of `other`.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_broadcast(other, "multiply", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    fn zip_broadcast(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor { shape: self.shape.clone(), data });
        }
        if is_suffix(&other.shape, &self.shape) {
            let m = other.numel();
            let data = self
                .data
                .iter()
                .enumerate()
                .map(|(i, &a)| f(a, other.data[i % m]))
                .collect();
            return Ok(Tensor { shape: self.shape.clone(), data });
        }
        Err(Error::ShapeMismatch { left: self.shape.clone(), right: other.shape.clone(), op })
    }

    /// Sum over the leading axes so the result has `suffix` shape.
    /// The reduction partner of suffix broadcast.
    pub fn sum_to_suffix(&self, suffix: &[usize]) -> Result<Tensor> {
        if !is_suffix(suffix, &self.shape) {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: suffix.to_vec(),
                op: "sum_to_suffix",
            });
        }
        let m: usize = suffix.iter().product();
        let mut out = vec![0.0; m];
        for (i, &v) in self.data.iter().enumerate() {
            out[i % m] += v;
        }
        Tensor::new(suffix.to_vec(), out)
    }

    /// Matrix product with leading batch axes. Both operands may carry equal
    /// leading axes, or either side may be rank 2 and is then broadcast.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self, other);
        if a.rank() < 2 || b.rank() < 2 {
            return Err(Error::ShapeMismatch {
                left: a.shape.clone(),
                right: b.shape.clone(),
                op: "matmul",
            });
        }
        let (am, ak) = (a.shape[a.rank() - 2], a.shape[a.rank() - 1]);
        let (bk, bn) = (b.shape[b.rank() - 2], b.shape[b.rank() - 1]);
        let a_lead = &a.shape[..a.rank() - 2];
        let b_lead = &b.shape[..b.rank() - 2];
        let lead_ok = a_lead == b_lead || a_lead.is_empty() || b_lead.is_empty();
        if ak != bk || !lead_ok {
            return Err(Error::ShapeMismatch {
                left: a.shape.clone(),
                right: b.shape.clone(),
                op: "matmul",
            });
        }
        let lead: Vec<usize> =
            if a_lead.is_empty() { b_lead.to_vec() } else { a_lead.to_vec() };
        let batches: usize = lead.iter().product();
        let mut out_shape = lead.clone();
        out_shape.push(am);
        out_shape.push(bn);
        let mut out = vec![0.0; batches * am * bn];
        let (m, k, n) = (am, ak, bn);
        for batch in 0..batches {
            let ao = if a_lead.is_empty() { 0 } else { batch * m * k };
            let bo = if b_lead.is_empty() { 0 } else { batch * k * n };
            let co = batch * m * n;
            for i in 0..m {
                for t in 0..k {
                    let aval = a.data[ao + i * k + t];
                    if aval == 0.0 {
                        continue;
                    }
                    let brow = bo + t * n;
                    let crow = co + i * n;
                    for j in 0..n {
                        out[crow + j] += aval * b.data[brow + j];
                    }
                }
            }
        }
        Tensor::new(out_shape, out)
    }

    /// Axis permutation; `perm` must be a permutation of 0..rank.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Contract(format!(
                "invalid axis permutation {:?} for rank {}",
                perm, r
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = self.strides();
        let out_strides = strides_of(&out_shape);
        let mut out = vec![0.0; self.numel()];
        let mut idx = vec![0usize; r];
        for &v in &self.data {
            let mut off = 0;
            for (axis, &i) in idx.iter().enumerate() {
                // position of input axis `axis` in the output ordering
                let out_axis = perm.iter().position(|&p| p == axis).unwrap();
                off += i * out_strides[out_axis];
            }
            out[off] = v;
            // advance row-major multi-index
            for axis in (0..r).rev() {
                idx[axis] += 1;
                if idx[axis] < self.shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
            let _ = in_strides;
        }
        Tensor::new(out_shape, out)
    }

    /// Plain 2-D transpose.
    pub fn t2(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::Contract(format!("t2 requires rank 2, got {:?}", self.shape)));
        }
        self.permute(&[1, 0])
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let r = first.rank();
        if axis >= r {
            return Err(Error::Contract(format!("concat axis {axis} out of rank {r}")));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != r
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return Err(Error::ShapeMismatch {
                    left: first.shape.clone(),
                    right: p.shape.clone(),
                    op: "concat",
                });
            }
            axis_total += p.shape[axis];
        }
        let mut out_shape = first.shape.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for p in parts {
                let rows = p.shape[axis];
                let start = o * rows * inner;
                out.extend_from_slice(&p.data[start..start + rows * inner]);
            }
        }
        Tensor::new(out_shape, out)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let r = self.rank();
        if axis >= r {
            return Err(Error::Contract(format!("slice axis {axis} out of rank {r}")));
        }
        if start + len > self.shape[axis] || len == 0 {
            return Err(Error::Range(format!(
                "slice [{start}, {}) exceeds axis length {}",
                start + len,
                self.shape[axis]
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let axis_len = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        Tensor::new(out_shape, out)
    }

    /// Entrywise l1 norm of the flattened tensor.
    pub fn norm_l1(&self) -> f64 {
        crate::numeric::pairwise_sum_by(&self.data, |v| v.abs())
    }

    /// Entrywise l2 (Frobenius) norm of the flattened tensor.
    pub fn norm_l2(&self) -> f64 {
        crate::numeric::pairwise_sum_by(&self.data, |v| v * v).sqrt()
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// True when `suffix` equals the trailing dimensions of `shape`.
pub fn is_suffix(suffix: &[usize], shape: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(i2.matmul(&a).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_selector_row() {
        let sel = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let v = Tensor::new(vec![2, 1], vec![7.5, -2.0]).unwrap();
        let out = sel.matmul(&v).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[7.5]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        // independent oracle: plain i-j-t dot products
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += a.at2(i, t) * b.at2(t, j);
                }
                assert!((c.at2(i, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn batched_matmul_matches_per_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[2, 4, 5], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 5]);
        for batch in 0..2 {
            let ab = a.slice(0, batch, 1).unwrap().reshape(&[3, 4]).unwrap();
            let bb = b.slice(0, batch, 1).unwrap().reshape(&[4, 5]).unwrap();
            let cb = ab.matmul(&bb).unwrap();
            let got = c.slice(0, batch, 1).unwrap().reshape(&[3, 5]).unwrap();
            for (x, y) in got.data().iter().zip(cb.data()) {
                assert!((x - y).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn rank2_broadcast_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = Tensor::randn(&[2, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 2, 4], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 4]);
        let b0 = b.slice(0, 1, 1).unwrap().reshape(&[2, 4]).unwrap();
        let expect = a.matmul(&b0).unwrap();
        let got = c.slice(0, 1, 1).unwrap().reshape(&[2, 4]).unwrap();
        assert_eq!(got.data(), expect.data());
    }

    #[test]
    fn suffix_broadcast_add() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3], vec![10.0, 20.0, 30.0]).unwrap();
        let y = x.add(&b).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let back = y.sum_to_suffix(&[3]).unwrap();
        assert_eq!(back.data(), &[25.0, 47.0, 69.0]);
    }

    #[test]
    fn permute_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.data(), x.data());
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 6], 1.0, &mut rng);
        let a = x.slice(1, 0, 2).unwrap();
        let b = x.slice(1, 2, 4).unwrap();
        let back = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    }
}
