//! Dense tensors of rank 1 to 4, stored row-major.

mod container;

pub use container::{read_tensor, read_tensor_from, tensor_bytes, write_tensor, write_tensor_to};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAX_RANK: usize = 4;

/// Dense row-major array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::dim(format!(
            "rank must be 1..={MAX_RANK}, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::dim(format!("zero extent in shape {shape:?}")));
    }
    Ok(())
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Left-pads a shape with ones to rank 4.
pub fn dims4(shape: &[usize]) -> [usize; 4] {
    let mut out = [1; 4];
    let off = 4 - shape.len();
    out[off..].copy_from_slice(shape);
    out
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: &[usize], data: Vec<F>) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, F::one())
    }

    pub fn scalar(value: F) -> Self {
        Self::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        check_shape(shape).expect("valid shape");
        Self {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| F::from_f64_lossy(v)).collect())
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| F::from_f64_lossy(rng.random_range(lo..hi)))
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            F::from_f64_lossy(z * std)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dims4(&self) -> [usize; 4] {
        dims4(&self.shape)
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Enables or disables gradient tracking; enabling allocates a zeroed buffer.
    pub fn set_requires_grad(&mut self, on: bool) {
        match (on, self.grad.is_some()) {
            (true, false) => self.grad = Some(vec![F::zero(); self.data.len()]),
            (false, true) => self.grad = None,
            _ => {}
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [F]> {
        self.grad.as_deref_mut()
    }

    /// Splits into value and gradient views for optimizer updates.
    pub fn value_and_grad_mut(&mut self) -> (&mut [F], Option<&mut [F]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[F]) -> Result<()> {
        let g = self
            .grad
            .as_mut()
            .ok_or_else(|| Error::config("tensor does not track gradients"))?;
        if g.len() != delta.len() {
            return Err(Error::dim("gradient length mismatch"));
        }
        g.iter_mut().zip(delta).for_each(|(a, &b)| *a += b);
        Ok(())
    }

    /// Value-only copy, dropping any gradient buffer.
    pub fn detached(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != self.numel() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            grad: None,
        })
    }

    pub fn map(&self, mut f: impl FnMut(F) -> F) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn scale(&self, s: F) -> Self {
        self.map(|v| v * s)
    }

    pub fn zip_with(&self, other: &Self, mut f: impl FnMut(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            grad: None,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(F::zero(), F::max)
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| G::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
            grad: None,
        }
    }

    /// Element at `(n, c, h, w)` of a rank-4 tensor.
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> F {
        let [_, cc, hh, ww] = self.dims4();
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    /// Contiguous slab `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::dim(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let extent = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Self::new(&shape, data)
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::dim(format!("concat axis {axis} >= rank {rank}")));
        }
        for p in parts {
            let same = p.rank() == rank
                && (0..rank).all(|d| d == axis || p.shape[d] == first.shape[d]);
            if !same {
                return Err(Error::dim(format!(
                    "concat extent mismatch: {:?} vs {:?} on axis {axis}",
                    first.shape, p.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Self::new(&shape, data)
    }

    /// Mirrors a rank-4 tensor along its last axis.
    pub fn flip_w(&self) -> Self {
        let [_, _, _, w] = self.dims4();
        let mut out = self.detached();
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        out
    }

    /// Half-pixel bilinear resize of the last two axes of a rank-4 tensor.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Self> {
        let [n, c, h, w] = self.dims4();
        if self.rank() != 4 || out_h == 0 || out_w == 0 {
            return Err(Error::dim(format!(
                "cannot resize {:?} to {out_h}x{out_w}",
                self.shape
            )));
        }
        if (h, w) == (out_h, out_w) {
            return Ok(self.detached());
        }
        let ty = kernels::lerp_table(h, out_h);
        let tx = kernels::lerp_table(w, out_w);
        let data = kernels::bilinear_forward(&self.data, n * c, (h, w), (out_h, out_w), &ty, &tx);
        Self::new(&[n, c, out_h, out_w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[1, 1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn grad_buffer_follows_flag() {
        let mut t = Tensor::<f64>::ones(&[2, 3]);
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        assert_eq!(t.grad().unwrap().len(), 6);
        t.accumulate_grad(&[1.0; 6]).unwrap();
        t.accumulate_grad(&[1.0; 6]).unwrap();
        assert!(t.grad().unwrap().iter().all(|&g| g == 2.0));
        t.zero_grad();
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn narrow_concat_inverse() {
        let t = Tensor::<f32>::from_fn(&[2, 5, 3], |i| i as f32);
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 3).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), t);
    }

    #[test]
    fn flip_w_reverses_rows() {
        let t = Tensor::<f32>::from_fn(&[1, 1, 2, 3], |i| i as f32);
        assert_eq!(t.flip_w().data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
    }
}
