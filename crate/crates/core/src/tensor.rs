//! Dense row-major `f64` tensors.
//!
//! Layouts used across the crate are channels-last: images are `[B, H, W, C]`,
//! feature grids are `[B, N, D]` with `N = G * G`, and token streams are
//! `[B, T, E]`. A `[B, G, G, D]` grid and a `[B, N, D]` grid share the same
//! memory layout, so reshaping between them is free.

use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value])
    }

    /// Uniform samples in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self::new(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing (channel) dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        let last = self.last_dim();
        if last == 0 {
            0
        } else {
            self.data.len() / last
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch in zip_map");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row `r` of the `[rows, last_dim]` view.
    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    /// Selects batch item `b` from a tensor with a leading batch axis.
    pub fn batch_item(&self, b: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor::new(
            self.shape[1..].to_vec(),
            self.data[b * inner..(b + 1) * inner].to_vec(),
        )
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "cannot stack an empty list");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(shape, data)
    }
}

/// `out[r, m] += sum_k a[r, k] * b[k, m]` for row-major slices.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, k: usize, m: usize) {
    for r in 0..rows {
        let arow = &a[r * k..(r + 1) * k];
        let orow = &mut out[r * m..(r + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[r, m] += sum_k a[r, k] * b[m, k]` (right operand transposed).
pub(crate) fn matmul_nt_into(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, k: usize, m: usize) {
    for r in 0..rows {
        let arow = &a[r * k..(r + 1) * k];
        for mm in 0..m {
            let brow = &b[mm * k..(mm + 1) * k];
            out[r * m + mm] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k, m] += sum_r a[r, k] * b[r, m]` (left operand transposed).
pub(crate) fn matmul_tn_into(a: &[f64], b: &[f64], out: &mut [f64], rows: usize, k: usize, m: usize) {
    for r in 0..rows {
        let arow = &a[r * k..(r + 1) * k];
        let brow = &b[r * m..(r + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut out = [0.0; 4];
        matmul_into(&a, &b, &mut out, 2, 3, 2);
        assert_eq!(out, [4.0, 5.0, 10.0, 11.0]);

        // b transposed is 2x3
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut out2 = [0.0; 4];
        matmul_nt_into(&a, &bt, &mut out2, 2, 3, 2);
        assert_eq!(out, out2);

        // a^T (3x2) times c (2x2)
        let c = [1.0, 2.0, 3.0, 4.0];
        let mut out3 = [0.0; 6];
        matmul_tn_into(&a, &c, &mut out3, 2, 3, 2);
        assert_eq!(out3, [13.0, 18.0, 17.0, 24.0, 21.0, 30.0]);
    }

    #[test]
    fn stack_and_batch_item_are_inverse() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let s = Tensor::stack(&[a.clone(), b.clone()]);
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.batch_item(0), a);
        assert_eq!(s.batch_item(1), b);
    }
}
