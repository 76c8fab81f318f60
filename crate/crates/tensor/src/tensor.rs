use crate::real::Real;
use crate::TensorError;

/// Dense row-major array. The product of `shape` always equals `data.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R: Real> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![R::ZERO; numel],
        }
    }

    pub fn full(shape: &[usize], value: R) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: R) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Identity matrix of side `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = R::ONE;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// Number of rows when viewed as a 2-D array (rank must be 2).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn scalar_value(&self) -> R {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn map<S: Real>(&self, f: impl Fn(R) -> S) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        self.map(|v| S::from_f64(v.to_f64()))
    }

    pub fn max_abs_diff(&self, other: &Tensor<R>) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Plain 2-D matrix product used both by the tape and by test oracles.
pub fn matmul_raw<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for v in out.iter_mut() {
        *v = R::ZERO;
    }
    // i-k-j order keeps the inner loop contiguous in both b and out.
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// C = A · Bᵀ with A: m×k, B: n×k.
pub fn matmul_nt_raw<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = R::ZERO;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] = s;
        }
    }
}

/// C = Aᵀ · B with A: k×m, B: k×n.
pub fn matmul_tn_raw<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, out: &mut [R]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for v in out.iter_mut() {
        *v = R::ZERO;
    }
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += api * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_is_enforced() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains('5'), "{msg}");
    }

    #[test]
    fn eye_is_identity_under_matmul() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let i3 = Tensor::<f64>::eye(3);
        let mut out = vec![0.0; 6];
        matmul_raw(&a, i3.data(), 2, 3, 3, &mut out);
        assert_eq!(out, a);
    }
}
