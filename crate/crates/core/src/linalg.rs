//! Minimal row-major dense matrix used by the models, clustering and votes.
//!
//! Every reduction runs in a fixed order per output element, so results do
//! not depend on how many rayon workers execute the outer loops.

use rayon::prelude::*;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Rows picked by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Square submatrix `self[idx, idx]`.
    pub fn submatrix(&self, idx: &[usize]) -> Self {
        let n = idx.len();
        let mut out = Self::zeros(n, n);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out.data[a * n + b] = self.get(i, j);
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn add_scaled(&mut self, other: &Self, s: T) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (x, &y) in self.data.iter_mut().zip(&other.data) {
            *x += s * y;
        }
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = T::zero());
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::c(x.to_f64_lossy())).collect(),
        }
    }

    /// `self · weightᵀ + bias` where `weight` is `out × in` (one row per output unit).
    pub fn linear(&self, weight: &Mat<T>, bias: &[T]) -> Mat<T> {
        assert_eq!(self.cols, weight.cols, "linear: input width mismatch");
        assert_eq!(bias.len(), weight.rows, "linear: bias length mismatch");
        let out_dim = weight.rows;
        let mut out = Mat::zeros(self.rows, out_dim);
        out.data
            .par_chunks_mut(out_dim.max(1))
            .zip(self.data.par_chunks(self.cols.max(1)))
            .for_each(|(o, x)| {
                for (k, ov) in o.iter_mut().enumerate() {
                    *ov = crate::scalar::dot(x, weight.row(k)) + bias[k];
                }
            });
        out
    }

    /// Given `dY` for `Y = X·Wᵀ + b`, returns `dX = dY·W`.
    pub fn linear_backward_input(grad_out: &Mat<T>, weight: &Mat<T>) -> Mat<T> {
        assert_eq!(grad_out.cols, weight.rows);
        let in_dim = weight.cols;
        let mut dx = Mat::zeros(grad_out.rows, in_dim);
        dx.data
            .par_chunks_mut(in_dim.max(1))
            .zip(grad_out.data.par_chunks(grad_out.cols.max(1)))
            .for_each(|(dxr, g)| {
                for (o, &go) in g.iter().enumerate() {
                    if go == T::zero() {
                        continue;
                    }
                    for (d, &w) in dxr.iter_mut().zip(weight.row(o)) {
                        *d += go * w;
                    }
                }
            });
        dx
    }

    /// Given `dY` and the layer input `X`, accumulates `dW += dYᵀ·X` and `db += Σ dY`.
    pub fn linear_backward_params(
        grad_out: &Mat<T>,
        input: &Mat<T>,
        grad_w: &mut Mat<T>,
        grad_b: &mut [T],
    ) {
        assert_eq!(grad_out.rows, input.rows);
        assert_eq!((grad_w.rows, grad_w.cols), (grad_out.cols, input.cols));
        let in_dim = input.cols;
        let out_cols = grad_out.cols;
        grad_w
            .data
            .par_chunks_mut(in_dim.max(1))
            .zip(grad_b.par_iter_mut())
            .enumerate()
            .for_each(|(o, (wrow, b))| {
                for r in 0..grad_out.rows {
                    let go = grad_out.data[r * out_cols + o];
                    *b += go;
                    if go == T::zero() {
                        continue;
                    }
                    for (w, &x) in wrow.iter_mut().zip(input.row(r)) {
                        *w += go * x;
                    }
                }
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_and_backward_agree_with_hand_computation() {
        let x = Mat::from_rows(&[vec![1.0_f64, 2.0], vec![-1.0, 0.5]]);
        let w = Mat::from_rows(&[vec![0.5, -1.0], vec![2.0, 1.0], vec![0.0, 3.0]]);
        let b = [0.1, 0.2, 0.3];
        let y = x.linear(&w, &b);
        assert_eq!(y.row(0), &[0.5 - 2.0 + 0.1, 2.0 + 2.0 + 0.2, 6.0 + 0.3]);

        let g = Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 1.0]]);
        let dx = Mat::linear_backward_input(&g, &w);
        assert_eq!(dx.row(1), &[2.0, 4.0]);
        let mut gw = Mat::zeros(3, 2);
        let mut gb = vec![0.0; 3];
        Mat::linear_backward_params(&g, &x, &mut gw, &mut gb);
        assert_eq!(gw.row(0), &[1.0, 2.0]);
        assert_eq!(gw.row(2), &[-1.0, 0.5]);
        assert_eq!(gb, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn submatrix_picks_index_pairs() {
        let m = Mat::from_vec(3, 3, (0..9).map(f64::from).collect());
        let s = m.submatrix(&[2, 0]);
        assert_eq!(s.as_slice(), &[8.0, 6.0, 2.0, 0.0]);
    }
}
