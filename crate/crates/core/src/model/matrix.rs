//! Dense row-major matrices and strided views used by the gradient engine.

use super::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Copy of rows `start..end`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    pub fn view(&self) -> View<'_, T> {
        View {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols,
            cs: 1,
        }
    }

    /// Transposed view without copying.
    pub fn t(&self) -> View<'_, T> {
        View {
            data: &self.data,
            rows: self.cols,
            cols: self.rows,
            rs: 1,
            cs: self.cols,
        }
    }

    /// Columns `start..start + width` of every row.
    pub fn col_block(&self, start: usize, width: usize) -> View<'_, T> {
        assert!(start + width <= self.cols);
        View {
            data: &self.data[start.min(self.data.len())..],
            rows: self.rows,
            cols: width,
            rs: self.cols,
            cs: 1,
        }
    }

    pub fn view_mut(&mut self) -> ViewMut<'_, T> {
        let (rows, cols) = (self.rows, self.cols);
        ViewMut {
            data: &mut self.data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn col_block_mut(&mut self, start: usize, width: usize) -> ViewMut<'_, T> {
        assert!(start + width <= self.cols);
        let (rows, cols) = (self.rows, self.cols);
        let begin = start.min(self.data.len());
        ViewMut {
            data: &mut self.data[begin..],
            rows,
            cols: width,
            rs: cols,
            cs: 1,
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scaled_add_assign(&mut self, alpha: T, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape(), "scaled_add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element type conversion, e.g. for running an `f32` model in `f64`.
    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}

/// Read-only strided view. Strides are in elements and non-negative.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

pub struct ViewMut<'a, T> {
    data: &'a mut [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

impl<'a, T> View<'a, T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn t(self) -> View<'a, T> {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

impl<T> ViewMut<'_, T> {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `c = alpha * a b + beta * c`.
pub fn gemm<T: Scalar>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: &mut ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    assert_eq!(a.rows, c.rows, "gemm output rows mismatch");
    assert_eq!(b.cols, c.cols, "gemm output cols mismatch");
    assert!(extent(a.rows, a.cols, a.rs, a.cs) <= a.data.len());
    assert!(extent(b.rows, b.cols, b.rs, b.cs) <= b.data.len());
    assert!(extent(c.rows, c.cols, c.rs, c.cs) <= c.data.len());
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    if a.cols == 0 {
        // Empty inner dimension: the product is zero.
        for r in 0..c.rows {
            for col in 0..c.cols {
                let idx = r * c.rs + col * c.cs;
                c.data[idx] = beta * c.data[idx];
            }
        }
        return;
    }
    // SAFETY: extents were checked against each slice above, and `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr(),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

/// Allocating product `a b`.
pub fn matmul<T: Scalar>(a: View<'_, T>, b: View<'_, T>) -> Matrix<T> {
    let mut out = Matrix::zeros(a.rows, b.cols);
    gemm(T::one(), a, b, T::zero(), &mut out.view_mut());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
        })
    }

    #[test]
    fn matmul_matches_naive_including_transposes() {
        let a = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.5 - 2.0);
        let b = Matrix::from_fn(4, 2, |i, j| (i as f64 - j as f64) * 0.25);
        assert_eq!(matmul(a.view(), b.view()), naive(&a, &b));

        let bt = Matrix::from_fn(2, 4, |i, j| b.get(j, i));
        assert_eq!(matmul(a.view(), bt.t()), naive(&a, &b));
    }

    #[test]
    fn column_blocks_address_the_right_elements() {
        let a = Matrix::from_fn(2, 6, |i, j| (i * 10 + j) as f64);
        let eye = Matrix::from_fn(2, 2, |i, j| if i == j { 1.0 } else { 0.0 });
        let block = matmul(a.col_block(2, 2), eye.view());
        assert_eq!(block.data(), &[2.0, 3.0, 12.0, 13.0]);

        let mut out = Matrix::<f64>::zeros(2, 6);
        gemm(1.0, eye.view(), block.view(), 0.0, &mut out.col_block_mut(4, 2));
        assert_eq!(out.row(1), &[0.0, 0.0, 0.0, 0.0, 12.0, 13.0]);
    }

    #[test]
    fn empty_inner_dimension_gives_zero() {
        let a = Matrix::<f32>::zeros(2, 0);
        let b = Matrix::<f32>::zeros(0, 3);
        assert_eq!(matmul(a.view(), b.view()), Matrix::zeros(2, 3));
    }
}
