//! Row-major matrices and the three GEMM shapes the networks need.

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    /// Stacks equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R], cols: usize) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "row length");
            data.extend_from_slice(r);
        }
        Self { rows: rows.len(), cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_vec(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Adds `bias` to every row.
    pub fn add_row_vector(&mut self, bias: &[f64]) {
        assert_eq!(bias.len(), self.cols);
        for row in self.data.chunks_exact_mut(self.cols) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
    }

    /// Accumulates column sums into `out`.
    pub fn add_column_sums_into(&self, out: &mut [f64]) {
        assert_eq!(out.len(), self.cols);
        for row in self.data.chunks_exact(self.cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every index reached through the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `x · wᵀ` where `w` is `out × in` row-major. Result is `rows × out`.
pub fn mul_transposed(x: &Matrix, w: &[f64], out: usize) -> Matrix {
    let inp = x.cols;
    assert_eq!(w.len(), out * inp, "weight shape");
    let mut c = Matrix::zeros(x.rows, out);
    gemm(x.rows, inp, out, &x.data, inp as isize, 1, w, 1, inp as isize, 0.0, &mut c.data);
    c
}

/// `g · w` where `w` is `out × in` row-major and `g` is `rows × out`. Result is `rows × in`.
pub fn mul(g: &Matrix, w: &[f64], inp: usize) -> Matrix {
    let out = g.cols;
    assert_eq!(w.len(), out * inp, "weight shape");
    let mut c = Matrix::zeros(g.rows, inp);
    gemm(g.rows, out, inp, &g.data, out as isize, 1, w, inp as isize, 1, 0.0, &mut c.data);
    c
}

/// `dst += gᵀ · x` with `g: rows × out`, `x: rows × in`, `dst: out × in`.
pub fn add_transposed_product(g: &Matrix, x: &Matrix, dst: &mut [f64]) {
    assert_eq!(g.rows, x.rows);
    let (out, inp) = (g.cols, x.cols);
    assert_eq!(dst.len(), out * inp);
    gemm(out, g.rows, inp, &g.data, 1, out as isize, &x.data, inp as isize, 1, 1.0, dst);
}
