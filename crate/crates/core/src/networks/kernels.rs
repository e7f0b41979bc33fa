//! Strided GEMM and elementwise helpers over column-major buffers.

/// Read-only matrix view over a slice with explicit row/column strides.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> View<'a> {
    pub fn col_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            rs: 1,
            cs: rows as isize,
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c = alpha * a * b + beta * c` with `c` column-major `a.rows x b.cols`.
pub(crate) fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(c.len(), m * n, "output buffer has wrong size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: the views and `c` cover exactly the index ranges implied by their
    // shapes and strides (checked by the asserts above and in `View`).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
}

/// Adds `bias` to every column of the column-major `rows x cols` buffer.
pub(crate) fn add_bias(buf: &mut [f64], bias: &[f64]) {
    let rows = bias.len();
    for col in buf.chunks_exact_mut(rows) {
        for (v, b) in col.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Writes the row sums of a column-major buffer with `out.len()` rows.
pub(crate) fn row_sums(buf: &[f64], out: &mut [f64]) {
    let rows = out.len();
    out.fill(0.0);
    for col in buf.chunks_exact(rows) {
        for (o, v) in out.iter_mut().zip(col) {
            *o += v;
        }
    }
}

pub(crate) fn tanh_in_place(buf: &mut [f64]) {
    for v in buf.iter_mut() {
        *v = v.tanh();
    }
}

/// `grad *= 1 - act^2` where `act = tanh(z)`.
pub(crate) fn tanh_backward(grad: &mut [f64], act: &[f64]) {
    for (g, a) in grad.iter_mut().zip(act) {
        *g *= 1.0 - a * a;
    }
}
