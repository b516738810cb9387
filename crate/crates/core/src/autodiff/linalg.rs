use crate::scalar::Scalar;

/// Layout of one matrix operand inside a flat buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef {
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl MatRef {
    pub fn new(rows: usize, cols: usize, transposed: bool) -> Self {
        Self {
            rows,
            cols,
            transposed,
        }
    }

    /// Logical (rows, cols) after the optional transpose.
    pub fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c (+)= op(a) * op(b)` where `c` is dense row-major `m x n`.
pub(crate) fn gemm<T: Scalar>(a: &[T], la: MatRef, b: &[T], lb: MatRef, c: &mut [T], accumulate: bool) {
    let (m, k) = la.logical();
    let (k2, n) = lb.logical();
    assert_eq!(k, k2, "inner dimensions differ");
    assert!(a.len() >= la.rows * la.cols);
    assert!(b.len() >= lb.rows * lb.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    let (rsa, csa) = la.strides();
    let (rsb, csb) = lb.strides();
    // SAFETY: bounds asserted above; `c` is a distinct mutable slice.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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
