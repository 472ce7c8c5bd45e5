use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point scalar the tensor engine can compute with.
pub trait Element:
    Float + Sum + Default + Debug + Display + Send + Sync + 'static
{
    const DTYPE: DType;

    /// Additive value for masked attention scores.
    fn mask_value() -> Self;

    fn of_f64(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a @ b + beta * c` on strided row/column layouts.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn to_le_bytes(self, out: &mut Vec<u8>);
}

// The bounds are checked by the callers in `ops.rs`: every gemm call derives
// its strides from tensors whose lengths were validated against their shapes.
macro_rules! gemm_checked {
    ($f:path, $m:ident, $k:ident, $n:ident, $a:ident, $rsa:ident, $csa:ident, $b:ident, $rsb:ident, $csb:ident, $beta:ident, $c:ident) => {{
        assert!($c.len() >= $m * $n);
        if $m == 0 || $n == 0 {
            return;
        }
        if $k == 0 {
            $c[..$m * $n].iter_mut().for_each(|x| *x *= $beta);
            return;
        }
        let span = |r: isize, c: isize, rows: usize, cols: usize| {
            (rows as isize - 1) * r + (cols as isize - 1) * c + 1
        };
        assert!(span($rsa, $csa, $m, $k) as usize <= $a.len());
        assert!(span($rsb, $csb, $k, $n) as usize <= $b.len());
        unsafe {
            $f(
                $m,
                $k,
                $n,
                1.0,
                $a.as_ptr(),
                $rsa,
                $csa,
                $b.as_ptr(),
                $rsb,
                $csb,
                $beta,
                $c.as_mut_ptr(),
                $n as isize,
                1,
            );
        }
    }};
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn mask_value() -> Self {
        f64::NEG_INFINITY
    }

    fn of_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        gemm_checked!(matrixmultiply::dgemm, m, k, n, a, rsa, csa, b, rsb, csb, beta, c)
    }

    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&f64::to_le_bytes(self));
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn mask_value() -> Self {
        -1.0e30
    }

    fn of_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        gemm_checked!(matrixmultiply::sgemm, m, k, n, a, rsa, csa, b, rsb, csb, beta, c)
    }

    fn to_le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&f32::to_le_bytes(self));
    }
}
