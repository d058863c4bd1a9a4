use crate::parallel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// Rows handed to one rayon task; below this the product runs in one call.
const ROWS_PER_TASK: usize = 64;
/// Products smaller than this many multiply-adds are not split at all.
const PARALLEL_MIN_WORK: usize = 1 << 20;

/// `C = A·B + beta·C` where `A` is logically `m×k` and `B` is `k×n`.
///
/// `a_t`/`b_t` say whether the operand is stored transposed (`k×m` / `n×k`).
/// All buffers are dense row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: Transpose,
    b: &[f64],
    b_t: Transpose,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k, "gemm: A has wrong length");
    assert_eq!(b.len(), k * n, "gemm: B has wrong length");
    assert_eq!(c.len(), m * n, "gemm: C has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = match a_t {
        Transpose::No => (k as isize, 1),
        Transpose::Yes => (1, m as isize),
    };
    let (rsb, csb) = match b_t {
        Transpose::No => (n as isize, 1),
        Transpose::Yes => (1, k as isize),
    };

    if parallel::threads() > 1 && m * k * n >= PARALLEL_MIN_WORK && m > ROWS_PER_TASK {
        parallel::for_each_chunk_mut(c, ROWS_PER_TASK * n, |ci, c_chunk| {
            let row0 = ci * ROWS_PER_TASK;
            let rows = c_chunk.len() / n;
            let a_off = row0 as isize * rsa;
            // SAFETY: row0 + rows <= m, so every A element addressed through
            // (a_off + i*rsa + l*csa) stays inside `a`; C chunk is exclusive.
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a.as_ptr().offset(a_off),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    beta,
                    c_chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
        return;
    }

    // SAFETY: lengths were checked above and the strides describe exactly
    // the row-major (optionally transposed) layouts of `a`, `b` and `c`.
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
