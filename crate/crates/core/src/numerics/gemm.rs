use super::Real;

/// `c += op(a) * op(b)` (or `c = ...` when `accumulate` is false) for
/// row-major buffers, where `op(a)` is `[m, k]` and `op(b)` is `[k, n]`.
///
/// With `trans_a` the buffer `a` holds `[k, m]`; with `trans_b`, `b` holds `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    c: &mut [F],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs has {} values, expected {m}x{k}", a.len());
    assert_eq!(b.len(), k * n, "gemm: rhs has {} values, expected {k}x{n}", b.len());
    assert_eq!(c.len(), m * n, "gemm: out has {} values, expected {m}x{n}", c.len());
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::ONE } else { F::ZERO };
    // SAFETY: the asserts above pin every buffer to the extent implied by the strides.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::ONE,
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
