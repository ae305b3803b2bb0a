# Compiled tile loops for the banded kernel.  Semantics are defined by
# longmil._kernels_py; keep the two in lockstep.  Tile gemms go through
# cython_blas with the row-major/column-major swap (C = A B^T row-major
# is computed as C^T = B A^T column-major).

from libc.math cimport INFINITY, exp, sqrt
from libc.stdint cimport int32_t, int64_t

from cython cimport floating
from scipy.linalg.cython_blas cimport dgemm, sgemm


cdef char CN = 78  # 'N'
cdef char CT = 84  # 'T'


cdef void _gemm(char ta, char tb, int m, int n, int k, floating alpha,
                floating *a, int lda, floating *b, int ldb,
                floating beta, floating *c, int ldc) noexcept nogil:
    if floating is float:
        sgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


cdef inline void gemm_nt(floating *a, floating *b, floating *c,
                         int m, int n, int k, floating alpha, floating beta) noexcept nogil:
    # c[m,n] = alpha * a[m,k] @ b[n,k]^T + beta * c, all row-major tight
    _gemm(CT, CN, n, m, k, alpha, b, k, a, k, beta, c, n)


cdef inline void gemm_nn(floating *a, floating *b, floating *c,
                         int m, int n, int k, floating alpha, floating beta) noexcept nogil:
    # c[m,n] = alpha * a[m,k] @ b[k,n] + beta * c
    _gemm(CN, CN, n, m, k, alpha, b, n, a, k, beta, c, n)


cdef inline void gemm_tn(floating *a, floating *b, floating *c,
                         int m, int n, int k, floating alpha, floating beta) noexcept nogil:
    # c[m,n] = alpha * a[k,m]^T @ b[k,n] + beta * c
    _gemm(CN, CT, n, m, k, alpha, b, n, a, m, beta, c, n)


def forward_tiles(floating[:, ::1] qs, floating[:, ::1] ks, floating[:, ::1] vs,
                  int32_t[:, ::1] pos_s, int64_t[::1] starts,
                  int64_t[::1] pair_ptr, int64_t[::1] pair_kc,
                  double band, double scale, double rho,
                  floating[:, ::1] out, floating[::1] m, floating[::1] l,
                  floating[:, ::1] s_buf, floating[:, ::1] t_buf):
    cdef int nc = starts.shape[0] - 1
    cdef int d = qs.shape[1]
    cdef int dv = vs.shape[1]
    cdef int qc, kc, q0, q1, k0, ck, mq, r, c, j
    cdef int64_t idx
    cdef int64_t dx, dy, dist2
    cdef double band2 = band * band
    cdef double val, rowmax, mn, al, lsum, p
    cdef floating *s = &s_buf[0, 0]
    cdef floating fscale = <floating> scale

    with nogil:
        for qc in range(nc):
            q0 = <int> starts[qc]
            q1 = <int> starts[qc + 1]
            mq = q1 - q0
            for idx in range(pair_ptr[qc], pair_ptr[qc + 1]):
                kc = <int> pair_kc[idx]
                k0 = <int> starts[kc]
                ck = <int> (starts[kc + 1] - starts[kc])
                gemm_nt(&qs[q0, 0], &ks[k0, 0], s, mq, ck, d, fscale, <floating> 0)
                for r in range(mq):
                    rowmax = -INFINITY
                    for c in range(ck):
                        dx = pos_s[q0 + r, 0] - pos_s[k0 + c, 0]
                        dy = pos_s[q0 + r, 1] - pos_s[k0 + c, 1]
                        dist2 = dx * dx + dy * dy
                        if dist2 > band2:
                            s[r * ck + c] = -INFINITY
                        else:
                            if rho != 0.0:
                                s[r * ck + c] -= <floating> (rho * sqrt(<double> dist2))
                            if s[r * ck + c] > rowmax:
                                rowmax = s[r * ck + c]
                    mn = m[q0 + r]
                    if rowmax > mn:
                        mn = rowmax
                    if mn == -INFINITY:
                        for c in range(ck):
                            s[r * ck + c] = 0
                        continue
                    al = exp(<double> m[q0 + r] - mn)
                    lsum = 0
                    for c in range(ck):
                        val = <double> s[r * ck + c]
                        p = exp(val - mn)
                        s[r * ck + c] = <floating> p
                        lsum += p
                    l[q0 + r] = <floating> (al * <double> l[q0 + r] + lsum)
                    m[q0 + r] = <floating> mn
                    if al != 1.0:
                        for j in range(dv):
                            out[q0 + r, j] *= <floating> al
                gemm_nn(s, &vs[k0, 0], &out[q0, 0], mq, dv, ck, <floating> 1, <floating> 1)


def backward_tiles(floating[:, ::1] qs, floating[:, ::1] ks, floating[:, ::1] vs,
                   int32_t[:, ::1] pos_s, int64_t[::1] starts,
                   int64_t[::1] pair_ptr, int64_t[::1] pair_kc,
                   double band, double scale, double rho,
                   floating[:, ::1] dout, floating[::1] m, floating[::1] l,
                   floating[::1] delta,
                   floating[:, ::1] dq, floating[:, ::1] dk, floating[:, ::1] dv_,
                   floating[:, ::1] s_buf, floating[:, ::1] t_buf):
    cdef int nc = starts.shape[0] - 1
    cdef int d = qs.shape[1]
    cdef int dv = vs.shape[1]
    cdef int qc, kc, q0, q1, k0, ck, mq, r, c
    cdef int64_t idx
    cdef int64_t dx, dy, dist2
    cdef double band2 = band * band
    cdef double val, invl
    cdef floating *s = &s_buf[0, 0]
    cdef floating *t = &t_buf[0, 0]
    cdef floating fscale = <floating> scale

    with nogil:
        for qc in range(nc):
            q0 = <int> starts[qc]
            q1 = <int> starts[qc + 1]
            mq = q1 - q0
            for idx in range(pair_ptr[qc], pair_ptr[qc + 1]):
                kc = <int> pair_kc[idx]
                k0 = <int> starts[kc]
                ck = <int> (starts[kc + 1] - starts[kc])
                gemm_nt(&qs[q0, 0], &ks[k0, 0], s, mq, ck, d, fscale, <floating> 0)
                for r in range(mq):
                    invl = 1.0 / <double> l[q0 + r]
                    for c in range(ck):
                        dx = pos_s[q0 + r, 0] - pos_s[k0 + c, 0]
                        dy = pos_s[q0 + r, 1] - pos_s[k0 + c, 1]
                        dist2 = dx * dx + dy * dy
                        if dist2 > band2:
                            s[r * ck + c] = 0
                        else:
                            val = <double> s[r * ck + c]
                            if rho != 0.0:
                                val -= rho * sqrt(<double> dist2)
                            s[r * ck + c] = <floating> (exp(val - <double> m[q0 + r]) * invl)
                # dv += p^T dout ; dp = dout v^T ; ds = p (dp - delta) in place
                gemm_tn(s, &dout[q0, 0], &dv_[k0, 0], ck, dv, mq, <floating> 1, <floating> 1)
                gemm_nt(&dout[q0, 0], &vs[k0, 0], t, mq, ck, dv, <floating> 1, <floating> 0)
                for r in range(mq):
                    for c in range(ck):
                        s[r * ck + c] *= t[r * ck + c] - delta[q0 + r]
                gemm_nn(s, &ks[k0, 0], &dq[q0, 0], mq, d, ck, fscale, <floating> 1)
                gemm_tn(s, &qs[q0, 0], &dk[k0, 0], ck, d, mq, fscale, <floating> 1)
