"""Pure-python tile loops for the banded kernel.

Reference implementations of the chunked online-softmax forward and the
recompute backward.  Semantics must match longmil._kernels exactly; the
compiled module is an optimization, not a different algorithm.  All
arrays arrive in plan order (already permuted) and are written in place.
"""

from __future__ import annotations

import numpy as np

__all__ = ["forward_tiles", "backward_tiles"]


def _tile_scores(qs, ks, pos_s, q0, q1, k0, k1, band2, scale, rho):
    # scaled scores with the exact in-band mask and optional distance bias
    s = (qs[q0:q1] @ ks[k0:k1].T) * scale
    dx = pos_s[q0:q1, 0:1].astype(np.int64) - pos_s[k0:k1, 0][None, :]
    dy = pos_s[q0:q1, 1:2].astype(np.int64) - pos_s[k0:k1, 1][None, :]
    dist2 = dx * dx + dy * dy
    if rho != 0.0:
        s -= rho * np.sqrt(dist2.astype(s.dtype))
    s[dist2 > band2] = -np.inf
    return s


def forward_tiles(qs, ks, vs, pos_s, starts, pair_ptr, pair_kc, band, scale, rho,
                  out, m, l, s_buf, t_buf):
    """Accumulate unnormalized output plus running (m, l) per query row.

    out must start zeroed, m at -inf, l at zero.  s_buf/t_buf are scratch
    the compiled backend uses; this path lets numpy allocate tile
    temporaries of the same size instead.
    """
    del s_buf, t_buf
    band2 = band * band
    nc = len(starts) - 1
    for qc in range(nc):
        q0, q1 = starts[qc], starts[qc + 1]
        m_q = m[q0:q1]
        l_q = l[q0:q1]
        acc = out[q0:q1]
        for idx in range(pair_ptr[qc], pair_ptr[qc + 1]):
            kc = pair_kc[idx]
            k0, k1 = starts[kc], starts[kc + 1]
            s = _tile_scores(qs, ks, pos_s, q0, q1, k0, k1, band2, scale, rho)
            m_new = np.maximum(m_q, s.max(axis=1))
            valid = m_new > -np.inf
            with np.errstate(invalid="ignore"):
                # -inf minus -inf inside the masked-off rows is discarded
                alpha = np.where(valid, np.exp(np.minimum(m_q - m_new, 0.0)), 1.0)
                p = np.exp(np.minimum(s - m_new[:, None], 0.0))
            p[~valid] = 0.0
            acc *= alpha[:, None]
            acc += p @ vs[k0:k1]
            l_q *= alpha
            l_q += p.sum(axis=1)
            m_q[:] = m_new


def backward_tiles(qs, ks, vs, pos_s, starts, pair_ptr, pair_kc, band, scale, rho,
                   dout, m, l, delta, dq, dk, dv, s_buf, t_buf):
    """Recompute each kept tile and accumulate dq, dk, dv in place.

    delta is rowsum(dout * out) for the normalized output.  m and l are
    the finals from the forward pass, so p = exp(s - m) / l reproduces
    the normalized attention weights tile by tile.
    """
    del s_buf, t_buf
    band2 = band * band
    nc = len(starts) - 1
    inv_l = 1.0 / l
    for qc in range(nc):
        q0, q1 = starts[qc], starts[qc + 1]
        d_q = delta[q0:q1]
        for idx in range(pair_ptr[qc], pair_ptr[qc + 1]):
            kc = pair_kc[idx]
            k0, k1 = starts[kc], starts[kc + 1]
            s = _tile_scores(qs, ks, pos_s, q0, q1, k0, k1, band2, scale, rho)
            p = np.exp(s - m[q0:q1, None]) * inv_l[q0:q1, None]
            dv[k0:k1] += p.T @ dout[q0:q1]
            dp = dout[q0:q1] @ vs[k0:k1].T
            ds = p * (dp - d_q[:, None])
            dq[q0:q1] += scale * (ds @ ks[k0:k1])
            dk[k0:k1] += scale * (ds.T @ qs[q0:q1])
