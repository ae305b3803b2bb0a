"""Banded kernel correctness against dense references and the slow oracle."""

import numpy as np
import pytest

from longmil import backend, workspace
from longmil.attention import (
    AttentionSpec,
    banded_attention,
    banded_attention_backward,
    full_attention,
    full_attention_backward,
    full_attention_weights,
    release,
)
from longmil.chunks import build_mask_2d
from longmil.errors import ConfigError, ShapeError, StateError
from longmil.linalg import Rng
from longmil.posenc import alibi2d_matrix
from longmil.workspace import WorkspaceAccountant, WorkspaceLimitError, measuring

from oracles import naive_masked_attention

BACKENDS = ["python"] + (["compiled"] if backend.active_backend() == "compiled" else [])


def random_case(rng, n, d, extent=64):
    q = rng.gaussian(n * d).reshape(n, d)
    k = rng.gaussian(n * d).reshape(n, d)
    v = rng.gaussian(n * d).reshape(n, d)
    cells = rng.permutation(extent * extent)[:n]
    pos = np.stack([cells % extent, cells // extent], axis=1).astype(np.int32)
    return q, k, v, pos


def dense_reference(q, k, v, pos, band, rho=0.0):
    mask = build_mask_2d(pos, band)
    bias = -rho * np.sqrt(
        ((pos[:, None, :].astype(float) - pos[None, :, :]) ** 2).sum(axis=2)
    ) if rho else None
    return full_attention(q, k, v, mask=mask, bias=bias)


class TestForward:
    @pytest.mark.parametrize("backend_name", BACKENDS)
    @pytest.mark.parametrize("ordering", ["row_major", "morton"])
    @pytest.mark.parametrize("band", [0.0, 1.0, 3.0, 10.0, np.inf])
    def test_matches_dense_reference(self, backend_name, ordering, band):
        rng = Rng(17)
        for n, chunk in [(40, 16), (130, 32), (300, 128)]:
            q, k, v, pos = random_case(rng, n, 24)
            out, ctx = banded_attention(
                q, k, v, pos, band, chunk_size=chunk,
                ordering=ordering, backend=backend_name,
            )
            release(ctx)
            ref = dense_reference(q, k, v, pos, band)
            assert np.allclose(out, ref, atol=1e-10), (n, chunk)

    @pytest.mark.parametrize("backend_name", BACKENDS)
    def test_matches_slow_oracle(self, backend_name):
        rng = Rng(18)
        q, k, v, pos = random_case(rng, 60, 8, extent=16)
        for band in (0.0, 2.0, 5.0):
            out, ctx = banded_attention(
                q, k, v, pos, band, chunk_size=16, backend=backend_name
            )
            release(ctx)
            assert np.allclose(out, naive_masked_attention(q, k, v, pos, band), atol=1e-10)

    @pytest.mark.parametrize("backend_name", BACKENDS)
    def test_distance_bias_path(self, backend_name):
        rng = Rng(19)
        q, k, v, pos = random_case(rng, 90, 16, extent=20)
        out, ctx = banded_attention(
            q, k, v, pos, 6.0, chunk_size=32, rho=0.45, backend=backend_name
        )
        release(ctx)
        assert np.allclose(out, dense_reference(q, k, v, pos, 6.0, rho=0.45), atol=1e-10)
        assert np.allclose(
            out, naive_masked_attention(q, k, v, pos, 6.0, rho=0.45), atol=1e-10
        )

    def test_backends_agree(self):
        if backend.active_backend() != "compiled":
            pytest.skip("compiled backend not built")
        rng = Rng(20)
        q, k, v, pos = random_case(rng, 200, 32)
        outs = {}
        for name in ("python", "compiled"):
            out, ctx = banded_attention(q, k, v, pos, 8.0, chunk_size=64, backend=name)
            release(ctx)
            outs[name] = out
        assert np.allclose(outs["python"], outs["compiled"], atol=1e-12)

    def test_band_rule_is_integer_exact(self):
        # squared distance 25 at band 5.0 must stay allowed; 4.999 excludes it
        rng = Rng(21)
        q, k, v, _ = random_case(rng, 2, 4)
        pos = np.array([[0, 0], [3, 4]], dtype=np.int32)
        tight, ctx = banded_attention(q, k, v, pos, 5.0, chunk_size=4)
        release(ctx)
        assert np.allclose(tight, dense_reference(q, k, v, pos, 5.0), atol=1e-12)
        assert not np.allclose(tight, dense_reference(q, k, v, pos, 4.0), atol=1e-3)

    def test_permutation_equivariance(self):
        # permuting tokens and positions together permutes the output rows
        rng = Rng(22)
        q, k, v, pos = random_case(rng, 111, 16)
        out, ctx = banded_attention(q, k, v, pos, 7.0, chunk_size=32)
        release(ctx)
        perm = Rng(5).permutation(111)
        out_p, ctx = banded_attention(q[perm], k[perm], v[perm], pos[perm], 7.0, chunk_size=32)
        release(ctx)
        assert np.allclose(out_p, out[perm], atol=1e-12)

    def test_float32_inputs(self):
        rng = Rng(23)
        q, k, v, pos = random_case(rng, 70, 16)
        q, k, v = (a.astype(np.float32) for a in (q, k, v))
        out, ctx = banded_attention(q, k, v, pos, 5.0, chunk_size=32)
        release(ctx)
        assert out.dtype == np.float32
        assert np.allclose(out, dense_reference(q, k, v, pos, 5.0), atol=1e-4)

    def test_precomputed_plan_reused(self):
        from longmil.chunks import plan_chunks

        rng = Rng(24)
        q, k, v, pos = random_case(rng, 80, 8)
        plan = plan_chunks(pos, 4.0, 32, "row_major")
        out, ctx = banded_attention(q, k, v, pos, 4.0, chunk_size=32, plan=plan)
        release(ctx)
        assert np.allclose(out, dense_reference(q, k, v, pos, 4.0), atol=1e-10)
        with pytest.raises(ConfigError):
            banded_attention(q, k, v, pos, 9.0, plan=plan)


class TestBackward:
    @pytest.mark.parametrize("backend_name", BACKENDS)
    @pytest.mark.parametrize("band,rho", [(3.0, 0.0), (10.0, 0.0), (5.0, 0.3), (np.inf, 0.0)])
    def test_matches_dense_backward(self, backend_name, band, rho):
        rng = Rng(25)
        q, k, v, pos = random_case(rng, 96, 16)
        dout = rng.gaussian(96 * 16).reshape(96, 16)
        _, ctx = banded_attention(
            q, k, v, pos, band, chunk_size=32, rho=rho, backend=backend_name
        )
        dq, dk, dv = banded_attention_backward(ctx, dout)
        mask = build_mask_2d(pos, band)
        bias = alibi2d_matrix(pos, rho) if rho else None
        rq, rk, rv = full_attention_backward(q, k, v, dout, mask=mask, bias=bias)
        assert np.allclose(dq, rq, atol=1e-9)
        assert np.allclose(dk, rk, atol=1e-9)
        assert np.allclose(dv, rv, atol=1e-9)

    def test_finite_difference(self):
        rng = Rng(26)
        q, k, v, pos = random_case(rng, 12, 4, extent=5)
        w = rng.gaussian(12 * 4).reshape(12, 4)

        def loss(a, b, c):
            out, ctx = banded_attention(a, b, c, pos, 2.0, chunk_size=4)
            release(ctx)
            return float((out * w).sum())

        _, ctx = banded_attention(q, k, v, pos, 2.0, chunk_size=4)
        grads = banded_attention_backward(ctx, w)
        h = 1e-6
        for which, analytic in enumerate(grads):
            arr = (q, k, v)[which]
            numeric = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                keep = arr[idx]
                arr[idx] = keep + h
                up = loss(q, k, v)
                arr[idx] = keep - h
                lo = loss(q, k, v)
                arr[idx] = keep
                numeric[idx] = (up - lo) / (2 * h)
            assert np.allclose(analytic, numeric, atol=1e-6)

    def test_double_backward_rejected(self):
        rng = Rng(27)
        q, k, v, pos = random_case(rng, 20, 4, extent=8)
        dout = np.ones((20, 4))
        _, ctx = banded_attention(q, k, v, pos, 3.0, chunk_size=8)
        banded_attention_backward(ctx, dout)
        with pytest.raises(StateError):
            banded_attention_backward(ctx, dout)

    def test_release_idempotent(self):
        rng = Rng(28)
        q, k, v, pos = random_case(rng, 20, 4, extent=8)
        acc = WorkspaceAccountant()
        with measuring(acc):
            _, ctx = banded_attention(q, k, v, pos, 3.0, chunk_size=8)
            release(ctx)
            release(ctx)
        assert acc.running == 0

    def test_dout_shape_checked(self):
        rng = Rng(29)
        q, k, v, pos = random_case(rng, 20, 4, extent=8)
        _, ctx = banded_attention(q, k, v, pos, 3.0, chunk_size=8)
        with pytest.raises(ShapeError):
            banded_attention_backward(ctx, np.ones((20, 5)))
        release(ctx)


class TestWorkspaceDiscipline:
    def test_peak_returns_to_zero(self):
        rng = Rng(30)
        q, k, v, pos = random_case(rng, 256, 16)
        acc = WorkspaceAccountant()
        with measuring(acc):
            _, ctx = banded_attention(q, k, v, pos, 6.0, chunk_size=64)
            assert acc.running > 0
            dq, dk, dv = banded_attention_backward(ctx, np.ones((256, 16)))
        assert acc.running == 0
        assert acc.peak >= 256 * 16 * 8

    def test_never_allocates_n_squared(self):
        # n = 512 >= 4 * chunk, so any n-by-n request would trip the limit
        rng = Rng(31)
        n = 512
        q, k, v, pos = random_case(rng, n, 16)
        acc = WorkspaceAccountant(forbid_single_at_least=n * n * 8)
        with measuring(acc):
            _, ctx = banded_attention(q, k, v, pos, 10.0, chunk_size=128)
            banded_attention_backward(ctx, np.ones((n, 16)))

    def test_forbid_trips_on_dense_buffer(self):
        acc = WorkspaceAccountant(forbid_single_at_least=64)
        with measuring(acc):
            with pytest.raises(WorkspaceLimitError):
                workspace.take((8, 8), dtype=np.float64)

    def test_accounting_pairs(self):
        acc = WorkspaceAccountant()
        with measuring(acc):
            a = workspace.take((4, 4))
            b = workspace.take((2, 2))
            assert acc.running == 16 * 8 + 4 * 8
            workspace.give(b)
            workspace.give(a)
        assert acc.running == 0
        assert acc.peak == 16 * 8 + 4 * 8
        acc.reset()
        assert acc.peak == 0


class TestFullAttention:
    def test_unmasked_equals_softmax_product(self):
        rng = Rng(32)
        q = rng.gaussian(6 * 4).reshape(6, 4)
        k = rng.gaussian(6 * 4).reshape(6, 4)
        v = rng.gaussian(6 * 4).reshape(6, 4)
        out, a = full_attention_weights(q, k, v)
        assert np.allclose(a.sum(axis=1), 1.0)
        assert np.allclose(out, a @ v)
        assert np.allclose(out, naive_masked_attention(q, k, v, np.zeros((6, 2)), np.inf))

    def test_default_scale_is_inverse_sqrt_d(self):
        rng = Rng(33)
        q = rng.gaussian(5 * 16).reshape(5, 16)
        k = rng.gaussian(5 * 16).reshape(5, 16)
        v = rng.gaussian(5 * 16).reshape(5, 16)
        assert np.allclose(full_attention(q, k, v), full_attention(q, k, v, scale=0.25))

    def test_mask_and_bias_shape_checked(self):
        z = np.zeros((3, 3))
        with pytest.raises(ShapeError):
            full_attention(z, z, z, mask=np.ones((2, 3), dtype=bool))
        with pytest.raises(ShapeError):
            full_attention(z, z, z, bias=np.zeros((3, 4)))

    def test_qkv_shapes_checked(self):
        with pytest.raises(ShapeError):
            full_attention(np.zeros((3, 4)), np.zeros((3, 5)), np.zeros((3, 4)))
        with pytest.raises(ShapeError):
            full_attention(np.zeros((3, 4)), np.zeros((2, 4)), np.zeros((3, 4)))
        with pytest.raises(ShapeError):
            banded_attention(
                np.zeros((3, 4)), np.zeros((2, 4)), np.zeros((2, 4)),
                np.zeros((3, 2), dtype=np.int32), 2.0,
            )


class TestValidation:
    def test_negative_band_rejected(self):
        z = np.zeros((2, 4))
        pos = np.array([[0, 0], [1, 0]], dtype=np.int32)
        with pytest.raises(ConfigError):
            banded_attention(z, z, z, pos, -1.0)

    def test_negative_rho_rejected(self):
        z = np.zeros((2, 4))
        pos = np.array([[0, 0], [1, 0]], dtype=np.int32)
        with pytest.raises(ConfigError):
            banded_attention(z, z, z, pos, 2.0, rho=-0.1)

    def test_spec_validation(self):
        with pytest.raises(ConfigError):
            AttentionSpec(d_model=10, n_heads=3)
        with pytest.raises(ConfigError):
            AttentionSpec(d_model=0)
        spec = AttentionSpec(d_model=8, n_heads=2)
        assert spec.band == 10.0
