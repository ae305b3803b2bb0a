"""Positional encoding properties: rotary relativity, bias geometry, table grads."""

import numpy as np
import pytest

from longmil.errors import ConfigError, ShapeError
from longmil.linalg import Rng
from longmil.posenc import (
    PosMode,
    abs2d_lookup,
    abs2d_scatter_grad,
    alibi2d_bias,
    alibi2d_matrix,
    alibi_slope,
    check_positions,
    rope2d_apply,
)

from oracles import finite_diff_grads


def gauss(rng, *shape):
    return rng.gaussian(int(np.prod(shape))).reshape(shape)


class TestRope2d:
    def test_inverse_round_trip(self):
        rng = Rng(3)
        v = gauss(rng, *(7, 16))
        pos = np.array([[i, 2 * i + 1] for i in range(7)])
        back = rope2d_apply(rope2d_apply(v, pos), pos, inverse=True)
        assert np.allclose(back, v, atol=1e-12)

    def test_norm_preserved(self):
        rng = Rng(4)
        v = gauss(rng, *(5, 32))
        pos = np.array([[9, 1], [0, 0], [3, 3], [100, 7], [2, 40]])
        out = rope2d_apply(v, pos)
        assert np.allclose(np.linalg.norm(out, axis=1), np.linalg.norm(v, axis=1))

    def test_products_depend_on_offset_only(self):
        # q.k after rotation must be a function of the 2-d offset alone, so
        # shifting both positions by the same amount leaves it unchanged.
        rng = Rng(5)
        q = gauss(rng, *(16,))
        k = gauss(rng, *(16,))
        for shift in ([3, 0], [0, 7], [11, 5]):
            base = rope2d_apply(q, np.array([2, 4])) @ rope2d_apply(k, np.array([5, 1]))
            moved = rope2d_apply(q, np.array([2 + shift[0], 4 + shift[1]])) @ rope2d_apply(
                k, np.array([5 + shift[0], 1 + shift[1]])
            )
            assert abs(base - moved) < 1e-10

    def test_zero_offset_is_plain_product(self):
        rng = Rng(6)
        q = gauss(rng, *(24,))
        k = gauss(rng, *(24,))
        p = np.array([13, 8])
        assert abs(rope2d_apply(q, p) @ rope2d_apply(k, p) - q @ k) < 1e-10

    def test_axes_rotate_independent_halves(self):
        rng = Rng(7)
        v = gauss(rng, *(3, 8))
        pos_x = np.array([[4, 0], [1, 0], [9, 0]])
        out = rope2d_apply(v, pos_x)
        # y coordinate is zero, so the second half must pass through untouched
        assert np.allclose(out[:, 4:], v[:, 4:])
        assert not np.allclose(out[:, :4], v[:, :4])

    def test_dimension_must_divide_by_four(self):
        with pytest.raises(ConfigError):
            rope2d_apply(np.zeros((2, 6)), np.zeros((2, 2), dtype=int))

    def test_position_row_mismatch(self):
        with pytest.raises(ShapeError):
            rope2d_apply(np.zeros((3, 8)), np.zeros((2, 2), dtype=int))


class TestAlibi:
    def test_matrix_symmetric_zero_diagonal(self):
        rng = Rng(8)
        pos = rng.integers(0, 50, size=(12, 2))
        m = alibi2d_matrix(pos, rho=0.7)
        assert np.allclose(m, m.T)
        assert np.all(np.diag(m) == 0.0)
        assert np.all(m <= 0.0)

    def test_matrix_matches_pairwise_bias(self):
        pos = np.array([[0, 0], [3, 4], [1, 1]])
        m = alibi2d_matrix(pos, rho=2.0)
        for i in range(3):
            for j in range(3):
                assert m[i, j] == pytest.approx(alibi2d_bias(pos[i], pos[j], 2.0))
        assert m[0, 1] == pytest.approx(-10.0)  # 3-4-5 triangle

    def test_slope_halves_per_head(self):
        assert alibi_slope(0.8, head=0, n_heads=4) == pytest.approx(0.8)
        assert alibi_slope(0.8, head=1, n_heads=4) == pytest.approx(0.4)
        assert alibi_slope(0.8, head=3, n_heads=4) == pytest.approx(0.1)

    def test_slope_head_out_of_range(self):
        with pytest.raises(ConfigError):
            alibi_slope(1.0, head=4, n_heads=4)


class TestAbs2d:
    def test_lookup_returns_table_rows(self):
        rng = Rng(9)
        table = gauss(rng, *(5, 6, 3))
        pos = np.array([[0, 0], [4, 5], [2, 3]])
        out = abs2d_lookup(table, pos)
        assert np.array_equal(out[0], table[0, 0])
        assert np.array_equal(out[1], table[4, 5])
        assert np.array_equal(out[2], table[2, 3])

    def test_out_of_range_clamps_to_border(self):
        rng = Rng(10)
        table = gauss(rng, *(4, 4, 2))
        out = abs2d_lookup(table, np.array([[99, 1], [2, 99], [99, 99]]))
        assert np.array_equal(out[0], table[3, 1])
        assert np.array_equal(out[1], table[2, 3])
        assert np.array_equal(out[2], table[3, 3])

    def test_scatter_grad_touches_only_looked_up_cells(self):
        rng = Rng(11)
        pos = np.array([[1, 2], [3, 0]])
        up = gauss(rng, *(2, 4))
        grad = abs2d_scatter_grad((5, 5, 4), pos, up)
        assert np.array_equal(grad[1, 2], up[0])
        assert np.array_equal(grad[3, 0], up[1])
        mask = np.ones((5, 5), dtype=bool)
        mask[1, 2] = mask[3, 0] = False
        assert np.all(grad[mask] == 0.0)

    def test_scatter_grad_accumulates_duplicates(self):
        # two tokens clamped onto the same border cell must both contribute
        up = np.array([[1.0], [10.0]])
        grad = abs2d_scatter_grad((2, 2, 1), np.array([[5, 5], [9, 9]]), up)
        assert grad[1, 1, 0] == pytest.approx(11.0)

    def test_scatter_grad_is_lookup_transpose(self):
        rng = Rng(12)
        table = gauss(rng, *(3, 4, 2))
        pos = np.array([[0, 1], [2, 3], [2, 3], [1, 0]])
        up = gauss(rng, *(4, 2))

        def loss():
            return float((abs2d_lookup(table, pos) * up).sum())

        (numeric,) = finite_diff_grads(loss, [table], h=1e-6)
        analytic = abs2d_scatter_grad(table.shape, pos, up)
        assert np.allclose(analytic, numeric, atol=1e-6)


class TestPosMode:
    @pytest.mark.parametrize(
        "mode",
        [
            PosMode.none(),
            PosMode.abs2d(31, 17),
            PosMode.rope2d(theta_base=500.0),
            PosMode.alibi2d(rho=0.25),
        ],
    )
    def test_json_round_trip(self, mode):
        assert PosMode.from_json(mode.to_json()) == mode

    def test_from_json_accepts_bare_string(self):
        assert PosMode.from_json("none") == PosMode.none()

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            PosMode(kind="learned")

    def test_rope_theta_must_exceed_one(self):
        with pytest.raises(ConfigError):
            PosMode.rope2d(theta_base=1.0)

    def test_alibi_rho_must_be_positive(self):
        with pytest.raises(ConfigError):
            PosMode.alibi2d(rho=0.0)


class TestCheckPositions:
    def test_valid_passes_through(self):
        pos = check_positions(np.array([[0, 0], [1, 0], [0, 1]]))
        assert pos.dtype == np.int32

    def test_rejects_negative(self):
        with pytest.raises(ShapeError):
            check_positions(np.array([[0, -1]]))

    def test_rejects_duplicates(self):
        with pytest.raises(ShapeError):
            check_positions(np.array([[2, 2], [2, 2]]))

    def test_rejects_wrong_shape(self):
        with pytest.raises(ShapeError):
            check_positions(np.array([[1, 2, 3]]))

    def test_rejects_empty(self):
        with pytest.raises(ShapeError):
            check_positions(np.zeros((0, 2), dtype=int))
