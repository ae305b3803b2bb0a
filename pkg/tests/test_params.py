"""Module tree walking, flatten round trips, checkpoint container format."""

import struct

import numpy as np
import pytest

from longmil.errors import FormatError, ShapeError
from longmil.params import (
    CKPT_MAGIC,
    Module,
    Param,
    flatten_params,
    load_checkpoint,
    save_checkpoint,
    unflatten_params,
)


class Leaf(Module):
    def __init__(self, rows, cols, fill):
        self.w = Param(np.full((rows, cols), float(fill)))
        self.b = Param(np.zeros(cols))


class Tree(Module):
    def __init__(self):
        self.first = Leaf(2, 3, 1.0)
        self.blocks = [Leaf(1, 2, 2.0), Leaf(1, 2, 3.0)]
        self.gain = Param(np.array([5.0]))


class TestModuleWalk:
    def test_named_params_paths_and_order(self):
        names = [n for n, _ in Tree().named_params()]
        assert names == [
            "first.w", "first.b",
            "blocks.0.w", "blocks.0.b",
            "blocks.1.w", "blocks.1.b",
            "gain",
        ]

    def test_named_modules_includes_list_entries(self):
        names = [n for n, _ in Tree().named_modules()]
        assert names == ["", "first", "blocks.0", "blocks.1"]

    def test_zero_grad_clears_everything(self):
        t = Tree()
        for p in t.params():
            p.grad[:] = 7.0
        t.zero_grad()
        assert all(np.all(p.grad == 0.0) for p in t.params())

    def test_param_casts_to_f64_contiguous(self):
        p = Param(np.arange(6, dtype=np.float32).reshape(2, 3)[:, ::-1])
        assert p.value.dtype == np.float64
        assert p.value.flags.c_contiguous
        assert p.grad.shape == (2, 3)


class TestStateDict:
    def test_round_trip_restores_values(self):
        a, b = Tree(), Tree()
        for p in a.params():
            p.value[:] = np.random.default_rng(0).normal(size=p.value.shape)
        b.load_state_dict(a.state_dict())
        for (_, pa), (_, pb) in zip(a.named_params(), b.named_params()):
            assert np.array_equal(pa.value, pb.value)

    def test_missing_and_extra_keys_rejected(self):
        t = Tree()
        state = t.state_dict()
        state.pop("gain")
        with pytest.raises(ShapeError):
            t.load_state_dict(state)
        state = t.state_dict()
        state["ghost"] = np.zeros(1)
        with pytest.raises(ShapeError):
            t.load_state_dict(state)

    def test_shape_mismatch_rejected(self):
        t = Tree()
        state = t.state_dict()
        state["gain"] = np.zeros(2)
        with pytest.raises(ShapeError):
            t.load_state_dict(state)


class TestFlatten:
    def test_round_trip_bit_exact(self):
        t = Tree()
        for i, p in enumerate(t.params()):
            p.value[:] = np.pi * (i + 1)
        vec = flatten_params(t)
        fresh = Tree()
        unflatten_params(fresh, vec)
        assert np.array_equal(flatten_params(fresh), vec)

    def test_length_checked(self):
        with pytest.raises(ShapeError):
            unflatten_params(Tree(), np.zeros(3))

    def test_empty_module(self):
        assert flatten_params(Module()).shape == (0,)


class TestCheckpoint:
    def make_state(self):
        return {
            "b.mat": np.arange(6, dtype=np.float64).reshape(2, 3),
            "a.vec": np.array([1.5, -2.5]),
            "scalar": np.array(4.25),
        }

    def test_round_trip_bit_exact(self, tmp_path):
        path = tmp_path / "m.ckpt"
        state = self.make_state()
        save_checkpoint(path, state)
        back = load_checkpoint(path)
        assert set(back) == set(state)
        for name in state:
            assert back[name].dtype == np.float64
            assert np.array_equal(back[name], state[name])

    def test_names_sorted_on_disk(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, self.make_state())
        blob = path.read_bytes()
        assert blob.index(b"a.vec") < blob.index(b"b.mat") < blob.index(b"scalar")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOTLMCK0" + b"\x00" * 16)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncation_reports_offset(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, self.make_state())
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(FormatError) as err:
            load_checkpoint(path)
        assert err.value.offset is not None

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, self.make_state())
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_empty_state(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {})
        assert load_checkpoint(path) == {}
        assert path.read_bytes() == CKPT_MAGIC + struct.pack("<I", 0)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, {"x": np.array([2.0])})
        blob = path.read_bytes()
        assert blob[:8] == CKPT_MAGIC
        assert struct.unpack("<I", blob[8:12]) == (1,)
        assert struct.unpack("<I", blob[12:16]) == (1,)  # name length
        assert blob[16:17] == b"x"
