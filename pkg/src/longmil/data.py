"""Bag persistence, synthetic contextual datasets, and splits.

The bag file is a fixed little-endian layout: magic, u32 n, u32 d,
u32 K, i64 label, n*d f32 embeddings row-major, then n (i32 x, i32 y)
pairs; total size 28 + 4nd + 8n bytes.  The synthetic generator plants
a purely contextual label: positives contain an adjacent (A, B)
prototype pair, negatives carry the same A/B counts pushed at least
s_min apart, so bag-level embedding statistics alone sit at chance.
"""

from __future__ import annotations

import csv
import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    FormatError,
    GenerationError,
    StratificationError,
)
from .linalg import Rng

__all__ = [
    "BAG_MAGIC",
    "Bag",
    "bag_nbytes",
    "write_bag",
    "read_bag",
    "SynthSpec",
    "gen_synthetic",
    "scan_label",
    "Manifest",
    "ManifestRow",
    "save_bags",
    "load_split",
    "split_by_size",
    "split_random",
]

BAG_MAGIC = b"WSIBAG1\x00"
_HEADER = struct.Struct("<8sIIIq")

SPLITS = ("train", "val", "test")


@dataclass
class Bag:
    """One spatial bag: f32 embeddings, i32 grid positions, a class label."""

    id: str
    features: np.ndarray
    positions: np.ndarray
    label: int
    n_classes: int

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.positions = np.ascontiguousarray(self.positions, dtype=np.int32)
        n = self.features.shape[0]
        if self.features.ndim != 2 or n < 1:
            raise ConfigError("features must be (n, d) with n >= 1")
        if self.positions.shape != (n, 2):
            raise ConfigError(f"positions must be ({n}, 2), got {self.positions.shape}")
        if not 0 <= self.label < self.n_classes:
            raise ConfigError(f"label {self.label} outside [0, {self.n_classes})")
        if len(np.unique(self.positions, axis=0)) != n:
            raise ConfigError("positions must be unique within a bag")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def z64(self) -> np.ndarray:
        return self.features.astype(np.float64)


def bag_nbytes(n: int, d: int) -> int:
    """On-disk size of a bag file: header + f32 payload + position pairs."""
    return _HEADER.size + 4 * n * d + 8 * n


def write_bag(bag: Bag, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(BAG_MAGIC, bag.n, bag.d, bag.n_classes, bag.label))
        f.write(bag.features.astype("<f4").tobytes(order="C"))
        f.write(bag.positions.astype("<i4").tobytes(order="C"))


def read_bag(path: str | Path) -> Bag:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise FormatError("file shorter than header", offset=len(blob))
    magic, n, d, k, label = _HEADER.unpack_from(blob, 0)
    if magic != BAG_MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if n < 1:
        raise FormatError("instance count must be >= 1", offset=8)
    if d < 1:
        raise FormatError("embedding width must be >= 1", offset=12)
    if k < 2:
        raise FormatError(f"class count must be >= 2, got {k}", offset=16)
    if not 0 <= label < k:
        raise FormatError(f"label {label} outside [0, {k})", offset=20)
    expected = bag_nbytes(n, d)
    if len(blob) < expected:
        raise FormatError(
            f"truncated payload: expected {expected} bytes, have {len(blob)}",
            offset=len(blob),
        )
    if len(blob) > expected:
        raise FormatError("trailing bytes after positions", offset=expected)
    feat_off = _HEADER.size
    pos_off = feat_off + 4 * n * d
    feats = np.frombuffer(blob, dtype="<f4", count=n * d, offset=feat_off).reshape(n, d)
    if not np.all(np.isfinite(feats)):
        bad = int(np.flatnonzero(~np.isfinite(feats.ravel()))[0])
        raise FormatError("non-finite embedding value", offset=feat_off + 4 * bad)
    pos = np.frombuffer(blob, dtype="<i4", count=2 * n, offset=pos_off).reshape(n, 2)
    if np.any(pos < 0):
        bad = int(np.flatnonzero((pos < 0).any(axis=1))[0])
        raise FormatError("negative position", offset=pos_off + 8 * bad)
    _, first = np.unique(pos, axis=0, return_index=True)
    if len(first) != n:
        dup_mask = np.ones(n, dtype=bool)
        dup_mask[first] = False
        bad = int(np.flatnonzero(dup_mask)[0])
        raise FormatError("duplicate position", offset=pos_off + 8 * bad)
    return Bag(Path(path).stem, feats.copy(), pos.copy(), int(label), int(k))


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the planted contextual dataset.

    The label depends only on geometry: positives have an (A, B)
    prototype pair at Chebyshev distance <= 1, negatives keep every
    (A, B) pair at Chebyshev distance >= s_min.  A and B counts are
    drawn identically for both classes.
    """

    d: int = 64
    n_prototypes: int = 8
    epsilon: float = 1.0
    noise: float = 0.25
    s_min: int = 4
    grid_min: int = 16
    grid_max: int = 32
    pair_min: int = 1
    pair_max: int = 3
    rect_min: int = 3
    rect_max: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.s_min < 2:
            raise ConfigError(f"s_min must be >= 2, got {self.s_min}")
        if self.n_prototypes < 3:
            raise ConfigError("need A, B, and at least one background prototype")
        if self.grid_min < 4 or self.grid_max < self.grid_min:
            raise ConfigError("grid range must satisfy 4 <= grid_min <= grid_max")
        if not 1 <= self.pair_min <= self.pair_max:
            raise ConfigError("pair range must satisfy 1 <= pair_min <= pair_max")
        if not 1 <= self.rect_min <= self.rect_max:
            raise ConfigError("rect range must satisfy 1 <= rect_min <= rect_max")
        if self.epsilon <= 0 or self.noise < 0:
            raise ConfigError("epsilon > 0 and noise >= 0 required")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(obj) - known
        if extra:
            raise ConfigError(f"unknown dataset spec keys: {sorted(extra)}")
        return cls(**obj)


def prototype_means(spec: SynthSpec) -> np.ndarray:
    """Unit directions scaled by epsilon, fixed by the dataset seed."""
    rng = Rng(spec.seed).spawn(0x6D65616E)
    raw = rng.gaussian(spec.n_prototypes * spec.d).reshape(spec.n_prototypes, spec.d)
    return spec.epsilon * raw / np.linalg.norm(raw, axis=1, keepdims=True)


def _foreground(rng: Rng, w: int, h: int, spec: SynthSpec) -> np.ndarray:
    mask = np.zeros((w, h), dtype=bool)
    n_rects = int(rng.integers(spec.rect_min, spec.rect_max + 1))
    for _ in range(n_rects):
        rw = int(rng.integers(2, max(3, w // 2) + 1))
        rh = int(rng.integers(2, max(3, h // 2) + 1))
        x0 = int(rng.integers(0, w - rw + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        mask[x0:x0 + rw, y0:y0 + rh] = True
    return mask


def _chebyshev(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # pairwise Chebyshev distances between (m,2) and (k,2) int cells
    return np.abs(a[:, None, :] - b[None, :, :]).max(axis=2)


def _place(rng: Rng, cells: np.ndarray, c: int, label: int, s_min: int):
    """Pick A-cells and B-cells for one bag, or None when infeasible."""
    n = len(cells)
    order = rng.permutation(n)
    if label == 1:
        for p_idx in order:
            p = cells[p_idx]
            cheb = np.abs(cells - p).max(axis=1)
            neighbors = np.flatnonzero((cheb == 1))
            if len(neighbors) == 0:
                continue
            q_idx = int(neighbors[rng.integers(0, len(neighbors))])
            rest = [i for i in order if i != p_idx and i != q_idx]
            if len(rest) < 2 * (c - 1):
                return None
            a_idx = [int(p_idx)] + [int(i) for i in rest[: c - 1]]
            b_idx = [q_idx] + [int(i) for i in rest[c - 1: 2 * (c - 1)]]
            return a_idx, b_idx
        return None
    a_idx = [int(i) for i in order[:c]]
    cheb = _chebyshev(cells, cells[a_idx])
    ok = np.flatnonzero(cheb.min(axis=1) >= s_min)
    if len(ok) < c:
        return None
    ok_set = set(int(i) for i in ok)
    b_idx = [int(i) for i in order if int(i) in ok_set][:c]
    return a_idx, b_idx


def gen_synthetic(spec: SynthSpec, count: int, first_index: int = 0) -> list[Bag]:
    """Generate count bags with alternating labels and per-bag seeds."""
    if count < 2:
        raise ConfigError(f"count must be >= 2 so both classes appear, got {count}")
    means = prototype_means(spec)
    bags = []
    for i in range(count):
        index = first_index + i
        rng = Rng(spec.seed).spawn(0x1000_0000 + index)
        label = index % 2
        placed = None
        for _ in range(64):
            w = int(rng.integers(spec.grid_min, spec.grid_max + 1))
            h = int(rng.integers(spec.grid_min, spec.grid_max + 1))
            mask = _foreground(rng, w, h, spec)
            cells = np.argwhere(mask).astype(np.int32)
            c = int(rng.integers(spec.pair_min, spec.pair_max + 1))
            if len(cells) < 2 * c + 4:
                continue
            placed = _place(rng, cells, c, label, spec.s_min)
            if placed is not None:
                break
        if placed is None:
            raise GenerationError(
                f"bag {index}: no feasible placement after bounded retries"
            )
        a_idx, b_idx = placed
        n = len(cells)
        proto = 2 + rng.integers(0, spec.n_prototypes - 2, size=n)
        proto[a_idx] = 0
        proto[b_idx] = 1
        feats = means[proto] + spec.noise * rng.gaussian(n * spec.d).reshape(n, spec.d)
        shuffle = rng.permutation(n)
        bags.append(
            Bag(
                id=f"bag_{index:05d}",
                features=feats[shuffle].astype(np.float32),
                positions=cells[shuffle],
                label=label,
                n_classes=2,
            )
        )
    return bags


def scan_label(positions: np.ndarray, proto_ids: np.ndarray, s_min: int) -> int | None:
    """Exhaustive rule check: 1 if some (A,B) pair is adjacent, 0 if all
    pairs are >= s_min apart, None for the in-between no-man's land."""
    a = positions[proto_ids == 0]
    b = positions[proto_ids == 1]
    if len(a) == 0 or len(b) == 0:
        return None
    dmin = _chebyshev(a, b).min()
    if dmin <= 1:
        return 1
    if dmin >= s_min:
        return 0
    return None


@dataclass(frozen=True)
class ManifestRow:
    path: str
    label: int
    split: str


@dataclass
class Manifest:
    rows: list[ManifestRow]
    n_classes: int
    d: int

    def paths(self, split: str) -> list[str]:
        return [r.path for r in self.rows if r.split == split]

    def save(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["path", "label", "split"])
            for r in self.rows:
                writer.writerow([r.path, r.label, r.split])

    @classmethod
    def load(cls, path: str | Path, check_paths: bool = True) -> "Manifest":
        base = Path(path).parent
        rows = []
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header != ["path", "label", "split"]:
                raise FormatError(f"manifest header must be path,label,split, got {header}")
            for line in reader:
                if len(line) != 3:
                    raise FormatError(f"manifest row needs 3 fields, got {line}")
                p, label, split = line
                if split not in SPLITS:
                    raise FormatError(f"unknown split {split!r} in manifest")
                rows.append(ManifestRow(p, int(label), split))
        if not rows:
            raise FormatError("empty manifest")
        n_classes = d = 0
        if check_paths:
            for r in rows:
                if not (base / r.path).exists():
                    raise ConfigError(f"manifest references missing file {r.path}")
            first = read_bag(base / rows[0].path)
            n_classes, d = first.n_classes, first.d
            for r in rows:
                if not 0 <= r.label < n_classes:
                    raise ConfigError(f"label {r.label} outside [0, {n_classes})")
        return cls(rows, n_classes, d)


def _check_ratios(ratios) -> tuple[float, float, float]:
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) <= 0:
        raise ConfigError(f"ratios must be three positives summing to 1, got {ratios}")
    return tuple(float(r) for r in ratios)


def _cut(count: int, ratios) -> tuple[int, int]:
    n_train = int(count * ratios[0])
    n_val = int(count * ratios[1])
    return n_train, n_val


def split_by_size(bags: list[Bag], ratios=(0.6, 0.2, 0.2)) -> Manifest:
    """Sort ascending by instance count; the largest bags become test."""
    ratios = _check_ratios(ratios)
    if len(bags) < 5:
        raise ConfigError(f"need at least 5 bags to split, got {len(bags)}")
    sizes = np.array([b.n for b in bags])
    order = np.argsort(sizes, kind="stable")
    n_train, n_val = _cut(len(bags), ratios)
    rows = [None] * len(bags)
    for rank, idx in enumerate(order):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        bag = bags[idx]
        rows[idx] = ManifestRow(f"{bag.id}.bin", bag.label, split)
    return Manifest(rows, bags[0].n_classes, bags[0].d)


def split_random(bags: list[Bag], ratios=(0.6, 0.2, 0.2), seed: int = 0) -> Manifest:
    """Seeded stratified split: per-class shuffle, then ratio cut."""
    ratios = _check_ratios(ratios)
    if len(bags) < 5:
        raise ConfigError(f"need at least 5 bags to split, got {len(bags)}")
    labels = np.array([b.label for b in bags])
    assign = np.empty(len(bags), dtype=object)
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        rng = Rng(seed).spawn(0x5EED ^ int(cls))
        members = members[rng.permutation(len(members))]
        n_train, n_val = _cut(len(members), ratios)
        if n_train == 0 or n_val == 0 or n_train + n_val >= len(members):
            raise StratificationError(
                f"class {cls} with {len(members)} bags cannot fill every split"
            )
        assign[members[:n_train]] = "train"
        assign[members[n_train:n_train + n_val]] = "val"
        assign[members[n_train + n_val:]] = "test"
    rows = [ManifestRow(f"{b.id}.bin", b.label, assign[i]) for i, b in enumerate(bags)]
    return Manifest(rows, bags[0].n_classes, bags[0].d)


def save_bags(bags: list[Bag], out_dir: str | Path) -> None:
    """Write each bag to <out_dir>/<id>.bin."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for bag in bags:
        write_bag(bag, out / f"{bag.id}.bin")


def load_split(manifest: Manifest, base: str | Path, split: str) -> list[Bag]:
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    base = Path(base)
    return [read_bag(base / p) for p in manifest.paths(split)]
