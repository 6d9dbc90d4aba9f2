"""Experiment datasets: toy generators, CSV persistence and an MNIST IDX reader."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(eq=False)
class LabeledSet:
    X: np.ndarray
    y: np.ndarray
    name: str = "custom"
    seed: int = 0

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y)
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise ValueError(f"X must be a non-empty (m, d) matrix, got {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise ValueError(f"y has shape {self.y.shape}, expected ({self.X.shape[0]},)")

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def is_binary(self) -> bool:
        return bool(np.all(np.isin(self.y, (-1, 1))))

    def subset(self, idx, name: str | None = None) -> "LabeledSet":
        idx = np.asarray(idx)
        return LabeledSet(self.X[idx], self.y[idx], name or self.name, self.seed)

    def digest(self) -> bytes:
        return self.X.tobytes() + np.asarray(self.y, dtype=np.int64).tobytes()


def gen_simple_traj() -> LabeledSet:
    return LabeledSet(np.array([[2.0, 1.0]]), np.array([1]), "simple-traj")


def gen_xor() -> LabeledSet:
    X = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
    return LabeledSet(X, np.array([1, 1, -1, -1]), "xor")


def gen_linsep(m: int = 20, d: int = 2, margin: float = 0.1, seed: int = 0) -> LabeledSet:
    """Gaussian points labelled by a random homogeneous separator.

    Points closer than ``margin`` to the separating hyperplane are rejected, so
    the returned set has max-margin value at least ``margin`` (checked).
    """
    from .maxmargin import max_margin_oracle

    if m < 1 or d < 1 or margin < 0:
        raise ValueError("need m >= 1, d >= 1, margin >= 0")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    kept: list[np.ndarray] = []
    while len(kept) < m:
        x = rng.standard_normal(d)
        if abs(x @ u) >= margin:
            kept.append(x)
    X = np.array(kept)
    y = np.where(X @ u > 0, 1, -1)
    out = LabeledSet(X, y, "lin-sep", seed)
    sol = max_margin_oracle(out)
    if sol.margin < margin * (1 - 1e-9):
        raise RuntimeError(f"generated set has margin {sol.margin} < {margin}")
    return out


def save_csv(data: LabeledSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j + 1}" for j in range(data.dim)] + ["y"])
        for x, y in zip(data.X, data.y):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_csv(path: str | Path, name: str | None = None) -> LabeledSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[-1] != "y":
        raise ValueError(f"{path}: header must end with 'y', got {header}")
    arr = np.array([[float(v) for v in r] for r in body])
    return LabeledSet(arr[:, :-1], arr[:, -1].astype(np.int64), name or Path(path).stem)


# -- MNIST IDX ---------------------------------------------------------------

class IDXFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def _read_bytes(path: str | Path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Decode an unsigned-byte IDX buffer into an array of shape ``dims``."""
    if len(raw) < 4:
        raise IDXFormatError("file too short for magic number", 0)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IDXFormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", 0)
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IDXFormatError("truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    n = int(np.prod(dims))
    if len(raw) < header_end + n:
        raise IDXFormatError(
            f"truncated payload: need {n} bytes, found {len(raw) - header_end}", len(raw)
        )
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header_end).reshape(dims)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    return struct.pack(f">I{arr.ndim}I", magic, *arr.shape) + arr.tobytes()


def stratified_indices(
    labels: np.ndarray, n: int, seed: int, classes=None, exclude=None
) -> np.ndarray:
    """Class-balanced sample of ``n`` indices; remainders go to the lowest classes."""
    labels = np.asarray(labels)
    classes = np.unique(labels) if classes is None else np.asarray(sorted(classes))
    allowed = np.ones(labels.size, dtype=bool)
    if exclude is not None:
        allowed[np.asarray(exclude, dtype=np.intp)] = False
    rng = np.random.default_rng(seed)
    base, extra = divmod(n, len(classes))
    picked = []
    for i, c in enumerate(classes):
        want = base + (1 if i < extra else 0)
        pool = np.flatnonzero((labels == c) & allowed)
        if pool.size < want:
            raise ValueError(f"class {c} has {pool.size} examples, {want} requested")
        picked.append(pool[rng.permutation(pool.size)[:want]])
    return np.sort(np.concatenate(picked))


def load_mnist_idx(
    images_path: str | Path,
    labels_path: str | Path,
    subset: int | None = None,
    classes=None,
    seed: int = 0,
) -> LabeledSet:
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", 4
        )
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if classes is not None:
        keep = np.isin(y, list(classes))
        X, y = X[keep], y[keep]
    out = LabeledSet(X, y, "mnist", seed)
    if subset is not None:
        out = out.subset(stratified_indices(y, subset, seed, classes))
    return out


def stratified_split(
    data: LabeledSet, n_train: int, n_test: int, seed: int = 0
) -> tuple[LabeledSet, LabeledSet]:
    train_idx = stratified_indices(data.y, n_train, seed)
    test_idx = stratified_indices(data.y, n_test, seed + 1, exclude=train_idx)
    return (
        data.subset(train_idx, f"{data.name}-train"),
        data.subset(test_idx, f"{data.name}-test"),
    )
