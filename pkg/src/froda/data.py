"""Feature files, open-set protocol splits and a synthetic open-set generator.

Feature matrices are column-sample internally. CSV files hold one sample per
row; an optional last column named ``label`` (announced by a header line)
carries 1-based class ids, 0 meaning unlabeled.

The binary layout is::

    b"FRODA1"  u64 rows  u64 cols  rows*cols float64 (column-major, little endian)
    [cols int64 labels]   optional, little endian
"""

import csv
import io
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"FRODA1"
_HEADER = struct.Struct("<6sQQ")


class FormatError(ValueError):
    """Raised when a feature or model file cannot be parsed."""


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D (features x samples) matrix")
        if self.labels is None:
            self.labels = np.zeros(self.features.shape[1], dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (self.features.shape[1],):
            raise ValueError("one label per sample required")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be >= 0")

    @property
    def n_samples(self):
        return self.features.shape[1]

    @property
    def has_labels(self):
        return bool(np.any(self.labels > 0))

    def subset(self, idx):
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.features[:, idx], self.labels[idx], self.name)


def _infer_format(path, fmt):
    if fmt is not None:
        if fmt not in ("csv", "bin"):
            raise ValueError(f"unknown format {fmt!r}")
        return fmt
    return "bin" if Path(path).suffix in (".bin", ".froda1") else "csv"


def write_matrix_block(fh, X):
    X = np.asarray(X, dtype="<f8")
    rows, cols = X.shape
    fh.write(_HEADER.pack(MAGIC, rows, cols))
    fh.write(np.asfortranarray(X).tobytes(order="F"))


def read_matrix_block(fh):
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise FormatError("truncated FRODA1 header")
    magic, rows, cols = _HEADER.unpack(head)
    if magic != MAGIC:
        raise FormatError("bad magic: not a FRODA1 block")
    nbytes = rows * cols * 8
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise FormatError("truncated FRODA1 payload")
    X = np.frombuffer(payload, dtype="<f8").reshape((rows, cols), order="F")
    return np.array(X, dtype=float)


def save_features(dataset, path, format=None):
    """Write a dataset as CSV or FRODA1 binary."""
    fmt = _infer_format(path, format)
    X = dataset.features
    if fmt == "bin":
        with open(path, "wb") as fh:
            write_matrix_block(fh, X)
            if dataset.has_labels:
                fh.write(np.asarray(dataset.labels, dtype="<i8").tobytes())
        return
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if dataset.has_labels:
            writer.writerow([f"f{i}" for i in range(X.shape[0])] + ["label"])
            for j in range(X.shape[1]):
                writer.writerow([repr(float(v)) for v in X[:, j]] + [int(dataset.labels[j])])
        else:
            for j in range(X.shape[1]):
                writer.writerow([repr(float(v)) for v in X[:, j]])


def _is_number(token):
    try:
        float(token)
    except ValueError:
        return False
    return True


def _load_csv(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise FormatError(f"{path}: empty file")
    has_label = False
    start = 0
    if not all(_is_number(c) for c in rows[0]):
        header = [c.strip() for c in rows[0]]
        has_label = header[-1].lower() == "label"
        start = 1
    width = len(rows[start]) if start < len(rows) else len(rows[0])
    values, labels = [], []
    for i, row in enumerate(rows[start:], start=start + 1):
        if len(row) != width:
            raise FormatError(f"row {i}: ragged row ({len(row)} fields, expected {width})")
        try:
            nums = [float(c) for c in row]
        except ValueError as exc:
            raise FormatError(f"row {i}: {exc}") from None
        if not all(np.isfinite(nums)):
            raise FormatError(f"row {i}: non-finite value")
        if has_label:
            lab = nums.pop()
            if lab != int(lab) or lab < 0:
                raise FormatError(f"row {i}: label must be a non-negative integer")
            labels.append(int(lab))
        values.append(nums)
    if not values:
        raise FormatError(f"{path}: no samples")
    X = np.array(values, dtype=float).T
    y = np.array(labels, dtype=np.int64) if has_label else None
    return X, y


def _load_bin(path):
    raw = Path(path).read_bytes()
    fh = io.BytesIO(raw)
    X = read_matrix_block(fh)
    rest = fh.read()
    y = None
    if rest:
        if len(rest) != 8 * X.shape[1]:
            raise FormatError("trailing bytes do not form a label block")
        y = np.frombuffer(rest, dtype="<i8").astype(np.int64)
    if not np.all(np.isfinite(X)):
        col = int(np.argwhere(~np.isfinite(X))[0][1])
        raise FormatError(f"row {col + 1}: non-finite value")
    return X, y


def load_features(path, format=None, name=None):
    """Read a CSV or FRODA1 feature file into a :class:`Dataset`."""
    fmt = _infer_format(path, format)
    if fmt == "bin":
        X, y = _load_bin(path)
    else:
        X, y = _load_csv(path)
    return Dataset(X, y, name or Path(path).stem)


def load_labels(path):
    """Read a one-column label file (optional ``label`` header)."""
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            token = line.strip().split(",")[-1].strip()
            if not token or (i == 1 and not _is_number(token)):
                continue
            value = float(token)
            if value != int(value):
                raise FormatError(f"row {i}: label must be an integer")
            out.append(int(value))
    return np.array(out, dtype=np.int64)


def save_labels(labels, path):
    with open(path, "w") as fh:
        fh.write("label\n")
        for v in labels:
            fh.write(f"{int(v)}\n")


@dataclass(frozen=True)
class OpenSetProtocol:
    """Which classes are known, source-unknown and target-unknown.

    Caps of ``None`` take every sample of a class.
    """

    known_classes: Sequence[int]
    source_unknown_classes: Sequence[int] = ()
    target_unknown_classes: Sequence[int] = ()
    per_class_source: Optional[int] = None
    per_class_target: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        sets = [
            set(self.known_classes),
            set(self.source_unknown_classes),
            set(self.target_unknown_classes),
        ]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("known, source-unknown and target-unknown classes must be disjoint")
        if not self.known_classes:
            raise ValueError("at least one known class is required")

    @classmethod
    def bcis(cls, target_is_sun=False, seed=0):
        return cls(
            known_classes=tuple(range(1, 11)),
            source_unknown_classes=tuple(range(11, 26)),
            target_unknown_classes=tuple(range(26, 41)),
            per_class_source=50,
            per_class_target=20 if target_is_sun else 30,
            seed=seed,
        )

    @classmethod
    def office(cls, seed=0):
        return cls(
            known_classes=tuple(range(1, 11)),
            source_unknown_classes=tuple(range(11, 21)),
            target_unknown_classes=tuple(range(21, 32)),
            seed=seed,
        )

    @property
    def n_classes(self):
        return len(self.known_classes)


@dataclass
class ProtocolSplit:
    Xs: np.ndarray
    ys: np.ndarray
    Xs_unknown: np.ndarray
    Xt: np.ndarray
    yt: np.ndarray
    n_classes: int


def _take(labels, cls, cap, rng, role):
    idx = np.flatnonzero(labels == cls)
    if idx.size == 0:
        raise ValueError(f"class {cls} absent from the {role} data")
    if cap is None:
        return idx
    if cap > idx.size:
        warnings.warn(
            f"{role} class {cls}: cap {cap} exceeds the {idx.size} available samples; taking all",
            stacklevel=3,
        )
        return idx
    return np.sort(rng.choice(idx, size=cap, replace=False))


def apply_protocol(source, target, proto):
    """Subsample and relabel source/target data for one open-set run.

    Known classes are renumbered ``1..C`` in protocol order; every target
    unknown class becomes ``C + 1``.
    """
    rng = np.random.default_rng(proto.seed)
    C = proto.n_classes
    src_idx, src_y = [], []
    for pos, cls in enumerate(proto.known_classes, start=1):
        idx = _take(source.labels, cls, proto.per_class_source, rng, "source")
        src_idx.append(idx)
        src_y.append(np.full(idx.size, pos))
    unk_idx = [
        _take(source.labels, cls, proto.per_class_source, rng, "source")
        for cls in proto.source_unknown_classes
    ]
    tgt_idx, tgt_y = [], []
    for pos, cls in enumerate(proto.known_classes, start=1):
        idx = _take(target.labels, cls, proto.per_class_target, rng, "target")
        tgt_idx.append(idx)
        tgt_y.append(np.full(idx.size, pos))
    for cls in proto.target_unknown_classes:
        idx = _take(target.labels, cls, proto.per_class_target, rng, "target")
        tgt_idx.append(idx)
        tgt_y.append(np.full(idx.size, C + 1))
    src_idx = np.concatenate(src_idx)
    unk = np.concatenate(unk_idx) if unk_idx else np.zeros(0, dtype=int)
    tgt_idx = np.concatenate(tgt_idx)
    return ProtocolSplit(
        Xs=source.features[:, src_idx],
        ys=np.concatenate(src_y),
        Xs_unknown=source.features[:, unk],
        Xt=target.features[:, tgt_idx],
        yt=np.concatenate(tgt_y),
        n_classes=C,
    )


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape and noise of a synthetic open-set scenario."""

    D: int = 50
    d: int = 5
    C: int = 3
    n_per_class_source: int = 40
    n_per_class_target: int = 20
    n_unknown_target: int = 30
    n_unknown_source: int = 0
    noise_sigma: float = 0.05
    class_center_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.d < 1 or 2 * self.d > self.D:
            raise ValueError(f"need 1 <= d and 2d <= D, got d={self.d}, D={self.D}")
        if self.n_unknown_source > 0 and 3 * self.d > self.D:
            raise ValueError("unknown source samples need 3d <= D")
        counts = (
            self.C,
            self.n_per_class_source,
            self.n_per_class_target,
            self.n_unknown_target,
            self.n_unknown_source,
        )
        if min(counts) < 0 or self.C < 1:
            raise ValueError("counts must be non-negative and C >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class SyntheticScenario:
    spec: SyntheticSpec
    Xs: np.ndarray
    ys: np.ndarray
    Xs_unknown: np.ndarray
    Xt: np.ndarray
    yt: np.ndarray
    V_true: np.ndarray
    U_true: np.ndarray
    U_src_true: Optional[np.ndarray] = None

    @property
    def n_classes(self):
        return self.spec.C

    def as_split(self):
        return ProtocolSplit(self.Xs, self.ys, self.Xs_unknown, self.Xt, self.yt, self.spec.C)

    def source_dataset(self):
        X = np.hstack([self.Xs, self.Xs_unknown])
        y = np.concatenate([self.ys, np.full(self.Xs_unknown.shape[1], self.spec.C + 1)])
        return Dataset(X, y, "synthetic_source")

    def target_dataset(self, with_labels=False):
        y = self.yt if with_labels else None
        return Dataset(self.Xt, y, "synthetic_target")


def generate_synthetic(spec=None):
    """Draw a seeded open-set scenario with known orthogonal subspaces.

    Known-class samples of both domains are ``V* (center_c + z) + noise`` with
    ``z ~ N(0, I)`` and zero-sum class centers; unknown target samples are ``U* z'`` with ``z'`` of the
    same overall scale, and unknown source samples (if any) come from a third
    orthogonal subspace.
    """
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(spec.seed)
    n_sub = 3 if spec.n_unknown_source > 0 else 2
    Q, _ = np.linalg.qr(rng.standard_normal((spec.D, n_sub * spec.d)))
    V = Q[:, : spec.d]
    U = Q[:, spec.d : 2 * spec.d]
    U_src = Q[:, 2 * spec.d :] if n_sub == 3 else None
    centers = spec.class_center_scale * rng.standard_normal((spec.d, spec.C))
    # zero-sum centers keep the pooled mean near the origin, so joint PCA
    # centering does not push private samples into the shared span
    if spec.C > 1:
        centers -= centers.mean(axis=1, keepdims=True)
    private_scale = np.sqrt(spec.class_center_scale**2 + 1.0)

    def known(n_per):
        labels = np.repeat(np.arange(1, spec.C + 1), n_per)
        coeffs = centers[:, labels - 1] + rng.standard_normal((spec.d, labels.size))
        return V @ coeffs, labels

    def noise(n):
        return spec.noise_sigma * rng.standard_normal((spec.D, n))

    Xs, ys = known(spec.n_per_class_source)
    Xs = Xs + noise(Xs.shape[1])
    Xt_known, yt_known = known(spec.n_per_class_target)
    Xt_unk = U @ (private_scale * rng.standard_normal((spec.d, spec.n_unknown_target)))
    Xt = np.hstack([Xt_known, Xt_unk])
    Xt = Xt + noise(Xt.shape[1])
    yt = np.concatenate([yt_known, np.full(spec.n_unknown_target, spec.C + 1)])
    if U_src is not None:
        Xs_unk = U_src @ (private_scale * rng.standard_normal((spec.d, spec.n_unknown_source)))
        Xs_unk = Xs_unk + noise(spec.n_unknown_source)
    else:
        Xs_unk = np.zeros((spec.D, 0))
    return SyntheticScenario(spec, Xs, ys, Xs_unk, Xt, yt, V, U, U_src)
