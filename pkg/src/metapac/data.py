"""Task environments: synthetic regression tasks, IDX image files and a dataset container.

Container layout (version 1), all integers big-endian::

    b"METAPAC-DATASET v1\\n"          plain-text header line
    u64 length, JSON descriptor       tasks, metadata and the array table
    repeated: u64 length, .npy blob   arrays in descriptor order

The descriptor lists every array as ``[group, task_index, key]`` so a reader
can seek to any one of them.
"""

from __future__ import annotations

import gzip
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy import stats

from .errors import DomainError, FormatError
from .losses import check_loss
from .rng import rng_stream

CONTAINER_MAGIC = b"METAPAC-DATASET"
CONTAINER_VERSION = 1
IDX_IMAGES = 2051
IDX_LABELS = 2049

# stream ids for synthetic generation
_TRAIN_TASKS, _TEST_TASKS, _PERMUTED_SELECT, _PERMUTED_TASK = 1, 2, 3, 4


@dataclass(eq=False)
class TaskData:
    """One task: training split, held-out split and free-form metadata.

    Targets are 2-D, shape (samples, outputs).
    """

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x_train = np.asarray(self.x_train, dtype=float)
        self.x_test = np.asarray(self.x_test, dtype=float)
        self.y_train = np.asarray(self.y_train, dtype=float)
        self.y_test = np.asarray(self.y_test, dtype=float)
        if self.y_train.ndim == 1:
            self.y_train = self.y_train[:, None]
        if self.y_test.ndim == 1:
            self.y_test = self.y_test[:, None]
        if self.x_train.ndim != 2 or self.x_test.ndim != 2:
            raise DomainError("features must be 2-D (samples, features)")
        if self.x_train.shape[0] < 1:
            raise DomainError("a task needs at least one training sample")
        if self.x_train.shape[0] != self.y_train.shape[0] or self.x_test.shape[0] != self.y_test.shape[0]:
            raise DomainError("feature and target sample counts differ")
        if self.x_test.shape[0] and self.x_test.shape[1] != self.x_train.shape[1]:
            raise DomainError("train and test feature dimensions differ")
        if self.y_test.shape[0] and self.y_test.shape[1] != self.y_train.shape[1]:
            raise DomainError("train and test output dimensions differ")

    @property
    def m(self) -> int:
        return self.x_train.shape[0]

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.y_train.shape[1]


@dataclass(eq=False)
class MetaDataset:
    """Observed tasks, fresh meta-test tasks and a provenance record.

    All observed tasks share the same number of training samples m.
    """

    tasks: list
    test_tasks: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.tasks = list(self.tasks)
        self.test_tasks = list(self.test_tasks)
        if not self.tasks:
            raise DomainError("a dataset needs at least one task")
        ms = {t.m for t in self.tasks}
        if len(ms) != 1:
            raise DomainError(f"all tasks must have the same number of training samples, got {sorted(ms)}")
        dims = {(t.dim, t.n_outputs) for t in self.tasks + self.test_tasks}
        if len(dims) != 1:
            raise DomainError("all tasks must share feature and output dimensions")

    @property
    def n(self) -> int:
        return len(self.tasks)

    @property
    def m(self) -> int:
        return self.tasks[0].m

    @property
    def dim(self) -> int:
        return self.tasks[0].dim

    @property
    def n_outputs(self) -> int:
        return self.tasks[0].n_outputs

    def equals(self, other: "MetaDataset") -> bool:
        if self.provenance != other.provenance:
            return False
        if len(self.tasks) != len(other.tasks) or len(self.test_tasks) != len(other.test_tasks):
            return False
        for a, b in zip(self.tasks + self.test_tasks, other.tasks + other.test_tasks):
            for key in ("x_train", "y_train", "x_test", "y_test"):
                if not np.array_equal(getattr(a, key), getattr(b, key)):
                    return False
            if a.meta.keys() != b.meta.keys():
                return False
            for k in a.meta:
                if not np.array_equal(np.asarray(a.meta[k]), np.asarray(b.meta[k])):
                    return False
        return True


# --------------------------------------------------------------------------
# synthetic environment


@dataclass(frozen=True)
class SyntheticEnvSpec:
    """Linear-Gaussian task environment.

    Task i draws ``w_i = env_mean + N(0, task_spread I)``; samples are
    ``x ~ N(0, I)``, ``y = w_i . x + N(0, obs_noise)``. ``task_spread`` and
    ``obs_noise`` are variances. ``env_mean`` defaults to ``linspace(-1, 1, dim)``.
    """

    dim: int = 4
    env_mean: tuple | None = None
    task_spread: float = 0.25
    obs_noise: float = 0.01
    m: int = 50
    n: int = 5
    n_test_tasks: int = 20
    seed: int = 0
    m_test: int = 100

    def __post_init__(self):
        if self.dim < 1:
            raise DomainError("dim must be positive")
        if self.task_spread < 0 or self.obs_noise < 0:
            raise DomainError("task_spread and obs_noise must be nonnegative")
        if self.m < 1 or self.n < 1 or self.n_test_tasks < 0 or self.m_test < 0:
            raise DomainError("sample and task counts must be positive")
        if self.env_mean is not None and len(self.env_mean) != self.dim:
            raise DomainError(f"env_mean must have {self.dim} entries")

    @property
    def mean_vector(self) -> np.ndarray:
        if self.env_mean is None:
            return np.linspace(-1.0, 1.0, self.dim)
        return np.asarray(self.env_mean, dtype=float)

    def as_dict(self) -> dict:
        return {
            "dim": self.dim, "env_mean": [float(v) for v in self.mean_vector], "task_spread": self.task_spread,
            "obs_noise": self.obs_noise, "m": self.m, "n": self.n, "n_test_tasks": self.n_test_tasks,
            "seed": self.seed, "m_test": self.m_test,
        }


def _residual_population_loss(loss: str, mu, var) -> np.ndarray:
    """E[loss(r)] for scalar r ~ N(mu, var), elementwise."""
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    if loss == "exp-square":
        s = 1.0 + 2.0 * var
        return 1.0 - np.exp(-(mu**2) / s) / np.sqrt(s)
    sd = np.sqrt(var)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = (-1.0 - mu) / sd
        b = (1.0 - mu) / sd
        mass = stats.norm.cdf(b) - stats.norm.cdf(a)
        pa, pb = stats.norm.pdf(a), stats.norm.pdf(b)
        inside = mu**2 * mass + 2 * mu * sd * (pa - pb) + var * (mass + a * pa - b * pb)
        out = inside + (1.0 - mass)
    degenerate = np.minimum(mu**2, 1.0)
    return np.where(var > 0, out, degenerate)


@dataclass(frozen=True)
class SyntheticOracle:
    """Closed-form population losses for a synthetic environment."""

    spec: SyntheticEnvSpec

    def population_loss(self, weights, w_star, loss: str = "exp-square") -> np.ndarray:
        """Expected loss of linear weights on a task with parameter ``w_star``.

        ``weights`` has shape (..., dim + 1, 1) or (..., dim + 1); the last
        row is the intercept. The residual is Gaussian with mean equal to the
        intercept and variance |coef - w_star|^2 + obs_noise.
        """
        check_loss(loss)
        w = np.asarray(weights, dtype=float)
        if w.shape[-1] == 1 and w.ndim >= 2 and w.shape[-2] == self.spec.dim + 1:
            w = w[..., 0]
        if w.shape[-1] != self.spec.dim + 1:
            raise DomainError(f"weights must have {self.spec.dim + 1} rows")
        coef, bias = w[..., :-1], w[..., -1]
        var = np.sum((coef - np.asarray(w_star)) ** 2, axis=-1) + self.spec.obs_noise
        return _residual_population_loss(loss, bias, var)

    def sample_task_params(self, rng: np.random.Generator, count: int) -> np.ndarray:
        spread = math.sqrt(self.spec.task_spread)
        return self.spec.mean_vector + spread * rng.standard_normal((count, self.spec.dim))

    def sample_task(self, rng: np.random.Generator, w_star, m: int, m_test: int = 0) -> TaskData:
        return _draw_task(rng, np.asarray(w_star, dtype=float), m, m_test, self.spec.obs_noise)


def _draw_task(rng, w_star, m, m_test, obs_noise) -> TaskData:
    d = w_star.size
    x = rng.standard_normal((m + m_test, d))
    y = x @ w_star + math.sqrt(obs_noise) * rng.standard_normal(m + m_test)
    return TaskData(x[:m], y[:m, None], x[m:], y[m:, None], {"w_star": w_star.copy()})


def gen_synthetic(spec: SyntheticEnvSpec) -> tuple[MetaDataset, SyntheticOracle]:
    """Draw observed and meta-test tasks; each task uses its own stream."""
    oracle = SyntheticOracle(spec)

    def make(group: int, count: int) -> list:
        tasks = []
        for i in range(count):
            rng = rng_stream(spec.seed, group, i)
            w_star = oracle.sample_task_params(rng, 1)[0]
            tasks.append(_draw_task(rng, w_star, spec.m, spec.m_test, spec.obs_noise))
        return tasks

    data = MetaDataset(
        make(_TRAIN_TASKS, spec.n),
        make(_TEST_TASKS, spec.n_test_tasks),
        {"source": "synthetic", **spec.as_dict()},
    )
    return data, oracle


# --------------------------------------------------------------------------
# IDX files


@dataclass(frozen=True)
class IdxHeader:
    magic: int
    dims: tuple


def _open_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"corrupt gzip stream in {path}", 0) from exc
    return raw


def read_idx(path) -> tuple[np.ndarray, IdxHeader]:
    """Parse an IDX image (2051) or label (2049) file, optionally gzipped.

    Image pixels are scaled to [0, 1]; labels are returned as integers.
    """
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise FormatError("file too short for the magic number", len(raw))
    (magic,) = struct.unpack(">i", raw[:4])
    if magic == IDX_IMAGES:
        ndims = 3
    elif magic == IDX_LABELS:
        ndims = 1
    else:
        raise FormatError(f"unknown IDX magic {magic}", 0)
    header_end = 4 + 4 * ndims
    if len(raw) < header_end:
        raise FormatError("truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndims}i", raw[4:header_end])
    for k, d in enumerate(dims):
        if d < 0:
            raise FormatError(f"negative dimension {d}", 4 + 4 * k)
    size = int(np.prod(dims))
    if len(raw) < header_end + size:
        raise FormatError("truncated payload", len(raw))
    if len(raw) > header_end + size:
        raise FormatError("trailing bytes after payload", header_end + size)
    payload = np.frombuffer(raw, dtype=np.uint8, count=size, offset=header_end).reshape(dims)
    header = IdxHeader(magic, tuple(int(d) for d in dims))
    if magic == IDX_IMAGES:
        return payload.astype(float) / 255.0, header
    return payload.astype(np.int64), header


def write_idx(path, array, gz: bool | None = None) -> None:
    """Write unsigned bytes as IDX; 3-D arrays become images, 1-D arrays labels."""
    arr = np.asarray(array)
    if arr.ndim == 3:
        magic = IDX_IMAGES
    elif arr.ndim == 1:
        magic = IDX_LABELS
    else:
        raise DomainError("IDX arrays must be 3-D images or 1-D labels")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255):
            raise DomainError("IDX payload must fit in unsigned bytes")
        arr = arr.astype(np.uint8)
    blob = struct.pack(f">i{arr.ndim}i", magic, *arr.shape) + arr.tobytes()
    path = Path(path)
    if gz is None:
        gz = path.suffix == ".gz"
    path.write_bytes(gzip.compress(blob, mtime=0) if gz else blob)


# --------------------------------------------------------------------------
# permuted image tasks


def pixel_swap_permutation(rng: np.random.Generator, size: int, count: int) -> np.ndarray:
    """Compose ``count`` random transpositions of ``size`` positions."""
    perm = np.arange(size)
    pairs = rng.integers(0, size, size=(count, 2))
    for a, b in pairs:
        perm[a], perm[b] = perm[b], perm[a]
    return perm


def make_permuted_tasks(
    images,
    labels,
    kind: str = "pixel-swaps",
    n: int = 3,
    m: int = 1000,
    seed: int = 0,
    swaps: int = 100,
    m_test: int = 0,
    n_classes: int = 10,
    n_test_tasks: int = 0,
) -> MetaDataset:
    """Build tasks from disjoint image subsets with a random per-task permutation.

    ``kind="pixel-swaps"`` permutes pixel positions by ``swaps`` random
    transpositions; ``kind="label-permute"`` permutes the class labels.
    Targets are one-hot.
    """
    if kind not in ("pixel-swaps", "label-permute"):
        raise DomainError(f"unknown permutation kind {kind!r}")
    images = np.asarray(images, dtype=float)
    labels = np.asarray(labels).astype(np.int64)
    flat = images.reshape(images.shape[0], -1)
    if flat.shape[0] != labels.shape[0]:
        raise DomainError("image and label counts differ")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise DomainError(f"labels must lie in [0, {n_classes})")
    per_task = m + m_test
    total_tasks = n + n_test_tasks
    if total_tasks * per_task > flat.shape[0]:
        raise DomainError(f"need {total_tasks * per_task} images, only {flat.shape[0]} available")
    order = rng_stream(seed, _PERMUTED_SELECT).permutation(flat.shape[0])
    eye = np.eye(n_classes)
    tasks = []
    for i in range(total_tasks):
        idx = order[i * per_task:(i + 1) * per_task]
        x, y = flat[idx], labels[idx]
        rng = rng_stream(seed, _PERMUTED_TASK, i)
        if kind == "pixel-swaps":
            perm = pixel_swap_permutation(rng, flat.shape[1], swaps)
            x = x[:, perm]
        else:
            perm = rng.permutation(n_classes)
            y = perm[y]
        tasks.append(TaskData(x[:m], eye[y[:m]], x[m:], eye[y[m:]], {"permutation": perm, "indices": idx}))
    provenance = {
        "source": "idx", "kind": kind, "n": n, "m": m, "m_test": m_test, "seed": seed, "swaps": swaps,
        "n_classes": n_classes, "n_test_tasks": n_test_tasks,
    }
    return MetaDataset(tasks[:n], tasks[n:], provenance)


# --------------------------------------------------------------------------
# container


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _jsonable(value: Any):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    return value


def save_dataset(data: MetaDataset, path) -> None:
    table, blobs, task_meta = [], [], []
    for group, tasks in (("train", data.tasks), ("test", data.test_tasks)):
        for i, t in enumerate(tasks):
            scalars = {}
            for key in ("x_train", "y_train", "x_test", "y_test"):
                table.append([group, i, key])
                blobs.append(_npy_bytes(getattr(t, key)))
            for key, value in t.meta.items():
                if isinstance(value, np.ndarray):
                    table.append([group, i, "meta:" + key])
                    blobs.append(_npy_bytes(value))
                else:
                    scalars[key] = _jsonable(value)
            task_meta.append({"group": group, "index": i, "meta": scalars})
    descriptor = {
        "version": CONTAINER_VERSION,
        "provenance": _jsonable(data.provenance),
        "counts": {"train": len(data.tasks), "test": len(data.test_tasks)},
        "task_meta": task_meta,
        "arrays": table,
    }
    head = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CONTAINER_MAGIC + f" v{CONTAINER_VERSION}\n".encode())
        fh.write(struct.pack(">Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(struct.pack(">Q", len(blob)))
            fh.write(blob)


def load_dataset(path) -> MetaDataset:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n", 0, 64)
    if newline < 0 or not raw.startswith(CONTAINER_MAGIC + b" v"):
        raise FormatError("not a metapac dataset container (missing header line)", 0)
    try:
        version = int(raw[len(CONTAINER_MAGIC) + 2:newline])
    except ValueError:
        raise FormatError("unreadable container version in header line", 0) from None
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container schema version {version}, expected {CONTAINER_VERSION}", 0)
    pos = newline + 1

    def take(offset):
        if offset + 8 > len(raw):
            raise FormatError("truncated length prefix", offset)
        (length,) = struct.unpack(">Q", raw[offset:offset + 8])
        end = offset + 8 + length
        if end > len(raw):
            raise FormatError("truncated block", len(raw))
        return raw[offset + 8:end], end

    head, pos = take(pos)
    try:
        descriptor = json.loads(head.decode("utf-8"))
        table = descriptor["arrays"]
        counts = descriptor["counts"]
        provenance = descriptor["provenance"]
        task_meta = descriptor["task_meta"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"malformed descriptor: {exc}", newline + 9) from None
    if descriptor.get("version") != CONTAINER_VERSION:
        raise FormatError("descriptor schema version does not match the header line", newline + 9)
    fields: dict = {}
    for group, i, key in table:
        start = pos
        blob, pos = take(pos)
        try:
            arr = np.load(io.BytesIO(blob), allow_pickle=False)
        except ValueError as exc:
            raise FormatError(f"bad array block for {group}[{i}].{key}: {exc}", start) from None
        fields.setdefault((group, i), {})[key] = arr
    if pos != len(raw):
        raise FormatError("trailing bytes after the last array", pos)
    meta_lookup = {(t["group"], t["index"]): t["meta"] for t in task_meta}
    groups = {}
    for group in ("train", "test"):
        tasks = []
        for i in range(counts[group]):
            f = fields.get((group, i))
            if f is None:
                raise FormatError(f"missing arrays for {group} task {i}", pos)
            meta = dict(meta_lookup.get((group, i), {}))
            meta.update({k[5:]: v for k, v in f.items() if k.startswith("meta:")})
            tasks.append(TaskData(f["x_train"], f["y_train"], f["x_test"], f["y_test"], meta))
        groups[group] = tasks
    try:
        return MetaDataset(groups["train"], groups["test"], provenance)
    except DomainError as exc:
        raise FormatError(f"dataset violates container invariants: {exc}", 0) from None
