"""
Synthetic clustering data: the overlapping circles problem, instance
sampling from any labelled pool and the CSV formats both are stored in.

Instance CSV columns are `instance_id,point_id,x0..x{d-1},label`, values
written with 17 significant digits so a read gives back the same floats.
"""
import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from abclust.utils import DataError, write_atomic

CLASS_RESAMPLES = 100
INSTANCE_GLOB = "instance_*.csv"


def ground_truth_kernel(labels: Sequence[int] | np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DataError("Cannot build a kernel for zero labels")
    return (labels[:, None] == labels[None, :]).astype(np.float64)


@dataclass
class Instance:
    x: np.ndarray
    labels: np.ndarray
    g: np.ndarray = field(repr=False)
    k_true: int
    instance_id: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x.ndim != 2:
            raise DataError(f"Instance points must be a matrix, got shape {self.x.shape}")
        n = self.x.shape[0]
        if n == 0:
            raise DataError("Instance has no points")
        if self.labels.shape != (n,):
            raise DataError(f"Instance has {n} points but {self.labels.size} labels")
        if not np.array_equal(self.g, ground_truth_kernel(self.labels)):
            raise DataError("Ground truth kernel does not match labels")
        if self.k_true != np.unique(self.labels).size:
            raise DataError(f"k_true={self.k_true} but labels hold {np.unique(self.labels).size} classes")

    @staticmethod
    def of(x: np.ndarray, labels: Sequence[int] | np.ndarray, instance_id: int = 0) -> "Instance":
        labels = np.asarray(labels, dtype=np.int64)
        return Instance(x, labels, ground_truth_kernel(labels), int(np.unique(labels).size),
                        instance_id)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]


@dataclass
class LabelledPool:
    x: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.x.ndim != 2 or self.labels.shape != (self.x.shape[0],):
            raise DataError(f"Pool of {self.x.shape} points has {self.labels.shape} labels")

    def classes(self) -> list[np.ndarray]:
        """Row indices of every class, ordered by label"""
        return [np.flatnonzero(self.labels == c) for c in np.unique(self.labels)]

    def __len__(self) -> int:
        return self.x.shape[0]


class CirclesConfig(BaseModel):
    """Points sampled from a few likely overlapping circles in the plane"""
    model_config = ConfigDict(use_attribute_docstrings=True, frozen=True, extra="forbid")

    n_points: int = Field(50, ge=1)
    n_circles: int = Field(4, ge=1)
    center_box: tuple[float, float] = (-1.0, 1.0)
    """Range of both center coordinates"""
    radius_range: tuple[float, float] = (0.5, 1.0)
    noise_sigma: float = Field(0.0, ge=0.0)
    """Standard deviation of the radial Gaussian noise"""
    seed: int = 0

    @model_validator(mode="after")
    def check_ranges(self) -> "CirclesConfig":
        lo, hi = self.center_box
        if lo > hi:
            raise ValueError(f"center_box {self.center_box} is reversed")
        r0, r1 = self.radius_range
        if r0 <= 0 or r0 > r1:
            raise ValueError(f"radius_range {self.radius_range} must be positive and ordered")
        return self


def gen_circles(cfg: CirclesConfig, rng: np.random.Generator | None = None,
                instance_id: int = 0) -> Instance:
    if cfg.n_points < cfg.n_circles:
        raise DataError(f"{cfg.n_points} points cannot cover {cfg.n_circles} circles")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    c = cfg.n_circles
    centers, radii = circle_geometry(cfg, rng)
    base, extra = divmod(cfg.n_points, c)
    counts = [base + (1 if i < extra else 0) for i in range(c)]
    labels = rng.permutation(np.repeat(np.arange(c), counts))
    angles = rng.uniform(0.0, 2.0 * np.pi, size=cfg.n_points)
    radial = radii[labels]
    if cfg.noise_sigma > 0:
        radial = radial + cfg.noise_sigma * rng.standard_normal(cfg.n_points)
    x = centers[labels] + radial[:, None] * np.column_stack([np.cos(angles), np.sin(angles)])
    return Instance.of(x, labels, instance_id)


def circle_geometry(cfg: CirclesConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Centers and radii of the circles, the first draws `gen_circles` takes from `rng`"""
    centers = rng.uniform(*cfg.center_box, size=(cfg.n_circles, 2))
    return centers, rng.uniform(*cfg.radius_range, size=cfg.n_circles)


def sample_composition(total: int, caps: Sequence[int], rng: np.random.Generator) -> list[int] | None:
    """Uniform composition of `total` into len(caps) parts with 1 <= n_i <= caps[i].

    `ways[j][r]` counts the compositions of `r` into parts j.. so each part is drawn
    with probability proportional to the completions it leaves. None when infeasible.
    """
    k = len(caps)
    if k == 0 or total < k or total > sum(caps):
        return None
    ways = [[0] * (total + 1) for _ in range(k + 1)]
    ways[k][0] = 1
    for j in range(k - 1, -1, -1):
        prefix = [0]
        for w in ways[j + 1]:
            prefix.append(prefix[-1] + w)
        for r in range(total + 1):
            hi = r - 1
            lo = max(r - caps[j], 0)
            ways[j][r] = prefix[hi + 1] - prefix[lo] if hi >= lo else 0
    parts, rest = [], total
    for j in range(k):
        weights = [ways[j + 1][rest - n] for n in range(1, min(caps[j], rest) + 1)]
        s = sum(weights)
        n = int(rng.choice(len(weights), p=[w / s for w in weights])) + 1
        parts.append(n)
        rest -= n
    return parts


def gen_instance(pool: LabelledPool, length: int, rng: np.random.Generator,
                 instance_id: int = 0) -> Instance:
    classes = pool.classes()
    if length < 1 or length > len(pool):
        raise DataError(f"Cannot draw {length} examples from a pool of {len(pool)}")
    k_max = min(len(classes), length)
    # largest class sizes summed, k is feasible for some class choice iff capacity[k-1] >= length
    capacity = np.cumsum(np.sort([c.size for c in classes])[::-1])
    k = int(rng.integers(1, k_max + 1))
    while capacity[k - 1] < length:
        k = int(rng.integers(1, k_max + 1))
    for _ in range(CLASS_RESAMPLES):
        chosen = rng.choice(len(classes), size=k, replace=False)
        caps = [classes[c].size for c in chosen]
        counts = sample_composition(length, caps, rng)
        if counts is None:
            continue
        rows = np.concatenate([rng.choice(classes[c], size=n, replace=False)
                               for c, n in zip(chosen, counts)])
        rows = rows[rng.permutation(rows.size)]
        return Instance.of(pool.x[rows], pool.labels[rows], instance_id)
    raise DataError(f"No feasible class choice for length {length} with k={k} "
                    f"after {CLASS_RESAMPLES} attempts")


def gen_blob_pool(classes: int, per_class: int, d: int, spread: float, seed: int,
                  center_scale: float = 5.0) -> LabelledPool:
    if classes < 1 or per_class < 1 or d < 1:
        raise DataError("Blob pool counts must be positive")
    if spread < 0:
        raise DataError(f"spread must be non-negative, got {spread}")
    rng = np.random.default_rng(seed)
    centers = center_scale * rng.standard_normal((classes, d))
    labels = np.repeat(np.arange(classes), per_class)
    x = centers[labels] + spread * rng.standard_normal((labels.size, d))
    return LabelledPool(x, labels)


# Formats

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _write_csv(path: Path, header: list[str], rows: Iterable[list[str]]):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    write_atomic(path, buf.getvalue())


def _read_csv(path: Path) -> tuple[list[str], list[list[str]]]:
    if not path.is_file():
        raise DataError(f"File {path} does not exist")
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataError(f"{path} is empty")
    return rows[0], rows[1:]


def write_instances(path: Path, instances: Sequence[Instance]):
    if not instances:
        raise DataError("Nothing to write")
    d = instances[0].dim
    header = ["instance_id", "point_id", *[f"x{i}" for i in range(d)], "label"]

    def rows():
        for inst in instances:
            if inst.dim != d:
                raise DataError(f"Instance {inst.instance_id} has {inst.dim} features, expected {d}")
            for j in range(inst.n):
                yield [str(inst.instance_id), str(j), *map(_fmt, inst.x[j]), str(inst.labels[j])]
    _write_csv(path, header, rows())


def read_instances(path: Path) -> list[Instance]:
    header, rows = _read_csv(path)
    d = len(header) - 3
    if d < 1 or header[:2] != ["instance_id", "point_id"] or header[-1] != "label":
        raise DataError(f"{path} is not an instance file, header {header}")
    grouped: dict[int, list[tuple[int, list[float], int]]] = {}
    for line, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise DataError(f"{path}:{line} has {len(row)} columns, expected {len(header)}")
        try:
            grouped.setdefault(int(row[0]), []).append(
                (int(row[1]), [float(v) for v in row[2:-1]], int(row[-1])))
        except ValueError as e:
            raise DataError(f"{path}:{line}: {e}") from e
    out = []
    for iid, points in grouped.items():
        points.sort(key=lambda p: p[0])
        out.append(Instance.of(np.array([p[1] for p in points]), [p[2] for p in points], iid))
    return out


def write_instance_dir(folder: Path, instances: Sequence[Instance]) -> list[Path]:
    paths = []
    for inst in instances:
        p = folder / f"instance_{inst.instance_id:05d}.csv"
        write_instances(p, [inst])
        paths.append(p)
    return paths


def load_instances(path: Path) -> list[Instance]:
    """Reads a single instance file or every instance file of a folder"""
    if path.is_dir():
        files = sorted(path.glob(INSTANCE_GLOB))
        if not files:
            raise DataError(f"No {INSTANCE_GLOB} files in {path}")
        return [inst for f in files for inst in read_instances(f)]
    return read_instances(path)


def write_pool(path: Path, pool: LabelledPool):
    d = pool.x.shape[1]
    header = ["instance_id", "point_id", *[f"x{i}" for i in range(d)], "label"]
    _write_csv(path, header, (["0", str(j), *map(_fmt, pool.x[j]), str(pool.labels[j])]
                              for j in range(len(pool))))


def read_pool(path: Path) -> LabelledPool:
    instances = read_instances(path)
    return LabelledPool(np.concatenate([i.x for i in instances]),
                        np.concatenate([i.labels for i in instances]))


def write_labels(path: Path, labels: np.ndarray):
    _write_csv(path, ["index", "label"], ([str(i), str(int(v))] for i, v in enumerate(labels)))


def write_matrix(path: Path, m: np.ndarray):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows([_fmt(v) for v in row] for row in m)
    write_atomic(path, buf.getvalue())

