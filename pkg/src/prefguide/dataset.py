"""Labeled 8-Gaussians data and preference pairs.

Clusters sit on a ring; cluster k has its mean at angle k*2*pi/K measured
counter-clockwise from the +x axis.  Even clusters are positive, odd ones negative.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass(frozen=True)
class GaussianMixtureSpec:
    n_clusters: int = 8
    radius: float = 4.0
    sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 2 or self.n_clusters % 2:
            raise ValueError("cluster count must be even and >= 2")
        if not self.radius > 0:
            raise ValueError("ring radius must be positive")
        if not self.sigma >= 0:
            raise ValueError("cluster std must be >= 0")

    def means(self) -> np.ndarray:
        ang = 2.0 * np.pi * np.arange(self.n_clusters) / self.n_clusters
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def positive_clusters(self) -> np.ndarray:
        return np.arange(0, self.n_clusters, 2)

    @staticmethod
    def is_positive(cluster) -> np.ndarray:
        return np.asarray(cluster) % 2 == 0


@dataclass(eq=False)
class LabeledPoints:
    """A batch of labeled points: ``x`` is (n, 2), ``cluster`` is (n,) int."""

    x: np.ndarray
    cluster: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(-1, 2)
        self.cluster = np.asarray(self.cluster, dtype=np.int64).reshape(-1)
        if len(self.x) != len(self.cluster):
            raise ValueError("x and cluster lengths differ")

    def __len__(self):
        return len(self.x)

    @property
    def positive(self) -> np.ndarray:
        return self.cluster % 2 == 0

    @property
    def labels(self) -> list[str]:
        return [POSITIVE if p else NEGATIVE for p in self.positive]

    def subset(self, mask) -> "LabeledPoints":
        return LabeledPoints(self.x[mask], self.cluster[mask])

    def positives(self) -> "LabeledPoints":
        return self.subset(self.positive)

    def negatives(self) -> "LabeledPoints":
        return self.subset(~self.positive)

    def identical(self, other: "LabeledPoints") -> bool:
        return (
            self.x.tobytes() == other.x.tobytes()
            and self.cluster.tobytes() == other.cluster.tobytes()
        )


@dataclass(eq=False)
class PreferencePairs:
    """``x_pos[i]`` is preferred over ``x_neg[i]``."""

    x_pos: np.ndarray
    x_neg: np.ndarray
    cluster_pos: np.ndarray | None = None
    cluster_neg: np.ndarray | None = None

    def __post_init__(self):
        self.x_pos = np.asarray(self.x_pos, dtype=np.float64).reshape(-1, 2)
        self.x_neg = np.asarray(self.x_neg, dtype=np.float64).reshape(-1, 2)
        if self.x_pos.shape != self.x_neg.shape:
            raise ValueError("winner and loser arrays differ in shape")

    def __len__(self):
        return len(self.x_pos)

    def take(self, idx) -> "PreferencePairs":
        pick = lambda a: None if a is None else a[idx]
        return PreferencePairs(self.x_pos[idx], self.x_neg[idx], pick(self.cluster_pos), pick(self.cluster_neg))


def generate_mixture(spec: GaussianMixtureSpec, n: int, rng: np.random.Generator | None = None) -> LabeledPoints:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    cluster = rng.integers(0, spec.n_clusters, n)
    x = spec.means()[cluster] + spec.sigma * rng.standard_normal((n, 2))
    return LabeledPoints(x, cluster)


def sample_pairs(points: LabeledPoints, m: int, rng: np.random.Generator) -> PreferencePairs:
    """Pair independent uniform draws from the positive and negative subsets."""
    pos = np.flatnonzero(points.positive)
    neg = np.flatnonzero(~points.positive)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("dataset must contain both positive and negative points")
    ip = pos[rng.integers(0, len(pos), m)]
    ineg = neg[rng.integers(0, len(neg), m)]
    return PreferencePairs(points.x[ip], points.x[ineg], points.cluster[ip], points.cluster[ineg])


# CSV ----------------------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _data_lines(path):
    """Yield (line_number, fields) skipping '#' comment lines."""
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#") or not line.strip():
                continue
            yield lineno, next(csv.reader([line]))


def dataset_to_csv(points: LabeledPoints, comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    buf.write("x,y,cluster,label\n")
    for (x, y), c, lab in zip(points.x, points.cluster, points.labels):
        buf.write(f"{_fmt(x)},{_fmt(y)},{int(c)},{lab}\n")
    return buf.getvalue()


def save_dataset(path, points: LabeledPoints, comment: str | None = None) -> None:
    Path(path).write_text(dataset_to_csv(points, comment))


def load_dataset(path) -> LabeledPoints:
    xs, cs = [], []
    rows = _data_lines(path)
    header = next(rows, None)
    if header is None or header[1] != ["x", "y", "cluster", "label"]:
        raise ValueError(f"{path}: expected header 'x,y,cluster,label'")
    for lineno, row in rows:
        try:
            if len(row) != 4:
                raise ValueError(f"expected 4 fields, got {len(row)}")
            x, y, c = float(row[0]), float(row[1]), int(row[2])
            if c < 0:
                raise ValueError("negative cluster index")
            expected = POSITIVE if c % 2 == 0 else NEGATIVE
            if row[3] != expected:
                raise ValueError(f"label {row[3]!r} inconsistent with cluster {c}")
        except ValueError as err:
            raise ValueError(f"{path}:{lineno}: malformed row: {err}") from None
        xs.append((x, y))
        cs.append(c)
    return LabeledPoints(np.array(xs, dtype=np.float64).reshape(-1, 2), np.array(cs, dtype=np.int64))


def save_pairs(path, pairs: PreferencePairs, comment: str | None = None) -> None:
    lines = [f"# {comment}"] if comment else []
    lines.append("xp,yp,xn,yn")
    for p, q in zip(pairs.x_pos, pairs.x_neg):
        lines.append(",".join(_fmt(v) for v in (*p, *q)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_pairs(path) -> PreferencePairs:
    rows = _data_lines(path)
    header = next(rows, None)
    if header is None or header[1] != ["xp", "yp", "xn", "yn"]:
        raise ValueError(f"{path}: expected header 'xp,yp,xn,yn'")
    vals = []
    for lineno, row in rows:
        try:
            if len(row) != 4:
                raise ValueError(f"expected 4 fields, got {len(row)}")
            vals.append([float(v) for v in row])
        except ValueError as err:
            raise ValueError(f"{path}:{lineno}: malformed row: {err}") from None
    arr = np.array(vals, dtype=np.float64).reshape(-1, 4)
    return PreferencePairs(arr[:, :2], arr[:, 2:])
