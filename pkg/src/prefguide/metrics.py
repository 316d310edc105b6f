"""2D stand-ins for the image evaluation suite.

Diversity uses raw coordinates as the embedding, and the Frechet distance is the
closed-form 2-Wasserstein distance between Gaussians fitted to raw coordinates.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .dataset import GaussianMixtureSpec
from .diffusion import NoiseDraws, NoiseSchedule, diffusion_mse, epsilon_fn
from .numerics import ModelParams


@dataclass(frozen=True, eq=False)
class ClusterCounts:
    counts: np.ndarray  # (K,) samples per cluster
    outliers: int
    assignment: np.ndarray  # (n,) cluster index, -1 for outliers

    @property
    def n(self) -> int:
        return int(self.counts.sum()) + self.outliers


def cluster_assign(samples, spec: GaussianMixtureSpec, outlier_radius: float = 4.0) -> ClusterCounts:
    """Assign each sample to its nearest cluster mean if within
    ``outlier_radius * spec.sigma`` of it, else mark it an outlier.

    Non-finite samples are counted as outliers.
    """
    if not outlier_radius > 0:
        raise ValueError("outlier_radius must be positive")
    x = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    means = spec.means()
    d2 = ((x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    finite = np.isfinite(d2).all(axis=1)
    d2 = np.where(finite[:, None], d2, np.inf)
    nearest = np.argmin(d2, axis=1)
    within = d2[np.arange(len(x)), nearest] <= (outlier_radius * spec.sigma) ** 2
    assignment = np.where(within & finite, nearest, -1)
    counts = np.bincount(assignment[assignment >= 0], minlength=spec.n_clusters)
    return ClusterCounts(counts, int((assignment < 0).sum()), assignment)


def positive_mass(counts: ClusterCounts) -> float:
    """Fraction of all samples (outliers included in the denominator) in even clusters."""
    if counts.n == 0:
        raise ValueError("empty sample set")
    return float(counts.counts[0::2].sum() / counts.n)


def negative_mass(counts: ClusterCounts) -> float:
    if counts.n == 0:
        raise ValueError("empty sample set")
    return float(counts.counts[1::2].sum() / counts.n)


def modes_covered(counts: ClusterCounts, min_fraction: float = 0.02, clusters=None) -> int:
    """Number of clusters holding at least ``min_fraction`` of all samples."""
    frac = counts.counts / max(counts.n, 1)
    if clusters is not None:
        frac = frac[np.asarray(clusters)]
    return int((frac >= min_fraction).sum())


def diversity_score(samples) -> float:
    """Mean pairwise squared distance, 2/(n(n-1)) * sum_{i<j} ||x_i - x_j||^2."""
    x = np.asarray(samples, dtype=np.float64)
    x = x.reshape(len(x), -1)
    n = len(x)
    if n < 2:
        raise ValueError("diversity needs at least 2 samples")
    # sum_{i<j} ||xi - xj||^2 = n * sum ||xi||^2 - ||sum xi||^2, centred for stability
    xc = x - x.mean(axis=0)
    total = n * float(np.sum(xc * xc)) - float(np.sum(xc.sum(axis=0) ** 2))
    return 2.0 * total / (n * (n - 1))


def _fit_gaussian(x, reg: float):
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    if len(x) < 3:
        raise ValueError("Frechet distance needs at least 3 samples per set")
    mu = x.mean(axis=0)
    cov = np.cov(x, rowvar=False) + reg * np.eye(2)
    return mu, cov


def frechet_2d(samples_a, samples_b, reg: float = 1e-8) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}) for fitted 2x2 covariances.

    For 2x2 PSD S_a, S_b the product has nonnegative eigenvalues l1, l2, so
    tr sqrt(S_a S_b) = sqrt(tr(S_a S_b) + 2 sqrt(det S_a det S_b)).
    """
    mu_a, ca = _fit_gaussian(samples_a, reg)
    mu_b, cb = _fit_gaussian(samples_b, reg)
    det_a, det_b = np.linalg.det(ca), np.linalg.det(cb)
    if not (np.isfinite(det_a) and np.isfinite(det_b)) or det_a <= 0 or det_b <= 0:
        raise ValueError("degenerate covariance in Frechet distance")
    tr_prod = float(np.sum(ca * cb.T))
    tr_sqrt = np.sqrt(max(tr_prod + 2.0 * np.sqrt(det_a * det_b), 0.0))
    d = float(np.sum((mu_a - mu_b) ** 2) + np.trace(ca) + np.trace(cb) - 2.0 * tr_sqrt)
    return max(d, 0.0)


def win_rate(scores_a, scores_b) -> float:
    """Percent of paired instances where a beats b; ties count one half."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"score lists differ in length: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty score lists")
    wins = (a > b).astype(np.float64) + 0.5 * (a == b)
    # one rounding: the percent is the correctly rounded quotient of two exact values
    return float(100.0 * wins.sum() / wins.size)


def frozen_probe_noise(k: int, sched: NoiseSchedule, rng) -> NoiseDraws:
    t = rng.integers(1, sched.T + 1, k)
    return NoiseDraws(t, rng.standard_normal((k, 2)))


def implicit_reward_proxy(
    theta: ModelParams, theta_ref: ModelParams, x0, beta: float, sched: NoiseSchedule, noise: NoiseDraws
) -> np.ndarray:
    """beta * T * mean_k [ ||eps_k - eps_ref(x_t,k)||^2 - ||eps_k - eps_theta(x_t,k)||^2 ].

    The log-partition term is dropped; scores are only meaningful relative to one
    another.  Accepts one point (returns a float) or an (n, 2) array.
    """
    if len(noise) == 0:
        raise ValueError("frozen noise set is empty")
    x0 = np.asarray(x0, dtype=np.float64)
    single = x0.ndim == 1
    X = x0.reshape(-1, 2)
    n, k = len(X), len(noise)
    rep_x = np.repeat(X, k, axis=0)
    rep = NoiseDraws(np.tile(noise.t, n), np.tile(noise.eps, (n, 1)))
    m_ref = diffusion_mse(epsilon_fn(theta_ref, sched.T), rep_x, rep, sched).reshape(n, k)
    m_th = diffusion_mse(epsilon_fn(theta, sched.T), rep_x, rep, sched).reshape(n, k)
    score = beta * sched.T * (m_ref - m_th).mean(axis=1)
    return float(score[0]) if single else score


@dataclass
class RunMetrics:
    positive_mass: float
    negative_mass: float
    outlier_mass: float
    modes_covered: int
    positive_modes_covered: int
    diversity: float
    frechet: float
    n_samples: int
    failures: int

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def row(self) -> dict:
        return asdict(self)


def compute_metrics(
    samples,
    spec: GaussianMixtureSpec,
    reference,
    outlier_radius: float = 4.0,
    min_fraction: float = 0.02,
) -> RunMetrics:
    """Evaluate a sample set; non-finite rows are failures and excluded from
    diversity/Frechet but counted as outliers in the masses."""
    x = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    ok = np.isfinite(x).all(axis=1)
    ref = np.asarray(reference, dtype=np.float64).reshape(-1, 2)
    ref = ref[np.isfinite(ref).all(axis=1)]
    counts = cluster_assign(x, spec, outlier_radius)
    pos, neg = positive_mass(counts), negative_mass(counts)
    return RunMetrics(
        positive_mass=pos,
        negative_mass=neg,
        outlier_mass=counts.outliers / counts.n,
        modes_covered=modes_covered(counts, min_fraction),
        positive_modes_covered=modes_covered(counts, min_fraction, spec.positive_clusters()),
        diversity=diversity_score(x[ok]),
        frechet=frechet_2d(x[ok], ref),
        n_samples=len(x),
        failures=int((~ok).sum()),
    )
