"""Noise schedule, forward noising, epsilon-matching training, ancestral DDPM sampling.

Step indices t run from 1 to T as in the usual DDPM notation; arrays are stored
0-based, so ``sched.betas[t - 1]`` is beta_t.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .numerics import (
    ModelParams,
    NumericalError,
    OptimizerState,
    adam_step,
    backward_cache,
    forward_cache,
    init_params,
    mlp_forward,
)

log = logging.getLogger(__name__)


class EpsilonFn(Protocol):
    def __call__(self, x: np.ndarray, t: int) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_var: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 2:
            raise ValueError("need at least 2 diffusion steps")
        if (betas < 0).any() or (betas >= 1).any():
            raise ValueError("betas must lie in [0, 1)")
        if betas[0] <= 0:
            raise ValueError("beta_1 must be positive")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        posterior_var = (1.0 - prev) / (1.0 - alpha_bars) * betas
        return cls(betas, alphas, alpha_bars, posterior_var)

    def near_prior(self, tol: float = 0.99) -> bool:
        """Whether q(x_T | x_0) is close to N(0, I), i.e. 1 - abar_T > tol."""
        return bool(1.0 - self.alpha_bars[-1] > tol)

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"step index out of range [1, {self.T}]")

    def to_csv(self) -> str:
        lines = ["t,beta,alpha,alpha_bar,posterior_var"]
        for i in range(self.T):
            vals = (self.betas[i], self.alphas[i], self.alpha_bars[i], self.posterior_var[i])
            lines.append(f"{i + 1}," + ",".join(format(v, ".17g") for v in vals))
        return "\n".join(lines) + "\n"


def make_schedule(T: int = 100, beta_start: float = 1e-4, beta_end: float = 0.2) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def forward_noise(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, broadcast over rows."""
    sched.check_step(t)
    ab = sched.alpha_bars[np.asarray(t) - 1]
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if np.ndim(ab):
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


@dataclass(frozen=True, eq=False)
class NoiseDraws:
    """Per-example diffusion step and Gaussian noise."""

    t: np.ndarray
    eps: np.ndarray

    def __len__(self):
        return len(self.t)

    def same_as(self, other: "NoiseDraws") -> bool:
        return self.t.tobytes() == other.t.tobytes() and self.eps.tobytes() == other.eps.tobytes()


def draw_noise(n: int, sched: NoiseSchedule, rng: np.random.Generator, dim: int = 2) -> NoiseDraws:
    t = rng.integers(1, sched.T + 1, n)
    eps = rng.standard_normal((n, dim))
    return NoiseDraws(t, eps)


def epsilon_fn(params: ModelParams, T: int) -> EpsilonFn:
    """Wrap a parameter set as an (x, t) -> eps callable."""

    def eps(x, t):
        return mlp_forward(params, x, t, T)

    return eps


def diffusion_mse(eps_fn: EpsilonFn, x0, draws: NoiseDraws, sched: NoiseSchedule) -> np.ndarray:
    """Per-example ||eps - eps_fn(x_t, t)||^2 under fixed draws (value only)."""
    xt = forward_noise(x0, draws.t, draws.eps, sched)
    out = np.empty_like(xt)
    for t in np.unique(draws.t):
        rows = draws.t == t
        out[rows] = eps_fn(xt[rows], int(t))
    return np.sum((draws.eps - out) ** 2, axis=1)


def mse_and_upstream(params: ModelParams, x0: np.ndarray, draws: NoiseDraws, sched: NoiseSchedule):
    """Per-example squared errors, the forward cache, and d(mse_i)/d(out_i)."""
    xt = forward_noise(x0, draws.t, draws.eps, sched)
    out, cache = forward_cache(params, xt, draws.t, sched.T)
    resid = draws.eps - out
    return np.sum(resid * resid, axis=1), cache, -2.0 * resid


def diffusion_loss(
    params: ModelParams,
    batch,
    sched: NoiseSchedule,
    rng: np.random.Generator | None = None,
    draws: NoiseDraws | None = None,
    weight: float = 1.0,
) -> tuple[float, ModelParams, NoiseDraws]:
    """Mean epsilon-matching loss over ``batch`` and its exact gradient.

    Either ``rng`` or frozen ``draws`` must be given.  The draws actually used are
    returned so the same (t, eps) can be replayed elsewhere.
    """
    x0 = np.asarray(batch, dtype=np.float64).reshape(-1, params.data_dim)
    if len(x0) == 0:
        raise ValueError("empty batch")
    if draws is None:
        if rng is None:
            raise ValueError("need rng or draws")
        draws = draw_noise(len(x0), sched, rng, params.data_dim)
    elif len(draws) != len(x0):
        raise ValueError("draws and batch differ in length")
    mse, cache, dmse = mse_and_upstream(params, x0, draws, sched)
    n = len(x0)
    loss = weight * float(mse.mean())
    grads, _ = backward_cache(params, cache, (weight / n) * dmse)
    return loss, grads, draws


@dataclass
class TrainConfig:
    steps: int = 4000
    batch_size: int = 256
    lr: float = 2e-3
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def adam_fit(
    params: ModelParams,
    loss_and_grad: Callable[[ModelParams, np.random.Generator], tuple[float, ModelParams]],
    steps: int,
    lr: float,
    rng: np.random.Generator,
    what: str = "training",
) -> tuple[ModelParams, list[float]]:
    """Generic Adam loop; aborts on a non-finite loss."""
    state = OptimizerState.init(params, lr=lr)
    losses = []
    for step in range(steps):
        loss, grads = loss_and_grad(params, rng)
        if not np.isfinite(loss) or not grads.is_finite():
            raise NumericalError(f"{what} diverged at step {step} (loss={loss})")
        state, params = adam_step(state, params, grads)
        losses.append(loss)
        if step % 500 == 0:
            log.debug("%s step %d loss %.5f", what, step, loss)
    return params, losses


def train_diffusion(
    params: ModelParams, x: np.ndarray, cfg: TrainConfig, sched: NoiseSchedule, what: str = "diffusion"
) -> tuple[ModelParams, list[float]]:
    """Adam on the epsilon-matching loss over minibatches drawn uniformly from ``x``."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    if len(x) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng([cfg.seed, 1])

    def step(p, rng):
        batch = x[rng.integers(0, len(x), cfg.batch_size)]
        loss, grads, _ = diffusion_loss(p, batch, sched, rng)
        return loss, grads

    return adam_fit(params, step, cfg.steps, cfg.lr, rng, what)


def train_base(points, cfg: TrainConfig, sched: NoiseSchedule, **arch) -> tuple[ModelParams, list[float]]:
    """Pretrain from a seeded init on every point, ignoring labels."""
    x = getattr(points, "x", points)
    params = init_params(np.random.default_rng([cfg.seed, 0]), **arch)
    return train_diffusion(params, x, cfg, sched, "pretrain")


# sampling -------------------------------------------------------------------

def ddpm_step(eps_fn: EpsilonFn, x_t, t: int, sched: NoiseSchedule, rng, stochastic: bool = True, eps=None):
    """One ancestral step x_t -> x_{t-1}; no noise is added at t = 1.

    ``eps`` may carry a precomputed prediction for x_t, in which case ``eps_fn`` is
    not called.
    """
    sched.check_step(t)
    beta = sched.betas[t - 1]
    ab = sched.alpha_bars[t - 1]
    if eps is None:
        eps = eps_fn(x_t, t)
    coef = beta / np.sqrt(1.0 - ab) if beta > 0 else 0.0
    mean = (x_t - coef * eps) / np.sqrt(sched.alphas[t - 1])
    if t == 1:
        return mean
    z = rng.standard_normal(np.shape(x_t))
    if not stochastic:
        return mean
    return mean + np.sqrt(sched.posterior_var[t - 1]) * z


def sample(
    eps_fn: EpsilonFn,
    n: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    stochastic: bool = True,
    dim: int = 2,
) -> np.ndarray:
    """Run n reverse trajectories from x_T ~ N(0, I) down to x_0.

    Trajectories that go non-finite are frozen as NaN rows and counted in a
    warning; the random stream is consumed identically either way.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    x = rng.standard_normal((n, dim))
    alive = np.ones(n, dtype=bool)
    for t in range(sched.T, 0, -1):
        x_in = np.where(alive[:, None], x, 0.0)
        x = ddpm_step(eps_fn, x_in, t, sched, rng, stochastic)
        bad = ~np.isfinite(x).all(axis=1)
        if bad.any():
            alive &= ~bad
    x[~alive] = np.nan
    failed = int((~alive).sum())
    if failed:
        log.warning("%d of %d trajectories became non-finite and were dropped", failed, n)
    return x
