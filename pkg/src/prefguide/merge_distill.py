"""Weight-space merging of guided models, its Taylor residual, and offline distillation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .diffusion import NoiseDraws, NoiseSchedule, TrainConfig, adam_fit, draw_noise, forward_noise
from .guidance import GuidanceSpec, pgd_epsilon
from .numerics import ModelParams, backward_cache, forward_cache, mlp_forward

MERGE_MODES = ("pgd_merge", "cpgd_merge")
# Best coefficients reported at SDXL scale; toy runs re-tune alpha.
ALPHA_PRESETS_SDXL = {"pgd_merge": 6.0, "cpgd_merge": 10.0}


@dataclass
class MergeConfig:
    alpha: float = 1.0
    mode: str = "pgd_merge"

    def __post_init__(self):
        if not np.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if self.mode not in MERGE_MODES:
            raise ValueError(f"unknown merge mode {self.mode!r}")


def merge_pgd(theta0: ModelParams, theta_plus: ModelParams, alpha: float) -> ModelParams:
    """theta0 + alpha (theta_plus - theta0); alpha = 0 and 1 return the endpoints exactly."""
    theta0._check(theta_plus)
    a = float(alpha)
    return ModelParams(
        *((1.0 - a) * p0 + a * p1 for p0, p1 in zip(theta0.arrays(), theta_plus.arrays()))
    )


def merge_cpgd(theta0: ModelParams, theta_plus: ModelParams, theta_minus: ModelParams, alpha: float) -> ModelParams:
    """theta0 + alpha (theta_plus - theta_minus)."""
    return theta0 + (theta_plus - theta_minus).scale(alpha)


# Every finite double is an integer multiple of 2**-1074.
_EXP = 1074


def _exact_ints(a) -> np.ndarray:
    """float64 array -> object array of Python ints equal to a * 2**1074 exactly."""
    out = np.empty(np.shape(a), dtype=object)
    for idx, v in np.ndenumerate(np.asarray(a, dtype=np.float64)):
        num, den = float(v).as_integer_ratio()
        out[idx] = num * ((1 << _EXP) // den)
    return out


def _exact_head(h2: np.ndarray, theta0: ModelParams, delta: ModelParams, num: int, den: int) -> np.ndarray:
    """Head output at the exact parameter point theta0 + (num/den) delta.

    Returned as integers scaled by den * 2**(2*1074).
    """
    W = _exact_ints(theta0.W3) * den + _exact_ints(delta.W3) * num
    b = _exact_ints(theta0.b3) * den + _exact_ints(delta.b3) * num
    return _exact_ints(h2) @ W.T + b * (1 << _EXP)


def linearization_residual(
    theta0: ModelParams, delta: ModelParams, lam: float, probes
) -> tuple[float, float]:
    """First-order merge gap over probe points (x, t).

    r_merge = max ||f(theta0 + lam*delta) - f(theta0) - lam (f(theta0 + delta) - f(theta0))||
    r_pgd_gap = max ||f_PGD(lam) - f(theta0 + lam*delta)|| with f_PGD composed by pgd_epsilon.

    ``probes`` is a pair (x, t) of arrays with shapes (n, 2) and (n,), plus the
    schedule length as a third element.

    The hidden layers run in float64; the linear head and the three-way
    combination for r_merge are evaluated in exact integer arithmetic at the
    exact parameter points, so the part of the network that is affine in the
    parameters contributes no rounding (head-only perturbations give exactly zero).
    """
    x, t, T = probes
    x = np.asarray(x, dtype=np.float64).reshape(-1, 2)
    if len(x) == 0:
        raise ValueError("need at least one probe")
    t = np.broadcast_to(np.asarray(t), (len(x),))
    lam_num, lam_den = float(lam).as_integer_ratio()
    coeffs = ((0, 1), (1, 1), (lam_num, lam_den))
    outs, heads = [], []
    for num, den in coeffs:
        p = theta0 + delta.scale(num / den) if num else theta0
        out, (_, _, h2) = forward_cache(p, x, t, T)
        outs.append(out)
        heads.append(_exact_head(h2, theta0, delta, num * (lam_den // den), lam_den))
    f0, f1, fl = heads
    gap = (fl - f0) * lam_den - (f1 - f0) * lam_num
    scale = (lam_den * lam_den) << (2 * _EXP)
    norms = [math.sqrt(float(Fraction(int(g0 * g0 + g1 * g1), scale * scale))) for g0, g1 in gap]
    r_merge = max(norms)
    pgd = pgd_epsilon(outs[0], outs[1], lam)
    r_pgd = float(np.max(np.linalg.norm(pgd - outs[2], axis=1)))
    return r_merge, r_pgd


def noised_probes(x0, n: int, sched: NoiseSchedule, rng) -> tuple[np.ndarray, np.ndarray, int]:
    """Probe points drawn from noised data at mixed t."""
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1, 2)
    idx = rng.integers(0, len(x0), n)
    d = draw_noise(n, sched, rng)
    return forward_noise(x0[idx], d.t, d.eps, sched), d.t, sched.T


def alpha_sweep(theta0, theta_plus, lam: float, alphas, probes, theta_minus=None) -> list[tuple[float, float]]:
    """RMS gap between the guided output at weight ``lam`` and the merged model, per alpha."""
    x, t, T = probes
    f0 = mlp_forward(theta0, x, t, T)
    if theta_minus is None:
        target = pgd_epsilon(f0, mlp_forward(theta_plus, x, t, T), lam)
    else:
        target = f0 + lam * (mlp_forward(theta_plus, x, t, T) - mlp_forward(theta_minus, x, t, T))
    out = []
    for a in alphas:
        merged = merge_pgd(theta0, theta_plus, a) if theta_minus is None else merge_cpgd(theta0, theta_plus, theta_minus, a)
        diff = mlp_forward(merged, x, t, T) - target
        out.append((float(a), float(np.sqrt(np.mean(np.sum(diff**2, axis=1))))))
    return out


# distillation -------------------------------------------------------------

def teacher_targets(teacher: GuidanceSpec, xt: np.ndarray, t: np.ndarray, T: int) -> np.ndarray:
    return teacher.epsilon_mixed(xt, t, T)


def distill_loss(
    student: ModelParams,
    teacher: GuidanceSpec,
    x0,
    sched: NoiseSchedule,
    rng=None,
    draws: NoiseDraws | None = None,
) -> tuple[float, ModelParams, NoiseDraws]:
    """mean ||eps_hat(x_t, t) - eps_student(x_t, t)||^2 at noised data points."""
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1, 2)
    if draws is None:
        draws = draw_noise(len(x0), sched, rng)
    xt = forward_noise(x0, draws.t, draws.eps, sched)
    target = teacher_targets(teacher, xt, draws.t, sched.T)
    out, cache = forward_cache(student, xt, draws.t, sched.T)
    resid = target - out
    n = len(x0)
    loss = float(np.mean(np.sum(resid * resid, axis=1)))
    grads, _ = backward_cache(student, cache, (-2.0 / n) * resid)
    return loss, grads, draws


def distill(
    student_init: ModelParams, teacher: GuidanceSpec, dataset, cfg: TrainConfig, sched: NoiseSchedule
) -> tuple[ModelParams, list[float]]:
    """Offline distillation: targets come from the teacher at noised dataset points;
    no samples are generated."""
    teacher.validate(sched.T)
    x = np.asarray(getattr(dataset, "x", dataset), dtype=np.float64).reshape(-1, 2)
    if len(x) == 0:
        raise ValueError("empty distillation set")
    rng = np.random.default_rng([cfg.seed, 3])

    def step(p, rng):
        batch = x[rng.integers(0, len(x), cfg.batch_size)]
        loss, grads, _ = distill_loss(p, teacher, batch, sched, rng)
        return loss, grads

    return adam_fit(student_init.copy(), step, cfg.steps, cfg.lr, rng, "distill")
