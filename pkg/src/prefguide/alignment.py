"""Diffusion-DPO, positive/negative SFT, and the cPGD reweighting identity.

The diffusion proxy for a log-likelihood ratio is a difference of per-step
epsilon-matching errors.  For one pair with shared step t and noises eps+, eps-:

    logit = -beta * T * omega * (mse(theta, x+) - mse(ref, x+) - mse(theta, x-) + mse(ref, x-))
    loss  = -log sigmoid(logit)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .dataset import PreferencePairs
from .diffusion import (
    NoiseDraws,
    NoiseSchedule,
    TrainConfig,
    diffusion_loss,
    draw_noise,
    mse_and_upstream,
    train_diffusion,
)
from .numerics import ModelParams, NumericalError, OptimizerState, adam_step, backward_cache

log = logging.getLogger(__name__)

# Large-scale presets used for SD1.5 / SDXL; the toy uses the small values.
BETA_PRESETS_LARGE = {"sd15": 3000.0, "sdxl": 5000.0}
BETA_SWEEP_TOY = (0.5, 1.0, 3.0)


@dataclass
class AlignConfig:
    beta: float = 3.0
    omega: float = 1.0
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    log_every: int = 100
    n_probe: int = 1024

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


@dataclass(frozen=True, eq=False)
class PairDraws:
    """Shared step t with independent winner/loser noises."""

    t: np.ndarray
    eps_pos: np.ndarray
    eps_neg: np.ndarray

    @property
    def pos(self) -> NoiseDraws:
        return NoiseDraws(self.t, self.eps_pos)

    @property
    def neg(self) -> NoiseDraws:
        return NoiseDraws(self.t, self.eps_neg)


def draw_pair_noise(m: int, sched: NoiseSchedule, rng: np.random.Generator) -> PairDraws:
    t = rng.integers(1, sched.T + 1, m)
    return PairDraws(t, rng.standard_normal((m, 2)), rng.standard_normal((m, 2)))


@dataclass(eq=False)
class DpoBatchTrace:
    t: np.ndarray
    eps_pos: np.ndarray
    eps_neg: np.ndarray
    mse_pos_theta: np.ndarray
    mse_pos_ref: np.ndarray
    mse_neg_theta: np.ndarray
    mse_neg_ref: np.ndarray
    logit: np.ndarray
    # sigmoid(-logit): the per-pair factor multiplying the logit gradient
    weight: np.ndarray

    @property
    def draws(self) -> PairDraws:
        return PairDraws(self.t, self.eps_pos, self.eps_neg)


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _dpo_terms(params, ref_params, pairs, beta, omega, sched, draws):
    mp_t, cache_p, dp = mse_and_upstream(params, pairs.x_pos, draws.pos, sched)
    mn_t, cache_n, dn = mse_and_upstream(params, pairs.x_neg, draws.neg, sched)
    mp_r, _, _ = mse_and_upstream(ref_params, pairs.x_pos, draws.pos, sched)
    mn_r, _, _ = mse_and_upstream(ref_params, pairs.x_neg, draws.neg, sched)
    scale = beta * sched.T * omega
    with np.errstate(over="ignore", invalid="ignore"):  # checked by the caller
        logit = -scale * ((mp_t - mp_r) - (mn_t - mn_r))
    return (mp_t, mp_r, mn_t, mn_r), logit, (cache_p, dp), (cache_n, dn)


def dpo_loss(
    params: ModelParams,
    ref_params: ModelParams,
    pairs: PreferencePairs,
    cfg: AlignConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator | None = None,
    draws: PairDraws | None = None,
) -> tuple[float, ModelParams, DpoBatchTrace]:
    """Diffusion-DPO loss over a batch of pairs, its gradient w.r.t. ``params``, and a trace."""
    m = len(pairs)
    if m == 0:
        raise ValueError("empty pair batch")
    if draws is None:
        if rng is None:
            raise ValueError("need rng or draws")
        draws = draw_pair_noise(m, sched, rng)
    (mp_t, mp_r, mn_t, mn_r), logit, (cache_p, dp), (cache_n, dn) = _dpo_terms(
        params, ref_params, pairs, cfg.beta, cfg.omega, sched, draws
    )
    if not np.isfinite(logit).all():
        bad = int(np.flatnonzero(~np.isfinite(logit))[0])
        raise NumericalError(f"non-finite DPO logit at pair {bad}")
    loss = float(np.mean(np.logaddexp(0.0, -logit)))
    weight = _sigmoid(-logit)
    # dL/dlogit_i = -weight_i / m ; dlogit/dmse(theta,+) = -scale ; dlogit/dmse(theta,-) = +scale
    scale = cfg.beta * sched.T * cfg.omega
    c = (weight * scale / m)[:, None]
    g_pos, _ = backward_cache(params, cache_p, c * dp)
    g_neg, _ = backward_cache(params, cache_n, -c * dn)
    trace = DpoBatchTrace(draws.t, draws.eps_pos, draws.eps_neg, mp_t, mp_r, mn_t, mn_r, logit, weight)
    return loss, g_pos + g_neg, trace


def sft_loss(params: ModelParams, subset, sched: NoiseSchedule, rng=None, draws: NoiseDraws | None = None):
    """Epsilon-matching loss on a positive-only or negative-only subset."""
    return diffusion_loss(params, subset, sched, rng=rng, draws=draws)


def train_sft(base: ModelParams, subset, cfg: TrainConfig, sched: NoiseSchedule) -> tuple[ModelParams, list[float]]:
    """Finetune ``base`` on one label class (SFT+ on positives, SFT- on negatives)."""
    x = getattr(subset, "x", subset)
    return train_diffusion(base.copy(), x, cfg, sched, "sft")


@dataclass
class DpoLogRow:
    step: int
    loss: float
    l_pos: float
    l_neg: float


@dataclass(eq=False)
class ProbeSet:
    """Frozen (x, t, eps) triples for comparable winner/loser MSE curves."""

    x_pos: np.ndarray
    x_neg: np.ndarray
    draws_pos: NoiseDraws
    draws_neg: NoiseDraws

    @classmethod
    def build(cls, pairs: PreferencePairs, n: int, sched: NoiseSchedule, rng) -> "ProbeSet":
        i = rng.integers(0, len(pairs), n)
        j = rng.integers(0, len(pairs), n)
        return cls(pairs.x_pos[i], pairs.x_neg[j], draw_noise(n, sched, rng), draw_noise(n, sched, rng))

    def components(self, params: ModelParams, sched: NoiseSchedule) -> tuple[float, float]:
        lp, _, _ = mse_and_upstream(params, self.x_pos, self.draws_pos, sched)
        ln, _, _ = mse_and_upstream(params, self.x_neg, self.draws_neg, sched)
        return float(lp.mean()), float(ln.mean())


def train_dpo(
    base: ModelParams, pairs: PreferencePairs, cfg: AlignConfig, sched: NoiseSchedule
) -> tuple[ModelParams, list[DpoLogRow]]:
    """Diffusion-DPO finetuning of ``base`` with ``base`` as the frozen reference.

    Every ``cfg.log_every`` steps (and at step 0 and the end) the winner/loser
    probe MSEs are recorded.  The loss column is that of the minibatch at that step
    (NaN for the final row, which follows the last update).
    """
    ref = base.copy()
    probe_rng = np.random.default_rng([cfg.seed, 7])
    probes = ProbeSet.build(pairs, cfg.n_probe, sched, probe_rng)
    rng = np.random.default_rng([cfg.seed, 2])
    history: list[DpoLogRow] = []
    params = base.copy()

    def step(p, rng):
        batch = pairs.take(rng.integers(0, len(pairs), cfg.batch_size))
        loss, grads, _ = dpo_loss(p, ref, batch, cfg, sched, rng)
        return loss, grads

    state = OptimizerState.init(params, lr=cfg.lr)
    for k in range(cfg.steps):
        loss, grads = step(params, rng)
        if not np.isfinite(loss) or not grads.is_finite():
            raise NumericalError(f"DPO diverged at step {k} (loss={loss})")
        if k % cfg.log_every == 0:
            history.append(DpoLogRow(k, loss, *probes.components(params, sched)))
        state, params = adam_step(state, params, grads)
    history.append(DpoLogRow(cfg.steps, float("nan"), *probes.components(params, sched)))
    return params, history


# reweighting identity -------------------------------------------------------

def reweight_factor(logit, beta: float):
    """1 / (beta * sigmoid(logit)) with sigmoid clamped at the smallest normal float.

    ``logit`` is the theta_minus-minus-theta_plus log-ratio proxy, which for the
    diffusion proxy is the negated DPO logit.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    s = _sigmoid(np.asarray(logit, dtype=np.float64))
    tiny = np.finfo(np.float64).tiny
    if np.any(s < tiny):
        log.warning("sigmoid underflow in reweight_factor; clamping to %g", tiny)
        s = np.maximum(s, tiny)
    out = 1.0 / (beta * s)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(eq=False)
class ReweightCheck:
    max_abs_deviation: float
    reweighted_pos: ModelParams
    reweighted_neg: ModelParams
    sft_pos: ModelParams
    sft_neg: ModelParams


def residual_dpo_terms(theta_pos, theta_neg, ref, pairs, beta, omega, sched, draws: PairDraws):
    """Per-pair DPO logits with the residual parameterization theta = (theta+, theta-).

    theta+ scores the winner and theta- scores the loser; the reference scores both.
    """
    mp, cache_p, dp = mse_and_upstream(theta_pos, pairs.x_pos, draws.pos, sched)
    mn, cache_n, dn = mse_and_upstream(theta_neg, pairs.x_neg, draws.neg, sched)
    rp, _, _ = mse_and_upstream(ref, pairs.x_pos, draws.pos, sched)
    rn, _, _ = mse_and_upstream(ref, pairs.x_neg, draws.neg, sched)
    logit = -beta * sched.T * omega * ((mp - rp) - (mn - rn))
    return logit, (cache_p, dp), (cache_n, dn)


def verify_reweighting_identity(
    theta_pos: ModelParams,
    theta_neg: ModelParams,
    ref: ModelParams,
    pairs: PreferencePairs,
    beta: float,
    sched: NoiseSchedule,
    draws: PairDraws,
    omega: float = 1.0,
    sft_draws: PairDraws | None = None,
) -> ReweightCheck:
    """Compare the reweighted DPO gradient with the SFT gradient difference.

    DPO side: mean over pairs of reweight_factor(-logit_i) * grad(-log sigmoid(logit_i)),
    split into its theta+ and theta- blocks.
    SFT side: theta+ block = grad of T*omega*mean mse(theta+, winners),
              theta- block = -grad of T*omega*mean mse(theta-, losers),
    i.e. E_-[grad log pi(x; theta-)] - E_+[grad log pi(x; theta+)] under the proxy
    log pi = -T*omega*mse.
    """
    if sft_draws is not None and not (
        np.array_equal(sft_draws.t, draws.t)
        and np.array_equal(sft_draws.eps_pos, draws.eps_pos)
        and np.array_equal(sft_draws.eps_neg, draws.eps_neg)
    ):
        raise ValueError("SFT and DPO noise draws differ; the identity only holds for shared draws")
    m = len(pairs)
    scale = beta * sched.T * omega
    logit, (cache_p, dp), (cache_n, dn) = residual_dpo_terms(
        theta_pos, theta_neg, ref, pairs, beta, omega, sched, draws
    )
    # per-pair grad of -log sigmoid(logit) is -sigmoid(-logit) * grad(logit)
    c = reweight_factor(-logit, beta) * _sigmoid(-logit) * scale / m
    rw_pos, _ = backward_cache(theta_pos, cache_p, c[:, None] * dp)
    rw_neg, _ = backward_cache(theta_neg, cache_n, -c[:, None] * dn)

    _, g_pos, _ = diffusion_loss(theta_pos, pairs.x_pos, sched, draws=draws.pos, weight=sched.T * omega)
    _, g_neg, _ = diffusion_loss(theta_neg, pairs.x_neg, sched, draws=draws.neg, weight=sched.T * omega)
    sft_pos, sft_neg = g_pos, -g_neg
    dev = max(
        float(np.max(np.abs((rw_pos - sft_pos).flatten()))),
        float(np.max(np.abs((rw_neg - sft_neg).flatten()))),
    )
    return ReweightCheck(dev, rw_pos, rw_neg, sft_pos, sft_neg)
