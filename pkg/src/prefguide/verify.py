"""Identity and oracle battery behind ``prefguide verify``.

Checks run on small random networks so the whole battery takes seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .alignment import AlignConfig, draw_pair_noise, dpo_loss, verify_reweighting_identity
from .dataset import PreferencePairs
from .diffusion import diffusion_loss, draw_noise, make_schedule, sample, epsilon_fn
from .guidance import GuidanceSpec, guided_sample
from .merge_distill import distill_loss, linearization_residual, merge_cpgd, merge_pgd
from .metrics import diversity_score, frechet_2d, win_rate
from .numerics import ModelParams, init_params, numerical_gradient, relative_error


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _small(seed, emb_dim=4, hidden=8):
    return init_params(seed, emb_dim=emb_dim, hidden=hidden)


def _perturbed(p: ModelParams, rng, scale=0.3) -> ModelParams:
    return p + p.unflatten(scale * rng.standard_normal(p.size))


def check_reductions(seed: int = 0) -> Check:
    sched = make_schedule(20, 1e-3, 0.3)
    rng = np.random.default_rng(seed)
    ref = _small(seed)
    tuned = _perturbed(ref, rng)
    other = _perturbed(ref, rng)
    n = 64

    def draw(spec):
        return guided_sample(spec, n, sched, np.random.default_rng(seed + 1)).tobytes()

    base = sample(epsilon_fn(ref, sched.T), n, sched, np.random.default_rng(seed + 1)).tobytes()
    tuned_only = sample(epsilon_fn(tuned, sched.T), n, sched, np.random.default_rng(seed + 1)).tobytes()
    results = {
        "pgd w=0": draw(GuidanceSpec("pgd", 0.0, ref=ref, tuned=tuned)) == base,
        "pgd w=1": draw(GuidanceSpec("pgd", 1.0, ref=ref, tuned=tuned)) == tuned_only,
        "cpgd pos=neg": draw(GuidanceSpec("cpgd", 3.0, ref=ref, pos=other, neg=other)) == base,
        "partial s=0": draw(GuidanceSpec("pgd", 5.0, s=0, ref=ref, tuned=tuned)) == base,
        "merge a=0": merge_pgd(ref, tuned, 0.0).identical(ref),
        "merge a=1": merge_pgd(ref, tuned, 1.0).identical(tuned),
        "cpgd-merge +=-": merge_cpgd(ref, tuned, tuned, 4.0).identical(ref),
    }
    bad = [k for k, ok in results.items() if not ok]
    return Check("reduction identities (bitwise)", not bad, "failed: " + ", ".join(bad) if bad else "all exact")


def check_dpo_fixed_point(n_trials: int = 50) -> Check:
    sched = make_schedule()
    worst = 0.0
    for s in range(n_trials):
        rng = np.random.default_rng(s)
        p = _small(s)
        pairs = PreferencePairs(rng.normal(0, 3, (16, 2)), rng.normal(0, 3, (16, 2)))
        loss, _, _ = dpo_loss(p, p.copy(), pairs, AlignConfig(beta=float(rng.uniform(0.1, 10))), sched, rng)
        worst = max(worst, abs(loss - math.log(2.0)))
    return Check("DPO fixed point ln 2", worst < 1e-12, f"max |loss - ln2| = {worst:.2e}")


def check_gradients(n_trials: int = 5, tol: float = 1e-4) -> Check:
    sched = make_schedule()
    worst = 0.0
    for s in range(n_trials):
        rng = np.random.default_rng(100 + s)
        p, ref = _small(s), _small(s + 1000)
        x = rng.normal(0, 3, (8, 2))
        d = draw_noise(8, sched, rng)
        f = lambda q: diffusion_loss(q, x, sched, draws=d)[0]
        worst = max(worst, relative_error(diffusion_loss(p, x, sched, draws=d)[1], numerical_gradient(f, p)))
        pairs = PreferencePairs(x, rng.normal(0, 3, (8, 2)))
        cfg = AlignConfig(beta=0.05)
        pd = draw_pair_noise(8, sched, rng)
        f = lambda q: dpo_loss(q, ref, pairs, cfg, sched, draws=pd)[0]
        worst = max(worst, relative_error(dpo_loss(p, ref, pairs, cfg, sched, draws=pd)[1], numerical_gradient(f, p)))
        teacher = GuidanceSpec("cpgd", 2.0, ref=ref, pos=_perturbed(ref, rng), neg=_perturbed(ref, rng))
        f = lambda q: distill_loss(q, teacher, x, sched, draws=d)[0]
        worst = max(worst, relative_error(distill_loss(p, teacher, x, sched, draws=d)[1], numerical_gradient(f, p)))
    return Check("analytic vs finite-difference gradients", worst < tol, f"max rel. error = {worst:.2e}")


def check_reweighting(n_trials: int = 50, tol: float = 1e-8) -> Check:
    sched = make_schedule()
    worst = 0.0
    for s in range(n_trials):
        rng = np.random.default_rng(200 + s)
        ref = _small(s)
        tp, tn = _perturbed(ref, rng, 0.02), _perturbed(ref, rng, 0.02)
        pairs = PreferencePairs(rng.normal(0, 3, (16, 2)), rng.normal(0, 3, (16, 2)))
        beta = float(rng.uniform(0.1, 5.0))
        res = verify_reweighting_identity(tp, tn, ref, pairs, beta, sched, draw_pair_noise(16, sched, rng))
        worst = max(worst, res.max_abs_deviation)
    return Check("reweighted DPO gradient = SFT gradient difference", worst < tol, f"max abs deviation = {worst:.2e}")


def check_taylor(n_trials: int = 20) -> Check:
    sched = make_schedule()
    rng = np.random.default_rng(300)
    p0 = init_params(1)
    probes = (rng.normal(0, 2, (64, 2)), rng.integers(1, sched.T + 1, 64), sched.T)
    direction = p0.unflatten(rng.standard_normal(p0.size))
    at_one = linearization_residual(p0, direction.scale(1e-2), 1.0, probes)[0]
    head = p0.zeros_like()
    head.W3 = rng.standard_normal(head.W3.shape)
    head.b3 = rng.standard_normal(head.b3.shape)
    head_only = linearization_residual(p0, head, 3.0, probes)[0]
    ratios = []
    for _ in range(n_trials):
        d = p0.unflatten(rng.standard_normal(p0.size)).scale(1e-3)
        r1 = linearization_residual(p0, d, 3.0, probes)[0]
        r2 = linearization_residual(p0, d.scale(0.5), 3.0, probes)[0]
        ratios.append(r1 / r2)
    ok = at_one == 0.0 and head_only == 0.0 and all(3.5 <= r <= 4.5 for r in ratios)
    return Check(
        "Taylor residual of merged checkpoint",
        ok,
        f"lambda=1: {at_one:.1e}, head-only: {head_only:.1e}, halving ratios in [{min(ratios):.3f}, {max(ratios):.3f}]",
    )


def check_metrics() -> Check:
    rng = np.random.default_rng(400)
    x = rng.normal(size=(100, 2))
    brute = sum(np.sum((x[i] - x[j]) ** 2) for i in range(100) for j in range(i + 1, 100)) * 2 / (100 * 99)
    div_err = abs(diversity_score(x) - brute)
    a = rng.standard_normal((100_000, 2))
    b = np.array([1.0, 0.0]) + 2.0 * rng.standard_normal((100_000, 2))
    fd = frechet_2d(a, b)
    self_fd = frechet_2d(a, a)
    wr = (win_rate([1, 1], [1, 1]), win_rate([2, 3], [1, 2]), win_rate([1, 0, 2], [0, 1, 1]))
    ok = (
        div_err < 1e-9
        and abs(fd - 3.0) / 3.0 < 0.05
        and self_fd < 1e-10
        and wr[0] == 50.0
        and wr[1] == 100.0
        and wr[2] == 200.0 / 3.0
    )
    return Check("metric oracles", ok, f"diversity err {div_err:.1e}, frechet {fd:.4f} (exact 3), self {self_fd:.1e}, win rates {wr}")


def run_all() -> list[Check]:
    return [
        check_reductions(),
        check_dpo_fixed_point(),
        check_gradients(),
        check_reweighting(),
        check_taylor(),
        check_metrics(),
    ]
