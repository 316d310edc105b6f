import numpy as np
import pytest

from prefguide.numerics import init_params

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


def small_params(seed, emb_dim=4, hidden=8):
    return init_params(seed, emb_dim=emb_dim, hidden=hidden)


def perturb(p, rng, scale):
    return p + p.unflatten(scale * rng.standard_normal(p.size))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mixture():
    from prefguide.dataset import GaussianMixtureSpec

    return GaussianMixtureSpec()


@pytest.fixture(scope="session")
def toy_data(mixture):
    from prefguide.dataset import generate_mixture

    return generate_mixture(mixture, 8000)


@pytest.fixture(scope="session")
def sched():
    from prefguide.diffusion import make_schedule

    return make_schedule()


@pytest.fixture(scope="session")
def base_model(toy_data, sched):
    """Base model trained with the package defaults (same as ``prefguide pretrain``)."""
    from prefguide.diffusion import TrainConfig, train_base

    params, losses = train_base(toy_data, TrainConfig(steps=4000, batch_size=256, lr=1e-3, seed=0), sched)
    return params


@pytest.fixture(scope="session")
def sft_models(base_model, toy_data, sched):
    """(SFT+, SFT-) finetuned from the base model with the package defaults."""
    from prefguide.alignment import train_sft
    from prefguide.diffusion import TrainConfig

    cfg = TrainConfig(steps=1500, batch_size=256, lr=1e-3, seed=0)
    pos, _ = train_sft(base_model, toy_data.positives(), cfg, sched)
    neg, _ = train_sft(base_model, toy_data.negatives(), cfg, sched)
    return pos, neg
