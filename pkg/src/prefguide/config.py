"""Plain-text experiment config: one ``dotted.key = value`` per line, ``#`` comments.

Values are typed by the defaults below; command-line ``--set key=value`` pairs are
applied after the file.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.n": 8000,
    "data.radius": 4.0,
    "data.sigma": 0.3,
    "data.n_pairs": 20000,
    "schedule.T": 100,
    "schedule.beta_start": 1e-4,
    "schedule.beta_end": 0.2,
    "model.hidden": 128,
    "model.emb_dim": 32,
    "train.base.steps": 4000,
    "train.base.batch": 256,
    "train.base.lr": 1e-3,
    "train.dpo.steps": 2000,
    "train.dpo.batch": 256,
    "train.dpo.lr": 2e-3,
    "train.dpo.beta": 3.0,
    "train.dpo.omega": 1.0,
    "train.dpo.log_every": 100,
    "train.dpo.n_probe": 1024,
    "train.sft.steps": 1500,
    "train.sft.batch": 256,
    "train.sft.lr": 1e-3,
    "train.distill.steps": 2000,
    "train.distill.batch": 256,
    "train.distill.lr": 1e-3,
    "distill.mode": "cpgd",
    "distill.w": 0.3,
    "sample.n": 4000,
    "sweep.mode": "pgd",
    "sweep.weights": (0.0, 1.0, 3.0, 5.0, 10.0),
    "metrics.outlier_radius": 4.0,
    "metrics.min_fraction": 0.02,
    "metrics.reward_beta": 3.0,
    "metrics.n_reward_noise": 64,
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_lines(lines, source: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def resolve(path=None, overrides=()) -> dict:
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg.update(parse_lines(Path(path).read_text().splitlines(), str(path)))
    cfg.update(parse_lines(overrides, "--set"))
    return cfg


def dump(cfg: dict) -> str:
    return "".join(f"{k} = {_format(cfg[k])}\n" for k in sorted(cfg))


def checksum(cfg: dict) -> str:
    return hashlib.sha256(dump(cfg).encode()).hexdigest()
