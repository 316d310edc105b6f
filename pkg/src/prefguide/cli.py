"""Command-line pipeline: pretrain, finetune, sample, sweep, merge, distill, eval, verify.

Every command writes into ``--out`` (created if missing) a copy of the resolved
config (``config.resolved.txt``) and ``manifest.txt`` with sha256 sums of the
inputs it read, the non-path flags, and the files it wrote.

Exit codes: 0 success, 1 usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .alignment import AlignConfig, train_dpo, train_sft
from .dataset import GaussianMixtureSpec, generate_mixture, load_dataset, sample_pairs, save_dataset
from .diffusion import TrainConfig, make_schedule, train_base
from .guidance import MODES, GuidanceSpec, guided_sample, weight_sweep
from .merge_distill import MERGE_MODES, alpha_sweep, distill, merge_cpgd, merge_pgd, noised_probes
from .metrics import RunMetrics, cluster_assign, compute_metrics, frechet_2d, frozen_probe_noise, implicit_reward_proxy, win_rate
from .numerics import NumericalError, load_params, save_params
from .records import read_samples, scatter_svg, write_csv

log = logging.getLogger("prefguide")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2

CKPT_NAMES = {
    "pretrain": "base.pgd",
    "dpo": "dpo.pgd",
    "sft_positive": "sft_positive.pgd",
    "sft_negative": "sft_negative.pgd",
    "merge": "merged.pgd",
    "distill": "distilled.pgd",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


_UNRECORDED = {"command", "func", "config", "set", "out", "verbose", "base", "tuned", "pos", "neg", "data", "a", "b", "reward_model", "ref"}


def _cell_text(v) -> str:
    return ",".join(f"{x:g}" for x in v) if isinstance(v, tuple) else str(v)


class Run:
    """Output directory bookkeeping shared by all commands."""

    def __init__(self, args, command: str):
        self.command = command
        try:
            self.cfg = cfgmod.resolve(args.config, args.set or ())
        except FileNotFoundError as err:
            raise UsageError(f"config file not found: {err.filename}") from None
        self.sha = cfgmod.checksum(self.cfg)
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: list[tuple[str, str]] = []
        self.outputs: list[str] = []
        # paths are recorded by checksum as inputs; these flags are recorded verbatim
        self.flags = {
            k: v for k, v in sorted(vars(args).items()) if k not in _UNRECORDED and v is not None and v is not False
        }
        if args.config is not None:
            self.read(args.config)

    def read(self, path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"input not found: {p}")
        self.inputs.append((str(p), _sha(p)))
        return p

    def ckpt(self, path):
        return load_params(self.read(path))

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.out / name

    def save_ckpt(self, key: str, params) -> Path:
        name = CKPT_NAMES[key]
        save_params(self.path(name), params, {"command": self.command, "config_sha256": self.sha})
        self.outputs.append(name + ".json")
        return self.out / name

    def csv(self, name, header, rows):
        write_csv(self.path(name), header, rows, self.sha)

    def finish(self):
        (self.out / "config.resolved.txt").write_text(cfgmod.dump(self.cfg))
        lines = [f"# prefguide {__version__} {self.command}", f"config {self.sha}"]
        lines += [f"flag {k}={_cell_text(v)}" for k, v in self.flags.items()]
        lines += [f"input {sha} {p}" for p, sha in self.inputs]
        lines += [f"output {_sha(self.out / n)} {n}" for n in dict.fromkeys(self.outputs)]
        (self.out / "manifest.txt").write_text("\n".join(lines) + "\n")

    # config views

    def schedule(self):
        c = self.cfg
        return make_schedule(c["schedule.T"], c["schedule.beta_start"], c["schedule.beta_end"])

    def mixture(self):
        return GaussianMixtureSpec(radius=self.cfg["data.radius"], sigma=self.cfg["data.sigma"], seed=self.cfg["seed"])

    def dataset(self, path=None):
        if path is not None:
            return load_dataset(self.read(path))
        return generate_mixture(self.mixture(), self.cfg["data.n"])

    def train(self, stage: str) -> TrainConfig:
        c = self.cfg
        return TrainConfig(c[f"train.{stage}.steps"], c[f"train.{stage}.batch"], c[f"train.{stage}.lr"], c["seed"])


def _guidance(run: Run, args) -> GuidanceSpec:
    load = lambda p: None if p is None else run.ckpt(p)
    return GuidanceSpec(args.mode, args.w, args.s, ref=load(args.base), tuned=load(args.tuned), pos=load(args.pos), neg=load(args.neg))


def _samples_csv(run: Run, name: str, xs, mix, svg: bool):
    counts = cluster_assign(xs, mix, run.cfg["metrics.outlier_radius"])
    run.csv(name, ["x", "y", "cluster"], [(p[0], p[1], int(k)) for p, k in zip(xs, counts.assignment)])
    if svg:
        run.path(name.replace(".csv", ".svg")).write_text(scatter_svg(xs, counts.assignment, mix.means()))


# commands -------------------------------------------------------------------

def cmd_pretrain(args, run: Run):
    points = run.dataset(args.data)
    if args.data is None:
        save_dataset(run.path("data.csv"), points, f"prefguide {__version__} config={run.sha}")
    c = run.cfg
    params, losses = train_base(points, run.train("base"), run.schedule(), emb_dim=c["model.emb_dim"], hidden=c["model.hidden"])
    run.save_ckpt("pretrain", params)
    run.csv("pretrain_loss.csv", ["step", "loss"], enumerate(losses))


def cmd_dpo(args, run: Run):
    base = run.ckpt(args.base)
    points = run.dataset(args.data)
    c = run.cfg
    pairs = sample_pairs(points, c["data.n_pairs"], np.random.default_rng([c["seed"], 5]))
    acfg = AlignConfig(
        beta=c["train.dpo.beta"], omega=c["train.dpo.omega"], steps=c["train.dpo.steps"],
        batch_size=c["train.dpo.batch"], lr=c["train.dpo.lr"], seed=c["seed"],
        log_every=c["train.dpo.log_every"], n_probe=c["train.dpo.n_probe"],
    )
    params, history = train_dpo(base, pairs, acfg, run.schedule())
    run.save_ckpt("dpo", params)
    run.csv("dpo_components.csv", ["step", "loss", "L_pos_component", "L_neg_component"], [(r.step, r.loss, r.l_pos, r.l_neg) for r in history])


def cmd_sft(args, run: Run):
    base = run.ckpt(args.base)
    points = run.dataset(args.data)
    subset = points.positives() if args.label == "positive" else points.negatives()
    if len(subset.x) == 0:
        raise UsageError(f"dataset has no {args.label} points")
    params, losses = train_sft(base, subset, run.train("sft"), run.schedule())
    run.save_ckpt(f"sft_{args.label}", params)
    run.csv(f"sft_{args.label}_loss.csv", ["step", "loss"], enumerate(losses))


def cmd_sample(args, run: Run):
    spec = _guidance(run, args)
    sched = run.schedule()
    spec.validate(sched.T)
    n = args.n if args.n is not None else run.cfg["sample.n"]
    seed = args.seed if args.seed is not None else run.cfg["seed"]
    xs = guided_sample(spec, n, sched, np.random.default_rng(seed))
    _samples_csv(run, "samples.csv", xs, run.mixture(), args.svg)


def cmd_sweep(args, run: Run):
    spec = _guidance(run, args)
    sched = run.schedule()
    spec.validate(sched.T)
    c = run.cfg
    weights = args.weights if args.weights is not None else c["sweep.weights"]
    n = args.n if args.n is not None else c["sample.n"]
    seed = args.seed if args.seed is not None else c["seed"]
    mix = run.mixture()
    rows = weight_sweep(spec, weights, n, sched, seed, mix, None, c["metrics.outlier_radius"], c["metrics.min_fraction"])
    cols = RunMetrics.columns()
    run.csv("sweep.csv", ["w"] + cols, [[w] + [m.row()[k] for k in cols] for w, m, _ in rows])
    for w, m, xs in rows:
        print(f"w={w:g} positive_mass={m.positive_mass:.3f} modes={m.modes_covered} diversity={m.diversity:.2f}")
        if args.svg:
            _samples_csv(run, f"samples_w{w:g}.csv", xs, mix, True)


def cmd_merge(args, run: Run):
    theta0, plus = run.ckpt(args.base), run.ckpt(args.pos)
    if args.mode == "cpgd_merge":
        if args.neg is None:
            raise UsageError("cpgd_merge needs --neg")
        minus = run.ckpt(args.neg)
        merged = merge_cpgd(theta0, plus, minus, args.alpha)
    else:
        minus = None
        merged = merge_pgd(theta0, plus, args.alpha)
    run.save_ckpt("merge", merged)
    sched = run.schedule()
    probes = noised_probes(run.dataset(args.data).x, 2048, sched, np.random.default_rng([run.cfg["seed"], 4]))
    lam = args.alpha if args.w is None else args.w
    gaps = alpha_sweep(theta0, plus, lam, [args.alpha], probes, minus)
    run.csv("merge.csv", ["mode", "alpha", "w", "rms_gap_to_guided"], [(args.mode, args.alpha, lam, gaps[0][1])])


def cmd_distill(args, run: Run):
    c = run.cfg
    mode = args.mode or c["distill.mode"]
    w = args.w if args.w is not None else c["distill.w"]
    base = run.ckpt(args.base)
    if mode == "cpgd":
        teacher = GuidanceSpec("cpgd", w, ref=base, pos=run.ckpt(args.pos), neg=run.ckpt(args.neg)) if args.pos and args.neg else None
    else:
        teacher = GuidanceSpec(mode, w, ref=base, tuned=run.ckpt(args.tuned)) if args.tuned else None
    if teacher is None:
        raise UsageError(f"distill mode {mode!r} is missing teacher checkpoints")
    params, losses = distill(base, teacher, run.dataset(args.data), run.train("distill"), run.schedule())
    run.save_ckpt("distill", params)
    run.csv("distill_loss.csv", ["step", "loss"], enumerate(losses))


def cmd_eval(args, run: Run):
    c = run.cfg
    a, b = read_samples(run.read(args.a)), read_samples(run.read(args.b))
    if len(a) != len(b):
        raise UsageError(f"sample files differ in length: {len(a)} vs {len(b)}")
    mix = run.mixture()
    if args.reward_model is not None:
        sched = run.schedule()
        theta, ref = run.ckpt(args.reward_model), run.ckpt(args.ref)
        noise = frozen_probe_noise(c["metrics.n_reward_noise"], sched, np.random.default_rng([c["seed"], 6]))
        score = lambda x: implicit_reward_proxy(theta, ref, x, c["metrics.reward_beta"], sched, noise)
        scorer = "implicit_reward"
    else:
        score = lambda x: mix.is_positive(cluster_assign(x, mix, c["metrics.outlier_radius"]).assignment).astype(float)
        scorer = "positive_cluster"
    wr = win_rate(score(a), score(b))
    m = compute_metrics(a, mix, b, c["metrics.outlier_radius"], c["metrics.min_fraction"])
    fd = frechet_2d(a[np.isfinite(a).all(1)], b[np.isfinite(b).all(1)])
    cols = RunMetrics.columns()
    run.csv("eval.csv", ["scorer", "win_rate", "frechet_ab"] + cols, [[scorer, wr, fd] + [m.row()[k] for k in cols]])
    print(f"win_rate={wr:.2f} frechet={fd:.6g} positive_mass={m.positive_mass:.3f} modes={m.modes_covered}")


def cmd_verify(args, run: Run):
    from .verify import run_all

    checks = run_all()
    run.csv("verify.csv", ["check", "passed", "detail"], [(ch.name, ch.passed, ch.detail.replace(",", ";")) for ch in checks])
    for ch in checks:
        print(f"{'PASS' if ch.passed else 'FAIL'}  {ch.name}: {ch.detail}")
    if not all(ch.passed for ch in checks):
        raise NumericalError("verification battery failed")


# parser ---------------------------------------------------------------------

def _weights(text: str):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad weight list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prefguide", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"prefguide {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, help, data=True):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        sp.add_argument("--out", required=True, help="output directory")
        if data:
            sp.add_argument("--data", help="dataset CSV (default: regenerate from config)")
        sp.set_defaults(func=fn)
        return sp

    def guidance_flags(sp, default_mode):
        sp.add_argument("--base", required=True, help="reference checkpoint")
        sp.add_argument("--mode", choices=MODES, default=default_mode)
        sp.add_argument("--w", type=float, default=1.0)
        sp.add_argument("--s", type=int, help="guided reverse iterations (default all)")
        sp.add_argument("--tuned", help="tuned checkpoint for cfg/pgd")
        sp.add_argument("--pos", help="positive checkpoint for cpgd")
        sp.add_argument("--neg", help="negative checkpoint for cpgd")
        sp.add_argument("--n", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--svg", action="store_true", help="also write an SVG scatter")

    command("pretrain", cmd_pretrain, "train the base model")
    sp = command("dpo", cmd_dpo, "Diffusion-DPO finetuning")
    sp.add_argument("--base", required=True)
    sp = command("sft", cmd_sft, "finetune on one label class")
    sp.add_argument("--base", required=True)
    sp.add_argument("--label", choices=("positive", "negative"), default="positive")
    guidance_flags(command("sample", cmd_sample, "draw samples", data=False), "none")
    sp = command("sweep", cmd_sweep, "guidance-weight sweep", data=False)
    guidance_flags(sp, "pgd")
    sp.add_argument("--weights", type=_weights)
    sp = command("merge", cmd_merge, "merge checkpoints in weight space")
    sp.add_argument("--base", required=True)
    sp.add_argument("--pos", required=True, help="tuned (pgd_merge) or positive (cpgd_merge) checkpoint")
    sp.add_argument("--neg")
    sp.add_argument("--mode", choices=MERGE_MODES, default="pgd_merge")
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--w", type=float, help="guidance weight to compare against (default alpha)")
    sp = command("distill", cmd_distill, "distill a guided teacher into one network")
    sp.add_argument("--base", required=True)
    sp.add_argument("--mode", choices=("cfg", "pgd", "cpgd"))
    sp.add_argument("--w", type=float)
    sp.add_argument("--tuned")
    sp.add_argument("--pos")
    sp.add_argument("--neg")
    sp = command("eval", cmd_eval, "compare two sample files", data=False)
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--reward-model", help="score samples by implicit reward of this checkpoint")
    sp.add_argument("--ref", help="reference checkpoint for --reward-model")
    command("verify", cmd_verify, "run the identity and oracle battery", data=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "reward_model", None) and not args.ref:
        parser.error("--reward-model needs --ref")
    try:
        run = Run(args, args.command)
        args.func(args, run)
        run.finish()
    except NumericalError as err:
        print(f"prefguide: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, cfgmod.ConfigError, ValueError, OSError) as err:
        print(f"prefguide: error: {err}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
