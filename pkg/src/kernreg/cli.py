"""Command line front-end: ``kernreg <command> --config run.json [--set key=value]...``."""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from kernreg.config import ConfigError, RunConfig, load_config
from kernreg.data import Checkpoint, CheckpointError, Dataset, load_checkpoint, load_mnist, make_synthetic, save_checkpoint, to_signed
from kernreg.evaluation import (
    NormChainError,
    assert_norm_chain,
    input_radius_proxy,
    margin_bound,
    margin_cdf,
    norm_report,
    robust_accuracy_curve,
    write_robust_csv,
)
from kernreg.grids import build_penalties, method_grid
from kernreg.network import PRESETS, LossKind, Network, NetworkSpec, SpecError, init_params
from kernreg.training import DivergenceError, TrainRecord, grid_search, train

log = logging.getLogger("kernreg")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_DIVERGED, EXIT_NORM_CHAIN = 0, 1, 2, 3, 4
COMMANDS = ("train", "eval-robust", "norms", "margins", "grid")


class SetupError(Exception):
    pass


# ---------------------------------------------------------------------------
# pipeline pieces


def load_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.dataset
    if d.name == "mnist":
        try:
            return load_mnist(d.train_size, d.val_size, d.test_size, d.seed)
        except (RuntimeError, OSError, ValueError) as err:
            raise SetupError(f"cannot load MNIST: {err}") from None
    try:
        return make_synthetic(d.name, d.n, d.seed, **d.options)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err), "dataset.options") from None


def _labels(cfg: RunConfig, labels: np.ndarray) -> np.ndarray:
    if LossKind(cfg.train.loss).binary:
        try:
            return to_signed(labels)
        except ValueError:
            raise SetupError(f"{cfg.train.loss} loss needs a two-class dataset") from None
    return labels


def split(cfg: RunConfig, ds: Dataset, name: str) -> tuple[np.ndarray, np.ndarray] | None:
    if name not in ds.splits or len(ds.splits[name]) == 0:
        return None
    x, y = ds.split(name)
    return x, _labels(cfg, y)


def model_spec(cfg: RunConfig, ds: Dataset) -> NetworkSpec:
    opts = dict(cfg.model.options)
    outputs = 1 if LossKind(cfg.train.loss).binary else ds.n_classes
    shape = ds.inputs.shape[1:]
    preset = cfg.model.preset
    if preset in ("mlp", "linear"):
        opts.setdefault("in_features", int(np.prod(shape)))
        opts.setdefault("n_outputs", outputs)
    elif preset == "sequence":
        opts.setdefault("length", shape[-1])
        opts.setdefault("alphabet", shape[0])
        opts.setdefault("n_outputs", outputs)
    else:
        opts.setdefault("n_classes", outputs)
    try:
        return PRESETS[preset](**opts)
    except TypeError as err:
        raise ConfigError(str(err), "model.options") from None


def _flatten_inputs(spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    return x.reshape((len(x),) + tuple(spec.input_shape))


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


class Run:
    """Everything a command needs, built once from the configuration."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.ds = load_dataset(cfg)
        self.spec = model_spec(cfg, self.ds)
        self.net = Network(self.spec)
        reshape = lambda s: None if s is None else (_flatten_inputs(self.spec, s[0]), s[1])  # noqa: E731
        self.train_data = reshape(split(cfg, self.ds, "train"))
        if self.train_data is None:
            raise SetupError("dataset has no training examples")
        self.val = reshape(split(cfg, self.ds, "val"))
        self.test = reshape(split(cfg, self.ds, "test"))

    def eval_data(self) -> tuple[np.ndarray, np.ndarray]:
        name = self.cfg.evaluation.split
        data = {"train": self.train_data, "val": self.val, "test": self.test}[name]
        if data is None:
            raise SetupError(f"dataset has no {name!r} split")
        return data

    def init(self) -> dict[str, np.ndarray]:
        seed = self.cfg.model.init_seed if self.cfg.model.init_seed is not None else self.cfg.seed
        return dict(init_params(self.net, seed))

    def checkpoint_path(self) -> Path:
        c = self.cfg.evaluation.checkpoint
        return Path(c) if c else self.out / "model.ckpt"

    def load_params(self) -> dict[str, np.ndarray]:
        path = self.checkpoint_path()
        if not path.exists():
            raise SetupError(f"checkpoint {path} not found; run `kernreg train` first")
        ckpt = load_checkpoint(path)
        if NetworkSpec.from_dict(ckpt.network) != self.spec:
            raise SetupError(f"checkpoint {path} was written for a different model")
        return ckpt.params

    def save(self, path: Path, params, step: int, meta: dict) -> None:
        save_checkpoint(path, Checkpoint(self.spec.to_dict(), params, step, None, meta))

    def report(self, params):
        e = self.cfg.evaluation
        return norm_report(self.net, params, self.train_data[0], e.norm_epsilon, e.norm_steps, e.geometry, e.norm_samples)


def _train_one(run: Run, out: Path, cfg_train, tag: str) -> tuple[dict, TrainRecord]:
    out.mkdir(parents=True, exist_ok=True)

    def progress(row):
        log.info("%s epoch %d loss %.4f train %.4f val %.4f", tag, row["epoch"], row["loss"], row["train_acc"], row["val_acc"])

    try:
        params, rec = train(run.net, run.init(), run.train_data, cfg_train, val=run.val, test=run.test, on_epoch=progress)
    except DivergenceError as err:
        path = out / "last_good.ckpt"
        run.save(path, err.last_good, err.step, {"diverged": True})
        err.checkpoint = str(path)
        raise
    rec.write_csv(out / "metrics.csv")
    steps = cfg_train.epochs * math.ceil(len(run.train_data[0]) / cfg_train.batch_size)
    run.save(out / "model.ckpt", params, steps, {"best_epoch": rec.best_epoch})
    report = run.report(params)
    report.write_csv(out / "norms.csv")
    assert_norm_chain(report)
    return params, rec


def cmd_train(run: Run) -> int:
    _, rec = _train_one(run, run.out, run.cfg.train_config(), "train")
    last = rec.rows[-1]
    print(f"trained {len(rec)} epochs: train_acc={last['train_acc']:.4f} val_acc={last['val_acc']:.4f}; wrote {run.out / 'metrics.csv'}")
    return EXIT_OK


def cmd_eval_robust(run: Run) -> int:
    e = run.cfg.evaluation
    params = run.load_params()
    x, y = run.eval_data()
    pts = robust_accuracy_curve(run.net, params, x, y, e.epsilons, e.steps, e.geometry, run.cfg.train.loss)
    run.out.mkdir(parents=True, exist_ok=True)
    write_robust_csv(run.out / "robust.csv", pts)
    for p in pts:
        print(f"epsilon={p.epsilon:g} accuracy={p.accuracy:.4f}")
    return EXIT_OK


def cmd_norms(run: Run) -> int:
    params = run.load_params()
    rep = run.report(params)
    run.out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(run.out / "norms.csv")
    print(f"lower={rep.lower:.6g} upper={rep.upper:.6g} ratio={rep.ratio:.4g}")
    assert_norm_chain(rep)
    return EXIT_OK


def cmd_margins(run: Run) -> int:
    e = run.cfg.evaluation
    params = run.load_params()
    rep = run.report(params)
    proxy = rep.lower if e.margin_proxy == "lower" else rep.upper
    x, y = run.eval_data()
    tab = margin_cdf(run.net, params, x, y, proxy, e.margin_proxy)
    run.out.mkdir(parents=True, exist_ok=True)
    tab.write_csv(run.out / "margins.csv")
    bound = margin_bound(tab.raw, proxy, e.margin_epsilon, e.margin_gamma, b_bar=input_radius_proxy(x), confidence=e.confidence)
    summary = {
        "proxy": e.margin_proxy,
        "norm": proxy,
        "gamma": e.margin_gamma,
        "epsilon": e.margin_epsilon,
        "threshold": bound.threshold,
        "first_term": bound.first_term,
        "complexity": bound.complexity,
        "bound_unclamped": bound.unclamped,
        "bound": bound.value,
        **bound.metadata,
    }
    (run.out / "margin_bound.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"margin loss at threshold {bound.threshold:.4g}: {bound.first_term:.4f}; bound (c1=c2=1, not certified) {bound.value:.4f}")
    return EXIT_OK


def cmd_grid(run: Run) -> int:
    g = run.cfg.grid
    points = g.points if g.points is not None else method_grid(g.table, g.method, g.with_lr)
    if not points:
        raise SetupError("grid has no points")
    root = run.out / "grid"

    counter = iter(range(len(points)))

    def one(point):
        i = next(counter)
        pens = build_penalties(g.method, point, adv_epsilon=g.adv_epsilon, adv_steps=g.adv_steps, kappa=g.kappa)
        cfg_train = run.cfg.train_config(pens, lr=point.get("lr"))
        try:
            return _train_one(run, root / f"{i:03d}", cfg_train, f"grid[{i}]")[1]
        except DivergenceError as err:
            log.warning("grid point %d diverged (%s); last good params in %s", i, err, err.checkpoint)
            return TrainRecord(["epoch", "val_acc"])

    try:
        points = [dict(p) for p in points]
        for p in points:
            build_penalties(g.method, p)
    except KeyError as err:
        raise ConfigError(str(err.args[0]), "grid") from None
    result = grid_search(points, one)
    axes = sorted({k for p in points for k in p})
    header = ["index", *axes, "best_epoch", "best_val_acc", "test_acc_at_best", "final_val_acc"]
    rows = []
    for r, p in zip(result.table, points):
        rows.append(
            [str(r["index"])]
            + [_fmt(p.get(a, float("nan"))) for a in axes]
            + [str(r["best_epoch"]), _fmt(r["best_val_acc"]), _fmt(r.get("test_acc_at_best", float("nan"))), _fmt(r.get("final_val_acc", float("nan")))]
        )
    _write_csv(run.out / "grid.csv", header, rows)
    best = points[result.best_index]
    print(f"{len(points)} grid points; best #{result.best_index} {best} val_acc={result.table[result.best_index]['best_val_acc']:.4f}")
    return EXIT_OK


HANDLERS = {"train": cmd_train, "eval-robust": cmd_eval_robust, "norms": cmd_norms, "margins": cmd_margins, "grid": cmd_grid}


# ---------------------------------------------------------------------------
# entry point


def thread_limit():
    """KERNREG_THREADS=0 (or 1) pins BLAS to one thread for bit-reproducible runs."""
    raw = os.environ.get("KERNREG_THREADS")
    if raw is None or raw == "":
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"KERNREG_THREADS must be an integer, got {raw!r}", "KERNREG_THREADS") from None
    return threadpool_limits(max(n, 1))


def run(command: str, config_path: str | None, overrides: list[str] = ()) -> int:
    if command not in HANDLERS:
        print(f"error: unknown command {command!r}; choose from {', '.join(COMMANDS)}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(config_path, list(overrides))
        with thread_limit():
            r = Run(cfg)
            return HANDLERS[command](r)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (SetupError, SpecError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"diverged: {err}; last good checkpoint: {err.checkpoint}", file=sys.stderr)
        return EXIT_DIVERGED
    except NormChainError as err:
        print(f"norm check failed: {err}", file=sys.stderr)
        return EXIT_NORM_CHAIN


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kernreg", description="Train and evaluate norm-regularized small networks.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", "-c", help="JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a dotted config key; repeatable")
    p.add_argument("--verbose", "-v", action="store_true", help="log per-epoch progress")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return run(args.command, args.config, args.overrides)


if __name__ == "__main__":
    sys.exit(main())
