"""Command-line front end.

    sentilab simulate   [--steps T] [--psi X --groups n] ...
    sentilab fit-hmm    path.csv [--symbols K] [--restarts R]
    sentilab fit-rnn    path.csv [--unroll T] [--epochs E]
    sentilab experiment {regimes,hmm-batch,rnn-batch} [--sims n]

Configuration is a JSON document with optional sections ``market``, ``hmm``,
``rnn`` and ``experiment`` plus top-level ``seed`` and ``out``; flags
override the file.  Exit status: 0 success, 1 runtime failure, 2 usage or
configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import experiments, hmm
from .market import MarketConfig, MarketPath, regimes_config, simulate, single_run_config
from .rnn import RnnConfig, save_checkpoint, train
from .sentiment import LONG_LIVED_MATRIX, GroupSpec, PiecewiseSchedule

EXPERIMENTS = ("regimes", "hmm-batch", "rnn-batch")
TOP_LEVEL_KEYS = {"seed", "out", "workers", "market", "hmm", "rnn", "experiment"}


class ConfigError(Exception):
    pass


@dataclass
class ExperimentConfig:
    sims: int | None = None
    diag_low: float | None = None
    diag_high: float | None = None
    burn: int = 300
    regimes_steps: int = 10_000


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    workers: int = 1
    market: dict = field(default_factory=dict)
    hmm: dict = field(default_factory=dict)
    rnn: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> "RunConfig":
        if path is None:
            return cls()
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - TOP_LEVEL_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def experiment_config(self) -> ExperimentConfig:
        unknown = set(self.experiment) - {f.name for f in fields(ExperimentConfig)}
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        return ExperimentConfig(**self.experiment)


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="worker processes for batch experiments")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sentilab", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate a market and write path.csv")
    s.add_argument("--steps", type=int)
    s.add_argument("--agents", type=int)
    s.add_argument("--psi", type=float, help="constant sentiment shared by all groups")
    s.add_argument("--groups", type=int, help="number of equal-weight groups (with --psi)")
    s.add_argument("--matrix", choices=("single-run", "long-lived"),
                   help="preset Markov transition matrix")
    s.add_argument("--regimes", action="store_true", help="two-group three-regime set-up")
    s.add_argument("--plot", action="store_true", help="also write path.svg")

    h = sub.add_parser("fit-hmm", parents=[common], help="Baum-Welch + Viterbi on a price CSV")
    h.add_argument("path")
    h.add_argument("--symbols", type=int, help="observation alphabet size K")
    h.add_argument("--restarts", type=int)
    h.add_argument("--hidden", type=int, default=3)

    r = sub.add_parser("fit-rnn", parents=[common], help="train the recurrent classifier on a labelled CSV")
    r.add_argument("path")
    r.add_argument("--unroll", type=int)
    r.add_argument("--epochs", type=int)
    r.add_argument("--memory", type=int)
    r.add_argument("--lr", type=float)

    e = sub.add_parser("experiment", parents=[common], help="run a batch study")
    e.add_argument("name", choices=EXPERIMENTS)
    e.add_argument("--sims", type=int)
    return p


def _parse(fn, *a, what="config"):
    try:
        return fn(*a)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def _resolve(args) -> tuple[RunConfig, Path]:
    cfg = RunConfig.load(args.config)
    for key in ("seed", "out", "workers"):
        if getattr(args, key, None) is not None:
            setattr(cfg, key, getattr(args, key))
    if not 0 <= int(cfg.seed) < 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _market_config(cfg: RunConfig, args=None) -> MarketConfig:
    market = _parse(MarketConfig.from_dict, {"seed": cfg.seed, **cfg.market}, what="market config") \
        if cfg.market else None
    if market is None:
        market = single_run_config(seed=cfg.seed)
    if args is None:
        return market
    if getattr(args, "regimes", False):
        market = regimes_config(n_steps=args.steps or 10_000, seed=cfg.seed)
    if getattr(args, "matrix", None) == "long-lived":
        market = single_run_config(n_steps=5000, seed=cfg.seed, transition=LONG_LIVED_MATRIX)
    if getattr(args, "psi", None) is not None or getattr(args, "groups", None) is not None:
        n = args.groups or 1
        psi = 0.0 if args.psi is None else args.psi
        market.sentiment = [GroupSpec(1.0 / n, PiecewiseSchedule.constant(psi)) for _ in range(n)]
    if getattr(args, "steps", None) is not None:
        market.n_steps = args.steps
    if getattr(args, "agents", None) is not None:
        market.n_agents = args.agents
    try:
        market.validate()
    except ValueError as exc:
        raise ConfigError(f"invalid market config: {exc}") from exc
    return market


def _echo_config(out: Path, cfg: RunConfig, **resolved) -> None:
    doc = {"seed": cfg.seed, "out": str(cfg.out), "workers": cfg.workers, **resolved}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _read_path(path) -> MarketPath:
    try:
        p = MarketPath.from_csv(path)
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from exc
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    if len(p) == 0:
        raise ConfigError(f"{path}: no rows")
    if not np.all(np.isfinite(p.price)) or np.any(p.price <= 0):
        raise ConfigError(f"{path}: prices must be positive numbers")
    return p


def cmd_simulate(args) -> int:
    cfg, out = _resolve(args)
    market = _market_config(cfg, args)
    path = simulate(market)
    path.to_csv(out / "path.csv")
    _echo_config(out, cfg, market=market.to_dict())
    if args.plot:
        experiments.plot_path(path.price, out / "path.svg")
    occ = np.bincount(path.state, minlength=1) / len(path)
    print(f"steps {len(path)}  mean price {path.price.mean():.4f}  sd {path.price.std():.4f}")
    print("state occupancy " + " ".join(f"{k}:{v:.3f}" for k, v in enumerate(occ)))
    return 0


def cmd_fit_hmm(args) -> int:
    cfg, out = _resolve(args)
    path = _read_path(args.path)
    fit_cfg = _parse(experiments.HmmFitConfig.from_dict, cfg.hmm, what="hmm config")
    if args.symbols is not None:
        fit_cfg.n_symbols = args.symbols
    if args.restarts is not None:
        fit_cfg.n_restarts = args.restarts
    if len(path) < 10 * args.hidden:
        raise ConfigError(f"need at least {10 * args.hidden} prices to fit {args.hidden} hidden states")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        fit = experiments.fit_hmm_to_prices(path.price, args.hidden, fit_cfg, np.random.default_rng(cfg.seed))
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    fit.model.save(out / "hmm_model.txt")
    with open(out / "decoded.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "price", "symbol", "decoded"] + (["state"] if path.has_states else []))
        for t in range(len(path)):
            row = [t + 1, repr(float(path.price[t])), int(fit.symbols[t]), int(fit.decoded[t])]
            w.writerow(row + ([int(path.state[t])] if path.has_states else []))
    _echo_config(out, cfg, hmm=asdict(fit_cfg), input=str(args.path))
    np.set_printoptions(precision=4, suppress=True)
    print(f"symbols {fit.discretizer.n_symbols}  log-likelihood {fit.diagnostics.best_log_likelihood:.4f}  "
          f"iterations {fit.diagnostics.iterations}")
    print("fitted transition matrix:")
    print(fit.model.A)
    if path.has_states:
        print(f"viterbi score {hmm.viterbi_score(fit.decoded, path.state):.4f}")
    return 0


def cmd_fit_rnn(args) -> int:
    cfg, out = _resolve(args)
    path = _read_path(args.path)
    if not path.has_states:
        raise ConfigError(f"{args.path}: missing required column 'state'")
    rcfg = _parse(RnnConfig.from_dict, {"seed": cfg.seed, **cfg.rnn}, what="rnn config")
    for flag, key in (("unroll", "unroll"), ("epochs", "epochs"), ("memory", "memory"), ("lr", "lr")):
        if getattr(args, flag) is not None:
            setattr(rcfg, key, getattr(args, flag))
    rcfg.n_classes = max(rcfg.n_classes, int(path.state.max()) + 1)
    try:
        res = train(path.price, path.state, rcfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    save_checkpoint(out / "rnn_checkpoint.txt", res.params, res.cache, res.scaler)
    _echo_config(out, cfg, rnn=asdict(rcfg), input=str(args.path))
    print(f"train steps {res.n_train}  epochs {rcfg.epochs}  lr {res.lr:g}")
    if res.loss_history:
        print(f"final mean loss {res.loss_history[-1]:.4f}")
    print(f"train score {res.train_score:.4f}")
    print(f"test score {res.test_score:.4f}")
    return 0


def cmd_experiment(args) -> int:
    cfg, out = _resolve(args)
    ecfg = _parse(cfg.experiment_config, what="experiment config")
    sims = args.sims if args.sims is not None else ecfg.sims
    if args.name == "regimes":
        market = _market_config(cfg) if cfg.market else \
            regimes_config(n_steps=ecfg.regimes_steps, seed=cfg.seed)
        report = experiments.run_regimes(market, burn=ecfg.burn)
        report.to_csv(out / "regimes.csv")
        _echo_config(out, cfg, market=market.to_dict(), experiment=asdict(ecfg))
        for r in report.regimes:
            print(f"regime {r.regime} [{r.t_start}, {r.t_end}] mean {r.mean:.2f} sd {r.sd:.2f} "
                  f"predicted {r.pe_pred:.2f} rel err {r.rel_err:+.3f}")
        return 0

    fit_cfg = _parse(experiments.HmmFitConfig.from_dict, cfg.hmm, what="hmm config")
    if args.name == "hmm-batch":
        lo, hi = ecfg.diag_low or 0.95, ecfg.diag_high or 0.98
        template = _market_config(cfg) if cfg.market else single_run_config()
        records = experiments.run_hmm_batch(sims or 30, (lo, hi), template, fit_cfg, seed=cfg.seed,
                                            workers=cfg.workers)
        summary = experiments.write_report(records, out / "hmm_batch.csv")
        experiments.plot_hmm_batch(records, out)
        _echo_config(out, cfg, market=template.to_dict(), hmm=asdict(fit_cfg), experiment=asdict(ecfg))
        diag_err = [abs(r.a_fit[i, i] - r.a_true[i, i]) for r in records if not r.error for i in range(3)]
        print(f"simulations {len(records)}  failures {sum(bool(r.error) for r in records)}")
        print(f"median |diagonal error| {np.median(diag_err):.4f}")
        print(f"mean viterbi score {summary['viterbi_score'].get('mean', float('nan')):.4f}")
        return 0

    lo, hi = ecfg.diag_low or 0.97, ecfg.diag_high or 1.0
    template = _market_config(cfg) if cfg.market else single_run_config(n_steps=5000)
    rcfg = _parse(RnnConfig.from_dict, cfg.rnn, what="rnn config")
    records = experiments.run_rnn_batch(sims or 10, (lo, hi), template, rcfg, seed=cfg.seed, workers=cfg.workers)
    summary = experiments.write_report(records, out / "rnn_batch.csv")
    experiments.plot_rnn_batch(records, out)
    _echo_config(out, cfg, market=template.to_dict(), rnn=asdict(rcfg), experiment=asdict(ecfg))
    print(f"simulations {len(records)}  failures {sum(bool(r.error) for r in records)}")
    print(f"mean train score {summary['train_score'].get('mean', float('nan')):.4f}")
    print(f"mean test score {summary['test_score'].get('mean', float('nan')):.4f}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit-hmm": cmd_fit_hmm, "fit-rnn": cmd_fit_rnn, "experiment": cmd_experiment}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
