"""Batch studies: regime means, repeated HMM fits and repeated RNN fits.

Every batch derives one sub-seed per simulation from a master seed, so a
record depends only on ``(master seed, sim index)`` and not on scheduling.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import hmm
from .market import MarketConfig, MarketPath, simulate, single_run_config
from .rnn import RnnConfig, train
from .sentiment import (
    MarkovSentimentSpec,
    effective_probabilities,
    equilibrium_price,
    sample_transition_matrix,
    sentiment_at,
)

log = logging.getLogger(__name__)

MATRIX_KEYS = [f"a{i}{j}" for i in range(1, 4) for j in range(1, 4)]


def sub_seeds(master_seed: int, n: int) -> list[int]:
    """Pairwise-distinct 64-bit seeds, one per simulation."""
    children = np.random.SeedSequence(master_seed).spawn(n)
    return [int(c.generate_state(1, np.uint64)[0]) for c in children]


def _streams(sim_seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(sim_seed).spawn(n)


def _as_int_seed(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1, np.uint64)[0])


def _min_balance(path: MarketPath) -> float:
    """Smallest cash or share holding seen by any agent during the run."""
    return float(min(path.min_cash.min(), path.min_shares.min()))


def _run_all(fn, args: list, workers: int) -> list:
    if workers > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, args))
    return [fn(a) for a in args]


# -- regimes ---------------------------------------------------------------

@dataclass
class RegimeStat:
    regime: int
    t_start: int
    t_end: int
    mean: float
    sd: float
    pe_pred: float
    rel_err: float


@dataclass
class RegimeReport:
    regimes: list[RegimeStat]
    burn: int
    path: MarketPath | None = field(default=None, repr=False)

    def to_csv(self, path) -> None:
        _write_rows(path, [f.name for f in fields(RegimeStat)], [asdict(r) for r in self.regimes])


def run_regimes(config: MarketConfig, burn: int = 300) -> RegimeReport:
    """Simulate a piecewise-sentiment market and compare regime means with flow balance.

    Each regime starts at a sentiment change (or ``t = 1``); statistics skip
    the first ``burn`` steps after a change.
    """
    if isinstance(config.sentiment, MarkovSentimentSpec):
        raise ValueError("run_regimes needs a piecewise (group) sentiment configuration")
    path = simulate(config)
    T = config.n_steps
    groups = config.sentiment
    changes = sorted({t for g in groups for t in g.schedule.change_points if t <= T})
    starts = [1] + changes
    ends = [c - 1 for c in changes] + [T]
    M, S = path.total_cash[0], path.total_shares[0]
    stats = []
    for k, (a, b) in enumerate(zip(starts, ends)):
        lo = a + (burn if k > 0 else 0)
        lo = min(lo, b)
        window = path.price[lo - 1:b]
        p_b, p_s = effective_probabilities([(g.weight, sentiment_at(g.schedule, a)) for g in groups])
        pe = equilibrium_price(p_b, p_s, M, S)
        mean = float(window.mean())
        stats.append(RegimeStat(k + 1, lo, b, mean, float(window.std(ddof=1)) if len(window) > 1 else 0.0,
                                pe, (mean - pe) / pe))
    return RegimeReport(stats, burn, path)


# -- HMM batch -------------------------------------------------------------

@dataclass
class HmmFitConfig:
    n_symbols: int = 9
    n_restarts: int = 5
    tol: float = 1e-6
    max_iter: int = 500

    @classmethod
    def from_dict(cls, d: dict) -> "HmmFitConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown hmm keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class HmmFit:
    model: hmm.HmmModel
    discretizer: hmm.Discretizer
    symbols: np.ndarray
    decoded: np.ndarray
    diagnostics: hmm.BaumWelchDiagnostics


def fit_hmm_to_prices(prices, n_hidden: int, config: HmmFitConfig, rng: np.random.Generator) -> HmmFit:
    """Discretise, fit by Baum-Welch, align labels by price level and decode."""
    disc, symbols = hmm.discretize_prices(prices, config.n_symbols)
    model, diag = hmm.baum_welch(symbols, n_hidden, n_restarts=config.n_restarts, tol=config.tol,
                                 max_iter=config.max_iter, rng=rng, n_obs=disc.n_symbols)
    perm = hmm.align_states(model, disc)
    model = model.permuted(perm)
    decoded = hmm.viterbi(model, symbols).path
    return HmmFit(model, disc, symbols, decoded, diag)


@dataclass
class HmmExperimentRecord:
    sim: int
    seed: int
    a_true: np.ndarray
    a_fit: np.ndarray
    viterbi_score: float
    loglik: float
    iters: int
    min_ll_step: float = field(default=math.nan, compare=False)
    min_balance: float = field(default=math.nan, compare=False)
    error: str = field(default="", compare=False)

    CSV_HEADER = (["sim", "seed"] + [k + "_true" for k in MATRIX_KEYS] + [k + "_fit" for k in MATRIX_KEYS]
                  + ["viterbi_score", "loglik", "iters"])

    def row(self) -> list:
        return ([self.sim, self.seed] + [_fmt(v) for v in self.a_true.ravel()]
                + [_fmt(v) for v in self.a_fit.ravel()]
                + [_fmt(self.viterbi_score), _fmt(self.loglik), self.iters])

    @classmethod
    def from_row(cls, r: dict) -> "HmmExperimentRecord":
        return cls(int(r["sim"]), int(r["seed"]),
                   np.array([float(r[k + "_true"]) for k in MATRIX_KEYS]).reshape(3, 3),
                   np.array([float(r[k + "_fit"]) for k in MATRIX_KEYS]).reshape(3, 3),
                   float(r["viterbi_score"]), float(r["loglik"]), int(r["iters"]))


def _hmm_one(args) -> HmmExperimentRecord:
    sim, sim_seed, diag_range, template, fit_cfg = args
    s_matrix, s_market, s_fit = _streams(sim_seed, 3)
    a_true = sample_transition_matrix(np.random.default_rng(s_matrix), *diag_range, n_states=3)
    try:
        cfg = replace(template, seed=_as_int_seed(s_market),
                      sentiment=MarkovSentimentSpec(a_true, states=np.array([-1.0, 0.0, 1.0])))
        path = simulate(cfg)
        fit = fit_hmm_to_prices(path.price, 3, fit_cfg, np.random.default_rng(s_fit))
        traces = fit.diagnostics.log_likelihoods
        min_step = min((float(np.min(np.diff(tr))) for tr in traces if len(tr) > 1), default=math.inf)
        return HmmExperimentRecord(sim, sim_seed, a_true, fit.model.A, hmm.viterbi_score(fit.decoded, path.state),
                                   fit.diagnostics.best_log_likelihood, sum(fit.diagnostics.iterations),
                                   min_ll_step=min_step, min_balance=_min_balance(path))
    except Exception as exc:  # recorded, the batch goes on
        log.warning("hmm sim %d failed: %s", sim, exc)
        return HmmExperimentRecord(sim, sim_seed, a_true, np.full((3, 3), np.nan), math.nan, math.nan, 0,
                                   error=repr(exc))


def run_hmm_batch(n_sims: int = 30, diag_range=(0.95, 0.98), sim_config: MarketConfig | None = None,
                  hmm_config: HmmFitConfig | None = None, seed: int = 0, workers: int = 1) -> list[HmmExperimentRecord]:
    """Repeated simulate -> discretise -> Baum-Welch -> align -> Viterbi runs."""
    if n_sims < 1:
        raise ValueError("n_sims must be >= 1")
    template = single_run_config() if sim_config is None else sim_config
    fit_cfg = HmmFitConfig() if hmm_config is None else hmm_config
    seeds = sub_seeds(seed, n_sims)
    args = [(i, s, tuple(diag_range), template, fit_cfg) for i, s in enumerate(seeds)]
    return sorted(_run_all(_hmm_one, args, workers), key=lambda r: r.sim)


# -- RNN batch -------------------------------------------------------------

@dataclass
class RnnExperimentRecord:
    sim: int
    seed: int
    a_true: np.ndarray
    train_score: float
    test_score: float
    final_loss: float
    min_balance: float = field(default=math.nan, compare=False)
    error: str = field(default="", compare=False)

    CSV_HEADER = ["sim", "seed"] + [k + "_true" for k in MATRIX_KEYS] + ["train_score", "test_score", "final_loss"]

    def row(self) -> list:
        return ([self.sim, self.seed] + [_fmt(v) for v in self.a_true.ravel()]
                + [_fmt(self.train_score), _fmt(self.test_score), _fmt(self.final_loss)])

    @classmethod
    def from_row(cls, r: dict) -> "RnnExperimentRecord":
        return cls(int(r["sim"]), int(r["seed"]),
                   np.array([float(r[k + "_true"]) for k in MATRIX_KEYS]).reshape(3, 3),
                   float(r["train_score"]), float(r["test_score"]), float(r["final_loss"]))


def _rnn_one(args) -> RnnExperimentRecord:
    sim, sim_seed, diag_range, template, rnn_cfg = args
    s_matrix, s_market, s_train = _streams(sim_seed, 3)
    a_true = sample_transition_matrix(np.random.default_rng(s_matrix), *diag_range, n_states=3)
    try:
        cfg = replace(template, seed=_as_int_seed(s_market),
                      sentiment=MarkovSentimentSpec(a_true, states=np.array([-1.0, 0.0, 1.0])))
        path = simulate(cfg)
        res = train(path.price, path.state, replace(rnn_cfg, seed=_as_int_seed(s_train)))
        return RnnExperimentRecord(sim, sim_seed, a_true, res.train_score, res.test_score,
                                   res.loss_history[-1] if res.loss_history else math.nan,
                                   min_balance=_min_balance(path))
    except Exception as exc:
        log.warning("rnn sim %d failed: %s", sim, exc)
        return RnnExperimentRecord(sim, sim_seed, a_true, math.nan, math.nan, math.nan, error=repr(exc))


def run_rnn_batch(n_sims: int = 10, diag_range=(0.97, 1.0), sim_config: MarketConfig | None = None,
                  rnn_config: RnnConfig | None = None, seed: int = 0, workers: int = 1) -> list[RnnExperimentRecord]:
    """Repeated simulate -> train on 90% -> score on the last 10% runs."""
    if n_sims < 1:
        raise ValueError("n_sims must be >= 1")
    template = single_run_config(n_steps=5000) if sim_config is None else sim_config
    rnn_cfg = RnnConfig() if rnn_config is None else rnn_config
    seeds = sub_seeds(seed, n_sims)
    args = [(i, s, tuple(diag_range), template, rnn_cfg) for i, s in enumerate(seeds)]
    return sorted(_run_all(_rnn_one, args, workers), key=lambda r: r.sim)


# -- reports ---------------------------------------------------------------

def _fmt(v) -> str:
    return repr(float(v))


def _write_rows(path, header, rows) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([r[h] for h in header] if isinstance(r, dict) else r)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def summarize_columns(header, rows) -> dict:
    """Per-column mean/sd/min/max/median over numeric columns, NaNs skipped."""
    out = {}
    for j, name in enumerate(header):
        if name in ("sim", "seed"):
            continue
        col = np.array([float(r[j]) for r in rows], dtype=float)
        col = col[np.isfinite(col)]
        if len(col) == 0:
            out[name] = {"n": 0}
            continue
        out[name] = {"n": int(len(col)), "mean": float(np.mean(col)),
                     "sd": float(np.std(col, ddof=1)) if len(col) > 1 else 0.0,
                     "min": float(col.min()), "max": float(col.max()), "median": float(np.median(col))}
    return out


def write_report(records, path, summary_path=None, kind=None) -> dict:
    """Write records as CSV plus a JSON summary; returns the summary.

    ``kind`` (the record class) is needed only for an empty batch.
    """
    path = Path(path)
    cls = kind if kind is not None else (type(records[0]) if records else None)
    if cls is None:
        raise ValueError("record kind needed for an empty batch")
    header = cls.CSV_HEADER
    rows = [r.row() for r in records]
    _write_rows(path, header, rows)
    summary = summarize_columns(header, rows)
    summary_path = path.parent / "summary.json" if summary_path is None else Path(summary_path)
    try:
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {summary_path}: {exc}") from exc
    return summary


def read_report(path, kind) -> list:
    with open(path, newline="") as fh:
        return [kind.from_row(r) for r in csv.DictReader(fh)]


# -- figures ---------------------------------------------------------------

def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "sentilab"
    return plt


def plot_hmm_batch(records, out_dir) -> list[Path]:
    """Fitted-vs-true scatter for each matrix element and a Viterbi score histogram."""
    plt = _pyplot()
    out_dir = Path(out_dir)
    ok = [r for r in records if not r.error]
    fig, axes = plt.subplots(3, 3, figsize=(9, 9))
    for i in range(3):
        for j in range(3):
            ax = axes[i, j]
            ax.scatter([r.a_true[i, j] for r in ok], [r.a_fit[i, j] for r in ok], s=10)
            lo, hi = ax.get_xlim()
            ax.plot([lo, hi], [lo, hi], lw=0.5, color="grey")
            ax.set_title(f"a{i + 1}{j + 1}", fontsize=9)
    fig.supxlabel("true")
    fig.supylabel("Baum-Welch fit")
    scatter = out_dir / "hmm_matrix_scatter.svg"
    fig.savefig(scatter, metadata={"Date": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist([r.viterbi_score for r in ok], bins=np.linspace(0, 1, 21))
    ax.set_xlabel("Viterbi score")
    hist = out_dir / "hmm_viterbi_scores.svg"
    fig.savefig(hist, metadata={"Date": None})
    plt.close(fig)
    return [scatter, hist]


def plot_rnn_batch(records, out_dir) -> list[Path]:
    plt = _pyplot()
    ok = [r for r in records if not r.error]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    for ax, name in zip(axes, ("train_score", "test_score")):
        ax.hist([getattr(r, name) for r in ok], bins=np.linspace(0, 1, 21))
        ax.set_xlabel(name.replace("_", " "))
    out = Path(out_dir) / "rnn_scores.svg"
    fig.savefig(out, metadata={"Date": None})
    plt.close(fig)
    return [out]


def plot_path(prices, out) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(9, 4))
    ax.plot(np.arange(1, len(prices) + 1), prices, lw=0.6)
    ax.set_xlabel("t")
    ax.set_ylabel("price")
    fig.savefig(out, metadata={"Date": None})
    plt.close(fig)
    return Path(out)
