"""Acceptance criteria, one test per criterion.

Every test logs a PASS/FAIL line through the ``criteria`` fixture (collected
again in the terminal summary) before asserting.  The expensive runs (five
regime markets, thirty HMM markets, ten RNN markets and twenty sampled-HMM
fits) happen once per session; criterion 11 repeats all of them.

Run just this module with ``pytest tests/test_acceptance.py -v -s``.
"""
import itertools
import math
import time

import numpy as np
import pytest

from sentilab.experiments import (
    RegimeReport,
    run_hmm_batch,
    run_regimes,
    run_rnn_batch,
    sub_seeds,
    write_report,
)
from sentilab.hmm import (
    HmmModel,
    align_states,
    baum_welch,
    forward_backward,
    hmm_sample,
    random_model,
    viterbi,
)
from sentilab.market import regimes_config
from sentilab.rnn import PARAM_NAMES, Chunk, RnnParams, backward, forward, loss
from sentilab.sentiment import (
    effective_probabilities,
    equilibrium_price,
    sample_transition_matrix,
    sentiment_at,
    two_group_regimes,
)

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

EPS = np.finfo(float).eps
REGIME_SEEDS = range(5)
REGIME_TARGETS = 100.0 * np.array([1.0, 13 / 11, 5 / 7])
ORACLE_SEED = 2024
HMM_BATCH_SEED = 0
RNN_BATCH_SEED = 0


def separated_emissions(n_obs=9):
    """Each of three states puts 90% of its mass on its own block of symbols."""
    block = n_obs // 3
    B = np.full((3, n_obs), 0.1 / (n_obs - block))
    for i in range(3):
        B[i, block * i:block * (i + 1)] = 0.9 / block
    return B


def oracle_recovery_runs():
    B = separated_emissions()
    runs = []
    for s in sub_seeds(ORACLE_SEED, 20):
        rng = np.random.default_rng(s)
        truth = HmmModel(sample_transition_matrix(rng, 0.95, 0.98), B, np.full(3, 1 / 3))
        _, obs = hmm_sample(truth, 1000, rng)
        fit, diag = baum_welch(obs, 3, rng=rng, n_obs=B.shape[1])
        fit = fit.permuted(align_states(fit))
        runs.append((truth, fit, diag))
    return runs


def run_everything(out_dir):
    """All stochastic acceptance runs, with their CSV outputs written under ``out_dir``."""
    res = {"regimes": [], "regime_seconds": []}
    for seed in REGIME_SEEDS:
        t0 = time.perf_counter()
        report = run_regimes(regimes_config(n_steps=10_000, seed=seed), burn=300)
        res["regime_seconds"].append(time.perf_counter() - t0)
        report.to_csv(out_dir / f"regimes_{seed}.csv")
        report.path.to_csv(out_dir / f"regimes_path_{seed}.csv")
        res["regimes"].append(report)

    t0 = time.perf_counter()
    res["oracle"] = oracle_recovery_runs()
    res["oracle_seconds"] = time.perf_counter() - t0

    res["hmm"] = run_hmm_batch(30, seed=HMM_BATCH_SEED)
    write_report(res["hmm"], out_dir / "hmm_batch.csv", out_dir / "hmm_summary.json")

    t0 = time.perf_counter()
    res["rnn"] = run_rnn_batch(10, seed=RNN_BATCH_SEED)
    res["rnn_seconds"] = time.perf_counter() - t0
    write_report(res["rnn"], out_dir / "rnn_batch.csv", out_dir / "rnn_summary.json")
    return res


@pytest.fixture(scope="session")
def runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance_a")
    return out, run_everything(out)


def test_c01_regime_equilibrium(runs, criteria):
    _, res = runs
    reports: list[RegimeReport] = res["regimes"]
    means = np.array([[r.mean for r in rep.regimes] for rep in reports])
    rel = means / REGIME_TARGETS - 1
    slow = max(res["regime_seconds"])
    ok = bool(np.all(np.abs(rel) <= 0.06)) and slow <= 120
    detail = (f"means per regime {np.round(means.mean(axis=0), 2).tolist()}, "
              f"worst rel err {np.max(np.abs(rel)):.4f} (tol 0.06), slowest seed {slow:.1f}s")
    criteria.record(1, "regime means within 6% of 100, 118.18, 71.43", ok, detail)
    assert ok, detail


def test_c02_flow_balance_exact(criteria):
    groups = two_group_regimes(10_000)
    p1 = equilibrium_price(*effective_probabilities([(g.weight, sentiment_at(g.schedule, 1)) for g in groups]),
                           1e8, 1e6)
    errs = []
    for t, ratio in ((5_000, 13 / 11), (9_000, 5 / 7)):
        p_b, p_s = effective_probabilities([(g.weight, sentiment_at(g.schedule, t)) for g in groups])
        pe = equilibrium_price(p_b, p_s, 1e8, 1e6)
        errs.append(abs(pe - ratio * p1) / (ratio * p1))
    ok = p1 == 100.0 and max(errs) <= 2 * EPS
    detail = f"P1 {p1}, relative errors {[f'{e:.2e}' for e in errs]} (tol 2 ulp = {2 * EPS:.2e})"
    criteria.record(2, "flow balance gives 13/11 and 5/7 of P1", ok, detail)
    assert ok, detail


def test_c03_oracle_recovery(runs, criteria):
    _, res = runs
    hits = [bool(np.all(np.abs(np.diag(fit.A) - np.diag(truth.A)) <= 0.05)) for truth, fit, _ in res["oracle"]]
    frac = sum(hits) / len(hits)
    ok = frac >= 0.8 and res["oracle_seconds"] <= 60
    detail = f"{sum(hits)}/{len(hits)} runs within 0.05 (need 80%), {res['oracle_seconds']:.1f}s"
    criteria.record(3, "Baum-Welch recovers sampled HMM diagonals", ok, detail)
    assert ok, detail


def test_c04_market_diagonal_error(runs, criteria):
    _, res = runs
    good = [r for r in res["hmm"] if not r.error]
    errs = np.concatenate([np.abs(np.diag(r.a_fit) - np.diag(r.a_true)) for r in good])
    med = float(np.median(errs)) if len(errs) else math.inf
    ok = len(good) == 30 and med <= 0.08
    detail = f"{len(good)}/30 fits, median |diag error| {med:.4f} (tol 0.08)"
    criteria.record(4, "Baum-Welch on market data", ok, detail)
    assert ok, detail


def test_c05_viterbi_null_result(runs, criteria):
    _, res = runs
    scores = [r.viterbi_score for r in res["hmm"] if not r.error]
    mean = float(np.mean(scores)) if scores else math.nan
    ok = len(scores) == 30 and 0.25 <= mean <= 0.41
    detail = f"mean Viterbi score {mean:.4f} over {len(scores)} markets (band [0.25, 0.41])"
    criteria.record(5, "Viterbi score near chance", ok, detail)
    assert ok, detail


def test_c06_rnn_positive_result(runs, criteria):
    _, res = runs
    scores = [r.test_score for r in res["rnn"] if not r.error]
    mean = float(np.mean(scores)) if scores else math.nan
    ok = len(scores) == 10 and mean >= 0.45 and mean - 1 / 3 >= 0.08 and res["rnn_seconds"] <= 1200
    detail = (f"mean test score {mean:.4f} over {len(scores)} markets (need >= 0.45), "
              f"{res['rnn_seconds']:.0f}s (budget 1200s)")
    criteria.record(6, "RNN beats chance on held-out data", ok, detail)
    assert ok, detail


def _chunk_loss(params, chunk):
    return loss(forward(params, chunk.x, chunk.m0).probs, chunk.targets)


def test_c07_gradient_check(criteria):
    worst = 0.0
    h = 1e-6
    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = RnnParams.init(2, 5, 3, rng, scale=0.5)
        params.b = rng.normal(0, 0.3, 5)
        params.e = rng.normal(0, 0.3, 3)
        chunk = Chunk(rng.normal(size=(7, 2)), rng.integers(0, 3, 7), rng.normal(0, 0.5, 5))
        grads = backward(params, chunk, forward(params, chunk.x, chunk.m0), clip=None)
        for name in PARAM_NAMES:
            p, g = getattr(params, name), getattr(grads, name)
            fd = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                old = p[idx]
                p[idx] = old + h
                up = _chunk_loss(params, chunk)
                p[idx] = old - h
                down = _chunk_loss(params, chunk)
                p[idx] = old
                fd[idx] = (up - down) / (2 * h)
            scale = max(np.max(np.abs(fd)), np.max(np.abs(g)), 1e-12)
            worst = max(worst, float(np.max(np.abs(fd - g)) / scale))
    ok = worst < 1e-4
    detail = f"worst relative error {worst:.2e} over 20 seeds x 5 blocks (tol 1e-4)"
    criteria.record(7, "BPTT gradients match central differences", ok, detail)
    assert ok, detail


def test_c08_em_monotone(runs, criteria):
    _, res = runs
    steps = [float(np.min(np.diff(tr))) for _, _, d in res["oracle"] for tr in d.log_likelihoods if len(tr) > 1]
    steps += [r.min_ll_step for r in res["hmm"] if not r.error]
    worst = min(steps)
    ok = worst >= -1e-10
    detail = f"smallest log-likelihood step {worst:.3e} over {len(steps)} fits (slack -1e-10)"
    criteria.record(8, "EM log-likelihood never decreases", ok, detail)
    assert ok, detail


def test_c09_exhaustive_oracle(criteria):
    rng = np.random.default_rng(9)
    worst_ll, worst_vit, path_mismatch = 0.0, 0.0, 0
    cases = [(1 + k % 3, 12 if k < 6 else int(rng.integers(1, 13))) for k in range(50)]
    for n, T in cases:
        model = random_model(rng, n, 4)
        obs = rng.integers(0, 4, T)
        paths = np.array(list(itertools.product(range(n), repeat=T)))
        p = model.pi[paths[:, 0]] * model.B[paths[:, 0], obs[0]]
        for t in range(1, T):
            p = p * model.A[paths[:, t - 1], paths[:, t]] * model.B[paths[:, t], obs[t]]
        ll = forward_backward(model, obs).log_likelihood
        worst_ll = max(worst_ll, abs(ll - math.log(p.sum())) / abs(math.log(p.sum())))
        v = viterbi(model, obs)
        worst_vit = max(worst_vit, abs(v.log_probability - math.log(p.max())) / abs(math.log(p.max())))
        path_mismatch += int(not np.array_equal(v.path, paths[np.argmax(p)]))
    ok = worst_ll <= 1e-10 and worst_vit <= 1e-10 and path_mismatch == 0
    detail = (f"likelihood rel err {worst_ll:.1e}, Viterbi rel err {worst_vit:.1e}, "
              f"{path_mismatch} path mismatches over 50 models")
    criteria.record(9, "forward-backward and Viterbi equal brute force", ok, detail)
    assert ok, detail


def test_c10_conservation(runs, criteria):
    _, res = runs
    drift, lowest = 0.0, math.inf
    for rep in res["regimes"]:
        p = rep.path
        drift = max(drift, float(np.max(np.abs(p.total_cash / p.total_cash[0] - 1))),
                    float(np.max(np.abs(p.total_shares / p.total_shares[0] - 1))))
        lowest = min(lowest, float(p.min_cash.min()), float(p.min_shares.min()))
    lowest = min([lowest] + [r.min_balance for r in res["hmm"] + res["rnn"] if not r.error])
    ok = drift <= 1e-6 and lowest >= 0
    detail = f"max relative drift {drift:.1e} on five T=10^4 runs (tol 1e-6), lowest balance {lowest:.3e}"
    criteria.record(10, "cash and shares conserved, no negative balances", ok, detail)
    assert ok, detail


def test_c11_determinism(runs, tmp_path_factory, criteria):
    first, _ = runs
    second = tmp_path_factory.mktemp("acceptance_b")
    run_everything(second)
    names = sorted(f.name for f in first.iterdir())
    differing = [n for n in names if (first / n).read_bytes() != (second / n).read_bytes()]
    ok = not differing and names == sorted(f.name for f in second.iterdir())
    detail = f"{len(names)} output files compared, {len(differing)} differ {differing}"
    criteria.record(11, "same master seed gives byte-identical CSVs", ok, detail)
    assert ok, detail
