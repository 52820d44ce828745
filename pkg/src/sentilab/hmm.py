"""Discrete hidden Markov models.

Scaled forward-backward, Baum-Welch re-estimation with random restarts,
log-space Viterbi decoding, sampling, quantile discretisation of prices and
label alignment of fitted states.

Matrices follow the usual conventions: ``A[i, j] = P(x_{t+1}=j | x_t=i)``,
``B[i, k] = P(y_t=k | x_t=i)``, ``pi[i] = P(x_1=i)``.  Time-indexed tables
(``alpha_hat``, ``beta_hat``, ``gamma``, ``R``, ``Q``) are stored as
``(n_hidden, T)`` arrays.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


class ZeroLikelihoodError(ValueError):
    """The observation sequence has probability zero under the model."""


@dataclass
class HmmModel:
    A: np.ndarray
    B: np.ndarray
    pi: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.pi = np.asarray(self.pi, dtype=float)
        n, m = self.B.shape
        if self.A.shape != (n, n) or self.pi.shape != (n,):
            raise ValueError(f"inconsistent shapes A{self.A.shape} B{self.B.shape} pi{self.pi.shape}")
        for name, mat in (("A", self.A), ("B", self.B), ("pi", self.pi[None, :])):
            if np.any(mat < 0) or np.max(np.abs(mat.sum(axis=1) - 1.0)) > 1e-10:
                raise ValueError(f"{name} must be row-stochastic")

    @property
    def n_hidden(self) -> int:
        return self.A.shape[0]

    @property
    def n_obs(self) -> int:
        return self.B.shape[1]

    def permuted(self, perm) -> "HmmModel":
        """Relabel states: new state ``i`` is old state ``perm[i]``."""
        perm = np.asarray(perm)
        return HmmModel(self.A[np.ix_(perm, perm)], self.B[perm], self.pi[perm])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(f"{self.n_hidden} {self.n_obs}\n")
            for row in (*self.A, *self.B, self.pi):
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")

    @classmethod
    def load(cls, path) -> "HmmModel":
        with open(path) as fh:
            lines = [ln.split() for ln in fh if ln.strip()]
        n, m = map(int, lines[0])
        if len(lines) != 2 + 2 * n:
            raise ValueError(f"{path}: expected {2 + 2 * n} lines, found {len(lines)}")
        rows = [np.array(r, dtype=float) for r in lines[1:]]
        return cls(np.array(rows[:n]), np.array(rows[n:2 * n]), rows[2 * n])


def random_model(rng: np.random.Generator, n_hidden: int, n_obs: int, diag_bias: float = 0.8) -> HmmModel:
    """Random stochastic initial guess with a bias towards staying put.

    Off-diagonal entries are ``U(0, 1) * (1 - diag_bias) / (n_hidden - 1)``
    and the diagonal is ``diag_bias`` before rows are normalised.
    """
    if n_hidden == 1:
        a = np.ones((1, 1))
    else:
        a = rng.random((n_hidden, n_hidden)) * (1.0 - diag_bias) / (n_hidden - 1)
        np.fill_diagonal(a, diag_bias)
        a /= a.sum(axis=1, keepdims=True)
    b = rng.random((n_hidden, n_obs)) + 0.1
    b /= b.sum(axis=1, keepdims=True)
    p = rng.random(n_hidden) + 0.1
    return HmmModel(a, b, p / p.sum())


def hmm_sample(model: HmmModel, length: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``(hidden, observed)`` sequences of the given length."""
    n, m = model.n_hidden, model.n_obs
    hidden = np.empty(length, dtype=np.int64)
    observed = np.empty(length, dtype=np.int64)
    cum_a = np.cumsum(model.A, axis=1)
    cum_b = np.cumsum(model.B, axis=1)
    u = rng.random((length, 2))
    for t in range(length):
        if t == 0:
            x = int(np.searchsorted(np.cumsum(model.pi), u[t, 0], side="right"))
        else:
            x = int(np.searchsorted(cum_a[hidden[t - 1]], u[t, 0], side="right"))
        hidden[t] = min(x, n - 1)
        observed[t] = min(int(np.searchsorted(cum_b[hidden[t]], u[t, 1], side="right")), m - 1)
    return hidden, observed


@dataclass
class ScaledFBResult:
    alpha_hat: np.ndarray
    beta_hat: np.ndarray
    c: np.ndarray
    gamma: np.ndarray
    xi: np.ndarray
    log_likelihood: float


def _check_obs(model: HmmModel, obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.int64)
    if obs.ndim != 1 or len(obs) == 0:
        raise ValueError("obs must be a non-empty 1-d symbol sequence")
    if obs.min() < 0 or obs.max() >= model.n_obs:
        raise ValueError(f"observed symbols must lie in [0, {model.n_obs})")
    return obs


def forward_backward(model: HmmModel, obs) -> ScaledFBResult:
    """Scaled forward-backward pass.

    ``c[t] = P(y_t | y_1..y_{t-1})`` so ``sum(log(c))`` is the log-likelihood
    and every column of ``alpha_hat`` sums to one.
    """
    obs = _check_obs(model, obs)
    A, B = model.A, model.B
    T, N = len(obs), model.n_hidden
    emit = B[:, obs]  # (N, T)
    alpha = np.empty((N, T))
    beta = np.empty((N, T))
    c = np.empty(T)

    a = model.pi * emit[:, 0]
    for t in range(T):
        if t > 0:
            a = (alpha[:, t - 1] @ A) * emit[:, t]
        c[t] = a.sum()
        if not c[t] > 0:
            raise ZeroLikelihoodError(f"observation sequence has zero probability (at t={t})")
        alpha[:, t] = a / c[t]

    beta[:, T - 1] = 1.0
    for t in range(T - 2, -1, -1):
        beta[:, t] = A @ (beta[:, t + 1] * emit[:, t + 1]) / c[t + 1]

    gamma = alpha * beta
    # xi[t, i, j] = alpha_hat[i, t] A[i, j] B[j, y_{t+1}] beta_hat[j, t+1] / c[t+1]
    xi = (alpha[:, :-1].T[:, :, None] * A[None, :, :]
          * (emit[:, 1:] * beta[:, 1:]).T[:, None, :]) / c[1:, None, None]
    return ScaledFBResult(alpha, beta, c, gamma, xi, float(np.log(c).sum()))


def _reestimate(model: HmmModel, obs: np.ndarray) -> tuple[HmmModel, float, list[int]]:
    fb = forward_backward(model, obs)
    N, M = model.n_hidden, model.n_obs
    gamma = fb.gamma
    degenerate = []

    occ = gamma[:, :-1].sum(axis=1)
    trans = fb.xi.sum(axis=0)
    A = np.empty((N, N))
    for i in range(N):
        if occ[i] > 0:
            A[i] = trans[i] / occ[i]
        else:
            A[i] = 1.0 / N
            degenerate.append(i)

    total = gamma.sum(axis=1)
    counts = np.zeros((N, M))
    for k in range(M):
        counts[:, k] = gamma[:, obs == k].sum(axis=1)
    B = np.empty((N, M))
    for i in range(N):
        if total[i] > 0:
            B[i] = counts[i] / total[i]
        else:
            B[i] = 1.0 / M
            if i not in degenerate:
                degenerate.append(i)

    pi = gamma[:, 0] / gamma[:, 0].sum()
    # sums drift from 1 by a few ulps over long sequences
    A /= A.sum(axis=1, keepdims=True)
    B /= B.sum(axis=1, keepdims=True)
    return HmmModel(A, B, pi), fb.log_likelihood, degenerate


def baum_welch_step(model: HmmModel, obs) -> tuple[HmmModel, float]:
    """One EM update.  Returns the new model and the log-likelihood of ``model``."""
    obs = _check_obs(model, obs)
    new, ll, degenerate = _reestimate(model, obs)
    if degenerate:
        log.warning("states %s never occupied; rows reset to uniform", degenerate)
    return new, ll


@dataclass
class BaumWelchDiagnostics:
    best_restart: int
    log_likelihoods: list[list[float]] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)
    converged: list[bool] = field(default_factory=list)
    degenerate_resets: int = 0

    @property
    def best_trace(self) -> list[float]:
        return self.log_likelihoods[self.best_restart]

    @property
    def best_log_likelihood(self) -> float:
        return self.best_trace[-1]


def baum_welch(obs, n_hidden: int, n_restarts: int = 5, tol: float = 1e-6, max_iter: int = 500,
               rng: np.random.Generator | None = None, n_obs: int | None = None,
               init: HmmModel | None = None) -> tuple[HmmModel, BaumWelchDiagnostics]:
    """Fit an HMM by EM from several random starting points.

    Each restart iterates until the relative log-likelihood gain falls below
    ``tol`` or ``max_iter`` updates have been made.  The restart with the
    highest final log-likelihood wins, ties going to the lower index.  Each
    trace holds the log-likelihood of every model visited, including the
    returned one.
    """
    obs = np.asarray(obs, dtype=np.int64)
    if len(obs) < 10 * n_hidden:
        raise ValueError(f"need at least {10 * n_hidden} observations for {n_hidden} hidden states")
    rng = np.random.default_rng() if rng is None else rng
    n_obs = int(obs.max()) + 1 if n_obs is None else n_obs

    diag = BaumWelchDiagnostics(best_restart=0)
    best_model, best_ll = None, -np.inf
    for r in range(n_restarts):
        model = init if (init is not None and r == 0) else random_model(rng, n_hidden, n_obs)
        trace = []
        converged = False
        for _ in range(max_iter):
            new, ll, degenerate = _reestimate(model, obs)
            diag.degenerate_resets += len(degenerate)
            trace.append(ll)
            if len(trace) > 1 and (trace[-1] - trace[-2]) <= tol * abs(trace[-2]):
                converged = True
                break
            model = new
        if converged:
            # the last update was not taken; ``model`` matches trace[-1]
            final_ll = trace[-1]
        else:
            final_ll = forward_backward(model, obs).log_likelihood
            trace.append(final_ll)
        diag.log_likelihoods.append(trace)
        diag.iterations.append(len(trace) - 1)
        diag.converged.append(converged)
        if final_ll > best_ll:
            best_model, best_ll, diag.best_restart = model, final_ll, r
    return best_model, diag


@dataclass
class ViterbiTables:
    R: np.ndarray  # log max-path probabilities
    Q: np.ndarray  # backpointers; column 0 is unused (-1)
    path: np.ndarray

    @property
    def log_probability(self) -> float:
        return float(self.R[self.path[-1], -1])


def viterbi(model: HmmModel, obs) -> ViterbiTables:
    """Most likely hidden path, in log space.  Ties go to the lowest state index."""
    obs = _check_obs(model, obs)
    T, N = len(obs), model.n_hidden
    with np.errstate(divide="ignore"):
        log_a = np.log(model.A)
        log_b = np.log(model.B)
        log_pi = np.log(model.pi)
    R = np.empty((N, T))
    Q = np.full((N, T), -1, dtype=np.int64)
    R[:, 0] = log_pi + log_b[:, obs[0]]
    for t in range(1, T):
        cand = R[:, t - 1][:, None] + log_a  # cand[j, i]: from j to i
        Q[:, t] = np.argmax(cand, axis=0)
        R[:, t] = cand[Q[:, t], np.arange(N)] + log_b[:, obs[t]]
    if not np.isfinite(R[:, -1]).any():
        raise ZeroLikelihoodError("observation sequence has zero probability")
    path = np.empty(T, dtype=np.int64)
    path[-1] = int(np.argmax(R[:, -1]))
    for t in range(T - 1, 0, -1):
        path[t - 1] = Q[path[t], t]
    return ViterbiTables(R, Q, path)


def path_log_probability(model: HmmModel, hidden, obs) -> float:
    """``log P(hidden, obs)`` for a given hidden path."""
    hidden = np.asarray(hidden)
    obs = np.asarray(obs)
    with np.errstate(divide="ignore"):
        lp = np.log(model.pi[hidden[0]]) + np.log(model.B[hidden, obs]).sum()
        lp += np.log(model.A[hidden[:-1], hidden[1:]]).sum()
    return float(lp)


@dataclass
class Discretizer:
    """Quantile bins over log prices.

    ``edges`` are the interior bin boundaries, ``centers`` a representative
    log price for each bin (the median of the training prices that fell in it).
    """

    edges: np.ndarray
    centers: np.ndarray

    @property
    def n_symbols(self) -> int:
        return len(self.edges) + 1

    def transform(self, prices) -> np.ndarray:
        logp = np.log(np.asarray(prices, dtype=float))
        return np.searchsorted(self.edges, logp, side="right").astype(np.int64)


def discretize_prices(prices, K: int = 9) -> tuple[Discretizer, np.ndarray]:
    """Equal-frequency binning of log prices into (at most) ``K`` symbols."""
    prices = np.asarray(prices, dtype=float)
    if np.any(prices <= 0):
        raise ValueError("prices must be positive")
    if K < 1:
        raise ValueError("K must be positive")
    logp = np.log(prices)
    n_distinct = len(np.unique(logp))
    if n_distinct < K:
        warnings.warn(f"only {n_distinct} distinct prices; using {n_distinct} symbols instead of {K}")
        K = n_distinct
    edges = np.quantile(logp, np.arange(1, K) / K)
    edges = np.unique(edges)
    if len(edges) < K - 1:
        warnings.warn(f"tied quantiles; using {len(edges) + 1} symbols instead of {K}")
    symbols = np.searchsorted(edges, logp, side="right").astype(np.int64)
    centers = np.array([np.median(logp[symbols == k]) if np.any(symbols == k) else np.nan
                        for k in range(len(edges) + 1)])
    return Discretizer(edges, centers), symbols


def align_states(model: HmmModel, discretizer: Discretizer | None = None) -> np.ndarray:
    """Permutation ordering hidden states by emission-weighted mean log price.

    Returns ``perm`` such that ``model.permuted(perm)`` has state 0 with the
    lowest mean price.  Without a discretizer, bin indices stand in for prices.
    """
    if discretizer is None:
        centers = np.arange(model.n_obs, dtype=float)
    else:
        centers = np.nan_to_num(discretizer.centers, nan=0.0)
    means = model.B @ centers
    return np.argsort(means, kind="stable")


def relabel_path(path, perm) -> np.ndarray:
    """Map a decoded path through the same relabelling as ``model.permuted(perm)``."""
    inverse = np.empty_like(np.asarray(perm))
    inverse[perm] = np.arange(len(perm))
    return inverse[np.asarray(path)]


def viterbi_score(decoded, truth) -> float:
    """Fraction of steps where the decoded state equals the true one."""
    decoded = np.asarray(decoded)
    truth = np.asarray(truth)
    if decoded.shape != truth.shape:
        raise ValueError(f"length mismatch: {decoded.shape} vs {truth.shape}")
    return float(np.mean(decoded == truth))
