"""Sentiment processes that drive the simulated market.

A buy/sell sentiment ``psi`` sets the log-odds of buying versus selling,
``p_b / p_s = exp(psi)``.  Three kinds of driver are provided: piecewise
constant schedules followed by groups of agents, a Markov chain over a
small set of sentiment states, and a stationary Gaussian volatility.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

VOLATILITY_FLOOR = 1e-4

# Transition matrices quoted for the single-run experiments.  The published
# tables list states as (buy, neutral, sell); here state 0 is always the
# most bearish, so both axes are reversed.
SINGLE_RUN_MATRIX = np.array([
    [0.95, 0.025, 0.025],
    [0.035, 0.93, 0.035],
    [0.05, 0.05, 0.90],
])[::-1, ::-1].copy()

LONG_LIVED_MATRIX = np.array([
    [0.9948, 0.0002, 0.005],
    [0.0016, 0.9962, 0.0022],
    [0.0044, 0.0025, 0.9931],
])[::-1, ::-1].copy()


def buy_probability(psi):
    """Probability of choosing the buy side, ``exp(psi) / (1 + exp(psi))``.

    Works on scalars and arrays.
    """
    psi = np.asarray(psi, dtype=float)
    out = np.empty_like(psi)
    pos = psi >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-psi[pos]))
    ez = np.exp(psi[~pos])
    out[~pos] = ez / (1.0 + ez)
    return float(out) if out.ndim == 0 else out


def effective_probabilities(groups: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Mix per-group buy probabilities by group weight.

    ``groups`` is a sequence of ``(weight, psi)`` pairs whose weights sum to 1.
    Returns ``(p_b_eff, p_s_eff)``.
    """
    weights = np.array([w for w, _ in groups], dtype=float)
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ValueError(f"group weights sum to {weights.sum()!r}, expected 1")
    p_b = math.fsum(w * buy_probability(psi) for w, psi in groups)
    return p_b, 1.0 - p_b


def equilibrium_price(p_b_eff: float, p_s_eff: float, total_cash: float, total_shares: float) -> float:
    """Price balancing expected cash inflow against share outflow.

    Solves ``p_b_eff * M = p_s_eff * S * P_e`` for ``P_e``.
    """
    if p_s_eff == 0 or total_shares == 0:
        raise ZeroDivisionError("equilibrium price undefined for p_s_eff == 0 or total_shares == 0")
    return (p_b_eff / p_s_eff) * total_cash / total_shares


@dataclass(frozen=True)
class PiecewiseSchedule:
    """Piecewise-constant sentiment: ``segments`` is a list of ``(t_start, psi)``.

    Steps are 1-based; the first segment must start at ``t = 1``.
    """

    segments: tuple[tuple[int, float], ...]

    def __post_init__(self):
        segs = tuple((int(t), float(psi)) for t, psi in self.segments)
        if not segs:
            raise ValueError("schedule needs at least one segment")
        if segs[0][0] != 1:
            raise ValueError("first segment must start at t=1")
        starts = [t for t, _ in segs]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("segment starts must be strictly increasing")
        if not all(math.isfinite(psi) for _, psi in segs):
            raise ValueError("sentiment values must be finite")
        object.__setattr__(self, "segments", segs)

    @classmethod
    def constant(cls, psi: float) -> "PiecewiseSchedule":
        return cls(((1, psi),))

    @property
    def change_points(self) -> list[int]:
        return [t for t, _ in self.segments[1:]]


def sentiment_at(schedule: PiecewiseSchedule, t: int) -> float:
    """Sentiment of the segment active at step ``t``."""
    if t < schedule.segments[0][0]:
        raise ValueError(f"step {t} precedes the first segment")
    starts = [s for s, _ in schedule.segments]
    k = int(np.searchsorted(starts, t, side="right")) - 1
    return schedule.segments[k][1]


@dataclass(frozen=True)
class GroupSpec:
    """A fraction ``weight`` of the agents following ``schedule``."""

    weight: float
    schedule: PiecewiseSchedule

    def __post_init__(self):
        if not 0 < self.weight <= 1:
            raise ValueError(f"group weight must lie in (0, 1], got {self.weight}")


def check_group_weights(groups: Sequence[GroupSpec]) -> None:
    total = math.fsum(g.weight for g in groups)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"group weights sum to {total!r}, expected 1")


def two_group_regimes(n_steps: int, z: float = 0.25) -> list[GroupSpec]:
    """The two-group, three-regime set-up.

    A fraction ``z`` turns bullish (``log 2``) after the first third of the run,
    the rest turn bearish (``-log 2``) for the final quarter.
    """
    t1 = n_steps // 3 + 1
    t2 = (3 * n_steps) // 4 + 1
    return [
        GroupSpec(z, PiecewiseSchedule(((1, 0.0), (t1, math.log(2.0))))),
        GroupSpec(1.0 - z, PiecewiseSchedule(((1, 0.0), (t2, -math.log(2.0))))),
    ]


@dataclass
class MarkovSentimentSpec:
    """Markov chain over sentiment states.

    ``transition[i, j]`` is the probability of moving from state ``i`` to ``j``.
    ``initial=None`` means a uniform draw of the first state.
    """

    transition: np.ndarray
    states: np.ndarray = field(default_factory=lambda: np.array([-1.0, 0.0, 1.0]))
    initial: np.ndarray | None = None

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.states = np.asarray(self.states, dtype=float)
        n = len(self.states)
        if self.transition.shape != (n, n):
            raise ValueError(f"transition must be {n}x{n}, got {self.transition.shape}")
        if np.any(self.transition < 0) or np.any(self.transition > 1):
            raise ValueError("transition entries must lie in [0, 1]")
        if np.max(np.abs(self.transition.sum(axis=1) - 1.0)) > 1e-12:
            raise ValueError("transition rows must sum to 1")
        if self.initial is not None:
            self.initial = np.asarray(self.initial, dtype=float)
            if self.initial.shape != (n,) or np.any(self.initial < 0) or abs(self.initial.sum() - 1) > 1e-12:
                raise ValueError("initial must be a probability vector over the states")

    @property
    def n_states(self) -> int:
        return len(self.states)

    def stationary_distribution(self) -> np.ndarray:
        """Left eigenvector of the transition matrix for eigenvalue 1."""
        w, v = np.linalg.eig(self.transition.T)
        k = int(np.argmin(np.abs(w - 1.0)))
        pi = np.real(v[:, k])
        return pi / pi.sum()


def initial_state(spec: MarkovSentimentSpec, rng: np.random.Generator) -> int:
    if spec.initial is None:
        return int(rng.integers(spec.n_states))
    return int(rng.choice(spec.n_states, p=spec.initial))


def step_markov(spec: MarkovSentimentSpec, current: int, rng: np.random.Generator) -> int:
    """Draw the next state from row ``current`` of the transition matrix."""
    row = spec.transition[current]
    # inverse-CDF on a single uniform keeps one draw per step
    k = int(np.searchsorted(np.cumsum(row), rng.random(), side="right"))
    k = min(k, spec.n_states - 1)
    while row[k] == 0:
        k -= 1
    return k


def sample_markov_path(spec: MarkovSentimentSpec, length: int, rng: np.random.Generator) -> np.ndarray:
    path = np.empty(length, dtype=np.int64)
    if length == 0:
        return path
    path[0] = initial_state(spec, rng)
    for t in range(1, length):
        path[t] = step_markov(spec, path[t - 1], rng)
    return path


def sample_transition_matrix(rng: np.random.Generator, diag_low: float = 0.95, diag_high: float = 0.98,
                             n_states: int = 3) -> np.ndarray:
    """Random row-stochastic matrix with diagonal drawn from ``U(diag_low, diag_high)``.

    The remaining mass of each row is split among the off-diagonal entries in
    proportion to independent ``U(0, 1)`` draws.
    """
    if not 0 <= diag_low <= diag_high <= 1:
        raise ValueError("need 0 <= diag_low <= diag_high <= 1")
    a = np.zeros((n_states, n_states))
    for i in range(n_states):
        d = rng.uniform(diag_low, diag_high)
        if n_states == 1:
            a[i, i] = 1.0
            continue
        w = rng.random(n_states - 1)
        w = w / w.sum()
        off = (1.0 - d) * w
        a[i, [j for j in range(n_states) if j != i]] = off
        a[i, i] = max(1.0 - off.sum(), 0.0)
    return a


@dataclass(frozen=True)
class VolatilitySpec:
    """Stationary Gaussian volatility, ``N(mean, sd)``, in relative price units."""

    mean: float = 0.02
    sd: float = 0.005

    def __post_init__(self):
        if self.mean <= 0:
            raise ValueError("volatility mean must be positive")
        if self.sd < 0:
            raise ValueError("volatility sd must be non-negative")


def sample_volatility(spec: VolatilitySpec, rng: np.random.Generator) -> float:
    """Gaussian draw, redrawn until it clears :data:`VOLATILITY_FLOOR`."""
    if spec.sd == 0:
        return spec.mean
    while True:
        s = spec.mean + spec.sd * rng.standard_normal()
        if s >= VOLATILITY_FLOOR:
            return float(s)
