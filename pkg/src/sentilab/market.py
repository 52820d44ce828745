"""Agent-based exchange driven by sentiment processes.

Each step every agent joins the market with probability ``participation``,
picks a side from the current buy/sell sentiment, quotes a limit price
around the previous price and sizes the order as a uniform fraction of
what it can deploy.  Orders are matched one at a time against a limit
order book in random arrival order; the step's price is the last trade
price, and unfilled orders are dropped before the next step.
"""
from __future__ import annotations

import csv
import heapq
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .sentiment import (
    SINGLE_RUN_MATRIX,
    GroupSpec,
    MarkovSentimentSpec,
    PiecewiseSchedule,
    VolatilitySpec,
    buy_probability,
    check_group_weights,
    effective_probabilities,
    initial_state,
    sample_volatility,
    sentiment_at,
    step_markov,
    two_group_regimes,
)

BUY, SELL = 1, -1
LIMIT_FLOOR = 0.01
PATH_HEADER = ["t", "price", "state", "psi", "sigma"]

SentimentDriver = Union[Sequence[GroupSpec], MarkovSentimentSpec]


@dataclass
class Agents:
    """Cash and share holdings, one entry per agent."""

    cash: np.ndarray
    shares: np.ndarray

    def __len__(self):
        return len(self.cash)

    @classmethod
    def endow(cls, n, rng, cash_mean=1e5, cash_sd=1e3, shares=1e3):
        cash = np.maximum(cash_mean + cash_sd * rng.standard_normal(n), 0.0)
        return cls(cash, np.full(n, float(shares)))


@dataclass(slots=True)
class Order:
    agent: int
    side: int
    limit: float
    quantity: float
    seq: int = 0


@dataclass(frozen=True, slots=True)
class Trade:
    buyer: int
    seller: int
    price: float
    quantity: float
    aggressor_side: int
    aggressor_limit: float


class Book:
    """Bids sorted by (limit desc, arrival asc), asks by (limit asc, arrival asc)."""

    def __init__(self):
        self.bids: list = []
        self.asks: list = []
        self._seq = itertools.count()

    def rest(self, order: Order) -> None:
        order.seq = next(self._seq)
        if order.side == BUY:
            heapq.heappush(self.bids, (-order.limit, order.seq, order))
        else:
            heapq.heappush(self.asks, (order.limit, order.seq, order))

    def best_bid(self):
        return -self.bids[0][0] if self.bids else None

    def best_ask(self):
        return self.asks[0][0] if self.asks else None

    def clear(self) -> None:
        self.bids.clear()
        self.asks.clear()


def match(book: Book, incoming: Order, agents: Agents) -> list[Trade]:
    """Cross ``incoming`` against the opposite side of ``book``.

    Fills execute at the resting order's limit.  Holdings are transferred
    immediately; any remainder of ``incoming`` rests in the book.
    """
    trades = []
    cash, shares = agents.cash, agents.shares
    if incoming.side == BUY:
        opposite = book.asks
        while incoming.quantity > 0 and opposite and opposite[0][0] <= incoming.limit:
            price, _, resting = opposite[0]
            q = min(incoming.quantity, resting.quantity)
            buyer, seller = incoming.agent, resting.agent
            trades.append(Trade(buyer, seller, price, q, BUY, incoming.limit))
            cash[buyer] -= q * price
            cash[seller] += q * price
            shares[buyer] += q
            shares[seller] -= q
            incoming.quantity -= q
            resting.quantity -= q
            if resting.quantity <= 0:
                heapq.heappop(opposite)
    else:
        opposite = book.bids
        while incoming.quantity > 0 and opposite and -opposite[0][0] >= incoming.limit:
            neg_price, _, resting = opposite[0]
            price = -neg_price
            q = min(incoming.quantity, resting.quantity)
            buyer, seller = resting.agent, incoming.agent
            trades.append(Trade(buyer, seller, price, q, SELL, incoming.limit))
            cash[buyer] -= q * price
            cash[seller] += q * price
            shares[buyer] += q
            shares[seller] -= q
            incoming.quantity -= q
            resting.quantity -= q
            if resting.quantity <= 0:
                heapq.heappop(opposite)
    if incoming.quantity > 0:
        book.rest(incoming)
    return trades


def generate_orders(agents: Agents, prev_price: float, psi, sigma: float, rho: float,
                    rng: np.random.Generator) -> list[Order]:
    """Orders for one step, in shuffled arrival order.

    ``psi`` is a scalar or a per-agent array.  Limits are
    ``prev_price * (1 + N(0, sigma))`` floored at 1% of ``prev_price``; sizes
    are a ``U(0, 1)`` fraction of cash (buys) or shares (sells).
    """
    n = len(agents)
    participants = rng.permutation(np.flatnonzero(rng.random(n) < rho))
    k = len(participants)
    if k == 0:
        return []
    psi = np.asarray(psi, dtype=float)
    p_buy = buy_probability(psi if psi.ndim == 0 else psi[participants])
    is_buy = rng.random(k) < p_buy
    limits = prev_price * (1.0 + sigma * rng.standard_normal(k))
    limits = np.maximum(limits, LIMIT_FLOOR * prev_price)
    u = rng.random(k)
    qty = np.where(is_buy, u * agents.cash[participants] / limits, u * agents.shares[participants])
    return [
        Order(int(a), BUY if b else SELL, float(lim), float(q))
        for a, b, lim, q in zip(participants, is_buy, limits, qty)
        if q > 0
    ]


@dataclass
class MarketConfig:
    n_agents: int = 1000
    n_steps: int = 1000
    participation: float = 0.1
    initial_price: float = 100.0
    cash_mean: float = 1e5
    cash_sd: float = 1e3
    initial_shares: float = 1e3
    volatility: Union[float, VolatilitySpec] = field(default_factory=VolatilitySpec)
    sentiment: SentimentDriver = field(default_factory=lambda: [GroupSpec(1.0, PiecewiseSchedule.constant(0.0))])
    seed: int = 0
    # "fixed": contiguous blocks of agents keep their group for the whole run;
    # "per_step": every agent re-draws its group each step with the group weights
    group_membership: str = "per_step"

    def validate(self) -> None:
        if self.n_agents < 1 or self.n_steps < 1:
            raise ValueError("n_agents and n_steps must be >= 1")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must lie in (0, 1]")
        if self.initial_price <= 0:
            raise ValueError("initial_price must be positive")
        if not isinstance(self.volatility, VolatilitySpec) and not self.volatility > 0:
            raise ValueError("fixed volatility must be positive")
        if not isinstance(self.sentiment, MarkovSentimentSpec):
            check_group_weights(self.sentiment)
        if self.group_membership not in ("fixed", "per_step"):
            raise ValueError("group_membership must be 'fixed' or 'per_step'")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        if isinstance(self.volatility, VolatilitySpec):
            vol = {"mean": self.volatility.mean, "sd": self.volatility.sd}
        else:
            vol = float(self.volatility)
        if isinstance(self.sentiment, MarkovSentimentSpec):
            s = self.sentiment
            sent = {"markov": {
                "transition": s.transition.tolist(),
                "states": s.states.tolist(),
                "initial": None if s.initial is None else s.initial.tolist(),
            }}
        else:
            sent = {"groups": [{"weight": g.weight, "segments": [list(seg) for seg in g.schedule.segments]}
                               for g in self.sentiment]}
        return {
            "n_agents": self.n_agents, "n_steps": self.n_steps, "participation": self.participation,
            "initial_price": self.initial_price, "cash_mean": self.cash_mean, "cash_sd": self.cash_sd,
            "initial_shares": self.initial_shares, "volatility": vol, "sentiment": sent, "seed": self.seed,
            "group_membership": self.group_membership,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MarketConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown market keys: {sorted(unknown)}")
        vol = d.pop("volatility", None)
        sent = d.pop("sentiment", None)
        cfg = cls(**d)
        if isinstance(vol, dict):
            cfg.volatility = VolatilitySpec(**vol)
        elif vol is not None:
            cfg.volatility = float(vol)
        if sent is not None:
            cfg.sentiment = _sentiment_from_dict(sent)
        cfg.validate()
        return cfg


def _sentiment_from_dict(d: dict) -> SentimentDriver:
    if set(d) == {"markov"}:
        m = dict(d["markov"])
        unknown = set(m) - {"transition", "states", "initial"}
        if unknown:
            raise ValueError(f"unknown markov keys: {sorted(unknown)}")
        return MarkovSentimentSpec(**m)
    if set(d) == {"groups"}:
        groups = []
        for g in d["groups"]:
            if set(g) != {"weight", "segments"}:
                raise ValueError("each group needs exactly 'weight' and 'segments'")
            groups.append(GroupSpec(float(g["weight"]), PiecewiseSchedule(tuple(map(tuple, g["segments"])))))
        return groups
    raise ValueError("sentiment must have exactly one of 'markov' or 'groups'")


@dataclass
class MarketPath:
    """Simulated series; ``state`` and ``psi`` are the hidden ground truth."""

    price: np.ndarray
    state: np.ndarray
    psi: np.ndarray
    sigma: np.ndarray
    total_cash: np.ndarray | None = None
    total_shares: np.ndarray | None = None
    min_cash: np.ndarray | None = None
    min_shares: np.ndarray | None = None
    trades: list | None = None

    def __len__(self):
        return len(self.price)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PATH_HEADER)
            for t in range(len(self.price)):
                w.writerow([t + 1, repr(float(self.price[t])), int(self.state[t]),
                            repr(float(self.psi[t])), repr(float(self.sigma[t]))])

    @classmethod
    def from_csv(cls, path) -> "MarketPath":
        """Read a path CSV.  Only ``price`` is mandatory."""
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "price" not in reader.fieldnames:
                raise KeyError(f"{path}: missing required column 'price'")
            rows = list(reader)
        n = len(rows)

        def col(name, dtype, default):
            if name not in reader.fieldnames:
                return np.full(n, default, dtype=dtype)
            return np.array([r[name] for r in rows], dtype=float).astype(dtype)

        return cls(price=col("price", float, np.nan), state=col("state", np.int64, -1),
                   psi=col("psi", float, np.nan), sigma=col("sigma", float, np.nan))

    @property
    def has_states(self) -> bool:
        return bool(np.all(self.state >= 0))


class Market:
    """Mutable simulation state; one instance per run."""

    def __init__(self, config: MarketConfig, record_trades: bool = False):
        config.validate()
        self.config = config
        self.rng = np.random.default_rng(config.seed)
        self.agents = Agents.endow(config.n_agents, self.rng, config.cash_mean, config.cash_sd,
                                   config.initial_shares)
        self.book = Book()
        self.price = float(config.initial_price)
        self.record_trades = record_trades
        self.trades: list[tuple[int, Trade]] = []
        sent = config.sentiment
        if isinstance(sent, MarkovSentimentSpec):
            self.state = initial_state(sent, self.rng)
        else:
            self._group_of = self._assign_groups(sent, config.n_agents)
            self._change_points = sorted({t for g in sent for t in g.schedule.change_points})
            self.state = 0
        self.psi = self._current_psi(1)

    @staticmethod
    def _assign_groups(groups, n):
        # contiguous blocks of agents, the last group absorbs rounding
        sizes = [int(round(g.weight * n)) for g in groups]
        sizes[-1] = n - sum(sizes[:-1])
        return np.repeat(np.arange(len(groups)), sizes)

    def _current_psi(self, t):
        sent = self.config.sentiment
        if isinstance(sent, MarkovSentimentSpec):
            return float(sent.states[self.state])
        self.state = int(np.searchsorted(self._change_points, t, side="right"))
        values = np.array([sentiment_at(g.schedule, t) for g in sent])
        if len(sent) == 1:
            self._agent_psi = values[0]
        elif self.config.group_membership == "fixed":
            self._agent_psi = values[self._group_of]
        else:
            weights = np.array([g.weight for g in sent])
            self._agent_psi = values[self.rng.choice(len(sent), size=self.config.n_agents, p=weights)]
        p_b, p_s = effective_probabilities([(g.weight, sentiment_at(g.schedule, t)) for g in sent])
        return math.log(p_b / p_s)

    def _draw_sigma(self):
        vol = self.config.volatility
        if isinstance(vol, VolatilitySpec):
            return sample_volatility(vol, self.rng)
        return float(vol)

    def run_step(self, t: int) -> tuple[float, list[Trade]]:
        """Advance to step ``t`` (``t >= 2``); returns the new price and its trades."""
        sigma = self._draw_sigma()
        sent = self.config.sentiment
        if isinstance(sent, MarkovSentimentSpec):
            self.state = step_markov(sent, self.state, self.rng)
            self.psi = float(sent.states[self.state])
            agent_psi = self.psi
        else:
            self.psi = self._current_psi(t)
            agent_psi = self._agent_psi
        self.sigma = sigma
        orders = generate_orders(self.agents, self.price, agent_psi, sigma, self.config.participation, self.rng)
        step_trades = []
        for order in orders:
            step_trades.extend(match(self.book, order, self.agents))
        if step_trades:
            self.price = step_trades[-1].price
        self.book.clear()
        if self.record_trades:
            self.trades.extend((t, tr) for tr in step_trades)
        return self.price, step_trades


def simulate(config: MarketConfig, record_trades: bool = False) -> MarketPath:
    """Run a full simulation; deterministic given ``config.seed``."""
    market = Market(config, record_trades=record_trades)
    T = config.n_steps
    price = np.empty(T)
    state = np.empty(T, dtype=np.int64)
    psi = np.empty(T)
    sigma = np.empty(T)
    tot_cash, tot_shares = np.empty(T), np.empty(T)
    min_cash, min_shares = np.empty(T), np.empty(T)

    def record(i):
        price[i] = market.price
        state[i] = market.state
        psi[i] = market.psi
        a = market.agents
        tot_cash[i], tot_shares[i] = math.fsum(a.cash), math.fsum(a.shares)
        min_cash[i], min_shares[i] = a.cash.min(), a.shares.min()

    market.sigma = market._draw_sigma()
    sigma[0] = market.sigma
    record(0)
    for t in range(2, T + 1):
        market.run_step(t)
        sigma[t - 1] = market.sigma
        record(t - 1)
    return MarketPath(price, state, psi, sigma, tot_cash, tot_shares, min_cash, min_shares,
                      trades=market.trades if record_trades else None)


def single_run_config(n_steps: int = 1000, seed: int = 0, transition=None) -> MarketConfig:
    """Markov sentiment market with stationary volatility ``N(0.02, 0.005)``."""
    a = SINGLE_RUN_MATRIX if transition is None else transition
    return MarketConfig(n_steps=n_steps, seed=seed, volatility=VolatilitySpec(0.02, 0.005),
                        sentiment=MarkovSentimentSpec(np.array(a)))


def regimes_config(n_steps: int = 10_000, seed: int = 0, z: float = 0.25) -> MarketConfig:
    """Two groups, three regimes, fixed relative volatility 0.01."""
    return MarketConfig(n_steps=n_steps, seed=seed, volatility=0.01, sentiment=two_group_regimes(n_steps, z))
