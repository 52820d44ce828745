import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sentilab.market import (
    BUY,
    SELL,
    Agents,
    Book,
    Market,
    MarketConfig,
    MarketPath,
    Order,
    generate_orders,
    match,
    regimes_config,
    simulate,
    single_run_config,
)
from sentilab.sentiment import LONG_LIVED_MATRIX, GroupSpec, PiecewiseSchedule, VolatilitySpec


def agents(n=4, cash=1e4, shares=100.0):
    return Agents(np.full(n, cash), np.full(n, shares))


def test_match_empty_book_rests():
    book, ag = Book(), agents()
    trades = match(book, Order(0, BUY, 100.0, 3.0), ag)
    assert trades == []
    assert book.best_bid() == 100.0 and book.best_ask() is None


def test_match_executes_at_resting_limit():
    book, ag = Book(), agents()
    match(book, Order(1, SELL, 99.0, 5.0), ag)
    trades = match(book, Order(0, BUY, 100.0, 3.0), ag)
    assert len(trades) == 1
    t = trades[0]
    assert (t.buyer, t.seller, t.price, t.quantity) == (0, 1, 99.0, 3.0)
    assert ag.cash[0] == 1e4 - 297.0 and ag.cash[1] == 1e4 + 297.0
    assert ag.shares[0] == 103.0 and ag.shares[1] == 97.0
    assert book.best_ask() == 99.0  # 2 shares left resting


def test_match_walks_book_and_rests_residual():
    book, ag = Book(), agents()
    match(book, Order(1, SELL, 99.0, 2.0), ag)
    match(book, Order(2, SELL, 101.0, 2.0), ag)
    trades = match(book, Order(0, BUY, 100.0, 3.0), ag)
    assert [(t.price, t.quantity) for t in trades] == [(99.0, 2.0)]
    assert book.best_bid() == 100.0
    assert book.bids[0][2].quantity == 1.0
    assert book.best_ask() == 101.0


def test_match_sell_side_and_time_priority():
    book, ag = Book(), agents()
    match(book, Order(1, BUY, 100.0, 1.0), ag)
    match(book, Order(2, BUY, 100.0, 1.0), ag)
    match(book, Order(3, BUY, 98.0, 1.0), ag)
    trades = match(book, Order(0, SELL, 99.0, 1.5), ag)
    assert [(t.buyer, t.price, t.quantity) for t in trades] == [(1, 100.0, 1.0), (2, 100.0, 0.5)]
    assert book.best_ask() is None


order_strategy = st.tuples(st.integers(0, 5), st.booleans(), st.floats(90, 110), st.floats(0.01, 0.99))


@settings(max_examples=150, deadline=None)
@given(st.lists(order_strategy, min_size=1, max_size=60))
def test_matching_conserves_and_never_crosses(raw):
    ag = agents(6, cash=5e3, shares=50.0)
    book = Book()
    cash0, shares0 = ag.cash.sum(), ag.shares.sum()
    used = set()
    for a, is_buy, limit, u in raw:
        if a in used:  # one order per agent per step
            continue
        used.add(a)
        qty = u * ag.cash[a] / limit if is_buy else u * ag.shares[a]
        for t in match(book, Order(a, BUY if is_buy else SELL, limit, qty), ag):
            assert t.quantity > 0 and t.price > 0
            if t.aggressor_side == BUY:
                assert t.price <= t.aggressor_limit
            else:
                assert t.price >= t.aggressor_limit
    assert ag.cash.sum() == pytest.approx(cash0, rel=1e-12)
    assert ag.shares.sum() == pytest.approx(shares0, rel=1e-12)
    assert ag.cash.min() >= -1e-9 and ag.shares.min() >= -1e-12
    if book.bids and book.asks:
        assert book.best_bid() < book.best_ask()


def test_generate_orders_no_participation():
    rng = np.random.default_rng(0)
    assert generate_orders(agents(10), 100.0, 0.0, 0.01, 0.0, rng) == []


@pytest.mark.parametrize("psi,expected", [(0.0, 0.5), (1.0, 0.731058578630)])
def test_generate_orders_buy_fraction(psi, expected):
    rng = np.random.default_rng(1)
    ag = Agents(np.full(1000, 1e5), np.full(1000, 1e3))
    sides = []
    while len(sides) < 100_000:
        sides.extend(o.side for o in generate_orders(ag, 100.0, psi, 0.02, 1.0, rng))
    frac = np.mean(np.array(sides[:100_000]) == BUY)
    assert frac == pytest.approx(expected, abs=0.005)


def test_generate_orders_sizes_and_limits():
    rng = np.random.default_rng(2)
    ag = Agents(np.full(500, 1e5), np.full(500, 1e3))
    orders = generate_orders(ag, 100.0, 0.0, 0.5, 1.0, rng)
    assert len({o.agent for o in orders}) == len(orders)
    for o in orders:
        assert o.limit >= 1.0 and o.quantity > 0
        if o.side == BUY:
            assert o.limit * o.quantity <= ag.cash[o.agent] * (1 + 1e-12)
        else:
            assert o.quantity <= ag.shares[o.agent]


def test_run_step_without_participants_keeps_price():
    cfg = MarketConfig(n_agents=50, n_steps=5, participation=1e-12, seed=3)
    m = Market(cfg)
    price, trades = m.run_step(2)
    assert price == 100.0 and trades == []


def test_run_step_conserves_holdings():
    m = Market(single_run_config(seed=4))
    c0, s0 = m.agents.cash.sum(), m.agents.shares.sum()
    for t in range(2, 50):
        m.run_step(t)
        assert m.agents.cash.sum() == pytest.approx(c0, rel=1e-6)
        assert m.agents.shares.sum() == pytest.approx(s0, rel=1e-6)
        assert not m.book.bids and not m.book.asks


def test_first_regime_mean_near_initial_price():
    cfg = MarketConfig(n_steps=3000, volatility=0.01, seed=5,
                       sentiment=[GroupSpec(0.25, PiecewiseSchedule.constant(0.0)),
                                  GroupSpec(0.75, PiecewiseSchedule.constant(0.0))])
    path = simulate(cfg)
    assert path.price.mean() == pytest.approx(100.0, rel=0.05)


def test_simulate_single_step():
    path = simulate(single_run_config(n_steps=1, seed=6))
    assert len(path) == 1 and path.price[0] == 100.0


def test_simulate_is_deterministic():
    a = simulate(single_run_config(n_steps=200, seed=7))
    b = simulate(single_run_config(n_steps=200, seed=7))
    for name in ("price", "state", "psi", "sigma"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    c = simulate(single_run_config(n_steps=200, seed=8))
    assert not np.array_equal(a.price, c.price)


def test_trade_log_audit():
    path = simulate(single_run_config(n_steps=100, seed=9), record_trades=True)
    assert path.trades
    for _, t in path.trades:
        assert t.quantity > 0 and t.price > 0
        if t.aggressor_side == BUY:
            assert t.price <= t.aggressor_limit
        else:
            assert t.price >= t.aggressor_limit
    by_step = {}
    for step, t in path.trades:
        by_step[step] = t.price
    for step, last in by_step.items():
        assert path.price[step - 1] == last
    assert np.all(path.min_cash >= 0) and np.all(path.min_shares >= 0)


def test_neutral_long_run_mean_is_cash_over_shares():
    cfg = MarketConfig(n_steps=10_000, volatility=0.01, seed=10)
    path = simulate(cfg)
    target = path.total_cash[0] / path.total_shares[0]
    assert path.price.mean() == pytest.approx(target, rel=0.05)


def test_long_lived_states_settle_in_price_order():
    path = simulate(single_run_config(n_steps=5000, seed=1, transition=LONG_LIVED_MATRIX))
    # price over the last 20 steps of every state visit lasting at least 150 steps
    ends = {0: [], 1: [], 2: []}
    change = np.flatnonzero(np.diff(path.state)) + 1
    for a, b in zip(np.r_[0, change], np.r_[change, len(path)]):
        if b - a >= 150:
            ends[int(path.state[a])].append(path.price[b - 20:b].mean())
    means = {k: np.mean(v) for k, v in ends.items() if v}
    assert len(means) == 3
    assert means[0] < means[1] < means[2]


@pytest.mark.xfail(reason="20-50 step states are shorter than the price adjustment time; "
                          "per-state means are pulled towards the overall mean", strict=False)
def test_per_state_means_near_equilibria():
    path = simulate(single_run_config(n_steps=1000, seed=11))
    targets = {0: 36.8, 1: 100.0, 2: 271.8}
    for k, target in targets.items():
        mask = path.state == k
        if mask.sum() >= 50:
            assert path.price[mask].mean() == pytest.approx(target, rel=0.15)


def test_path_csv_round_trip(tmp_path):
    path = simulate(single_run_config(n_steps=50, seed=12))
    f = tmp_path / "path.csv"
    path.to_csv(f)
    assert f.read_text().splitlines()[0] == "t,price,state,psi,sigma"
    back = MarketPath.from_csv(f)
    np.testing.assert_array_equal(back.price, path.price)
    np.testing.assert_array_equal(back.state, path.state)
    np.testing.assert_array_equal(back.sigma, path.sigma)


def test_path_csv_requires_price(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("t,foo\n1,2\n")
    with pytest.raises(KeyError, match="price"):
        MarketPath.from_csv(f)


def test_config_validation_and_dict_round_trip():
    with pytest.raises(ValueError):
        MarketConfig(participation=0.0).validate()
    with pytest.raises(ValueError):
        MarketConfig(n_steps=0).validate()
    with pytest.raises(ValueError):
        MarketConfig.from_dict({"bogus": 1})
    cfg = single_run_config(seed=13)
    back = MarketConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    reg = regimes_config(seed=1)
    assert MarketConfig.from_dict(reg.to_dict()).to_dict() == reg.to_dict()
    assert isinstance(back.volatility, VolatilitySpec)


def test_fixed_group_membership_runs():
    cfg = regimes_config(n_steps=400, seed=2)
    cfg.group_membership = "fixed"
    path = simulate(cfg)
    assert len(path) == 400 and np.all(path.price > 0)
    assert list(np.unique(path.state)) == [0, 1, 2]
