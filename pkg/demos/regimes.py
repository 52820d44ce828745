# Two groups of traders, three sentiment regimes.
#
# A quarter of the agents turn bullish a third of the way in, the rest turn
# bearish three quarters of the way in.  The price should settle at the level
# where expected buy flow matches expected sell flow in each regime.
import numpy as np

from sentilab.experiments import run_regimes
from sentilab.market import regimes_config
from sentilab.sentiment import effective_probabilities, equilibrium_price, sentiment_at

config = regimes_config(n_steps=10_000, seed=0)
groups = config.sentiment
for g in groups:
    print("weight", g.weight, "segments", g.schedule.segments)

# flow-balance prediction for each regime, with P_1 = M/S = 100
for t in (1, 5_000, 9_000):
    p_b, p_s = effective_probabilities([(g.weight, sentiment_at(g.schedule, t)) for g in groups])
    print(f"t={t:5d}  p_b={p_b:.4f}  p_s={p_s:.4f}  P_e={equilibrium_price(p_b, p_s, 1e8, 1e6):.2f}")

# one full simulation (about 7 s), skipping 300 steps after each change
report = run_regimes(config, burn=300)
for r in report.regimes:
    print(f"regime {r.regime}: steps {r.t_start}-{r.t_end}  mean {r.mean:.2f}  "
          f"predicted {r.pe_pred:.2f}  error {100 * r.rel_err:+.1f}%")

# total cash and shares never change, trades only move them between agents
path = report.path
print("cash drift", np.max(np.abs(path.total_cash / path.total_cash[0] - 1)))
print("share drift", np.max(np.abs(path.total_shares / path.total_shares[0] - 1)))
print("lowest agent cash", path.min_cash.min())
