# Can a hidden Markov model read sentiment off the price?
#
# Simulate a market whose sentiment follows a sticky three-state Markov chain,
# bin the log price into nine equal-mass symbols, fit a 3-state HMM by
# Baum-Welch and decode the most likely state path with Viterbi.
import numpy as np

from sentilab import hmm
from sentilab.experiments import HmmFitConfig, fit_hmm_to_prices
from sentilab.market import simulate, single_run_config
from sentilab.sentiment import sample_transition_matrix

rng = np.random.default_rng(7)
a_true = sample_transition_matrix(rng, 0.95, 0.98)
config = single_run_config(n_steps=1000, seed=7, transition=a_true)
path = simulate(config)
print("true transition matrix\n", np.round(a_true, 3))
print("time in each state", np.bincount(path.state, minlength=3))

fit = fit_hmm_to_prices(path.price, 3, HmmFitConfig(), rng)
print("bin edges (log price)", np.round(fit.discretizer.edges, 3))
print("fitted transition matrix (states ordered by price level)\n", np.round(fit.model.A, 3))
print("restart log-likelihoods", [round(tr[-1], 2) for tr in fit.diagnostics.log_likelihoods])

# the diagonals come back well, the decoded path much less so
print("diagonal error", np.round(np.abs(np.diag(fit.model.A) - np.diag(a_true)), 3))
print("Viterbi score", hmm.viterbi_score(fit.decoded, path.state), "(chance is 1/3)")

# price moves lag sentiment by tens of steps, so decoded states trail the truth
lagged = [hmm.viterbi_score(fit.decoded[k:], path.state[:len(path) - k]) for k in (0, 10, 25, 50)]
print("score against truth shifted by 0/10/25/50 steps", np.round(lagged, 3))
