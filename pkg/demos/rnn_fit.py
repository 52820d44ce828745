# A small recurrent network trained to name the sentiment state.
#
# Unlike the HMM, the network is shown the true labels during training.  It
# sees two features per step (standardised log price and log return), learns
# on the first 90% of the series and is scored on the last 10%.
import numpy as np

from sentilab.market import simulate, single_run_config
from sentilab.rnn import RnnConfig, train
from sentilab.sentiment import sample_transition_matrix

rng = np.random.default_rng(3)
a_true = sample_transition_matrix(rng, 0.97, 1.0)
path = simulate(single_run_config(n_steps=5000, seed=3, transition=a_true))
print("true transition matrix\n", np.round(a_true, 4))
print("time in each state", np.bincount(path.state, minlength=3))

# 20 epochs keeps this under a minute; the batch study uses 50
config = RnnConfig(unroll=50, epochs=20, memory=200, lr=0.01, seed=3)
result = train(path.price, path.state, config)
print("mean loss per step, every 5th epoch", np.round(result.loss_history[::5], 4))
print("train score", round(result.train_score, 3))
print("test score", round(result.test_score, 3), "(chance is 1/3)")
print("clipped gradient entries", result.clipped)

held_out = path.state[result.n_train:]
print("held-out labels", np.bincount(held_out, minlength=3),
      "predicted", np.bincount(result.test_predictions, minlength=3))
