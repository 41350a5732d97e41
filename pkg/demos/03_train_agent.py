"""
Learning to exercise with DDQN
==============================

A double DQN with a dueling head learns when to stop from 3000 simulated
episodes.  Its expected reward on fresh paths should approach the Bermudan
tree price (about 0.0277).
"""

import numpy as np

from rlstop.agents import default_config, fit_scaler, make_agent, train
from rlstop.cli import DESK_OVERRIDES
from rlstop.core import PayoutSpec
from rlstop.eval import evaluate
from rlstop.market import GbmParams, gbm_episodes

spec = PayoutSpec()
train_set = gbm_episodes(GbmParams(), spec, 20_000, seed=100)
valid = gbm_episodes(GbmParams(), spec, 5_000, seed=100, first_path=20_000)

cfg = default_config("ddqn", **DESK_OVERRIDES["ddqn"])
agent = make_agent(cfg, spec, fit_scaler(train_set, spec, np.random.default_rng(0)), seed=0)
log = train(agent, train_set, 3000, seed=0, eval_episodes=valid, eval_every=500)

for row in log.rows:
    if row["eval_er"] is not None:
        print(f"episode {row['episode']:5d}  epsilon {row['epsilon']:.3f}  valid ER {row['eval_er']:.5f}")

rep = evaluate(agent, valid)
print(f"final ER {rep.er:.5f} +/- {rep.ci90_er:.5f}, mean stop day {rep.mean_tau:.1f}")
