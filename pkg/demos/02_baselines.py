"""
Simple stopping rules on simulated paths
========================================

Each episode is a fresh GBM path whose strike is the price on the first
decision day.  We compare stopping at once, stopping at maturity, stopping
on a random day, and re-pricing a binomial tree every day.
"""

import numpy as np

from rlstop.baselines import FirstPolicy, LastPolicy, RandPolicy, TreePolicy
from rlstop.core import PayoutSpec
from rlstop.eval import clairvoyant_returns, evaluate
from rlstop.market import GbmParams, gbm_episodes

spec = PayoutSpec()
episodes = gbm_episodes(GbmParams(), spec, 20_000, seed=1)
print(len(episodes), "episodes, features per state:", spec.n_features)

for policy in (FirstPolicy(), LastPolicy(), RandPolicy(seed=0), TreePolicy(spec, sigma=0.2)):
    rep = evaluate(policy, episodes, rng=np.random.default_rng(0))
    print(f"{rep.label:6s} ER={rep.er:.5f} +/- {rep.ci90_er:.5f}  mean stop day {rep.mean_tau:.1f}")

# nobody can beat perfect hindsight
print("clairvoyant", round(float(clairvoyant_returns(episodes).mean()), 5))
