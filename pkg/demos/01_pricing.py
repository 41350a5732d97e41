"""
Pricing the benchmark put
=========================

An at-the-money put on a stock that starts at 1.0, with 38 daily exercise
dates, r = 5% and sigma = 20%.  The European price has a closed form;
the Bermudan price needs a binomial tree.
"""

import numpy as np

from rlstop.baselines import Style, TreeSpec, bs_european_put, crr_price

T = 38 / 252
bs = bs_european_put(1.0, 1.0, 0.05, 0.2, T)
print("Black-Scholes European put:", round(bs, 6))

# the tree converges to the closed form as the step count grows
for steps in (38, 200, 2000):
    euro, _ = crr_price(TreeSpec.from_maturity(steps, 1.0, 1.0, 0.05, 0.2, T, style=Style.EUROPEAN))
    print(f"  CRR European, {steps:5d} steps: {euro:.6f}  (error {euro - bs:+.1e})")

# early exercise on each of the 38 days is worth a little extra
berm, _ = crr_price(TreeSpec(38, 1.0, 1.0, 0.05, 0.2, 1 / 252))
print("CRR Bermudan, daily exercise:", round(berm, 6))
print("early-exercise premium:", round(berm - bs, 6))

# sensitivity to volatility
for sigma in np.linspace(0.1, 0.4, 4):
    p, _ = crr_price(TreeSpec(38, 1.0, 1.0, 0.05, sigma, 1 / 252))
    print(f"  sigma={sigma:.2f}  Bermudan={p:.5f}")
