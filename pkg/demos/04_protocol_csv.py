"""
The full protocol on CSV prices
===============================

Four date-disjoint CSV files (five synthetic symbols) play the roles of
training, hyper-parameter validation, model validation and test.  The
report ends with the selected agent beside the four benchmarks, including
option returns against a tree price calibrated on each episode.
"""

from pathlib import Path

from rlstop.agents import default_config
from rlstop.core import PayoutSpec
from rlstop.eval import run_protocol
from rlstop.market import Split, load_csv

data = Path(__file__).resolve().parents[1] / "tests" / "data" / "synthetic5"
splits = {s: load_csv(data / f"{s.value}.csv", s) for s in Split}
for s, ds in splits.items():
    print(s.value, [t.id for t in ds.trajectories], len(ds.trajectories[0].prices), "days")

cands = {a: [default_config(a, "sp500")] for a in ("ddqn", "c51")}
report = run_protocol(cands, splits, PayoutSpec(), seed=0, episodes=500, with_eor=True, progress=print)
print(report.to_text())
print("selected:", report.selected)
