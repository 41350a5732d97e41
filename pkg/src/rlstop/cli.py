"""Command-line entry point: ``rlstop {simulate,train,evaluate,protocol,price-bt}``.

Runs are described by a JSON file (see ``RunConfig``); flags override file
values.  Artifacts land in ``<outdir>/{checkpoints,logs,reports}/<run-id>``
where the run id defaults to a hash of the resolved config, so equal
config and seed always write to the same place with identical bytes.

Exit codes: 0 ok, 1 user error (bad flags, config, data), 2 internal
failure (including a non-finite training loss).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .agents import AgentConfig, default_config, fit_scaler, load_agent, make_agent, train
from .agents.common import ALGORITHMS
from .baselines import FirstPolicy, LastPolicy, RandPolicy, Style, TreePolicy, TreeSpec, crr_price
from .core import PayoutKind, PayoutSpec
from .eval import LeakError, ProtocolReport, evaluate, run_protocol
from .market import CsvError, GbmParams, Split, enumerate_episodes, gbm_episodes, load_csv, simulate_gbm, write_csv

log = logging.getLogger("rlstop")

POLICIES = ("ddqn", "c51", "iqn", "rand", "first", "last", "bt")
SPLITS = tuple(s.value for s in Split)


class UserError(Exception):
    """Bad input from the user; exit code 1."""


# Desk-scale settings that make the small networks learn within a few
# thousand episodes (see README, "Training scale").
DESK_OVERRIDES = {
    "ddqn": dict(reward_scale=30.0, out_init_scale=0.01),
    "c51": dict(reward_scale=30.0, out_init_scale=0.01, v_max=0.2),
    "iqn": dict(reward_scale=30.0, out_init_scale=0.01),
}


@dataclass
class RunConfig:
    """Everything needed to reproduce a run from its JSON file and seed.

    ``agents`` maps an algorithm to a list of override dicts on top of the
    task defaults; each entry is one hyper-parameter candidate.  For the
    GBM task ``sizes`` gives the number of episodes per split; for the CSV
    task ``csv`` maps each split to a list of files.
    """

    task: str = "gbm"
    seed: int = 0
    outdir: str = "runs"
    run_id: Optional[str] = None
    payout: dict = field(default_factory=dict)
    gbm: dict = field(default_factory=dict)
    csv: dict = field(default_factory=dict)
    sizes: dict = field(default_factory=lambda: {"training": 20000, "valid_hp": 5000,
                                                 "valid_model": 5000, "test": 10000})
    agents: dict = field(default_factory=lambda: {a: [dict(DESK_OVERRIDES[a])] for a in ALGORITHMS})
    episodes: int = 3000
    eval_every: int = 0
    eval_episodes: int = 2000
    checkpoint_every: int = 0
    tree_sigma: Optional[float] = None
    with_eor: bool = False
    workers: int = 1

    # ------------------------------------------------------------ validation

    def validate(self) -> list[str]:
        """All problems with the config, each naming its field."""
        e = []
        if self.task not in ("gbm", "csv"):
            e.append(f"task: must be 'gbm' or 'csv', got {self.task!r}")
        if not isinstance(self.seed, int) or self.seed < 0:
            e.append("seed: must be a non-negative integer")
        for name in ("episodes", "eval_every", "eval_episodes", "checkpoint_every"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                e.append(f"{name}: must be a non-negative integer")
        if not isinstance(self.workers, int) or self.workers < 1:
            e.append("workers: must be >= 1")
        if self.tree_sigma is not None and not self.tree_sigma > 0:
            e.append("tree_sigma: must be positive or null")
        try:
            self.payout_spec()
        except (TypeError, ValueError) as exc:
            e.append(f"payout: {exc}")
        if self.task == "gbm":
            try:
                self.gbm_params()
            except (TypeError, ValueError) as exc:
                e.append(f"gbm: {exc}")
            for split in SPLITS:
                n = self.sizes.get(split)
                if not isinstance(n, int) or n < 1:
                    e.append(f"sizes.{split}: must be a positive integer")
            for extra in set(self.sizes) - set(SPLITS):
                e.append(f"sizes.{extra}: unknown split")
        elif self.task == "csv":
            for split in SPLITS:
                paths = self.csv.get(split)
                if not paths:
                    e.append(f"csv.{split}: missing")
                    continue
                for i, p in enumerate([paths] if isinstance(paths, str) else paths):
                    if not Path(p).is_file():
                        e.append(f"csv.{split}[{i}]: file not found: {p}")
            for extra in set(self.csv) - set(SPLITS):
                e.append(f"csv.{extra}: unknown split")
        if not isinstance(self.agents, dict):
            e.append("agents: must map algorithm names to lists of overrides")
        else:
            for algo, grid in self.agents.items():
                if algo not in ALGORITHMS:
                    e.append(f"agents.{algo}: unknown algorithm")
                    continue
                if not isinstance(grid, list):
                    e.append(f"agents.{algo}: must be a list of override objects")
                    continue
                for k, over in enumerate(grid):
                    try:
                        self._agent_config(algo, over)
                    except (TypeError, ValueError) as exc:
                        e.append(f"agents.{algo}[{k}]: {exc}")
        return e

    def check(self) -> "RunConfig":
        errors = self.validate()
        if errors:
            raise UserError("invalid config:\n  " + "\n  ".join(errors))
        return self

    # ------------------------------------------------------------ resolution

    @property
    def dataset_task(self) -> str:
        return "gbm" if self.task == "gbm" else "sp500"

    def _agent_config(self, algo: str, over: dict) -> AgentConfig:
        base = {f.name: getattr(default_config(algo, self.dataset_task), f.name)
                for f in fields(AgentConfig)}
        unknown = set(over) - set(base)
        if unknown:
            raise ValueError(f"unknown agent config fields: {sorted(unknown)}")
        base.update(over)
        return AgentConfig(**base)

    def candidates(self) -> dict:
        return {a: [self._agent_config(a, o) for o in grid] for a, grid in self.agents.items()}

    def payout_spec(self) -> PayoutSpec:
        return PayoutSpec(**self.payout)

    def gbm_params(self) -> GbmParams:
        p = dict(self.gbm)
        p.setdefault("n_steps", self.payout_spec().slice_length - 1)
        return GbmParams(**p)

    def resolved_run_id(self, command: str) -> str:
        if self.run_id:
            return self.run_id
        doc = self.to_dict()
        doc.pop("outdir")
        digest = hashlib.sha1(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:10]
        return f"{command}-{digest}"

    def datasets(self) -> dict:
        """Episodes (GBM) or trajectories (CSV) for every split."""
        spec = self.payout_spec()
        if self.task == "gbm":
            p = self.gbm_params()
            out, first = {}, 0
            for split in SPLITS:
                n = self.sizes[split]
                # disjoint path counters keep the GBM splits independent
                out[split] = gbm_episodes(p, spec, n, seed=self.seed, first_path=first)
                first += n
            return out
        out = {}
        for split in SPLITS:
            paths = self.csv[split]
            out[split] = load_csv([paths] if isinstance(paths, str) else paths, Split(split),
                                  min_length=spec.slice_length).usable(spec)
        return out

    # ------------------------------------------------------------ serialisation

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise UserError(f"invalid config:\n  unknown fields: {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise UserError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UserError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise UserError(f"{path}: top level must be an object")
        return cls.from_dict(doc)


def _run_dirs(cfg: RunConfig, command: str) -> dict:
    rid = cfg.resolved_run_id(command)
    dirs = {k: Path(cfg.outdir) / k / rid for k in ("checkpoints", "logs", "reports")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    return dirs


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for name in ("seed", "outdir", "run_id", "episodes", "workers", "task"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "csv", None):
        cfg.task = "csv"
        cfg.csv = {s: list(args.csv) for s in SPLITS}
    return cfg.check()


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    try:
        p = GbmParams(S0=args.S0, r=args.r, sigma=args.sigma, dt=args.dt, n_steps=args.steps)
    except ValueError as exc:
        raise UserError(str(exc)) from None
    if args.paths < 1:
        raise UserError("--paths must be >= 1")
    width = max(4, len(str(args.paths - 1)))
    trajs = [simulate_gbm(p, args.seed, path=i) for i in range(args.paths)]
    trajs = [type(t)(f"GBM{i:0{width}d}", t.prices) for i, t in enumerate(trajs)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(trajs, out)
    ST = np.array([t.prices[-1] for t in trajs])
    se = ST.std(ddof=1) / math.sqrt(ST.size) if ST.size > 1 else 0.0
    expected = p.S0 * math.exp(p.r * p.n_steps * p.dt)
    print(f"wrote {len(trajs)} paths x {p.n_steps + 1} prices to {out}")
    print(f"terminal mean {ST.mean():.6f} (se {se:.6f}); S0*exp(rT) = {expected:.6f}")
    return 0


def _eval_set(cfg: RunConfig, split: str):
    data = cfg.datasets()[split]
    return data if cfg.task == "gbm" else enumerate_episodes(data, cfg.payout_spec())


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    algo = args.algorithm
    grid = cfg.candidates().get(algo) or [cfg._agent_config(algo, DESK_OVERRIDES[algo])]
    acfg = grid[0]
    spec = cfg.payout_spec()
    data = cfg.datasets()
    source = data["training"]
    valid = _eval_set(cfg, "valid_hp") if cfg.eval_episodes else None
    if valid is not None and len(valid) > cfg.eval_episodes:
        valid = valid.take(np.arange(cfg.eval_episodes))
    dirs = _run_dirs(cfg, "train")
    (dirs["reports"] / "config.json").write_text(cfg.to_json())
    scaler = fit_scaler(source, spec, np.random.default_rng(cfg.seed))
    agent = make_agent(acfg, spec, scaler, seed=cfg.seed)
    log_path = dirs["logs"] / f"{algo}.csv"
    try:
        tl = train(agent, source, cfg.episodes, seed=cfg.seed, eval_episodes=valid,
                   eval_every=cfg.eval_every, log_path=log_path,
                   checkpoint_dir=dirs["checkpoints"] if cfg.checkpoint_every else None,
                   checkpoint_every=cfg.checkpoint_every)
    except FloatingPointError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    ckpt = dirs["checkpoints"] / f"{algo}.json"
    agent.save(ckpt, {"seed": cfg.seed})
    ers = [r["eval_er"] for r in tl.rows if r["eval_er"] is not None]
    print(f"trained {algo} for {agent.episodes} episodes; checkpoint {ckpt}; log {log_path}")
    if ers:
        print(f"final eval ER {ers[-1]:.5f}")
    return 0


def _load_policy(path, spec: PayoutSpec):
    try:
        agent = load_agent(path)
    except FileNotFoundError:
        raise UserError(f"checkpoint not found: {path}") from None
    except (ValueError, KeyError) as exc:
        raise UserError(f"{path}: {exc}") from None
    if agent.spec.n_features != spec.n_features or agent.spec.horizon != spec.horizon:
        raise UserError(f"{path}: network expects {agent.spec.n_features} features over "
                        f"{agent.spec.horizon} steps, data has {spec.n_features} over {spec.horizon}")
    return agent


def cmd_evaluate(args) -> int:
    cfg = _config_from_args(args)
    spec = cfg.payout_spec()
    wanted = [p.strip().lower() for p in args.policies.split(",") if p.strip()]
    bad = [p for p in wanted if p not in POLICIES]
    if bad:
        raise UserError(f"unknown policies {bad}; choose from {list(POLICIES)}")
    ckpts = {}
    for path in args.checkpoint or []:
        agent = _load_policy(path, spec)
        ckpts[agent.algorithm] = agent
    policies = []
    for name in wanted:
        if name in ALGORITHMS:
            if name not in ckpts:
                raise UserError(f"policy {name} needs a --checkpoint")
            policies.append(ckpts[name])
        else:
            policies.append({"rand": RandPolicy(cfg.seed), "first": FirstPolicy(), "last": LastPolicy(),
                             "bt": TreePolicy(spec, cfg.tree_sigma)}[name])
    episodes = _eval_set(cfg, args.split)

    def one(i):
        return evaluate(policies[i], episodes, rng=np.random.default_rng([cfg.seed, i]),
                        with_eor=args.eor)

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        reports = list(pool.map(one, range(len(policies))))
    table = {r.label: r for r in reports}
    out = ProtocolReport(tables={args.split: table})
    dirs = _run_dirs(cfg, "evaluate")
    (dirs["reports"] / "evaluate.csv").write_text(out.to_csv())
    (dirs["reports"] / "evaluate.txt").write_text(out.to_text())
    print(out.to_text(), end="")
    return 0


def cmd_protocol(args) -> int:
    cfg = _config_from_args(args)
    if args.eor:
        cfg.with_eor = True
    if args.dry_run:
        rid = cfg.resolved_run_id("protocol")
        plan = {"run_id": rid, "outputs": {k: str(Path(cfg.outdir) / k / rid)
                                           for k in ("checkpoints", "logs", "reports")},
                "config": cfg.to_dict(),
                "agents": {a: [c.to_dict() for c in grid] for a, grid in cfg.candidates().items()}}
        print(json.dumps(plan, indent=2, sort_keys=True))
        return 0
    spec = cfg.payout_spec()
    data = cfg.datasets()
    try:
        report = run_protocol(cfg.candidates(), data, spec, seed=cfg.seed, episodes=cfg.episodes,
                              tree_sigma=cfg.tree_sigma, with_eor=cfg.with_eor,
                              progress=lambda m: log.info(m))
    except LeakError as exc:
        raise UserError(str(exc)) from None
    except FloatingPointError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 2
    dirs = _run_dirs(cfg, "protocol")
    (dirs["reports"] / "config.json").write_text(cfg.to_json())
    (dirs["reports"] / "protocol.csv").write_text(report.to_csv())
    (dirs["reports"] / "protocol.txt").write_text(report.to_text())
    for algo, agent in report.agents.items():
        agent.save(dirs["checkpoints"] / f"{algo}.json", {"seed": cfg.seed})
    print(report.to_text(), end="")
    return 0


def cmd_price_bt(args) -> int:
    try:
        kind = PayoutKind(args.kind)
        style = Style(args.style)
        ts = TreeSpec(steps=args.steps, S0=args.S0, K=args.K, r=args.r, sigma=args.sigma,
                      dt=args.T / args.steps, style=style, kind=kind)
        price, _ = crr_price(ts)
    except ValueError as exc:
        raise UserError(str(exc)) from None
    print(repr(price))
    return 0


# ---------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="rlstop", description="Optimal stopping with deep RL and tree benchmarks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        if config:
            p.add_argument("--config", help="JSON run config; flags override its values")
            p.add_argument("--outdir", default=None)
            p.add_argument("--run-id", dest="run_id", default=None)

    p = sub.add_parser("simulate", help="write GBM paths to CSV")
    common(p, config=False)
    p.add_argument("--paths", type=int, default=1)
    p.add_argument("--steps", type=int, default=38)
    p.add_argument("--S0", type=float, default=1.0)
    p.add_argument("--r", type=float, default=0.05)
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--dt", type=float, default=1 / 252)
    p.add_argument("--out", default="gbm.csv")
    p.set_defaults(func=cmd_simulate, seed=0)

    p = sub.add_parser("train", help="train one agent")
    common(p)
    p.add_argument("--algorithm", choices=ALGORITHMS, default="ddqn")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--csv", nargs="+", help="use these files for every split")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate checkpoints and baselines")
    common(p)
    p.add_argument("--checkpoint", action="append")
    p.add_argument("--policies", default="rand,last,first,bt")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--eor", action="store_true", help="also report option returns")
    p.add_argument("--csv", nargs="+", help="evaluate on these files")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("protocol", help="train, select and test all agents")
    common(p)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--eor", action="store_true")
    p.add_argument("--dry-run", action="store_true", help="print the resolved plan only")
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("price-bt", help="price an option on a CRR tree")
    p.add_argument("--S0", type=float, default=1.0)
    p.add_argument("--K", type=float, default=1.0)
    p.add_argument("--r", type=float, default=0.05)
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--T", type=float, default=38 / 252, help="maturity in years")
    p.add_argument("--steps", type=int, default=38)
    p.add_argument("--style", choices=[s.value for s in Style], default="bermudan")
    p.add_argument("--kind", choices=["put", "call"], default="put")
    p.set_defaults(func=cmd_price_bt)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UserError, CsvError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - last resort
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
