import csv
import json
from pathlib import Path

import numpy as np
import pytest

from rlstop.agents import load_agent, make_agent
from rlstop.cli import RunConfig, UserError, main

DATA = Path(__file__).parent / "data" / "synthetic5"
SMALL = {"sizes": {"training": 300, "valid_hp": 100, "valid_model": 100, "test": 400},
         "episodes": 40, "eval_every": 10, "eval_episodes": 100}


def _config(tmp_path, **kw):
    doc = dict(SMALL, outdir=str(tmp_path / "runs"), **kw)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return path


def _only(dirpath):
    items = list(Path(dirpath).iterdir())
    assert len(items) == 1
    return items[0]


def test_price_bt(capsys):
    assert main(["price-bt"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(0.027729694369267078, rel=1e-12)
    assert main(["price-bt", "--style", "european", "--steps", "2000"]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(0.02724515032018724, rel=1e-10)


def test_price_bt_bad_tree(capsys):
    assert main(["price-bt", "--sigma", "0.0001", "--r", "0.5"]) == 1
    assert "outside" in capsys.readouterr().err


def test_simulate_single_price(tmp_path):
    out = tmp_path / "g.csv"
    assert main(["simulate", "--paths", "1", "--steps", "0", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows == [["symbol", "date", "close"], ["GBM0000", "2000-01-03", "1.0"]]


def test_simulate_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for p in (a, b):
        assert main(["simulate", "--paths", "20", "--seed", "4", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert main(["simulate", "--paths", "20", "--seed", "5", "--out", str(b)]) == 0
    assert a.read_bytes() != b.read_bytes()


def test_simulate_bad_params(tmp_path):
    assert main(["simulate", "--sigma", "-1", "--out", str(tmp_path / "x.csv")]) == 1


def test_usage_errors_exit_1():
    assert_exit = pytest.raises(SystemExit)
    with assert_exit as e:
        main(["nope"])
    assert e.value.code == 1


def test_config_round_trip():
    cfg = RunConfig(seed=3, payout={"kind": "relative_put"}, sizes={"training": 5, "valid_hp": 1,
                                                                    "valid_model": 1, "test": 2})
    again = RunConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg
    assert RunConfig.from_dict(json.loads(again.to_json())).to_json() == cfg.to_json()


def test_config_lists_every_error(tmp_path):
    cfg = RunConfig(task="csv", seed=-1, payout={"horizon": 0},
                    csv={"training": [str(tmp_path / "missing.csv")]},
                    agents={"ddqn": [{"lr": -1}], "sarsa": []})
    errors = cfg.validate()
    text = "\n".join(errors)
    for needle in ("seed", "payout", "csv.training[0]", "csv.valid_hp", "agents.ddqn[0]", "agents.sarsa"):
        assert needle in text
    with pytest.raises(UserError):
        cfg.check()


def test_train_missing_csv_names_field(tmp_path, capsys):
    path = _config(tmp_path, task="csv", csv={"training": ["nope.csv"], "valid_hp": [str(DATA / "valid_hp.csv")],
                                               "valid_model": [str(DATA / "valid_model.csv")],
                                               "test": [str(DATA / "test.csv")]})
    assert main(["train", "--config", str(path)]) == 1
    assert "csv.training[0]" in capsys.readouterr().err


def test_unknown_config_field(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"bogus": 1}')
    assert main(["train", "--config", str(path)]) == 1


def test_train_zero_episodes_keeps_init(tmp_path):
    path = _config(tmp_path)
    assert main(["train", "--config", str(path), "--episodes", "0", "--seed", "2"]) == 0
    ckpt = _only(tmp_path / "runs" / "checkpoints") / "ddqn.json"
    agent = load_agent(ckpt)
    fresh = make_agent(agent.cfg, agent.spec, agent.scaler, seed=2)
    for a, b in zip(agent.online.parameters(), fresh.online.parameters()):
        assert np.array_equal(a, b)


def test_train_writes_log_and_is_reproducible(tmp_path):
    path = _config(tmp_path)
    outs = []
    for run in ("a", "b"):
        assert main(["train", "--config", str(path), "--run-id", run, "--algorithm", "c51"]) == 0
        log = tmp_path / "runs" / "logs" / run / "c51.csv"
        ckpt = tmp_path / "runs" / "checkpoints" / run / "c51.json"
        outs.append((log.read_bytes(), ckpt.read_bytes()))
    assert outs[0] == outs[1]
    rows = list(csv.DictReader((tmp_path / "runs" / "logs" / "a" / "c51.csv").open()))
    assert list(rows[0]) == ["episode", "epsilon", "loss", "eval_er"]
    assert len(rows) == 40
    assert rows[-1]["eval_er"] != ""


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_loss_exits_nonzero(tmp_path, capsys):
    path = _config(tmp_path, agents={"ddqn": [{"lr": 1e300, "reward_scale": 1e300}]})
    code = main(["train", "--config", str(path)])
    assert code == 2
    assert "diverged" in capsys.readouterr().err


def test_evaluate_baselines_only(tmp_path, capsys):
    path = _config(tmp_path)
    assert main(["evaluate", "--config", str(path), "--policies", "rand,last,first,bt"]) == 0
    out = capsys.readouterr().out
    header = out.splitlines()[1].split()
    assert header == ["Rand", "Last", "First", "B.M."]
    report = _only(tmp_path / "runs" / "reports") / "evaluate.csv"
    rows = list(csv.DictReader(report.open()))
    assert len(rows) == 4
    first = next(r for r in rows if r["policy"] == "First")
    assert float(first["er"]) == 0.0


def test_evaluate_checkpoint_and_shape_mismatch(tmp_path, capsys):
    path = _config(tmp_path)
    assert main(["train", "--config", str(path), "--algorithm", "iqn", "--run-id", "t"]) == 0
    ckpt = tmp_path / "runs" / "checkpoints" / "t" / "iqn.json"
    assert main(["evaluate", "--config", str(path), "--policies", "iqn,first",
                 "--checkpoint", str(ckpt), "--workers", "2"]) == 0
    other = _config(tmp_path, payout={"window": 10})
    assert main(["evaluate", "--config", str(other), "--policies", "iqn", "--checkpoint", str(ckpt)]) == 1
    assert "features" in capsys.readouterr().err


def test_protocol_dry_run_touches_nothing(tmp_path, capsys):
    path = _config(tmp_path)
    assert main(["protocol", "--config", str(path), "--dry-run"]) == 0
    plan = json.loads(capsys.readouterr().out)
    assert set(plan["agents"]) == {"ddqn", "c51", "iqn"}
    assert not (tmp_path / "runs").exists()


def test_protocol_csv_is_reproducible(tmp_path):
    files = {s: [str(DATA / f"{s}.csv")] for s in ("training", "valid_hp", "valid_model", "test")}
    agents = {"ddqn": [{}], "c51": [{}]}
    path = _config(tmp_path, task="csv", csv=files, agents=agents, episodes=30)
    texts = []
    for run in ("a", "b"):
        assert main(["protocol", "--config", str(path), "--run-id", run, "--eor"]) == 0
        texts.append((tmp_path / "runs" / "reports" / run / "protocol.csv").read_bytes())
    assert texts[0] == texts[1]


def test_protocol_leak_is_user_error(tmp_path, capsys):
    same = [str(DATA / "training.csv")]
    path = _config(tmp_path, task="csv", csv={s: same for s in ("training", "valid_hp", "valid_model", "test")},
                   agents={})
    assert main(["protocol", "--config", str(path)]) == 1
    assert "overlap" in capsys.readouterr().err
