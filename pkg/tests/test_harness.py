from __future__ import annotations

import csv
import json

import pytest

from mmcc.errors import ConfigurationError
from mmcc.harness import cli
from mmcc.harness.config import apply_overrides, load_config, parse_config, shipped_config, shipped_configs, validate
from mmcc.harness.runner import VOLATILE_SUMMARY_KEYS, execute_run

TINY = ["N=32", "trainer.b=8", "m=4", "N_eval=16", "K=2", "tol_rel=0"]


def _run(argv, capsys=None):
    code = cli.main(argv)
    out = capsys.readouterr() if capsys else None
    return code, out


def _sets(pairs):
    return [x for p in pairs for x in ("--set", p)]


def _stable_summary(path):
    data = json.loads(path.read_text())
    for k in VOLATILE_SUMMARY_KEYS:
        data.pop(k)
    return data


def _stable_sweeps(path):
    rows = list(csv.reader(path.open()))
    col = rows[0].index("seconds")
    return [r[:col] + r[col + 1:] for r in rows]


@pytest.mark.parametrize("name", shipped_configs())
def test_shipped_configs_are_valid(name, tmp_path):
    cfg = shipped_config(name)
    cfg.output_dir = str(tmp_path)
    assert validate(cfg) == []


def test_full_scale_fbsde_config_is_valid(tmp_path):
    cfg = shipped_config("fbsde_full")
    cfg.output_dir = str(tmp_path)
    assert validate(cfg) == []
    assert cfg.problem["d"] == 100 and cfg.trainer["m"] == 200


def test_b_times_m_diagnostic(tmp_path, capsys):
    code, out = _run(["validate", "--problem", "fbsde", "-o", str(tmp_path)] + _sets(["trainer.b=64", "m=3", "N=100"]),
                     capsys)
    assert code == 2
    assert "b*m != N" in out.out


def test_diagnostics_carry_line_numbers(tmp_path):
    text = "problem:\n  id: lq\ntrainer:\n  N: 100\n  b: 64\n  m: 3\n"
    cfg = parse_config(text, "c.yaml")
    cfg.output_dir = str(tmp_path)
    diags = validate(cfg)
    assert diags and diags[0].startswith("c.yaml:3:")


def test_returns_to_scale_diagnostic(tmp_path):
    cfg = shipped_config("growth_desk")
    cfg.output_dir = str(tmp_path)
    A = [[0.1] * 6 for _ in range(6)]
    cfg = apply_overrides(cfg, [f"A={json.dumps(A)}", f"problem.b={json.dumps([0.3] * 6)}"])
    diags = validate(cfg)
    assert any("returns to scale" in d for d in diags)


def test_unknown_keys_are_configuration_errors(tmp_path):
    with pytest.raises(ConfigurationError, match=":3: unknown top-level key"):
        parse_config("problem:\n  id: lq\nbogus: 1\n", "x.yaml")
    cfg = shipped_config("lq_desk")
    with pytest.raises(ConfigurationError):
        apply_overrides(cfg, ["nonsense=3"])
    with pytest.raises(ConfigurationError, match="ambiguous"):
        apply_overrides(cfg, ["b=4"])
    cfg.problem["warp"] = 9
    cfg.output_dir = str(tmp_path)
    assert any("unknown field 'warp'" in d for d in validate(cfg))


def test_yaml_parse_error_reports_line(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("problem:\n  id: lq\ntrainer: [1,\n")
    with pytest.raises(ConfigurationError, match="bad.yaml:"):
        load_config(p)


def test_overrides_resolve_bare_and_dotted_keys():
    cfg = apply_overrides(shipped_config("lq_desk"), ["T=3", "trainer.N=64", "seed=4", "oracle.N_mc=10",
                                                       "trainer.b=4", "problem.b=2"])
    assert cfg.problem["T"] == 3 and cfg.trainer["N"] == 64 and cfg.trainer["b"] == 4 and cfg.problem["b"] == 2
    assert cfg.seed == 4 and cfg.oracle["N_mc"] == 10


def test_run_growth_writes_summary_fields(tmp_path, capsys):
    out = tmp_path / "g"
    code, cap = _run(["run", "--problem", "growth", "--set", "T=5", "--seed", "7", "-o", str(out)]
                     + _sets(TINY + ["hidden=[4]", "K=1"]), capsys)
    assert code == 0
    summary = json.loads((out / "summary.json").read_text())
    for key in ("objective", "se", "sweeps", "baseline_objective"):
        assert key in summary and summary[key] is not None
    assert summary["sweeps"] == 1 and summary["config"]["seed"] == 7
    assert set(json.loads(cap.out)) == {"objective", "se", "sweeps", "baseline_objective"}
    for f in ("sweeps.csv", "plot.csv", "plot.svg", "config.json", "oracle.json", "checkpoint/stack.bin"):
        assert (out / f).exists()
    header = (out / "sweeps.csv").read_text().splitlines()[0]
    assert header == "sweep,period,accepted,eval_mean,eval_se,seconds"
    assert (out / "plot.csv").read_text().splitlines()[0] == "sweep,objective,se,c0_0"
    assert summary["version"] and summary["seeds"]["seed"] == 7


@pytest.mark.parametrize("problem", ["lq", "growth", "heston"])
def test_same_seed_same_artifacts(problem, tmp_path):
    extra = {"lq": [], "growth": ["hidden=[4]", "T=2"], "heston": ["hidden=[4]", "steps=4", "oracle=false"]}[problem]
    dirs = []
    for i in range(2):
        d = tmp_path / str(i)
        assert cli.main(["run", "--problem", problem, "-o", str(d)] + _sets(TINY + extra)) == 0
        dirs.append(d)
    a, b = (_stable_summary(d / "summary.json") for d in dirs)
    a["config"].pop("output_dir"), b["config"].pop("output_dir")
    assert a == b
    assert _stable_sweeps(dirs[0] / "sweeps.csv") == _stable_sweeps(dirs[1] / "sweeps.csv")
    assert (dirs[0] / "plot.csv").read_bytes() == (dirs[1] / "plot.csv").read_bytes()
    assert (dirs[0] / "checkpoint/stack.bin").read_bytes() == (dirs[1] / "checkpoint/stack.bin").read_bytes()


def test_different_seed_differs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["run", "--problem", "lq", "-o", str(a), "--seed", "1"] + _sets(TINY))
    cli.main(["run", "--problem", "lq", "-o", str(b), "--seed", "2"] + _sets(TINY))
    assert _stable_summary(a / "summary.json")["objective"] != _stable_summary(b / "summary.json")["objective"]


def test_oracle_verb_fbsde(tmp_path, capsys):
    code, cap = _run(["oracle", "--problem", "fbsde", "--set", "d=1", "--set", "oracle.N_mc=100000",
                      "--set", "oracle.N_var=10000", "-o", str(tmp_path)], capsys)
    assert code == 0
    result = json.loads(cap.out)
    assert result["se"] > 0 and abs(result["y_star"]) < 1
    saved = json.loads((tmp_path / "oracle.json").read_text())
    assert saved["inputs"]["problem"]["d"] == 1 and saved["result"]["y_star"] == result["y_star"]


def test_exit_code_for_configuration_error(tmp_path, capsys):
    code, cap = _run(["run", "--problem", "lq", "-o", str(tmp_path), "--set", "trainer.b=7"], capsys)
    assert code == 2 and "b*m != N" in cap.err
    assert _run(["run", "--problem", "nosuch"], capsys)[0] == 2
    assert _run(["run"], capsys)[0] == 2


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_exit_code_for_numerical_failure(tmp_path, capsys):
    code, cap = _run(["run", "--problem", "lq", "-o", str(tmp_path), "--set", "a=1e200"] + _sets(TINY), capsys)
    assert code == 3 and "numerical failure" in cap.err


def test_resume_continues_bit_identically(tmp_path):
    straight, split = tmp_path / "straight", tmp_path / "split"
    assert cli.main(["run", "--problem", "lq", "-o", str(straight)] + _sets(TINY + ["K=3"])) == 0
    assert cli.main(["run", "--problem", "lq", "-o", str(split)] + _sets(TINY + ["K=1"])) == 0
    assert cli.main(["resume", str(split), "--set", "K=3"]) == 0
    a, b = _stable_summary(straight / "summary.json"), _stable_summary(split / "summary.json")
    assert b["sweeps"] == 3
    assert a["stack_fingerprint"] == b["stack_fingerprint"]
    assert a["history"] == b["history"]
    assert _stable_sweeps(straight / "sweeps.csv") == _stable_sweeps(split / "sweeps.csv")


def test_resume_missing_run(tmp_path, capsys):
    assert _run(["resume", str(tmp_path / "nothing")], capsys)[0] == 2


def test_threads_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MMCC_THREADS", "1")
    args = cli._parser().parse_args(["run", "--problem", "lq", "-o", str(tmp_path)])
    assert cli._resolve(args).threads == 1
    args = cli._parser().parse_args(["run", "--problem", "lq", "--threads", "3"])
    assert cli._resolve(args).threads == 3


def test_configs_verb(capsys):
    code, cap = _run(["configs"], capsys)
    assert code == 0 and "growth_desk" in cap.out.split()


def test_execute_run_lq_one_period(tmp_path):
    cfg = apply_overrides(shipped_config("lq_desk"), ["T=1", "sigma=0", "lr=0.05", "lr_decay=0.7", "K=12",
                                                      "tol_rel=0", "N=256", "trainer.b=8", "m=32", "N_eval=16"])
    cfg.output_dir = str(tmp_path)
    summary = execute_run(cfg)
    assert summary["comparison"]["abs_error"] < 1e-3
