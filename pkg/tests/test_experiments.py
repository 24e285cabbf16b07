import json
import os
import signal
import subprocess
import sys
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from sausage_lab.experiments import (
    EXPERIMENTS,
    ConfigError,
    ExperimentConfig,
    RunRecord,
    append_jsonl,
    content_hash,
    read_records,
    report,
    run,
)


def test_constants_record(tmp_path):
    rec = run(ExperimentConfig("constants", d=2, nu=1.0), out=tmp_path)
    assert rec.metrics["c"][0] == pytest.approx(6.028003738475488, rel=1e-12)
    assert rec.metrics["r0"][0] == pytest.approx(0.9794828186113316, rel=1e-12)
    assert rec.errors == []
    assert len(read_records(tmp_path / "runs.jsonl")) == 1


def test_unknown_experiment_named():
    with pytest.raises(ConfigError) as err:
        ExperimentConfig("bogus").validate()
    assert any(p.startswith("experiment:") for p in err.value.problems)


def test_validation_lists_every_problem():
    cfg = ExperimentConfig("survive", d=0, nu=-1.0, n_paths=0, t=None, geometry={"hard_radius": -1.0})
    fields = {p.split(":")[0] for p in cfg.problems()}
    assert {"d", "nu", "n_paths", "t", "geometry"} <= fields


def test_unknown_config_field():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"experiment": "constants", "colour": 1})


def test_moe_params_validated_up_front():
    cfg = ExperimentConfig("moe", epsilons=[0.3, 0.1])
    assert any(p.startswith("moe:") for p in cfg.problems())


def _strip(rec):
    return rec.stable()


def test_rerun_identical_modulo_timestamps(tmp_path):
    cfg = ExperimentConfig("lln", nu=1.0, t_grid=[50.0, 100.0], n_samples=4, seed=3)
    a = run(cfg, out=tmp_path / "a")
    b = run(cfg, out=tmp_path / "b")
    assert _strip(a) == _strip(b)
    ra = read_records(tmp_path / "a" / "runs.jsonl")[0]
    assert _strip(ra) == json.loads(json.dumps(_strip(a)))
    for name in ("lln.csv", "lln_histogram.svg"):
        assert (tmp_path / "a" / name).exists()


def test_partial_failure_recorded(tmp_path):
    cfg = ExperimentConfig("capacity", d=3, centers=[[0, 0, 0]], radii=[1.0], method="grid_solve", h=-1.0)
    with pytest.raises(ConfigError):
        run(cfg, out=tmp_path)
    # an obstacle radius above R/10 fails after the eigenvalues are in
    cfg = ExperimentConfig("spectral", domain="disk", size=1.0, h=1 / 16, epsilons=[0.5], n_particles=1000)
    rec = run(cfg, out=tmp_path)
    assert rec.errors and rec.metrics["error"][0] == 1.0
    assert "lambda1" in rec.metrics
    assert report([rec]).exit_code == 1


@given(
    st.sampled_from(EXPERIMENTS),
    st.integers(1, 3),
    st.floats(0, 10),
    st.one_of(st.none(), st.floats(1e-3, 1e6)),
    st.integers(0, 2**31),
    st.lists(st.floats(0.01, 5), max_size=3),
)
def test_config_round_trip(exp, d, nu, t, seed, radii):
    cfg = ExperimentConfig(exp, d=d, nu=nu, t=t, seed=seed, radii=radii or None)
    text = cfg.to_json()
    assert ExperimentConfig.from_json(text).to_json() == text


def test_content_hash_is_git_blob_hash():
    # `printf 'hello\n' | git hash-object --stdin`
    assert content_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


def test_torn_line_skipped(tmp_path):
    path = tmp_path / "runs.jsonl"
    rec = RunRecord("constants", "x", "y", 0, "0", 0.0, 1.0, {"c": [1.0, 0.0]})
    append_jsonl(path, rec.to_json())
    with open(path, "a") as fh:
        fh.write(rec.to_json()[:25])
    assert len(read_records(path)) == 1


def test_killed_writer_leaves_complete_lines(tmp_path):
    path = tmp_path / "runs.jsonl"
    code = (
        "import sys\n"
        "from sausage_lab.experiments import append_jsonl\n"
        "line = '{\"k\": \"' + 'x' * 20000 + '\"}'\n"
        "while True:\n"
        "    append_jsonl(sys.argv[1], line)\n"
    )
    proc = subprocess.Popen([sys.executable, "-c", code, str(path)])
    deadline = time.time() + 30
    while time.time() < deadline and (not path.exists() or path.stat().st_size < 200_000):
        time.sleep(0.05)
    os.kill(proc.pid, signal.SIGKILL)
    proc.wait()
    data = path.read_bytes()
    assert data.endswith(b"\n")
    lines = data.splitlines()
    assert len(lines) >= 5
    assert all(json.loads(line)["k"] == "x" * 20000 for line in lines)


def _lln_record(t, ratio, seed=0):
    return RunRecord(
        "lln", f"h{t}", "i", seed, "0", 0.0, 1.0, {f"scaled_volume_ratio[t={t:g}]": [ratio, 0.01]},
        config={"d": 2, "nu": 1.0, "t": t},
    )


def test_report_single_constants_record(tmp_path):
    rec = run(ExperimentConfig("constants", d=2, nu=1.0), out=tmp_path)
    rows = report([rec]).csv_text.strip().splitlines()
    assert len(rows) == 2
    assert "c" in rows[0].split(",")


def test_report_lln_monotone():
    good = report([_lln_record(t, r) for t, r in ((1e3, 0.97), (1e4, 0.98), (1e5, 0.99))])
    assert good.exit_code == 0
    assert good.lines[-1].endswith("yes")
    bad = report([_lln_record(t, r) for t, r in ((1e3, 0.97), (1e4, 0.99), (1e5, 0.98))])
    assert bad.exit_code == 1 and "lln_trend" in bad.failed


def test_report_refusals():
    with pytest.raises(ValueError):
        report([])
    other = RunRecord("constants", "c", "i", 0, "0", 0.0, 1.0, {})
    with pytest.raises(ValueError, match="different experiments"):
        report([_lln_record(1e3, 0.9), other])


def test_report_failed_assertion_exit_code():
    rec = RunRecord("moe", "c", "i", 0, "0", 0.0, 1.0, {}, assertions={"disjoint": False})
    assert report([rec]).exit_code == 1
