import json
import math

import numpy as np
import pytest

from clusterwalk import cli, formats
from clusterwalk.config import parse_config
from clusterwalk.pipeline import (ENDPOINTS, GCHI, LOCK, MANIFEST, PERC, REPORT, RunManifest,
                                  StageError, report_summary, run_pipeline)

SMALL = """
[lattice]
d = 2
L = 32
p = 0.7
seed = 6
[walk]
N = 400
t_max = 4
eps = 0.25
trajectories = 2
[estimate]
bootstrap = 200
poincare_trials = 4
heat_N = 1000
heat_t = 5, 10, 20
"""


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = parse_config(SMALL)
    return cfg, out, run_pipeline(cfg, out)


def test_sample_stage_writes_only_bonds(tmp_path):
    m = run_pipeline(parse_config(SMALL), tmp_path, stages=["sample"])
    assert list(m.artifacts) == [PERC]
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted([PERC, MANIFEST])
    assert m.stages["sample"]["status"] == "complete" and list(m.stages) == ["sample"]


def test_full_run_report(full_run):
    cfg, out, m = full_run
    assert m.complete
    for name, entry in m.artifacts.items():
        assert (out / name).exists() and len(entry["sha256"]) == 64
    r = json.loads((out / REPORT).read_text())
    assert len(r["variational_sigma2"]) == 2 and len(r["msd"]["value"]) == 2
    assert isinstance(r["agreement"]["agree"], bool)
    assert r["sublinearity_trend"] in ("zero", "decreasing", "not decreasing")
    assert len(r["heat_kernel"]["points"]) == 3
    # the solve summary certifies the corrector
    sv = r["solve"]
    assert sv["harmonic_residual"] <= 1e-8 and sv["cocycle_residual"] <= 1e-8
    assert all(s == 0.0 for s in sv["gradient_sum"])
    ends, seeds, t, eps = formats.read_endpoints(out / ENDPOINTS)
    assert ends.shape == (400, 2) and t == 4.0 and eps == 0.25
    assert np.array_equal(seeds, 6 + np.arange(400))


def test_summary_reflects_report(full_run):
    _, out, m = full_run
    text = report_summary(m)
    assert text == report_summary(out)
    r = json.loads((out / REPORT).read_text())
    for v in r["variational_sigma2"]:
        assert f"{v:.6f}" in text
    assert f"{r['heat_kernel']['slope']:.4f}" in text
    assert (out / "summary.txt").read_text() == text


def test_summary_requires_estimate(tmp_path):
    with pytest.raises(StageError, match="nothing has run"):
        report_summary(tmp_path)
    m = run_pipeline(parse_config(SMALL), tmp_path, stages=["sample"])
    with pytest.raises(StageError, match="missing stage 'estimate'"):
        report_summary(m)
    with pytest.raises(StageError, match="missing stage 'estimate'"):
        report_summary(RunManifest(""))


def test_rerun_is_bit_identical(full_run, tmp_path):
    cfg, _, m = full_run
    again = run_pipeline(cfg, tmp_path, threads=3)
    for name, entry in m.artifacts.items():
        if name.endswith(".json") and name != "solve.json":
            continue
        assert again.artifacts[name]["sha256"] == entry["sha256"], name
    a = json.loads((tmp_path / REPORT).read_text())
    b = json.loads((full_run[1] / REPORT).read_text())
    assert a == b


def test_stage_order_and_missing_inputs(tmp_path):
    cfg = parse_config(SMALL)
    with pytest.raises(StageError) as info:
        run_pipeline(cfg, tmp_path, stages=["solve"])
    assert info.value.stage == "solve" and "bonds.perc" in str(info.value)
    m = RunManifest.load(tmp_path)
    assert m.stages["solve"]["status"] == "failed"
    run_pipeline(cfg, tmp_path, stages=["sample"])
    run_pipeline(cfg, tmp_path, stages=["solve"])
    assert (tmp_path / GCHI).exists()


def test_config_mismatch_and_lock(tmp_path):
    run_pipeline(parse_config(SMALL), tmp_path, stages=["sample"])
    with pytest.raises(StageError, match="different config"):
        run_pipeline(parse_config(SMALL.replace("seed = 6", "seed = 7")), tmp_path)
    (tmp_path / LOCK).write_text("1")
    with pytest.raises(StageError, match="exists"):
        run_pipeline(parse_config(SMALL), tmp_path, stages=["sample"])
    (tmp_path / LOCK).unlink()
    run_pipeline(parse_config(SMALL), tmp_path, stages=["sample"])
    assert not (tmp_path / LOCK).exists()


def test_supercriticality_warning(tmp_path):
    from clusterwalk.pipeline import SupercriticalityWarning
    with pytest.warns(SupercriticalityWarning):
        run_pipeline(parse_config(SMALL.replace("p = 0.7", "p = 0.3")), tmp_path,
                     stages=["sample"])


# -- command line -------------------------------------------------------------------

def write_config(tmp_path, text):
    path = tmp_path / "run.ini"
    path.write_text(text)
    return str(path)


def test_cli_success_prints_summary(tmp_path, capsys):
    cfg = write_config(tmp_path, SMALL.replace("heat_N = 1000", "heat_N = 0"))
    assert cli.main(["all", "--config", cfg, "--out", str(tmp_path / "o"), "--threads", "2"]) == 0
    out = capsys.readouterr().out
    assert "sigma^2 [b=0]" in out and "estimators agree" in out


def test_cli_stage_by_stage(tmp_path):
    cfg = write_config(tmp_path, SMALL.replace("heat_N = 1000", "heat_N = 0"))
    out = str(tmp_path / "o")
    assert cli.main(["walk", "--config", cfg, "--out", out]) == 2
    for stage in ["sample", "solve", "walk", "estimate", "report"]:
        assert cli.main([stage, "--config", cfg, "--out", out]) == 0


def test_cli_invalid_config(tmp_path, capsys):
    cfg = write_config(tmp_path, SMALL.replace("p = 0.7", "p = 1.5"))
    assert cli.main(["sample", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "p" in capsys.readouterr().err
    assert cli.main(["sample", "--config", str(tmp_path / "nope.ini")]) == 2
    assert cli.main(["sample", "--config", cfg, "--threads", "0"]) == 2


def test_cli_nonconvergence(tmp_path):
    cfg = write_config(tmp_path, SMALL + "[solver]\nmax_iter = 1\n")
    out = str(tmp_path / "o")
    assert cli.main(["sample", "--config", cfg, "--out", out]) == 0
    assert cli.main(["solve", "--config", cfg, "--out", out]) == 3
