import csv
import os
import subprocess
import sys

import numpy as np
import pytest

from fdcr.algo import AlgoConfig
from fdcr.bench import (ExperimentConfig, RESULT_COLUMNS, load_config,
                        outage_experiment, parse_config_text, run_experiment,
                        summarize)
from fdcr.model import InvalidInputError, ScenarioConfig, dbm2w

TINY_SCEN = dict(n_t=3, m=2, i_pu=1, j_ul=1, k_dl=1)
FAST_ALGO = AlgoConfig(max_inner_iters=6, max_outer_iters=3)


def tiny_experiment(**overrides) -> ExperimentConfig:
    base = dict(scenario=ScenarioConfig(**TINY_SCEN), algo=FAST_ALGO,
                schemes=("proposed",), seeds=(0,), verify_samples=100)
    base.update(overrides)
    return ExperimentConfig(**base)


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def test_parse_config_round_trip():
    text = """
    # comment
    scenario.n_t = 3
    scenario.m = 2
    scenario.p_max_dl_dbm = 24
    algo.chi = 100
    run.schemes = proposed,baseline1
    run.seeds = 0,1
    run.output_dir = somewhere
    """
    cfg = parse_config_text(text)
    assert cfg.scenario.n_t == 3
    assert cfg.scenario.p_max_dl_dbm == 24
    assert cfg.algo.chi == 100
    assert cfg.schemes == ("proposed", "baseline1")
    assert cfg.seeds == (0, 1)
    assert cfg.output_dir == "somewhere"
    # dBm converted at the boundary
    assert cfg.scenario.params().p_max_dl == pytest.approx(dbm2w(24))


def test_parse_config_rejects_unknown_keys():
    with pytest.raises(InvalidInputError):
        parse_config_text("scenario.warp_drive = 1")
    with pytest.raises(InvalidInputError):
        parse_config_text("nonsense = 2")
    with pytest.raises(InvalidInputError):
        parse_config_text("scenario.n_t 3")


def test_experiment_config_validation():
    with pytest.raises(InvalidInputError):
        tiny_experiment(seeds=())
    with pytest.raises(InvalidInputError):
        tiny_experiment(schemes=("warp",))
    with pytest.raises(InvalidInputError):
        tiny_experiment(sweep_param="warp", sweep_values=(1,))


# ---------------------------------------------------------------------------
# run_experiment
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def single_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    cfg = tiny_experiment(output_dir=str(out))
    os.environ["FDCR_THREADS"] = "1"
    records = run_experiment(cfg)
    return cfg, records


def test_single_cell_single_record(single_run):
    cfg, records = single_run
    assert len(records) == 1
    rec = records[0]
    assert rec.scheme == "proposed" and rec.seed == 0
    assert np.isfinite(rec.sum_rate)
    assert rec.status in ("ok", "degraded")
    assert os.path.exists(os.path.join(cfg.output_dir, "results.csv"))
    assert os.path.exists(os.path.join(cfg.output_dir, "summary.csv"))
    assert os.path.exists(os.path.join(cfg.output_dir, "traces", "proposed_s0.csv"))


def test_results_csv_schema(single_run):
    cfg, _ = single_run
    with open(os.path.join(cfg.output_dir, "results.csv")) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == RESULT_COLUMNS
    assert len(rows) == 2


def test_rerun_is_deterministic(tmp_path, single_run):
    cfg, _ = single_run

    def masked(path):
        with open(path) as fh:
            rows = list(csv.reader(fh))
        col = rows[0].index("wall_time_s")
        for r in rows[1:]:
            r[col] = ""
        return rows

    from dataclasses import replace

    cfg2 = replace(cfg, output_dir=str(tmp_path / "again"))
    run_experiment(cfg2)
    first = masked(os.path.join(cfg.output_dir, "results.csv"))
    second = masked(os.path.join(cfg2.output_dir, "results.csv"))
    assert first == second


def test_summary_matches_recomputation(tmp_path):
    cfg = tiny_experiment(output_dir=str(tmp_path), seeds=(0, 1))
    os.environ["FDCR_THREADS"] = "1"
    records = run_experiment(cfg)
    rows = summarize(records)
    assert len(rows) == 1
    mean = float(rows[0][3])
    assert mean == pytest.approx(np.mean([r.sum_rate for r in records]), abs=1e-12)
    with open(os.path.join(str(tmp_path), "summary.csv")) as fh:
        srows = list(csv.reader(fh))
    assert float(srows[1][3]) == pytest.approx(mean, abs=1e-12)


def test_sweep_produces_cells(tmp_path):
    cfg = tiny_experiment(output_dir=str(tmp_path), sweep_param="m",
                          sweep_values=(2, 3))
    os.environ["FDCR_THREADS"] = "1"
    records = run_experiment(cfg)
    assert len(records) == 2
    values = sorted({r.sweep_value for r in records})
    assert values == [2, 3]
    with open(os.path.join(str(tmp_path), "summary.csv")) as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 3


def test_robust_records_respect_tolerance(single_run):
    cfg, records = single_run
    p_tol = cfg.scenario.params().p_tol.max()
    for rec in records:
        if rec.status == "ok":
            assert rec.max_verified_leakage_w <= p_tol


def test_failed_cell_recorded_not_raised(tmp_path, monkeypatch):
    import fdcr.bench as bench

    def boom(*args, **kwargs):
        raise RuntimeError("synthetic failure")

    monkeypatch.setattr(bench, "_single_run", boom)
    cfg = tiny_experiment(output_dir=str(tmp_path))
    os.environ["FDCR_THREADS"] = "1"
    records = bench.run_experiment(cfg)
    assert len(records) == 1
    assert records[0].status.startswith("failed:")


# ---------------------------------------------------------------------------
# outage
# ---------------------------------------------------------------------------

def test_outage_experiment(tmp_path):
    cfg = tiny_experiment(output_dir=str(tmp_path),
                          schemes=("proposed", "non_robust"),
                          scenario=ScenarioConfig(upsilon2=0.1, **TINY_SCEN))
    os.environ["FDCR_THREADS"] = "1"
    rows = outage_experiment(cfg, p_tar_dbm=[-90.0, 200.0], n_error_samples=60)
    table = {(r[0], float(r[1])): float(r[2]) for r in rows}
    # infinite target tolerance: no outage for anybody
    assert table[("proposed", 200.0)] == 0.0
    assert table[("non_robust", 200.0)] == 0.0
    # robust scheme at p_tar = p_tol: zero outage
    assert table[("proposed", -90.0)] == 0.0
    assert os.path.exists(os.path.join(str(tmp_path), "outage.csv"))


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _write_cfg(path, out_dir, seeds="0", schemes="proposed"):
    path.write_text(f"""
scenario.n_t = 3
scenario.m = 2
scenario.i_pu = 1
scenario.j_ul = 1
scenario.k_dl = 1
algo.max_inner_iters = 6
algo.max_outer_iters = 3
run.schemes = {schemes}
run.seeds = {seeds}
run.output_dir = {out_dir}
run.verify_samples = 100
""")


def test_cli_run_and_exit_codes(tmp_path):
    from fdcr.cli import main

    cfg_path = tmp_path / "exp.cfg"
    _write_cfg(cfg_path, tmp_path / "out")
    os.environ["FDCR_THREADS"] = "1"
    assert main(["run", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "out" / "results.csv").exists()


def test_cli_missing_config(tmp_path, capsys):
    from fdcr.cli import main

    rc = main(["run", "--config", str(tmp_path / "nope.cfg")])
    assert rc == 1
    assert "nope.cfg" in capsys.readouterr().err


def test_cli_unknown_flag():
    from fdcr.cli import main

    assert main(["run", "--nonsense"]) == 1


def test_cli_sweep(tmp_path):
    from fdcr.cli import main

    cfg_path = tmp_path / "exp.cfg"
    _write_cfg(cfg_path, tmp_path / "out")
    os.environ["FDCR_THREADS"] = "1"
    rc = main(["sweep", "--config", str(cfg_path), "--param", "m",
               "--values", "2,3"])
    assert rc == 0
    with open(tmp_path / "out" / "summary.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 3


def test_cli_verify(tmp_path, capsys):
    from fdcr.cli import main

    cfg_path = tmp_path / "exp.cfg"
    _write_cfg(cfg_path, tmp_path / "out")
    rc = main(["verify", "--config", str(cfg_path)])
    out = capsys.readouterr().out
    assert "[PASS]" in out
    assert rc in (0, 2)
