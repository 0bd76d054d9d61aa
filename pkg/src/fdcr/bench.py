"""Monte-Carlo experiment runner: config parsing, sweeps, outage evaluation,
and CSV persistence with a frozen schema.

results.csv columns:
    scheme, seed, sweep_param, sweep_value, sum_rate, ul_rates, dl_rates,
    outer_iters, wall_time_s, max_rank_ratio, max_verified_leakage_w, status
summary.csv columns:
    scheme, sweep_param, sweep_value, mean_sum_rate, stderr_sum_rate, n
outage.csv columns:
    scheme, p_tar_dbm, outage_pct

Identical (config, seed) inputs reproduce identical result rows except for
the wall_time_s diagnostic column.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import robust
from .algo import AlgoConfig, ConvergenceTrace, bcd, find_feasible_start
from .baselines import (baseline1_zf, baseline2_no_irs, baseline3_half_duplex,
                        non_robust)
from .model import (Allocation, InvalidInputError, Scenario, ScenarioConfig,
                    dbm2w, generate_scenario, per_user_rates)

SCHEMES = ("proposed", "baseline1", "baseline2", "baseline3", "non_robust")
RESULT_COLUMNS = ["scheme", "seed", "sweep_param", "sweep_value", "sum_rate",
                  "ul_rates", "dl_rates", "outer_iters", "wall_time_s",
                  "max_rank_ratio", "max_verified_leakage_w", "status"]


@dataclass
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    algo: AlgoConfig = field(default_factory=AlgoConfig)
    schemes: tuple = ("proposed",)
    seeds: tuple = tuple(range(20))
    sweep_param: str = ""
    sweep_values: tuple = ()
    output_dir: str = "out"
    verify_samples: int = 1000

    def __post_init__(self):
        if not self.seeds:
            raise InvalidInputError("need at least one seed")
        for sch in self.schemes:
            if sch not in SCHEMES:
                raise InvalidInputError(f"unknown scheme {sch!r}")
        if self.sweep_param:
            scen_keys = {f.name for f in fields(ScenarioConfig)}
            if self.sweep_param not in scen_keys:
                raise InvalidInputError(f"unknown sweep parameter {self.sweep_param!r}")


@dataclass
class RunRecord:
    scheme: str
    seed: int
    sweep_param: str
    sweep_value: float
    sum_rate: float
    ul_rates: list
    dl_rates: list
    outer_iters: int
    wall_time_s: float
    max_rank_ratio: float
    max_verified_leakage_w: float
    status: str

    def row(self) -> list:
        return [self.scheme, self.seed, self.sweep_param,
                _num_str(self.sweep_value), repr(self.sum_rate),
                ";".join(repr(r) for r in self.ul_rates),
                ";".join(repr(r) for r in self.dl_rates),
                self.outer_iters, f"{self.wall_time_s:.3f}",
                repr(self.max_rank_ratio), repr(self.max_verified_leakage_w),
                self.status]


def _num_str(x) -> str:
    if x == "" or x is None:
        return ""
    return repr(float(x))


# ---------------------------------------------------------------------------
# config file parsing: flat `section.key = value` lines
# ---------------------------------------------------------------------------

def _parse_value(text: str):
    text = text.strip()
    if "," in text:
        return tuple(_parse_value(t) for t in text.split(",") if t.strip())
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def parse_config_text(text: str) -> ExperimentConfig:
    scen, algo, top = {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"line {lineno}: expected key = value")
        key, val = (part.strip() for part in line.split("=", 1))
        value = _parse_value(val)
        if key.startswith("scenario."):
            scen[key.split(".", 1)[1]] = value
        elif key.startswith("algo."):
            algo[key.split(".", 1)[1]] = value
        elif key.startswith("run."):
            top[key.split(".", 1)[1]] = value
        else:
            raise InvalidInputError(f"line {lineno}: unknown section in {key!r}")
    scen_keys = {f.name for f in fields(ScenarioConfig)}
    algo_keys = {f.name for f in fields(AlgoConfig)}
    for k in scen:
        if k not in scen_keys:
            raise InvalidInputError(f"unknown scenario key {k!r}")
    for k in algo:
        if k not in algo_keys:
            raise InvalidInputError(f"unknown algo key {k!r}")
    kwargs = {"scenario": ScenarioConfig(**scen), "algo": AlgoConfig(**algo)}
    if "schemes" in top:
        v = top.pop("schemes")
        kwargs["schemes"] = v if isinstance(v, tuple) else (v,)
    if "seeds" in top:
        v = top.pop("seeds")
        kwargs["seeds"] = tuple(int(x) for x in (v if isinstance(v, tuple) else (v,)))
    for key in ("sweep_param", "output_dir"):
        if key in top:
            kwargs[key] = top.pop(key)
    if "sweep_values" in top:
        v = top.pop("sweep_values")
        kwargs["sweep_values"] = v if isinstance(v, tuple) else (v,)
    if "verify_samples" in top:
        kwargs["verify_samples"] = int(top.pop("verify_samples"))
    if top:
        raise InvalidInputError(f"unknown run keys: {sorted(top)}")
    return ExperimentConfig(**kwargs)


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config_text(fh.read())


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------

def run_scheme(scheme: str, s: Scenario, seed: int, algo_cfg: AlgoConfig) -> dict:
    """Dispatch one scheme on one scenario; returns alloc(s) + diagnostics."""
    if scheme == "proposed":
        out = bcd(s, find_feasible_start(s, seed, algo_cfg), algo_cfg)
        return {**out, "eval": [(s, out["alloc"], 1.0)]}
    if scheme == "baseline1":
        out = baseline1_zf(s, seed, algo_cfg)
        out.setdefault("outer_iters", len(out["trace"]))
        return {**out, "eval": [(s, out["alloc"], 1.0)]}
    if scheme == "baseline2":
        out = baseline2_no_irs(s, algo_cfg, seed=seed)
        return {**out, "eval": [(out["scenario"], out["alloc"], 1.0)]}
    if scheme == "baseline3":
        out = baseline3_half_duplex(s, algo_cfg, seed=seed)
        return {**out, "eval": [(out["scenario_dl"], out["alloc_dl"], 0.5),
                                (out["scenario_ul"], out["alloc_ul"], 0.5)]}
    if scheme == "non_robust":
        out = non_robust(s, algo_cfg, seed=seed)
        # robustness of the non-robust design is judged on the original balls
        return {**out, "eval": [(s, out["alloc"], 1.0)]}
    raise InvalidInputError(f"unknown scheme {scheme!r}")


def _single_run(args) -> tuple:
    scheme, scen_cfg, algo_cfg, seed, sweep_param, sweep_value, n_verify = args
    t0 = time.perf_counter()
    s = generate_scenario(scen_cfg, seed)
    out = run_scheme(scheme, s, seed, algo_cfg)
    wall = time.perf_counter() - t0

    ul, dl = [], []
    max_leak = 0.0
    for scen_eval, alloc, share in out["eval"]:
        u, d = per_user_rates(scen_eval, alloc)
        ul.extend((share * u).tolist())
        dl.extend((share * d).tolist())
        for i in range(scen_eval.params.i_pu):
            r = robust.verify_robust_leakage(scen_eval, alloc, i, n_verify,
                                             seed * 1000 + i)
            max_leak = max(max_leak, r["max_leak"])
    trace = out.get("trace")
    rank_ratio = 0.0
    if isinstance(trace, ConvergenceTrace):
        rank_ratio = max((r.rank_ratio_max for r in trace.rows), default=0.0)
    rec = RunRecord(
        scheme=scheme, seed=seed, sweep_param=sweep_param,
        sweep_value=sweep_value, sum_rate=float(out["sum_rate"]),
        ul_rates=ul, dl_rates=dl, outer_iters=int(out.get("outer_iters", 0)),
        wall_time_s=wall, max_rank_ratio=float(rank_ratio),
        max_verified_leakage_w=float(max_leak), status=out.get("status", "ok"),
    )
    return rec, trace


def _worker_count() -> int:
    env = os.environ.get("FDCR_THREADS", "")
    if env.strip():
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def _swept_configs(cfg: ExperimentConfig):
    if not cfg.sweep_param:
        yield ("", "", cfg.scenario)
        return
    for value in cfg.sweep_values:
        scen = replace(cfg.scenario, **{cfg.sweep_param: value})
        yield (cfg.sweep_param, value, scen)


def run_experiment(cfg: ExperimentConfig) -> list:
    """Run every (scheme, sweep value, seed) cell and persist the CSV outputs."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    os.makedirs(os.path.join(cfg.output_dir, "traces"), exist_ok=True)
    tasks = []
    for sweep_param, sweep_value, scen in _swept_configs(cfg):
        for scheme in cfg.schemes:
            for seed in cfg.seeds:
                tasks.append((scheme, scen, cfg.algo, seed, sweep_param,
                              sweep_value, cfg.verify_samples))
    workers = _worker_count()
    results = []
    if workers == 1 or len(tasks) == 1:
        for t in tasks:
            results.append(_try_run(t))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_try_run, tasks))

    records = []
    for (rec, trace), task in zip(results, tasks):
        records.append(rec)
        if isinstance(trace, ConvergenceTrace):
            tag = f"{rec.scheme}_s{rec.seed}" if rec.sweep_param == "" else \
                f"{rec.scheme}_{rec.sweep_param}={_num_str(rec.sweep_value)}_s{rec.seed}"
            trace.to_csv(os.path.join(cfg.output_dir, "traces", f"{tag}.csv"))
    records.sort(key=lambda r: (r.scheme, str(r.sweep_value), r.seed))
    write_results_csv(os.path.join(cfg.output_dir, "results.csv"), records)
    write_summary_csv(os.path.join(cfg.output_dir, "summary.csv"), records)
    return records


def _try_run(task) -> tuple:
    scheme, scen, algo_cfg, seed = task[0], task[1], task[2], task[3]
    try:
        return _single_run(task)
    except Exception as err:        # a failed cell must not abort the sweep
        rec = RunRecord(scheme=scheme, seed=seed, sweep_param=task[4],
                        sweep_value=task[5], sum_rate=float("nan"),
                        ul_rates=[], dl_rates=[], outer_iters=0, wall_time_s=0.0,
                        max_rank_ratio=float("nan"),
                        max_verified_leakage_w=float("nan"),
                        status=f"failed:{type(err).__name__}")
        return rec, None


def write_results_csv(path: str, records: list):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(RESULT_COLUMNS)
        for rec in records:
            wr.writerow(rec.row())


def summarize(records: list) -> list:
    """(scheme, sweep value) cells with mean/stderr of the sum rate."""
    cells = {}
    for rec in records:
        cells.setdefault((rec.scheme, rec.sweep_param, rec.sweep_value), []).append(rec.sum_rate)
    rows = []
    for (scheme, param, value), vals in sorted(cells.items(), key=lambda kv: (kv[0][0], str(kv[0][2]))):
        arr = np.array([v for v in vals if np.isfinite(v)])
        n = len(arr)
        mean = float(arr.mean()) if n else float("nan")
        stderr = float(arr.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        rows.append([scheme, param, _num_str(value), repr(mean), repr(stderr), n])
    return rows


def write_summary_csv(path: str, records: list):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scheme", "sweep_param", "sweep_value", "mean_sum_rate",
                     "stderr_sum_rate", "n"])
        for row in summarize(records):
            wr.writerow(row)


# ---------------------------------------------------------------------------
# outage study
# ---------------------------------------------------------------------------

def outage_experiment(cfg: ExperimentConfig, p_tar_dbm: list,
                      n_error_samples: int = 1000) -> list:
    """Fraction of (seed x sampled-true-channel x PU) cells exceeding p_tar.

    Robust schemes keep the worst-case leakage below p_tol, so their outage
    drops to zero for every target at or above p_tol.
    """
    os.makedirs(cfg.output_dir, exist_ok=True)
    rows = []
    leaks = {scheme: [] for scheme in cfg.schemes}
    for scheme in cfg.schemes:
        for seed in cfg.seeds:
            s = generate_scenario(cfg.scenario, seed)
            out = run_scheme(scheme, s, seed, cfg.algo)
            for scen_eval, alloc, _share in out["eval"]:
                rng = np.random.default_rng(seed + 97)
                for i in range(scen_eval.params.i_pu):
                    samples = _leakage_samples(scen_eval, alloc, i,
                                               n_error_samples, rng)
                    leaks[scheme].append(samples)
    for scheme in cfg.schemes:
        all_leaks = np.concatenate(leaks[scheme]) if leaks[scheme] else np.zeros(0)
        for tar in p_tar_dbm:
            tar_w = dbm2w(tar)
            pct = 100.0 * float(np.mean(all_leaks > tar_w)) if all_leaks.size else 0.0
            rows.append([scheme, repr(float(tar)), repr(pct)])
    path = os.path.join(cfg.output_dir, "outage.csv")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["scheme", "p_tar_dbm", "outage_pct"])
        for row in rows:
            wr.writerow(row)
    return rows


def _leakage_samples(s: Scenario, a: Allocation, i: int, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    from .model import _uniform_ball, interference_leakage

    out = np.empty(n)
    for t in range(n):
        ch = {"l_d": s.l_d_hat[i] + _uniform_ball(rng, s.params.n_t, s.eps_d[i]),
              "l_r": s.l_r_hat[i] + _uniform_ball(rng, s.params.m, s.eps_r[i]),
              "e": s.e_hat[i] + np.array([_uniform_ball(rng, 1, s.eps_e[i, j])[0]
                                          for j in range(s.params.j_ul)])}
        out[t] = interference_leakage(s, a, ch, i)
    return out
