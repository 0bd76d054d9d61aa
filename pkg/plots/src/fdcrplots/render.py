"""Render benchmark CSV outputs into paper-style figures.

Consumes the frozen CSV schemas of the benchmark runner:
  summary.csv  (scheme, sweep_param, sweep_value, mean_sum_rate,
                stderr_sum_rate, n)             -> kind "sweep"
  traces/*.csv (outer_iter, inner_stage, inner_iter, objective, ...)
                                                -> kind "convergence"
  outage.csv   (scheme, p_tar_dbm, outage_pct)  -> kind "outage"

Inputs are opened read-only; rendering never mutates them.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

KINDS = ("convergence", "sweep", "outage")

DEFAULT_X = {"sweep": "sweep_value", "convergence": "outer_iter",
             "outage": "p_tar_dbm"}
DEFAULT_Y = {"sweep": "mean_sum_rate", "convergence": "objective",
             "outage": "outage_pct"}


class RenderError(ValueError):
    """Bad figure spec or malformed input CSV."""


@dataclass
class FigureSpec:
    inputs: list
    kind: str
    out_path: str
    x_key: str = ""
    group_key: str = "scheme"
    title: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise RenderError(f"unknown figure kind {self.kind!r}")
        if not self.inputs:
            raise RenderError("need at least one input CSV")
        if not self.x_key:
            self.x_key = DEFAULT_X[self.kind]


def _read_csv(path: str) -> list[dict]:
    if not os.path.exists(path):
        raise RenderError(f"input file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise RenderError(f"empty CSV: {path}")
    return rows


def _column(rows: list, key: str, path: str, cast=float) -> list:
    if key not in rows[0]:
        raise RenderError(f"column {key!r} missing from {path}")
    return [cast(r[key]) for r in rows]


def _grouped(rows: list, key: str, path: str) -> dict:
    if rows and key not in rows[0]:
        raise RenderError(f"column {key!r} missing from {path}")
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r)
    return groups


def render(spec: FigureSpec) -> str:
    """Render the figure and return the written path (vector format)."""
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    if spec.kind == "sweep":
        _render_sweep(spec, ax)
        ax.set_ylabel("average sum rate (bits/s/Hz)")
    elif spec.kind == "convergence":
        _render_convergence(spec, ax)
        ax.set_ylabel("objective")
    else:
        _render_outage(spec, ax)
        ax.set_ylabel("outage probability (%)")
    ax.set_xlabel(spec.x_key)
    if spec.title:
        ax.set_title(spec.title)
    ax.grid(True, alpha=0.4)
    ax.legend(loc="best", fontsize=8)
    out = spec.out_path
    root, ext = os.path.splitext(out)
    if ext.lower() not in (".svg", ".pdf"):
        out = root + ".svg"
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out


def _render_sweep(spec: FigureSpec, ax):
    for path in spec.inputs:
        rows = _read_csv(path)
        for scheme, grp in sorted(_grouped(rows, spec.group_key, path).items()):
            xs = _column(grp, spec.x_key, path)
            means = _column(grp, "mean_sum_rate", path)
            errs = _column(grp, "stderr_sum_rate", path)
            order = sorted(range(len(xs)), key=lambda i: xs[i])
            xs = [xs[i] for i in order]
            means = [means[i] for i in order]
            errs = [errs[i] for i in order]
            ax.plot(xs, means, marker="o", label=scheme)
            lo = [m - e for m, e in zip(means, errs)]
            hi = [m + e for m, e in zip(means, errs)]
            ax.fill_between(xs, lo, hi, alpha=0.2)


def _render_convergence(spec: FigureSpec, ax):
    for path in spec.inputs:
        rows = _read_csv(path)
        if "inner_stage" in rows[0]:
            rows = [r for r in rows if r["inner_stage"] == "outer"] or rows
        xs = _column(rows, spec.x_key, path)
        ys = _column(rows, "objective", path)
        order = sorted(range(len(xs)), key=lambda i: xs[i])
        label = os.path.splitext(os.path.basename(path))[0]
        ax.plot([xs[i] for i in order], [ys[i] for i in order],
                marker="s", label=label)


def _render_outage(spec: FigureSpec, ax):
    for path in spec.inputs:
        rows = _read_csv(path)
        for scheme, grp in sorted(_grouped(rows, spec.group_key, path).items()):
            xs = _column(grp, spec.x_key, path)
            ys = _column(grp, "outage_pct", path)
            order = sorted(range(len(xs)), key=lambda i: xs[i])
            ax.step([xs[i] for i in order], [ys[i] for i in order],
                    where="post", marker="o", label=scheme)


def plotted_sweep_means(spec: FigureSpec) -> dict:
    """(scheme, x) -> mean exactly as it would be drawn; for fidelity checks."""
    out = {}
    for path in spec.inputs:
        rows = _read_csv(path)
        for scheme, grp in _grouped(rows, spec.group_key, path).items():
            xs = _column(grp, spec.x_key, path)
            means = _column(grp, "mean_sum_rate", path)
            for x, m in zip(xs, means):
                out[(scheme, x)] = m
    return out
