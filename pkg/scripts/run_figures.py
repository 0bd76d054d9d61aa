#!/usr/bin/env python3
"""Drive the desk-scale figure sweeps end to end.

Produces out/figures/{convergence,power_sweep,element_sweep,error_sweep,outage}
CSV data via the CLI machinery.  Set FDCR_THREADS to bound the worker pool.
"""

import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from dataclasses import replace

from fdcr.bench import load_config, outage_experiment, run_experiment

CONFIG = os.path.join(os.path.dirname(__file__), "..", "configs", "desk.cfg")
OUT = "out/figures"


def main():
    base = load_config(CONFIG)

    cfg = replace(base, output_dir=f"{OUT}/baseline_comparison")
    run_experiment(cfg)

    cfg = replace(base, schemes=("proposed", "baseline1", "baseline2", "baseline3"),
                  sweep_param="p_max_dl_dbm", sweep_values=(20.0, 25.0, 30.0),
                  output_dir=f"{OUT}/power_sweep")
    run_experiment(cfg)

    cfg = replace(base, schemes=("proposed",), sweep_param="m",
                  sweep_values=(2, 4, 6), output_dir=f"{OUT}/element_sweep")
    run_experiment(cfg)

    cfg = replace(base, schemes=("proposed",), sweep_param="upsilon2",
                  sweep_values=(0.0, 0.05, 0.1), output_dir=f"{OUT}/error_sweep")
    run_experiment(cfg)

    cfg = replace(base, schemes=("proposed", "non_robust"),
                  seeds=base.seeds[:10], output_dir=f"{OUT}/outage")
    outage_experiment(cfg, [-100, -95, -90, -85, -80], n_error_samples=500)
    print("all sweeps done; CSVs under", OUT)


if __name__ == "__main__":
    main()
