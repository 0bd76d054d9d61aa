"""Robust resource allocation for IRS-assisted full-duplex cognitive radio."""

from .model import (Allocation, Scenario, ScenarioConfig, SystemParams,
                    dl_sinr, generate_scenario, interference_leakage, path_loss,
                    residual_si, ul_sinr, weighted_sum_rate)
from .algo import AlgoConfig, bcd, find_feasible_start

__all__ = [
    "Allocation", "Scenario", "ScenarioConfig", "SystemParams", "AlgoConfig",
    "generate_scenario", "path_loss", "dl_sinr", "ul_sinr", "residual_si",
    "weighted_sum_rate", "interference_leakage", "bcd", "find_feasible_start",
]
