import numpy as np
import pytest

from conftest import desk_config, tiny_config
from fdcr import robust
from fdcr.algo import AlgoConfig, bcd, find_feasible_start
from fdcr.baselines import (baseline1_zf, baseline2_no_irs,
                            baseline3_half_duplex, non_robust, strip_irs,
                            zf_directions, _restrict)
from fdcr.lifting import effective_channels
from fdcr.model import (InvalidInputError, generate_scenario, rescale_scenario,
                        residual_si, weighted_sum_rate)

FAST = AlgoConfig(max_inner_iters=8, max_outer_iters=6)


def test_zf_directions_orthogonality():
    s = rescale_scenario(generate_scenario(desk_config(j_ul=2, k_dl=2), 3),
                         (3.0 / 1e-12) ** 0.25)
    rng = np.random.default_rng(0)
    psi = rng.uniform(-np.pi, np.pi, s.params.m)
    ec = effective_channels(s, psi)
    w_dirs, v_dirs = zf_directions(s, psi)
    for k in range(2):
        assert np.linalg.norm(w_dirs[k]) == pytest.approx(1.0)
        for r in range(2):
            if r != k:
                # inter-user effective products vanish by construction
                assert abs(np.vdot(ec.g_hat[r], w_dirs[k])) < 1e-10 * np.linalg.norm(ec.g_hat[r])
    for j in range(2):
        for t in range(2):
            if t != j:
                assert abs(np.vdot(v_dirs[j], ec.h_hat[t])) < 1e-8 * np.linalg.norm(ec.h_hat[t])


def test_zf_single_user_is_mrt():
    s = generate_scenario(desk_config(k_dl=1, j_ul=1), 4)
    psi = np.zeros(s.params.m)
    ec = effective_channels(s, psi)
    w_dirs, _ = zf_directions(s, psi)
    mrt = ec.g_hat[0] / np.linalg.norm(ec.g_hat[0])
    assert abs(abs(np.vdot(w_dirs[0], mrt)) - 1.0) < 1e-10


def test_zf_orthogonal_channels_reduce_to_mrt():
    s = generate_scenario(desk_config(k_dl=2, j_ul=2), 5)
    s.g_d = np.zeros((2, s.params.n_t), complex)
    s.g_d[0, 0] = 1.0
    s.g_d[1, 1] = 1.0
    s.g_r = np.zeros_like(s.g_r)
    w_dirs, _ = zf_directions(s, np.zeros(s.params.m))
    assert abs(abs(w_dirs[0][0]) - 1.0) < 1e-12
    assert abs(abs(w_dirs[1][1]) - 1.0) < 1e-12


def test_zf_requires_enough_antennas():
    cfg = desk_config(n_t=2, k_dl=3, j_ul=2)
    with pytest.raises(InvalidInputError):
        s = generate_scenario(cfg, 6)
        zf_directions(s, np.zeros(s.params.m))


def test_baseline1_respects_constraints_and_rate():
    s = generate_scenario(desk_config(), 7)
    out = baseline1_zf(s, seed=7, cfg=FAST)
    a = out["alloc"]
    assert np.sum(np.abs(a.w) ** 2) <= s.params.p_max_dl * (1 + 1e-9)
    assert np.all(a.p <= s.params.p_max_ul * (1 + 1e-12))
    for i in range(s.params.i_pu):
        assert not robust.verify_robust_leakage(s, a, i, 2000, seed=70 + i)["violated"]
    assert out["sum_rate"] == pytest.approx(weighted_sum_rate(s, a), rel=1e-12)
    assert np.all(np.diff(out["trace"]) <= 1e-7)


def test_strip_irs_zeroes_reflected_paths():
    s = generate_scenario(desk_config(), 8)
    s2 = strip_irs(s)
    assert not np.any(s2.f) and not np.any(s2.h_r) and not np.any(s2.g_r)
    assert not np.any(s2.l_r_hat) and not np.any(s2.eps_r)
    # leakage bound loses every eps_R term
    a = find_feasible_start(s2, 8)
    for i in range(s.params.i_pu):
        nominal = robust.safe_leakage_bound(s2, a, i) / 3.0
        e_max, d_max, r_max = robust.ball_maxima(s2, a, i)
        assert r_max == 0.0
        assert nominal >= e_max + d_max


def test_baseline2_equals_bcd_on_stripped_scenario():
    s = generate_scenario(tiny_config(), 9)
    s2 = strip_irs(s)
    from dataclasses import replace

    cfg = replace(FAST, skip_theta_stage=True)
    direct = bcd(s2, find_feasible_start(s2, 9, cfg), cfg)
    via_baseline = baseline2_no_irs(s, cfg, seed=9)
    assert via_baseline["sum_rate"] == pytest.approx(direct["sum_rate"], rel=1e-9)
    assert np.allclose(via_baseline["alloc"].w, direct["alloc"].w)


def test_baseline3_structure():
    s = generate_scenario(desk_config(), 10)
    out = baseline3_half_duplex(s, FAST, seed=10)
    a_dl, a_ul = out["alloc_dl"], out["alloc_ul"]
    assert a_dl.p.size == 0                          # DL slot: no UL transmission
    assert a_ul.w.shape[0] == 0                      # UL slot: no DL beams
    s_ul = out["scenario_ul"]
    # no self-interference in the UL-only slot
    for j in range(s_ul.params.j_ul):
        assert residual_si(s_ul, a_ul, j) == 0.0
    dl_rate = weighted_sum_rate(out["scenario_dl"], a_dl)
    ul_rate = weighted_sum_rate(s_ul, a_ul)
    assert out["rate"] == pytest.approx(0.5 * (dl_rate + ul_rate), rel=1e-12)


def test_restrict_views():
    s = generate_scenario(desk_config(), 11)
    s_dl = _restrict(s, keep_dl=True, keep_ul=False)
    assert s_dl.params.j_ul == 0 and s_dl.h_d.shape[0] == 0
    assert s_dl.e_hat.shape == (s.params.i_pu, 0)
    s_ul = _restrict(s, keep_dl=False, keep_ul=True)
    assert s_ul.params.k_dl == 0 and s_ul.g_d.shape[0] == 0
    assert s_ul.q.shape == (s.params.j_ul, 0)


def test_non_robust_nominal_feasible_but_violates_balls():
    s = generate_scenario(desk_config(upsilon2=0.1), 12)
    out = non_robust(s, FAST, seed=12)
    a = out["alloc"]
    s0 = out["scenario"]
    from fdcr.model import interference_leakage

    for i in range(s.params.i_pu):
        # feasible when estimates are the truth
        nominal = interference_leakage(s0, a, s0.estimated_pu_channels(i), i)
        assert nominal <= s.params.p_tol[i] * (1 + 1e-6)
    # relaxation achieves at least the robust scheme's nominal rate
    rob = bcd(s, find_feasible_start(s, 12, FAST), FAST)
    assert out["sum_rate"] >= rob["sum_rate"] - 1e-6


@pytest.mark.slow
def test_scheme_ordering_small_sample():
    """Sanity-scale version of the Fig. 4 trend (3 seeds only)."""
    rates = {"prop": [], "b1": [], "b2": [], "b3": []}
    for seed in (0, 1, 2):
        s = generate_scenario(desk_config(), seed)
        rates["prop"].append(bcd(s, find_feasible_start(s, seed, FAST), FAST)["sum_rate"])
        rates["b1"].append(baseline1_zf(s, seed, FAST)["sum_rate"])
        rates["b2"].append(baseline2_no_irs(s, FAST, seed=seed)["sum_rate"])
        rates["b3"].append(baseline3_half_duplex(s, FAST, seed=seed)["sum_rate"])
    assert np.mean(rates["prop"]) > np.mean(rates["b1"])
    assert np.mean(rates["prop"]) >= np.mean(rates["b3"]) - 1e-9
