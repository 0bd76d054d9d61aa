"""Baseline allocation schemes for comparative experiments.

1: zero-forcing directions with random IRS phases, powers optimized by SCA.
2: no IRS (all reflected paths removed, phase stage skipped).
3: half duplex (DL-only and UL-only problems in equal orthogonal slots).
non-robust: full pipeline with the CSI error radii forced to zero.
"""

from __future__ import annotations

import logging
from dataclasses import replace

import numpy as np

from . import robust
from .algo import (AlgoConfig, USABLE_RESIDUAL, _usable, _w_mats, bcd,
                   find_feasible_start, gradients_wp, receive_beamformer)
from .conic import AffineScalar, ConicProgram, MatAffine, SolveSettings, solve
from .lifting import (dl_denominators, effective_channels, si_kernel,
                      ul_denominators)
from .model import (Allocation, InvalidInputError, Scenario, SystemParams,
                    rescale_scenario, weighted_sum_rate)

log = logging.getLogger(__name__)

BASELINE_KINDS = ("zf_random_phase", "no_irs", "half_duplex", "non_robust")


def _zf_direction(targets: np.ndarray, k: int) -> np.ndarray:
    """Project channel k off the span of the other channels and normalize,
    so that g_r^H d_k = 0 for every r != k."""
    others = np.delete(targets, k, axis=0)
    g = targets[k]
    if others.shape[0]:
        basis = others.T                              # columns g_r
        proj = g - basis @ np.linalg.lstsq(basis, g, rcond=None)[0]
    else:
        proj = g
    nrm = np.linalg.norm(proj)
    if nrm < 1e-12 * max(np.linalg.norm(g), 1.0):
        raise InvalidInputError("degenerate zero-forcing null space")
    return proj / nrm


def zf_directions(s: Scenario, psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fixed DL/UL beamforming directions for baseline 1."""
    ec = effective_channels(s, psi)
    pp = s.params
    if pp.k_dl and pp.n_t <= pp.k_dl - 1:
        raise InvalidInputError("need n_t > K-1 for DL zero forcing")
    w_dirs = np.stack([_zf_direction(ec.g_hat, k) for k in range(pp.k_dl)]) \
        if pp.k_dl else np.zeros((0, pp.n_t), complex)
    if pp.j_ul:
        h_mat = ec.h_hat.T                                 # (N_T, J)
        pinv = np.linalg.pinv(h_mat)                       # rows r_j with r_j h_t = delta
        v_dirs = pinv.conj()
        v_dirs = v_dirs / np.linalg.norm(v_dirs, axis=1, keepdims=True)
    else:
        v_dirs = np.zeros((0, pp.n_t), complex)
    return w_dirs, v_dirs


def _power_subproblem(s: Scenario, ec, w_dirs, v, pdl_anchor, p_anchor, cfg):
    """SCA surrogate over the DL per-user powers and UL powers."""
    pp = s.params
    nt = pp.n_t
    d_mats = [np.outer(w_dirs[k], w_dirs[k].conj()) for k in range(pp.k_dl)]
    w_anchor = [pdl_anchor[k] * d_mats[k] for k in range(pp.k_dl)]
    grads = gradients_wp(s, ec, w_anchor, p_anchor, v)

    prog = ConicProgram()
    if pp.k_dl:
        prog.add_real("pdl", pp.k_dl, nonneg=True, typ=pp.p_max_dl)
        prog.add_ineq(AffineScalar(-pp.p_max_dl, {"pdl": np.ones(pp.k_dl)}))
    p_arg = prog.add_real("p", pp.j_ul, nonneg=True, ub=pp.p_max_ul,
                          typ=float(pp.p_max_ul.max())) if pp.j_ul else None

    def w_expr(k: int) -> MatAffine:
        sel = np.zeros((pp.k_dl, nt, nt), dtype=complex)
        sel[k] = d_mats[k]
        return MatAffine(nt, atoms=[("lin", "pdl", sel)])

    w_args = [w_expr(k) for k in range(pp.k_dl)]
    from .algo import _add_leakage_constraints, _slack_handles, _coupling_from_mats
    b_anchor = _coupling_from_mats(s, w_anchor, p_anchor)
    delta_typ = max(float(np.linalg.eigvalsh(b_anchor).max(initial=0.0)), 1e-12)
    _slack_handles(prog, s, delta_typ)
    _add_leakage_constraints(prog, s, ec.psi, w_args, p_arg)

    const_shift = 0.0
    denf1_anchor = dl_denominators(s, ec, w_anchor, p_anchor, include_own=True)
    for k in range(pp.k_dl):
        gains = np.array([abs(np.vdot(ec.g_hat[k], w_dirs[r])) ** 2
                          for r in range(pp.k_dl)])
        den = AffineScalar(pp.sigma2_dl[k], {"pdl": gains})
        if pp.j_ul:
            den = den + AffineScalar(0.0, {"p": np.abs(ec.phi[:, k]) ** 2})
        prog.add_log_term(pp.weights_dl[k], den * (1.0 / denf1_anchor[k]))
        const_shift += pp.weights_dl[k] * np.log2(denf1_anchor[k])
    denf2_anchor = ul_denominators(s, ec, w_anchor, p_anchor, v, include_own=True)
    for j in range(pp.j_ul):
        si_coefs = np.array([float(np.real(np.trace(si_kernel(s, v[j]) @ d_mats[k])))
                             for k in range(pp.k_dl)])
        den = AffineScalar(pp.sigma2_ul * float(np.linalg.norm(v[j]) ** 2))
        den = den + AffineScalar(0.0, {"p": np.abs(ec.h_hat @ v[j].conj()) ** 2})
        if pp.k_dl:
            den = den + AffineScalar(0.0, {"pdl": si_coefs})
        prog.add_log_term(pp.weights_ul[j], den * (1.0 / denf2_anchor[j]))
        const_shift += pp.weights_ul[j] * np.log2(denf2_anchor[j])

    lin = AffineScalar()
    if pp.k_dl:
        coefs = np.array([float(np.real(np.trace((grads["dW_g1"][k] + grads["dW_g2"][k])
                                                 @ d_mats[k]))) for k in range(pp.k_dl)])
        lin = lin + AffineScalar(0.0, {"pdl": coefs})
        const_shift -= float(np.dot(coefs, pdl_anchor))
    if pp.j_ul:
        lin = lin + AffineScalar(0.0, {"p": grads["dp_g1"] + grads["dp_g2"]})
        const_shift -= float(np.dot(grads["dp_g1"] + grads["dp_g2"], p_anchor))
    from .algo import g1_value, g2_value
    const_shift += g1_value(s, ec, w_anchor, p_anchor) + g2_value(s, ec, w_anchor, p_anchor, v)
    prog.add_objective(lin)
    return prog, const_shift


def baseline1_zf(s: Scenario, seed: int, cfg: AlgoConfig = None) -> dict:
    """ZF beamforming with random IRS phases; SCA over the transmit powers."""
    cfg = cfg or AlgoConfig()
    pp = s.params
    rng = np.random.default_rng(seed)
    psi = rng.uniform(-np.pi, np.pi, size=pp.m)
    ss = rescale_scenario(s, (3.0 / float(pp.p_tol.min())) ** 0.25)
    ec = effective_channels(ss, psi)
    w_dirs, v = zf_directions(ss, psi)

    pdl = np.full(pp.k_dl, pp.p_max_dl / max(pp.k_dl, 1))
    p = pp.p_max_ul.copy()

    def alloc_of(pdl_w, p_w):
        w = np.sqrt(pdl_w)[:, None] * w_dirs if pp.k_dl else w_dirs
        return Allocation(w=w, p=p_w, v=v.copy(), psi=psi)

    from .algo import max_leakage_ratio
    ratio = max_leakage_ratio(ss, alloc_of(pdl, p))
    if ratio > 1.0:
        scale = 0.99 / ratio
        for _ in range(60):
            if max_leakage_ratio(ss, alloc_of(pdl * scale, p * scale)) <= 1.0:
                break
            scale *= 0.5
        pdl, p = pdl * scale, p * scale

    trace, status = [], "ok"
    settings = SolveSettings(tol=cfg.solver_tol)
    for it in range(1, cfg.max_inner_iters + 1):
        prog, shift = _power_subproblem(ss, ec, w_dirs, v, pdl, p, cfg)
        res = solve(prog, settings)
        if not _usable(res):
            if it == 1:
                log.debug("baseline1 power stage stalled at the anchor")
                break
            status = "degraded"
            log.warning("baseline1 power subproblem failed at iter %d: %s", it, res.status)
            break
        pdl_new, p_new = pdl, p
        if pp.k_dl:
            pdl_new = np.clip(res.values["pdl"], 0.0, None)
            if pdl_new.sum() > pp.p_max_dl:
                pdl_new = pdl_new * (pp.p_max_dl / pdl_new.sum())
        if pp.j_ul:
            p_new = np.clip(res.values["p"], 0.0, pp.p_max_ul)
        if res.residuals["feas"] > 1e-9:
            from .algo import _repair_scale
            scale = _repair_scale(res.residuals["feas"])
            pdl_new, p_new = pdl_new * scale, p_new * scale

        def surrogate_at(pdl_x, p_x):
            assign = {}
            if pp.k_dl:
                assign["pdl"] = pdl_x
            if pp.j_ul:
                assign["p"] = p_x
            return -(prog.objective_at(assign) + shift)

        fhat = surrogate_at(pdl_new, p_new)
        if fhat > surrogate_at(pdl, p):
            break               # no surrogate descent, keep the better point
        trace.append(fhat)
        pdl, p = pdl_new, p_new
        if len(trace) >= 2 and abs(trace[-1] - trace[-2]) / max(abs(trace[-1]), 1e-12) <= cfg.eps_sca:
            break
    alloc = alloc_of(pdl, p)
    return {"alloc": alloc, "trace": np.array(trace), "status": status,
            "sum_rate": weighted_sum_rate(s, alloc)}


def strip_irs(s: Scenario) -> Scenario:
    """Scenario with every reflected path removed (no IRS deployed)."""
    return replace(
        s,
        f=np.zeros_like(s.f), h_r=np.zeros_like(s.h_r), g_r=np.zeros_like(s.g_r),
        l_r_hat=np.zeros_like(s.l_r_hat), l_r_true=np.zeros_like(s.l_r_true),
        eps_r=np.zeros_like(s.eps_r),
    )


def baseline2_no_irs(s: Scenario, cfg: AlgoConfig = None, seed: int = 0) -> dict:
    """Joint design without an IRS: reflected paths zeroed, phase stage skipped."""
    cfg = cfg or AlgoConfig()
    cfg = replace(cfg, skip_theta_stage=True)
    s2 = strip_irs(s)
    start = find_feasible_start(s2, seed, cfg)
    out = bcd(s2, start, cfg)
    out["scenario"] = s2
    return out


def _restrict(s: Scenario, keep_dl: bool, keep_ul: bool) -> Scenario:
    p = s.params
    k = p.k_dl if keep_dl else 0
    j = p.j_ul if keep_ul else 0
    params = SystemParams(
        n_t=p.n_t, m=p.m, i_pu=p.i_pu, j_ul=j, k_dl=k,
        p_max_dl=p.p_max_dl, p_max_ul=p.p_max_ul[:j], p_tol=p.p_tol.copy(),
        eta=p.eta, sigma2_ul=p.sigma2_ul, sigma2_dl=p.sigma2_dl[:k],
        weights_ul=p.weights_ul[:j], weights_dl=p.weights_dl[:k],
    )
    return replace(
        s, params=params,
        h_d=s.h_d[:j], h_r=s.h_r[:j], g_d=s.g_d[:k], g_r=s.g_r[:k],
        q=s.q[:j, :k], e_hat=s.e_hat[:, :j], eps_e=s.eps_e[:, :j],
        e_true=s.e_true[:, :j],
    )


def baseline3_half_duplex(s: Scenario, cfg: AlgoConfig = None, seed: int = 0) -> dict:
    """DL-only and UL-only designs in equal orthogonal slots; rate is halved."""
    cfg = cfg or AlgoConfig()
    s_dl = _restrict(s, keep_dl=True, keep_ul=False)
    s_ul = _restrict(s, keep_dl=False, keep_ul=True)
    out_dl = bcd(s_dl, find_feasible_start(s_dl, seed, cfg), cfg)
    out_ul = bcd(s_ul, find_feasible_start(s_ul, seed, cfg), cfg)
    rate = 0.5 * (out_dl["sum_rate"] + out_ul["sum_rate"])
    status = "ok" if out_dl["status"] == out_ul["status"] == "ok" else "degraded"
    return {"alloc_dl": out_dl["alloc"], "alloc_ul": out_ul["alloc"],
            "scenario_dl": s_dl, "scenario_ul": s_ul, "rate": rate,
            "sum_rate": rate, "status": status,
            "outer_iters": max(out_dl["outer_iters"], out_ul["outer_iters"]),
            "trace": out_dl["trace"]}


def non_robust(s: Scenario, cfg: AlgoConfig = None, seed: int = 0) -> dict:
    """Full pipeline with the CSI estimates treated as perfect (eps = 0)."""
    cfg = cfg or AlgoConfig()
    s0 = replace(s, eps_d=np.zeros_like(s.eps_d), eps_r=np.zeros_like(s.eps_r),
                 eps_e=np.zeros_like(s.eps_e))
    start = find_feasible_start(s0, seed, cfg)
    out = bcd(s0, start, cfg)
    out["scenario"] = s0
    return out
