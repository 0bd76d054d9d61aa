"""Block-coordinate resource allocation: SCA over beamformers/powers, closed
form receive combiners, penalty-SCA over the lifted IRS phases, and the outer
alternating loop tying them together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import robust
from .conic import AffineScalar, ConicProgram, SolveSettings, solve
from .lifting import (EffectiveChannels, LiftData, ThetaData, build_lift,
                      dl_denominators, dl_denominators_theta, effective_channels,
                      lift_theta, recover_psi, si_kernel, si_term, trace_real,
                      ul_denominators, ul_denominators_theta)
from .model import (Allocation, InvalidInputError, Scenario, rescale_scenario,
                    weighted_sum_rate)

log = logging.getLogger(__name__)

LN2 = np.log(2.0)


@dataclass
class AlgoConfig:
    eps_sca: float = 0.01
    eps_bcd: float = 0.01
    chi: float = 1e3
    max_inner_iters: int = 20
    max_outer_iters: int = 30
    rank_tol: float = 1e-6
    solver_tol: float = 1e-9
    chi_escalations: int = 2        # extra x10 restarts if Theta is not rank one
    skip_theta_stage: bool = False

    def __post_init__(self):
        if not (0.0 < self.eps_sca < 1.0 and 0.0 < self.eps_bcd < 1.0):
            raise InvalidInputError("tolerances must lie in (0, 1)")
        if self.chi <= 0:
            raise InvalidInputError("chi must be positive")


@dataclass
class TraceRow:
    outer_iter: int
    inner_stage: str
    inner_iter: int
    objective: float
    rank_ratio_max: float
    max_safe_leakage: float


@dataclass
class ConvergenceTrace:
    rows: list = field(default_factory=list)

    def add(self, outer, stage, inner, objective, rank_ratio, max_leak):
        self.rows.append(TraceRow(outer, stage, inner, float(objective),
                                  float(rank_ratio), float(max_leak)))

    def outer_objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.rows if r.inner_stage == "outer"])

    def stage_objectives(self, stage: str) -> np.ndarray:
        return np.array([r.objective for r in self.rows if r.inner_stage == stage])

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["outer_iter", "inner_stage", "inner_iter", "objective",
                         "rank_ratio_max", "max_safe_leakage"])
            for r in self.rows:
                wr.writerow([r.outer_iter, r.inner_stage, r.inner_iter,
                             repr(r.objective), repr(r.rank_ratio_max),
                             repr(r.max_safe_leakage)])


def _w_mats(w: np.ndarray) -> list:
    return [np.outer(w[k], w[k].conj()) for k in range(w.shape[0])]


def _coupling_from_mats(s: Scenario, w_mats: list, p: np.ndarray) -> np.ndarray:
    """B = sum_k F W_k F^H + sum_j p_j h_R h_R^H from beamforming matrices."""
    b = np.zeros((s.params.m, s.params.m), dtype=complex)
    for wm in w_mats:
        b += s.f @ np.asarray(wm) @ s.f.conj().T
    for j in range(s.params.j_ul):
        b += p[j] * np.outer(s.h_r[j], s.h_r[j].conj())
    return 0.5 * (b + b.conj().T)


def psd_project(mat: np.ndarray) -> np.ndarray:
    """Clip the tiny negative eigenvalues a solver may leave behind."""
    lam, vecs = np.linalg.eigh(0.5 * (mat + mat.conj().T))
    if lam.min(initial=0.0) >= 0.0:
        return 0.5 * (mat + mat.conj().T)
    return (vecs * np.clip(lam, 0.0, None)) @ vecs.conj().T


# ---------------------------------------------------------------------------
# gradients of the concave-part logs at a fixed anchor
# ---------------------------------------------------------------------------

def g1_value(s: Scenario, ec: EffectiveChannels, w_mats: list, p: np.ndarray) -> float:
    dens = dl_denominators(s, ec, w_mats, p, include_own=False)
    return float(-np.sum(s.params.weights_dl * np.log2(dens))) if s.params.k_dl else 0.0


def g2_value(s: Scenario, ec: EffectiveChannels, w_mats: list, p: np.ndarray,
             v: np.ndarray) -> float:
    dens = ul_denominators(s, ec, w_mats, p, v, include_own=False)
    return float(-np.sum(s.params.weights_ul * np.log2(dens))) if s.params.j_ul else 0.0


def gradients_wp(s: Scenario, ec: EffectiveChannels, w_mats: list, p: np.ndarray,
                 v: np.ndarray) -> dict:
    """Closed-form gradients of g1 and g2 at the anchor (W, p).

    Indices follow the derivative of the sums (the cross-user terms), validated
    against finite differences; includes the -1/ln2 factors.
    """
    pp = s.params
    nt = pp.n_t
    den1 = dl_denominators(s, ec, w_mats, p, include_own=False) if pp.k_dl else np.zeros(0)
    den2 = ul_denominators(s, ec, w_mats, p, v, include_own=False) if pp.j_ul else np.zeros(0)

    dw_g1 = np.zeros((pp.k_dl, nt, nt), dtype=complex)
    for k in range(pp.k_dl):
        acc = np.zeros((nt, nt), dtype=complex)
        for t in range(pp.k_dl):
            if t == k:
                continue
            acc += pp.weights_dl[t] * np.outer(ec.g_hat[t], ec.g_hat[t].conj()) / den1[t]
        dw_g1[k] = -acc / LN2

    dp_g1 = np.zeros(pp.j_ul)
    for j in range(pp.j_ul):
        dp_g1[j] = -np.sum(pp.weights_dl * np.abs(ec.phi[j]) ** 2 / den1) / LN2 \
            if pp.k_dl else 0.0

    si_grad = np.zeros((nt, nt), dtype=complex)
    for j in range(pp.j_ul):
        si_grad += pp.weights_ul[j] * si_kernel(s, v[j]) / den2[j]
    dw_g2 = np.tile(-si_grad[None] / LN2, (pp.k_dl, 1, 1))

    dp_g2 = np.zeros(pp.j_ul)
    for t in range(pp.j_ul):
        acc = 0.0
        for j in range(pp.j_ul):
            if j == t:
                continue
            acc += pp.weights_ul[j] * abs(np.vdot(v[j], ec.h_hat[t])) ** 2 / den2[j]
        dp_g2[t] = -acc / LN2
    return {"dW_g1": dw_g1, "dp_g1": dp_g1, "dW_g2": dw_g2, "dp_g2": dp_g2}


# ---------------------------------------------------------------------------
# subproblem over {W_k, p_j}
# ---------------------------------------------------------------------------

def _slack_handles(prog: ConicProgram, s: Scenario, delta_typ: float) -> dict:
    pp = s.params
    tol_typ = float(pp.p_tol.max() / 3.0)
    h = {"beta": prog.add_real("beta", pp.i_pu, typ=tol_typ),
         "gamma": prog.add_real("gamma", pp.i_pu, typ=tol_typ),
         "tau": prog.add_real("tau", pp.i_pu, typ=tol_typ),
         "delta": prog.add_real("delta", pp.i_pu, nonneg=True,
                                typ=max(delta_typ, 1e-3 * tol_typ))}
    if pp.k_dl:
        h["kappa"] = prog.add_real("kappa", pp.i_pu, nonneg=True, typ=pp.p_max_dl)
    if pp.j_ul:
        h["iota"] = prog.add_real("iota", pp.i_pu, nonneg=True, typ=float(pp.p_max_ul.max()))
    return h


def _add_leakage_constraints(prog: ConicProgram, s: Scenario, psi: np.ndarray,
                             w_args: list, p_arg, theta_args=None):
    """C4 chain for every PU: the three S-procedure LMIs plus the nominal split."""
    pp = s.params
    for i in range(pp.i_pu):
        beta_i = prog.var_entry("beta", i)
        gamma_i = prog.var_entry("gamma", i)
        tau_i = prog.var_entry("tau", i)
        delta_i = prog.var_entry("delta", i)
        if pp.j_ul:
            iota_i = prog.var_entry("iota", i)
            prog.add_lmi(robust.build_lmi_c4a(p_arg, beta_i, iota_i, s.eps_e[i],
                                              pp.p_tol[i], j_ul=pp.j_ul))
        else:
            prog.add_ineq(beta_i * 1.0 - pp.p_tol[i] / 3.0)
        if pp.k_dl:
            kappa_i = prog.var_entry("kappa", i)
            prog.add_lmi(robust.build_lmi_c4b(w_args, beta_i, gamma_i, kappa_i,
                                              s.eps_d[i], pp.n_t))
        else:
            prog.add_ineq(gamma_i - beta_i)
        if theta_args is None:
            prog.add_lmi(robust.build_lmi_c4c(
                "fixed_psi", s, gamma_i=gamma_i, tau_i=tau_i, delta_i=delta_i,
                eps_r_i=s.eps_r[i], w_list=w_args, p=p_arg, psi=psi))
            prog.add_ineq(robust.c4d_constraint(
                "fixed_psi", s, tau_i=tau_i, w_list=w_args, p=p_arg, psi=psi, i=i))
        else:
            b_psd, lift, w_fixed, p_fixed = theta_args
            prog.add_lmi(robust.build_lmi_c4c(
                "theta", s, gamma_i=gamma_i, tau_i=tau_i, delta_i=delta_i,
                eps_r_i=s.eps_r[i], b_psd=b_psd, theta="Theta"))
            prog.add_ineq(robust.c4d_constraint(
                "theta", s, tau_i=tau_i, theta="Theta", w_fixed=w_fixed,
                p_fixed=p_fixed, i=i, lift=lift))


def build_subproblem_wp(s: Scenario, ec: EffectiveChannels, anchor: dict,
                        v: np.ndarray, cfg: AlgoConfig = None) -> tuple:
    """Convex surrogate for the {W_k, p_j} block at the given anchor.

    Returns (program, info); info["const_shift"] recovers the surrogate value
    F_hat = -(objective + const_shift) and info["fhat_at"] evaluates it.
    """
    cfg = cfg or AlgoConfig()
    pp = s.params
    w_anchor = [np.asarray(m) for m in anchor["W"]]
    p_anchor = np.asarray(anchor["p"], dtype=float)
    grads = gradients_wp(s, ec, w_anchor, p_anchor, v)

    prog = ConicProgram()
    w_args = [prog.add_hermitian(f"W{k}", pp.n_t, psd=True, typ=pp.p_max_dl)
              for k in range(pp.k_dl)]
    p_arg = prog.add_real("p", pp.j_ul, nonneg=True, ub=pp.p_max_ul,
                          typ=float(pp.p_max_ul.max())) if pp.j_ul else None
    b_anchor = _coupling_from_mats(s, w_anchor, p_anchor)
    delta_typ = max(float(np.linalg.eigvalsh(b_anchor).max(initial=0.0)), 1e-12)
    _slack_handles(prog, s, delta_typ)

    if pp.k_dl:
        c1 = AffineScalar(-pp.p_max_dl)
        for k in range(pp.k_dl):
            c1 = c1 + prog.trace_term(f"W{k}", np.eye(pp.n_t, dtype=complex))
        prog.add_ineq(c1)
    _add_leakage_constraints(prog, s, ec.psi, w_args, p_arg)

    # -(f1 + f2) as normalized log terms
    const_shift = 0.0
    denf1_anchor = dl_denominators(s, ec, w_anchor, p_anchor, include_own=True)
    for k in range(pp.k_dl):
        kern = np.outer(ec.g_hat[k], ec.g_hat[k].conj())
        den = AffineScalar(pp.sigma2_dl[k])
        for r in range(pp.k_dl):
            den = den + prog.trace_term(f"W{r}", kern)
        if pp.j_ul:
            den = den + AffineScalar(0.0, {"p": np.abs(ec.phi[:, k]) ** 2})
        prog.add_log_term(pp.weights_dl[k], den * (1.0 / denf1_anchor[k]))
        const_shift += pp.weights_dl[k] * np.log2(denf1_anchor[k])
    denf2_anchor = ul_denominators(s, ec, w_anchor, p_anchor, v, include_own=True)
    for j in range(pp.j_ul):
        den = AffineScalar(pp.sigma2_ul * float(np.linalg.norm(v[j]) ** 2))
        den = den + AffineScalar(0.0, {"p": np.abs(ec.h_hat @ v[j].conj()) ** 2})
        kern = si_kernel(s, v[j])
        for k in range(pp.k_dl):
            den = den + prog.trace_term(f"W{k}", kern)
        prog.add_log_term(pp.weights_ul[j], den * (1.0 / denf2_anchor[j]))
        const_shift += pp.weights_ul[j] * np.log2(denf2_anchor[j])

    # linearized concave parts g1_hat + g2_hat (variable pieces; constants in shift)
    lin = AffineScalar()
    for k in range(pp.k_dl):
        kern = grads["dW_g1"][k] + grads["dW_g2"][k]
        lin = lin + prog.trace_term(f"W{k}", kern)
        const_shift -= float(np.real(np.trace((grads["dW_g1"][k] + grads["dW_g2"][k])
                                              @ w_anchor[k])))
    if pp.j_ul:
        lin = lin + AffineScalar(0.0, {"p": grads["dp_g1"] + grads["dp_g2"]})
        const_shift -= float(np.dot(grads["dp_g1"] + grads["dp_g2"], p_anchor))
    const_shift += g1_value(s, ec, w_anchor, p_anchor) + g2_value(s, ec, w_anchor, p_anchor, v)
    prog.add_objective(lin)

    def fhat_at(assign: dict) -> float:
        return -(prog.objective_at(assign) + const_shift)

    info = {"const_shift": const_shift, "fhat_at": fhat_at, "grads": grads}
    return prog, info


def extract_rank_one(w_mat: np.ndarray, rank_tol: float = 1e-6,
                     zero_tol: float = 0.0) -> tuple[np.ndarray, float]:
    """Principal-eigenpair beamformer w = sqrt(lam1) u1 and the ratio lam2/lam1.

    A matrix whose largest eigenvalue falls below zero_tol carries no usable
    power (solver noise around an off user) and extracts to the zero vector.
    """
    w_mat = np.asarray(w_mat)
    lam, vecs = np.linalg.eigh(0.5 * (w_mat + w_mat.conj().T))
    lam1 = float(lam[-1])
    scale = max(1.0, abs(lam1))
    if lam.min() < -1e-9 * scale:
        raise InvalidInputError("matrix is not PSD within tolerance")
    floor = max(zero_tol, 1e-14 * max(1.0, float(np.abs(w_mat).max(initial=0.0))))
    if lam1 <= floor:
        return np.zeros(w_mat.shape[0], dtype=complex), 0.0
    ratio = float(max(lam[-2], 0.0) / lam1) if len(lam) > 1 else 0.0
    if ratio > rank_tol:
        log.debug("rank-one extraction flagged: lam2/lam1 = %.3e", ratio)
    return np.sqrt(lam1) * vecs[:, -1], ratio


USABLE_RESIDUAL = 1e-4          # covered by the adaptive power backoff repair


def _usable(res) -> bool:
    """Solved to tolerance, or verified near-feasible at the solver's floor."""
    if res.ok:
        return True
    return (res.status == "numerical-failure" and bool(res.values)
            and np.isfinite(res.residuals.get("feas", np.nan))
            and res.residuals["feas"] <= USABLE_RESIDUAL)


def _repair_scale(feas_residual: float) -> float:
    """Power backoff cancelling a small constraint overshoot (leakage is
    linear in the power scale)."""
    return 1.0 - max(1e-6, 10.0 * feas_residual)


def sca_wp(s: Scenario, ec: EffectiveChannels, start: Allocation, v: np.ndarray,
           cfg: AlgoConfig) -> dict:
    """Inner SCA over {W_k, p_j}; the surrogate trace is non-increasing.

    Iterates are accepted only if the surrogate does not increase, which makes
    the monotonicity robust to solver noise at the convergence floor.
    """
    pp = s.params
    w_anchor = _w_mats(start.w)
    p_anchor = start.p.copy()
    best = {"W": w_anchor, "p": p_anchor, "w": start.w.copy()}
    trace, status, ratios = [], "ok", np.zeros(0)
    settings = SolveSettings(tol=cfg.solver_tol)
    for it in range(1, cfg.max_inner_iters + 1):
        prog, info = build_subproblem_wp(
            s, ec, {"W": w_anchor, "p": p_anchor}, v, cfg)
        res = solve(prog, settings)
        if not _usable(res) or (pp.k_dl and "W0" not in res.values):
            if it == 1:
                # nothing was accepted; an unusable solve at an already
                # (near-)stationary anchor is a stop, not a corruption
                log.debug("wp stage stalled at the anchor: %s", res.status)
                break
            status = "degraded"
            log.warning("wp subproblem solve failed at iter %d: %s", it, res.status)
            break
        w_new = [psd_project(res.values[f"W{k}"]) for k in range(pp.k_dl)]
        p_new = np.clip(res.values["p"], 0.0, pp.p_max_ul) if pp.j_ul else np.zeros(0)
        if res.residuals["feas"] > 1e-9:
            # feasibility repair before the next linearization
            scale = _repair_scale(res.residuals["feas"])
            p_new = p_new * scale
            w_new = [m * scale for m in w_new]
        # evaluate the surrogate at the (repaired) accepted point so that the
        # trace matches the iterate the next linearization anchors on
        new_assign = {f"W{k}": w_new[k] for k in range(pp.k_dl)}
        if pp.j_ul:
            new_assign["p"] = p_new
        fhat = info["fhat_at"](new_assign)
        # an exact solve always descends below the surrogate value at its own
        # anchor; reject anything else (solver noise floor or a poor rescue)
        anchor_assign = {f"W{k}": w_anchor[k] for k in range(pp.k_dl)}
        if pp.j_ul:
            anchor_assign["p"] = p_anchor
        if fhat > info["fhat_at"](anchor_assign):
            log.debug("wp step rejected at iter %d (no surrogate descent)", it)
            break
        trace.append(fhat)
        w_anchor, p_anchor = w_new, p_new
        extracted = [extract_rank_one(m, cfg.rank_tol, zero_tol=1e-9 * pp.p_max_dl)
                     for m in w_new] if pp.k_dl else []
        best = {"W": w_new, "p": p_new,
                "w": np.stack([e[0] for e in extracted]) if pp.k_dl
                else np.zeros((0, pp.n_t), complex)}
        ratios = np.array([e[1] for e in extracted]) if pp.k_dl else np.zeros(0)
        if len(trace) >= 2:
            rel = abs(trace[-1] - trace[-2]) / max(abs(trace[-1]), 1e-12)
            if rel <= cfg.eps_sca:
                break
    # tidy the converged matrices well inside the acceptance tolerance
    if pp.k_dl and ratios.size and float(ratios.max()) > 0.1 * cfg.rank_tol:
        best, ratios = _truncate_rank_one(s, ec, best, v, cfg, ratios)
    if pp.k_dl and ratios.size and float(ratios.max()) > cfg.rank_tol:
        best, ratios = _purify_rank_one(s, ec, best, v, cfg, ratios)
    return {"W": best["W"], "p": best["p"], "w": best["w"], "trace": np.array(trace),
            "status": status, "rank_ratios": ratios}


def _truncate_rank_one(s: Scenario, ec: EffectiveChannels, best: dict,
                       v: np.ndarray, cfg: AlgoConfig, ratios: np.ndarray) -> tuple:
    """Adopt the principal-component beamforming matrices when they are a
    verified epsilon-optimal solution of the final subproblem.

    Dropping the trailing eigenvalue mass can only relax the power and
    leakage constraints (every one is an upper bound on a PSD-kernel trace),
    so feasibility is preserved; the surrogate-value check rejects the
    truncation whenever the trailing mass carries real objective value
    (a genuinely rank-two optimal face keeps its honest ratio).
    """
    pp = s.params
    zero_tol = 1e-9 * pp.p_max_dl
    w_trunc = [np.outer(best["w"][k], best["w"][k].conj()) for k in range(pp.k_dl)]
    prog, info = build_subproblem_wp(s, ec, {"W": best["W"], "p": best["p"]}, v, cfg)
    assign = {f"W{k}": best["W"][k] for k in range(pp.k_dl)}
    assign_t = {f"W{k}": w_trunc[k] for k in range(pp.k_dl)}
    if pp.j_ul:
        assign["p"] = best["p"]
        assign_t["p"] = best["p"]
    fhat = info["fhat_at"](assign)
    fhat_t = info["fhat_at"](assign_t)
    if fhat_t > fhat + 1e-6 * max(1.0, abs(fhat)):
        log.debug("rank truncation rejected: surrogate loss %.2e", fhat_t - fhat)
        return best, ratios
    extracted = [extract_rank_one(m, cfg.rank_tol, zero_tol=zero_tol) for m in w_trunc]
    new_ratios = np.array([e[1] for e in extracted])
    log.debug("rank truncation %.2e -> %.2e", ratios.max(initial=0.0),
              new_ratios.max(initial=0.0))
    return ({"W": w_trunc, "p": best["p"],
             "w": np.stack([e[0] for e in extracted])}, new_ratios)


def _purify_rank_one(s: Scenario, ec: EffectiveChannels, best: dict, v: np.ndarray,
                     cfg: AlgoConfig, ratios: np.ndarray) -> tuple:
    """Move a higher-rank solution to the rank-one point of its optimal face.

    A rank-one optimum always exists for the relaxed subproblem; when the
    solver lands on the center of a fat optimal face, re-solving with a tiny
    principal-direction reward selects the rank-one vertex instead.  The step
    is accepted only if it does not lose surrogate value beyond the reward
    scale and stays feasible.
    """
    pp = s.params
    mu = 1e-4
    zero_tol = 1e-9 * pp.p_max_dl
    anchor = {"W": best["W"], "p": best["p"]}
    prog, info = build_subproblem_wp(s, ec, anchor, v, cfg)
    reward = AffineScalar()
    for k in range(pp.k_dl):
        lam, vecs = np.linalg.eigh(best["W"][k])
        if lam[-1] <= zero_tol:
            continue
        u = vecs[:, -1]
        reward = reward + prog.trace_term(f"W{k}", (mu / lam[-1]) * np.outer(u, u.conj()))
    if not reward.terms:
        return best, ratios
    prog.add_objective(reward)
    res = solve(prog, SolveSettings(tol=cfg.solver_tol))
    if not _usable(res) or (pp.k_dl and "W0" not in res.values):
        log.debug("purification solve unusable: %s", res.status)
        return best, ratios
    fhat_anchor = info["fhat_at"]({f"W{k}": best["W"][k] for k in range(pp.k_dl)}
                                  | ({"p": best["p"]} if pp.j_ul else {}))
    fhat_new = info["fhat_at"](res.values) + reward.eval(res.values)
    if fhat_new > fhat_anchor + 2 * mu * (pp.k_dl + 1):
        log.debug("purification rejected: surrogate slip %.2e", fhat_new - fhat_anchor)
        return best, ratios
    w_new = [psd_project(res.values[f"W{k}"]) for k in range(pp.k_dl)]
    p_new = np.clip(res.values["p"], 0.0, pp.p_max_ul) if pp.j_ul else np.zeros(0)
    if res.residuals["feas"] > 1e-9:
        scale = _repair_scale(res.residuals["feas"])
        p_new, w_new = p_new * scale, [m * scale for m in w_new]
    extracted = [extract_rank_one(m, cfg.rank_tol, zero_tol=zero_tol) for m in w_new]
    new_ratios = np.array([e[1] for e in extracted])
    if new_ratios.max(initial=0.0) >= ratios.max(initial=0.0):
        log.debug("purification did not reduce the ratio: %.2e -> %.2e",
                  ratios.max(), new_ratios.max())
        return best, ratios
    cand_w = np.stack([e[0] for e in extracted])
    old_alloc = Allocation(w=best["w"], p=best["p"], v=v, psi=ec.psi)
    new_alloc = Allocation(w=cand_w, p=p_new, v=v, psi=ec.psi)
    if weighted_sum_rate(s, new_alloc) < weighted_sum_rate(s, old_alloc) - 1e-9:
        log.debug("purification rejected: true rate would drop")
        return best, ratios
    log.debug("rank purification %.2e -> %.2e", ratios.max(), new_ratios.max())
    return ({"W": w_new, "p": p_new, "w": cand_w}, new_ratios)


# ---------------------------------------------------------------------------
# closed-form receive beamformer
# ---------------------------------------------------------------------------

def receive_beamformer(s: Scenario, ec: EffectiveChannels, w_mats: list,
                       p: np.ndarray, j: int) -> np.ndarray:
    """MVDR combiner R^{-1} h_hat_j, normalized to unit norm."""
    pp = s.params
    r = pp.sigma2_ul * np.eye(pp.n_t, dtype=complex)
    for t in range(pp.j_ul):
        if t != j:
            r += p[t] * np.outer(ec.h_hat[t], ec.h_hat[t].conj())
    if pp.k_dl and w_mats:
        from .lifting import si_diag
        r += pp.eta * np.diag(si_diag(s, w_mats)).astype(complex)
    try:
        v = np.linalg.solve(r, ec.h_hat[j])
    except np.linalg.LinAlgError:
        return np.zeros(pp.n_t, dtype=complex)
    nrm = np.linalg.norm(v)
    if nrm == 0.0:
        return np.zeros(pp.n_t, dtype=complex)
    return v / nrm


# ---------------------------------------------------------------------------
# Theta stage
# ---------------------------------------------------------------------------

def gradients_theta(s: Scenario, lift: LiftData, theta_anchor: np.ndarray,
                    w_mats: list, p: np.ndarray, v: np.ndarray) -> dict:
    """Gradients of the lifted concave parts plus the spectral subgradient."""
    pp = s.params
    m1 = pp.m + 1
    den1 = dl_denominators_theta(s, lift, theta_anchor, w_mats, p, include_own=False) \
        if pp.k_dl else np.zeros(0)
    den2 = ul_denominators_theta(s, lift, theta_anchor, w_mats, p, v, include_own=False) \
        if pp.j_ul else np.zeros(0)
    dg1 = np.zeros((m1, m1), dtype=complex)
    for k in range(pp.k_dl):
        acc = np.zeros((m1, m1), dtype=complex)
        for r in range(pp.k_dl):
            if r != k:
                acc += lift.g_lift[k] @ w_mats[r] @ lift.g_lift[k].conj().T
        for j in range(pp.j_ul):
            acc += p[j] * lift.q_lift[j, k]
        dg1 += pp.weights_dl[k] * acc / den1[k]
    dg1 = -dg1 / LN2
    dg2 = np.zeros((m1, m1), dtype=complex)
    for j in range(pp.j_ul):
        acc = np.zeros((m1, m1), dtype=complex)
        for t in range(pp.j_ul):
            if t != j:
                kern = lift.h_lift[t] @ np.outer(v[j], v[j].conj()) @ lift.h_lift[t].conj().T
                acc += p[t] * kern.T
        dg2 += pp.weights_ul[j] * acc / den2[j]
    dg2 = -dg2 / LN2
    lam, vecs = np.linalg.eigh(0.5 * (theta_anchor + theta_anchor.conj().T))
    top = vecs[:, -1]
    return {"dTheta_g1": dg1, "dTheta_g2": dg2,
            "spectral_subgrad": np.outer(top, top.conj()), "spectral_norm": float(lam[-1])}


def g1_theta_value(s, lift, theta, w_mats, p) -> float:
    dens = dl_denominators_theta(s, lift, theta, w_mats, p, include_own=False)
    return float(-np.sum(s.params.weights_dl * np.log2(dens))) if s.params.k_dl else 0.0


def g2_theta_value(s, lift, theta, w_mats, p, v) -> float:
    dens = ul_denominators_theta(s, lift, theta, w_mats, p, v, include_own=False)
    return float(-np.sum(s.params.weights_ul * np.log2(dens))) if s.params.j_ul else 0.0


def build_subproblem_theta(s: Scenario, lift: LiftData, theta_anchor: np.ndarray,
                           w_mats: list, p: np.ndarray, v: np.ndarray,
                           chi: float, cfg: AlgoConfig = None) -> tuple:
    """Penalized convex surrogate for the lifted phase block.

    The nuclear norm of a PSD unit-diagonal Theta is the constant M+1, so the
    penalty reduces to maximizing the linearized spectral norm.
    """
    cfg = cfg or AlgoConfig()
    pp = s.params
    m1 = pp.m + 1
    grads = gradients_theta(s, lift, theta_anchor, w_mats, p, v)

    prog = ConicProgram()
    prog.add_hermitian("Theta", m1, psd=True, typ=1.0)
    for d in range(m1):
        e = np.zeros((m1, m1), dtype=complex)
        e[d, d] = 1.0
        prog.add_eq(prog.trace_term("Theta", e) - 1.0)
    b_psd = _coupling_from_mats(s, w_mats, p)
    delta_typ = max(float(np.linalg.eigvalsh(b_psd).max(initial=0.0)), 1e-12)
    _slack_handles(prog, s, delta_typ)
    _add_leakage_constraints(prog, s, None, [np.asarray(m) for m in w_mats], p,
                             theta_args=(b_psd, lift, w_mats, p))

    const_shift = 0.0
    denf1_anchor = dl_denominators_theta(s, lift, theta_anchor, w_mats, p, include_own=True)
    for k in range(pp.k_dl):
        den = AffineScalar(pp.sigma2_dl[k])
        for r in range(pp.k_dl):
            den = den + prog.trace_term("Theta", lift.g_lift[k] @ w_mats[r]
                                        @ lift.g_lift[k].conj().T)
        for j in range(pp.j_ul):
            den = den + prog.trace_term("Theta", p[j] * lift.q_lift[j, k])
        prog.add_log_term(pp.weights_dl[k], den * (1.0 / denf1_anchor[k]))
        const_shift += pp.weights_dl[k] * np.log2(denf1_anchor[k])
    denf2_anchor = ul_denominators_theta(s, lift, theta_anchor, w_mats, p, v, include_own=True)
    for j in range(pp.j_ul):
        den = AffineScalar(pp.sigma2_ul * float(np.linalg.norm(v[j]) ** 2)
                           + si_term(s, v[j], w_mats))
        for t in range(pp.j_ul):
            kern = lift.h_lift[t] @ np.outer(v[j], v[j].conj()) @ lift.h_lift[t].conj().T
            den = den + prog.trace_term("Theta", p[t] * kern.T)
        prog.add_log_term(pp.weights_ul[j], den * (1.0 / denf2_anchor[j]))
        const_shift += pp.weights_ul[j] * np.log2(denf2_anchor[j])

    lin_kernel = grads["dTheta_g1"] + grads["dTheta_g2"] + chi * grads["spectral_subgrad"]
    prog.add_objective(prog.trace_term("Theta", lin_kernel))
    prog.obj_scale = max(1.0, chi)
    const_shift -= float(np.real(np.trace(lin_kernel @ theta_anchor)))
    const_shift += g1_theta_value(s, lift, theta_anchor, w_mats, p)
    const_shift += g2_theta_value(s, lift, theta_anchor, w_mats, p, v)
    const_shift += chi * grads["spectral_norm"] - chi * m1

    def ftilde_at(assign: dict) -> float:
        return -(prog.objective_at(assign) + const_shift)

    info = {"const_shift": const_shift, "ftilde_at": ftilde_at, "grads": grads,
            "b_psd": b_psd}
    return prog, info


def _theta_warm_start(s: Scenario, lift: LiftData, theta: np.ndarray, w_mats: list,
                      p: np.ndarray, v: np.ndarray, cfg: AlgoConfig) -> np.ndarray:
    """Initial point for the penalized stage: relaxed SCA without the penalty.

    The spectral-penalty linearization pins the iterate to its anchor
    direction whenever the penalty weight dominates the rate terms, so the
    phase search only makes progress if the starting point is already good;
    a few penalty-free steps (plain SDR of the phase problem) provide that.
    """
    settings = SolveSettings(tol=cfg.solver_tol)
    for _ in range(cfg.max_inner_iters):
        prog, info = build_subproblem_theta(s, lift, theta, w_mats, p, v, 0.0, cfg)
        res = solve(prog, settings)
        if not _usable(res) or "Theta" not in res.values:
            break
        ftilde = info["ftilde_at"](res.values)
        anchor_val = info["ftilde_at"]({"Theta": theta})
        if ftilde > anchor_val:
            break
        theta = res.values["Theta"]
        if abs(ftilde - anchor_val) / max(abs(ftilde), 1e-12) <= cfg.eps_sca:
            break
    return theta


def sca_theta(s: Scenario, psi_anchor: np.ndarray, w_mats: list, p: np.ndarray,
              v: np.ndarray, cfg: AlgoConfig, lift: LiftData = None) -> dict:
    """Penalty-SCA over the lifted phases; escalates chi if rank one is missed.

    The initial point is produced by a penalty-free warm start from the
    current phases; the reported trace covers the penalized iterations.
    """
    pp = s.params
    lift = lift if lift is not None else build_lift(s)
    theta = lift_theta(s, psi_anchor, lift).theta_mat
    theta = _theta_warm_start(s, lift, theta, w_mats, p, v, cfg)
    chi = cfg.chi
    settings = SolveSettings(tol=cfg.solver_tol)
    trace, status = [], "ok"
    segment_start = 0           # trace index where the current chi run began
    escalations = 0
    it = 0
    while it < cfg.max_inner_iters:
        it += 1
        prog, info = build_subproblem_theta(s, lift, theta, w_mats, p, v, chi, cfg)
        res = solve(prog, settings)
        if not _usable(res) or "Theta" not in res.values:
            if it == 1:
                log.debug("theta stage stalled at the anchor: %s", res.status)
                break
            status = "degraded"
            log.warning("theta subproblem solve failed at iter %d: %s", it, res.status)
            break
        ftilde = info["ftilde_at"](res.values)
        if ftilde > info["ftilde_at"]({"Theta": theta}):
            log.debug("theta step rejected at iter %d (no surrogate descent)", it)
            break               # keep the previous, better iterate
        theta = res.values["Theta"]
        trace.append(ftilde)
        converged = (len(trace) - segment_start >= 2
                     and abs(trace[-1] - trace[-2]) / max(abs(trace[-1]), 1e-12) <= cfg.eps_sca)
        if converged:
            lam = np.linalg.eigvalsh(theta)
            ratio = float(max(lam[-2], 0.0) / lam[-1]) if lam[-1] > 0 else 1.0
            if ratio > cfg.rank_tol and escalations < cfg.chi_escalations:
                chi *= 10.0
                escalations += 1
                segment_start = len(trace)
                log.debug("rank ratio %.2e > tol, escalating chi to %.1e", ratio, chi)
                continue
            break
    lam = np.linalg.eigvalsh(0.5 * (theta + theta.conj().T))
    ratio = float(max(lam[-2], 0.0) / lam[-1]) if lam[-1] > 0 else 1.0
    if ratio > cfg.rank_tol:
        status = "degraded"
    psi, _ = recover_psi(theta, cfg.rank_tol)
    return {"psi": psi, "theta": theta, "trace": np.array(trace), "status": status,
            "rank_ratio": ratio, "chi_final": chi, "escalations": escalations}


# ---------------------------------------------------------------------------
# feasible start and outer loop
# ---------------------------------------------------------------------------

def max_leakage_ratio(s: Scenario, a: Allocation) -> float:
    """max_i of both scalar feasibility measures relative to p_tol."""
    worst = 0.0
    for i in range(s.params.i_pu):
        worst = max(worst, robust.safe_leakage_bound(s, a, i) / s.params.p_tol[i])
        lhs = s.params.p_tol[i] / 3.0 - robust.lmi_chain_margin(s, a, i)
        worst = max(worst, lhs / (s.params.p_tol[i] / 3.0))
    return worst


def find_feasible_start(s: Scenario, seed: int, cfg: AlgoConfig = None) -> Allocation:
    """Maximum-ratio start with the DL and UL power scales backed off
    independently until the safe leakage bound holds for every PU.

    Scaling the two sides separately keeps a strong DL start when a single UL
    user happens to sit next to a PU (and vice versa); the UL side is allotted
    at most half of each PU's budget.
    """
    cfg = cfg or AlgoConfig()
    pp = s.params
    rng = np.random.default_rng(seed)
    psi = rng.uniform(-np.pi, np.pi, size=pp.m)
    ec = effective_channels(s, psi)
    w = np.zeros((pp.k_dl, pp.n_t), dtype=complex)
    for k in range(pp.k_dl):
        nrm = np.linalg.norm(ec.g_hat[k])
        direction = ec.g_hat[k] / nrm if nrm > 0 else np.eye(pp.n_t)[0]
        w[k] = np.sqrt(pp.p_max_dl / max(pp.k_dl, 1)) * direction
    p_full = pp.p_max_ul.copy()
    zeros_v = np.zeros((pp.j_ul, pp.n_t), complex)

    def alloc(sw: float, sp: float) -> Allocation:
        return Allocation(w=w * np.sqrt(sw), p=p_full * sp, v=zeros_v, psi=psi)

    ratio_ul = max_leakage_ratio(s, alloc(0.0, 1.0)) if pp.j_ul else 0.0
    sp = 1.0 if ratio_ul <= 0.5 else 0.495 / ratio_ul
    ratio_dl = max_leakage_ratio(s, alloc(1.0, 0.0)) if pp.k_dl else 0.0
    budget_dl = 1.0 - (sp * ratio_ul if pp.j_ul else 0.0)
    sw = 1.0 if ratio_dl <= budget_dl else 0.99 * budget_dl / ratio_dl
    a = alloc(sw, sp)
    for _ in range(60):
        if max_leakage_ratio(s, a) <= 1.0:
            break
        sw, sp = 0.5 * sw, 0.5 * sp
        a = alloc(sw, sp)
    for j in range(pp.j_ul):
        a.v[j] = receive_beamformer(s, ec, _w_mats(a.w), a.p, j)
    return a


def _enforce_hard_constraints(s: Scenario, a: Allocation) -> Allocation:
    """Project tiny solver overshoot back onto C1/C2 exactly."""
    pp = s.params
    total = float(np.sum(np.abs(a.w) ** 2))
    if total > pp.p_max_dl and total > 0:
        a.w *= np.sqrt(pp.p_max_dl / total)
    a.p = np.clip(a.p, 0.0, pp.p_max_ul)
    return a


def bcd(s: Scenario, start: Allocation, cfg: AlgoConfig = None) -> dict:
    """Outer block-coordinate loop; the true objective trace is non-decreasing."""
    cfg = cfg or AlgoConfig()
    pp = s.params
    ss = rescale_scenario(s, (3.0 / float(pp.p_tol.min())) ** 0.25)

    a = Allocation(w=start.w.copy(), p=start.p.copy(), v=start.v.copy(),
                   psi=start.psi.copy())
    lift = build_lift(ss)
    trace = ConvergenceTrace()
    status = "ok"
    final_rank_ratio = 0.0          # of the last accepted beamforming stage
    f_prev = weighted_sum_rate(s, a)
    trace.add(0, "outer", 0, f_prev, 0.0, _max_safe_leak(s, a))

    for outer in range(1, cfg.max_outer_iters + 1):
        ec = effective_channels(ss, a.psi)
        max_ratio = 0.0
        if pp.k_dl or pp.j_ul:
            inner = sca_wp(ss, ec, a, a.v, cfg)
            if inner["status"] != "ok":
                status = "degraded"
            if inner["trace"].size:
                a = Allocation(w=inner["w"], p=inner["p"], v=a.v, psi=a.psi)
                max_ratio = float(inner["rank_ratios"].max(initial=0.0))
                final_rank_ratio = max_ratio
                for n, fh in enumerate(inner["trace"], start=1):
                    trace.add(outer, "wp", n, fh, max_ratio, _max_safe_leak(s, a))
        if pp.j_ul:
            w_mats = _w_mats(a.w)
            for j in range(pp.j_ul):
                a.v[j] = receive_beamformer(ss, ec, w_mats, a.p, j)
            trace.add(outer, "v", 1, weighted_sum_rate(s, a), max_ratio,
                      _max_safe_leak(s, a))
        if pp.m and not cfg.skip_theta_stage and (pp.k_dl or pp.j_ul):
            th = sca_theta(ss, a.psi, _w_mats(a.w), a.p, a.v, cfg, lift=lift)
            for n, ft in enumerate(th["trace"], start=1):
                trace.add(outer, "theta", n, ft, th["rank_ratio"], _max_safe_leak(s, a))
            cand = Allocation(w=a.w, p=a.p, v=a.v, psi=th["psi"])
            if th["status"] == "ok" and _theta_step_acceptable(s, cand, a):
                a = cand
            elif th["status"] != "ok":
                status = "degraded"

        a = _enforce_hard_constraints(s, a)
        f_cur = weighted_sum_rate(s, a)
        trace.add(outer, "outer", outer, f_cur, max_ratio, _max_safe_leak(s, a))
        if abs(f_cur - f_prev) / max(abs(f_prev), 1e-12) <= cfg.eps_bcd:
            f_prev = f_cur
            break
        f_prev = f_cur

    return {"alloc": a, "trace": trace, "status": status, "sum_rate": f_prev,
            "outer_iters": trace.outer_objectives().size - 1,
            "final_rank_ratio": final_rank_ratio}


def _theta_step_acceptable(s: Scenario, cand: Allocation, cur: Allocation) -> bool:
    """Accept a recovered phase vector only if it does not hurt the true
    objective or break the leakage chain (rank-one projection noise)."""
    if max_leakage_ratio(s, cand) > 1.0 + 1e-7:
        return False
    return weighted_sum_rate(s, cand) >= weighted_sum_rate(s, cur) - 1e-9


def _max_safe_leak(s: Scenario, a: Allocation) -> float:
    return max((robust.safe_leakage_bound(s, a, i) for i in range(s.params.i_pu)),
               default=0.0)
