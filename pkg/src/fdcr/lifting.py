"""Effective channels for fixed IRS phases and the lifted phase representation.

The lifted variable is Theta = theta_tilde theta_tilde^H with
theta = [exp(-j psi_1), ..., exp(-j psi_M)] and a unit-modulus dummy last
entry, so every phase-dependent quadratic form becomes linear in Theta (UL
terms pick up a transpose on Theta which must be preserved).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import Allocation, InvalidInputError, Scenario

log = logging.getLogger(__name__)


@dataclass
class EffectiveChannels:
    """Composite direct+reflected channels for a fixed phase vector."""

    psi: np.ndarray
    g_hat: np.ndarray               # (K, N_T): DL gain is g_hat_k^H w
    h_hat: np.ndarray               # (J, N_T): UL gain is v^H h_hat_j
    l_hat: np.ndarray               # (I, N_T): PU leakage gain is l_hat_i^H w
    phi: np.ndarray                 # (J, K): UL->DL cross gains
    theta_e: np.ndarray             # (I, J): UL->PU cross gains


def effective_channels(s: Scenario, psi: np.ndarray) -> EffectiveChannels:
    p = s.params
    psi_vec = np.exp(1j * np.asarray(psi, dtype=float))
    fh = s.f.conj().T
    g_hat = np.stack([s.g_d[k] + fh @ (psi_vec.conj() * s.g_r[k]) for k in range(p.k_dl)]) \
        if p.k_dl else np.zeros((0, p.n_t), complex)
    h_hat = np.stack([s.h_d[j] + fh @ (psi_vec * s.h_r[j]) for j in range(p.j_ul)]) \
        if p.j_ul else np.zeros((0, p.n_t), complex)
    l_hat = np.stack([s.l_d_hat[i] + fh @ (psi_vec.conj() * s.l_r_hat[i]) for i in range(p.i_pu)])
    phi = np.array([[s.q[j, k] + np.vdot(s.g_r[k], psi_vec * s.h_r[j])
                     for k in range(p.k_dl)] for j in range(p.j_ul)]).reshape(p.j_ul, p.k_dl)
    theta_e = np.array([[s.e_hat[i, j] + np.vdot(s.l_r_hat[i], psi_vec * s.h_r[j])
                         for j in range(p.j_ul)] for i in range(p.i_pu)]).reshape(p.i_pu, p.j_ul)
    return EffectiveChannels(np.asarray(psi, float), g_hat, h_hat, l_hat, phi, theta_e)


@dataclass
class LiftData:
    """Channel matrices of the lifted representation (independent of Theta)."""

    g_lift: np.ndarray              # (K, M+1, N_T)
    h_lift: np.ndarray              # (J, M+1, N_T)
    l_lift: np.ndarray              # (I, M+1, N_T)
    q_lift: np.ndarray              # (J, K, M+1, M+1), Hermitian slices
    p_lift: np.ndarray              # (I, J, M+1, M+1), Hermitian slices


@dataclass
class ThetaData:
    """Lifted phase variable plus the channel matrices it contracts with."""

    theta_mat: np.ndarray           # (M+1, M+1) Hermitian, unit diagonal
    rho: complex
    lift: LiftData


def _stack_vec(diag_vec: np.ndarray, f: np.ndarray, last_row: np.ndarray) -> np.ndarray:
    """[diag(conj(diag_vec)) @ F ; last_row^H] of shape (M+1, N_T)."""
    return np.vstack([diag_vec.conj()[:, None] * f, last_row.conj()[None, :]])


def _rank1_block(b: np.ndarray, scalar: complex) -> np.ndarray:
    m = len(b)
    out = np.empty((m + 1, m + 1), dtype=complex)
    out[:m, :m] = np.outer(b, b.conj())
    out[:m, m] = np.conj(scalar) * b
    out[m, :m] = scalar * b.conj()
    out[m, m] = abs(scalar) ** 2
    return out


def build_lift(s: Scenario) -> LiftData:
    p = s.params
    m1 = p.m + 1
    g_lift = np.stack([_stack_vec(s.g_r[k], s.f, s.g_d[k]) for k in range(p.k_dl)]) \
        if p.k_dl else np.zeros((0, m1, p.n_t), complex)
    h_lift = np.stack([_stack_vec(s.h_r[j], s.f, s.h_d[j]) for j in range(p.j_ul)]) \
        if p.j_ul else np.zeros((0, m1, p.n_t), complex)
    l_lift = np.stack([_stack_vec(s.l_r_hat[i], s.f, s.l_d_hat[i]) for i in range(p.i_pu)])
    q_lift = np.array([[_rank1_block(s.g_r[k].conj() * s.h_r[j], s.q[j, k])
                        for k in range(p.k_dl)] for j in range(p.j_ul)]
                      ).reshape(p.j_ul, p.k_dl, m1, m1)
    p_lift = np.array([[_rank1_block(s.l_r_hat[i].conj() * s.h_r[j], s.e_hat[i, j])
                        for j in range(p.j_ul)] for i in range(p.i_pu)]
                      ).reshape(p.i_pu, p.j_ul, m1, m1)
    return LiftData(g_lift, h_lift, l_lift, q_lift, p_lift)


def lift_theta(s: Scenario, psi: np.ndarray, lift: LiftData = None) -> ThetaData:
    """Rank-one lift of a phase vector with dummy entry rho = 1."""
    psi = np.asarray(psi, dtype=float)
    if psi.shape != (s.params.m,):
        raise InvalidInputError("psi has wrong length")
    theta = np.exp(-1j * psi)
    theta_t = np.append(theta, 1.0)
    return ThetaData(np.outer(theta_t, theta_t.conj()), 1.0 + 0j,
                     lift if lift is not None else build_lift(s))


def recover_psi(theta_mat: np.ndarray, rank_tol: float = 1e-6) -> tuple[np.ndarray, float]:
    """Phase vector from a (near-)rank-one lifted matrix, plus lambda2/lambda1."""
    theta_mat = np.asarray(theta_mat)
    w, vecs = np.linalg.eigh(0.5 * (theta_mat + theta_mat.conj().T))
    lam1 = float(w[-1])
    if lam1 <= 0.0:
        raise InvalidInputError("lifted matrix has no positive eigenvalue")
    ratio = float(max(w[-2], 0.0) / lam1) if len(w) > 1 else 0.0
    u = vecs[:, -1]
    if abs(u[-1]) < 1e-6 * np.linalg.norm(u):
        raise InvalidInputError("dummy entry of the principal eigenvector vanished")
    theta_t = u / u[-1]
    mags = np.abs(theta_t[:-1])
    dev = float(np.abs(mags - 1.0).max(initial=0.0))
    if dev > 1e-6:
        log.debug("unit-modulus projection deviation %.3e (rank ratio %.3e)", dev, ratio)
    theta = theta_t[:-1] / np.where(mags > 0, mags, 1.0)
    psi = -np.angle(theta)
    if ratio > rank_tol:
        log.debug("recovered psi from Theta with rank ratio %.3e > %.1e", ratio, rank_tol)
    return psi, ratio


# ---------------------------------------------------------------------------
# denominators and SINRs in each representation
# ---------------------------------------------------------------------------

def si_diag(s: Scenario, w_mats: list) -> np.ndarray:
    """Diag(sum_k S W_k S^H) as a length-N_T real vector."""
    acc = np.zeros(s.params.n_t)
    for wm in w_mats:
        acc += np.real(np.einsum("na,ab,nb->n", s.s_si, wm, s.s_si.conj()))
    return acc


def si_term(s: Scenario, v_j: np.ndarray, w_mats: list) -> float:
    return float(s.params.eta * np.sum(np.abs(v_j) ** 2 * si_diag(s, w_mats)))


def si_kernel(s: Scenario, v_j: np.ndarray) -> np.ndarray:
    """K with Tr(K W) = eta * Tr(v v^H Diag(S W S^H)): K = eta S^H Diag(|v|^2) S."""
    return s.params.eta * (s.s_si.conj().T * np.abs(v_j) ** 2) @ s.s_si


def dl_denominators(s: Scenario, ec: EffectiveChannels, w_mats: list, p: np.ndarray,
                    include_own: bool) -> np.ndarray:
    """Per-DL-user denominator; include_own distinguishes the f1 and g1 forms."""
    pp = s.params
    out = np.zeros(pp.k_dl)
    for k in range(pp.k_dl):
        kern = np.outer(ec.g_hat[k], ec.g_hat[k].conj())
        total = 0.0
        for r in range(pp.k_dl):
            if r == k and not include_own:
                continue
            total += float(np.real(np.trace(kern @ w_mats[r])))
        total += float(np.sum(p * np.abs(ec.phi[:, k]) ** 2)) if pp.j_ul else 0.0
        out[k] = total + pp.sigma2_dl[k]
    return out


def ul_denominators(s: Scenario, ec: EffectiveChannels, w_mats: list, p: np.ndarray,
                    v: np.ndarray, include_own: bool) -> np.ndarray:
    pp = s.params
    out = np.zeros(pp.j_ul)
    for j in range(pp.j_ul):
        gains = np.abs(ec.h_hat @ v[j].conj()) ** 2     # |v^H h_hat_t|^2
        total = float(np.sum(p * gains))
        if not include_own:
            total -= float(p[j] * gains[j])
        total += si_term(s, v[j], w_mats)
        out[j] = total + pp.sigma2_ul * float(np.linalg.norm(v[j]) ** 2)
    return out


def trace_real(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.real(np.sum(a * b.T)))


def dl_denominators_theta(s: Scenario, lift: LiftData, theta: np.ndarray, w_mats: list,
                          p: np.ndarray, include_own: bool) -> np.ndarray:
    pp = s.params
    out = np.zeros(pp.k_dl)
    for k in range(pp.k_dl):
        total = 0.0
        for r in range(pp.k_dl):
            if r == k and not include_own:
                continue
            kern = lift.g_lift[k] @ w_mats[r] @ lift.g_lift[k].conj().T
            total += trace_real(theta, kern)
        for j in range(pp.j_ul):
            total += p[j] * trace_real(theta, lift.q_lift[j, k])
        out[k] = total + pp.sigma2_dl[k]
    return out


def ul_denominators_theta(s: Scenario, lift: LiftData, theta: np.ndarray, w_mats: list,
                          p: np.ndarray, v: np.ndarray, include_own: bool) -> np.ndarray:
    pp = s.params
    out = np.zeros(pp.j_ul)
    for j in range(pp.j_ul):
        total = 0.0
        for t in range(pp.j_ul):
            if t == j and not include_own:
                continue
            kern = lift.h_lift[t] @ np.outer(v[j], v[j].conj()) @ lift.h_lift[t].conj().T
            total += p[t] * trace_real(theta.T, kern)
        total += si_term(s, v[j], w_mats)
        out[j] = total + pp.sigma2_ul * float(np.linalg.norm(v[j]) ** 2)
    return out


def dl_sinr_theta(s: Scenario, lift: LiftData, theta: np.ndarray, a: Allocation, k: int) -> float:
    w_mats = [np.outer(a.w[r], a.w[r].conj()) for r in range(s.params.k_dl)]
    kern = lift.g_lift[k] @ w_mats[k] @ lift.g_lift[k].conj().T
    num = trace_real(theta, kern)
    den = dl_denominators_theta(s, lift, theta, w_mats, a.p, include_own=False)[k]
    return num / den


def ul_sinr_theta(s: Scenario, lift: LiftData, theta: np.ndarray, a: Allocation, j: int) -> float:
    w_mats = [np.outer(a.w[r], a.w[r].conj()) for r in range(s.params.k_dl)]
    kern = lift.h_lift[j] @ np.outer(a.v[j], a.v[j].conj()) @ lift.h_lift[j].conj().T
    num = a.p[j] * trace_real(theta.T, kern)
    den = ul_denominators_theta(s, lift, theta, w_mats, a.p, a.v, include_own=False)[j]
    return num / den


def leakage_theta(s: Scenario, lift: LiftData, theta: np.ndarray, a: Allocation, i: int) -> float:
    """Nominal-CSI leakage in the lifted representation."""
    total = 0.0
    for k in range(s.params.k_dl):
        wm = np.outer(a.w[k], a.w[k].conj())
        total += trace_real(theta, lift.l_lift[i] @ wm @ lift.l_lift[i].conj().T)
    for j in range(s.params.j_ul):
        total += a.p[j] * trace_real(theta, lift.p_lift[i, j])
    return total


def dl_sinr_eff(s: Scenario, ec: EffectiveChannels, a: Allocation, k: int) -> float:
    w_mats = [np.outer(a.w[r], a.w[r].conj()) for r in range(s.params.k_dl)]
    num = abs(np.vdot(ec.g_hat[k], a.w[k])) ** 2
    den = dl_denominators(s, ec, w_mats, a.p, include_own=False)[k]
    return num / den


def ul_sinr_eff(s: Scenario, ec: EffectiveChannels, a: Allocation, j: int) -> float:
    w_mats = [np.outer(a.w[r], a.w[r].conj()) for r in range(s.params.k_dl)]
    num = a.p[j] * abs(np.vdot(a.v[j], ec.h_hat[j])) ** 2
    den = ul_denominators(s, ec, w_mats, a.p, a.v, include_own=False)[j]
    return num / den
