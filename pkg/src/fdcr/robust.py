"""Safe approximation of the PU interference constraint and S-procedure LMIs.

The worst-case leakage constraint is split three ways (DL/UL error terms plus
nominal terms) at the cost of a factor 3; each semi-infinite piece becomes a
single LMI in one multiplier.  A sampling-based verifier provides an
empirical robustness certificate against the held-out true PU channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Allocation, InvalidInputError, Scenario, interference_leakage
from .conic import AffineScalar, LmiBlock, MatAffine, scalar_of

PSD_TOL = 1e-9


@dataclass
class SlackSet:
    """Leakage-splitting slacks and S-procedure multipliers, one entry per PU."""

    beta: np.ndarray
    gamma: np.ndarray
    tau: np.ndarray
    delta: np.ndarray
    iota: np.ndarray
    kappa: np.ndarray

    def __post_init__(self):
        for name in ("delta", "iota", "kappa"):
            if np.any(getattr(self, name) < 0):
                raise InvalidInputError(f"multiplier {name} must be nonnegative")
        for name in ("beta", "gamma", "tau"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidInputError(f"slack {name} must be finite")


# ---------------------------------------------------------------------------
# scalar bounds
# ---------------------------------------------------------------------------

def _nominal_terms(s: Scenario, a: Allocation, i: int) -> tuple[float, np.ndarray, np.ndarray]:
    """Nominal leakage pieces at the CSI estimates for PU i."""
    psi_vec = np.exp(1j * a.psi)
    dl = np.array([abs(np.vdot(s.l_d_hat[i], a.w[k])
                       + np.vdot(psi_vec.conj() * s.l_r_hat[i], s.f @ a.w[k])) ** 2
                   for k in range(s.params.k_dl)])
    ul = np.array([abs(s.e_hat[i, j] + np.vdot(s.l_r_hat[i], psi_vec * s.h_r[j])) ** 2
                   for j in range(s.params.j_ul)])
    return float(dl.sum() + (a.p * ul).sum()), dl, ul


def safe_leakage_bound(s: Scenario, a: Allocation, i: int) -> float:
    """Worst-case value of the 3-way-split leakage bound for PU i.

    Each per-ball supremum is evaluated in closed form (Cauchy-Schwarz aligned
    boundary error); the |a+b+c|^2 <= 3(|a|^2+|b|^2+|c|^2) factor is included,
    so the result upper-bounds the true worst-case leakage.
    """
    psi_vec = np.exp(1j * a.psi)
    nominal, _, _ = _nominal_terms(s, a, i)
    dl_err = sum(s.eps_d[i] ** 2 * np.linalg.norm(a.w[k]) ** 2
                 + s.eps_r[i] ** 2 * np.linalg.norm(psi_vec * (s.f @ a.w[k])) ** 2
                 for k in range(s.params.k_dl))
    ul_err = sum(a.p[j] * (s.eps_e[i, j] ** 2
                           + s.eps_r[i] ** 2 * np.linalg.norm(psi_vec * s.h_r[j]) ** 2)
                 for j in range(s.params.j_ul))
    return 3.0 * (nominal + float(dl_err) + float(ul_err))


def coupling_matrix(s: Scenario, w: np.ndarray, p: np.ndarray) -> np.ndarray:
    """B = sum_k F W_k F^H + sum_j p_j h_R,j h_R,j^H (Hermitian PSD)."""
    b = np.zeros((s.params.m, s.params.m), dtype=complex)
    for k in range(s.params.k_dl):
        fw = s.f @ w[k]
        b += np.outer(fw, fw.conj())
    for j in range(s.params.j_ul):
        b += p[j] * np.outer(s.h_r[j], s.h_r[j].conj())
    return 0.5 * (b + b.conj().T)


def ball_maxima(s: Scenario, a: Allocation, i: int) -> tuple[float, float, float]:
    """Exact suprema of the three split error groups over their balls.

    Returns (e_max, d_max, r_max): the UL-scalar, BS-PU and IRS-PU worst-case
    error contributions; each is a joint supremum over its own ball.
    """
    e_max = float(np.sum(a.p * s.eps_e[i] ** 2))
    w_sum = sum(np.outer(a.w[k], a.w[k].conj()) for k in range(s.params.k_dl)) \
        if s.params.k_dl else np.zeros((s.params.n_t, s.params.n_t))
    d_max = s.eps_d[i] ** 2 * float(np.linalg.eigvalsh(0.5 * (w_sum + w_sum.conj().T)).max()) \
        if s.params.k_dl else 0.0
    b = coupling_matrix(s, a.w, a.p)
    r_max = s.eps_r[i] ** 2 * float(np.linalg.eigvalsh(b).max(initial=0.0))
    return e_max, d_max, r_max


def split_bound_feasible(s: Scenario, a: Allocation, i: int) -> bool:
    """Exact feasibility of the split constraint: joint suprema + nominal <= p_tol/3."""
    nominal, _, _ = _nominal_terms(s, a, i)
    e_max, d_max, r_max = ball_maxima(s, a, i)
    return nominal + e_max + d_max + r_max <= s.params.p_tol[i] / 3.0


def canonical_slacks(s: Scenario, a: Allocation, i: int) -> tuple[float, float, float]:
    """Slacks (beta, gamma, tau) built from the three partial maxima."""
    nominal, _, _ = _nominal_terms(s, a, i)
    e_max, d_max, r_max = ball_maxima(s, a, i)
    tau = nominal
    gamma = tau + r_max
    beta = gamma + d_max
    return beta, gamma, tau


def lmi_chain_margin(s: Scenario, a: Allocation, i: int) -> float:
    """Feasibility margin of the full LMI chain with optimal multipliers.

    The UL-scalar LMI encloses the per-scalar error box in a single ball of
    radius sqrt(sum eps_e^2), so its minimal contribution is
    (max_j p_j) * sum_j eps_e^2 rather than sum_j p_j eps_e^2.
    Positive margin means the chain is feasible for some slack assignment.
    """
    nominal, _, _ = _nominal_terms(s, a, i)
    _, d_max, r_max = ball_maxima(s, a, i)
    e_lmi = float(a.p.max(initial=0.0)) * float(np.sum(s.eps_e[i] ** 2))
    return s.params.p_tol[i] / 3.0 - (nominal + e_lmi + d_max + r_max)


# ---------------------------------------------------------------------------
# LMI constructors (affine in handles / expressions; numeric inputs give
# constant blocks that can be checked directly)
# ---------------------------------------------------------------------------

def _scalar_times(expr, base: np.ndarray, dim: int) -> MatAffine:
    """MatAffine for scalar_expr * base, scalar over real handles only."""
    expr = scalar_of(expr)
    out = MatAffine(dim, expr.const * base.astype(complex))
    for h, coef in expr.terms.items():
        if coef.ndim != 1:
            raise InvalidInputError("matrix-valued scalars are not supported here")
        out.atoms.append(("lin", h, coef[:, None, None] * base[None, :, :]))
    return out


def _embed(expr: MatAffine, dim: int, offset: int) -> MatAffine:
    place = np.zeros((dim, expr.dim))
    place[offset:offset + expr.dim, :] = np.eye(expr.dim)
    return expr.conjugate_by(place, place.T)


def _as_mat(w, n: int) -> MatAffine:
    if isinstance(w, MatAffine):
        return w
    if isinstance(w, str):
        return MatAffine(n, atoms=[("sand", w, np.eye(n, dtype=complex),
                                    np.eye(n, dtype=complex), False)])
    return MatAffine(n, np.asarray(w, dtype=complex))


def trace_of(w, kernel: np.ndarray, n: int) -> AffineScalar:
    """Re Tr(kernel @ W) as an AffineScalar, for W a handle/matrix/MatAffine."""
    kernel = np.asarray(kernel, dtype=complex)
    if isinstance(w, str):
        return AffineScalar(0.0, {w: kernel})
    w = _as_mat(w, n)
    out = AffineScalar(float(np.real(np.trace(kernel @ w.const))))
    for atom in w.atoms:
        if atom[0] == "lin":
            coefs = np.real(np.einsum("ab,jba->j", kernel, atom[2]))
            out._acc(atom[1], coefs)
        else:
            _, h, l, r, t = atom
            kern = r @ kernel @ l
            out._acc(h, kern.T if t else kern)
    return out


def build_lmi_c4a(p, beta_i, iota_i, eps_e_row, p_tol_i, j_ul: int = None) -> LmiBlock:
    """LMI for the UL-scalar error split: [iota*I_J - P, 0; 0, -iota*eps^2 - beta + p_tol/3].

    The scalar error box is enclosed in the ball of radius sqrt(sum_j eps^2).
    """
    eps_e_row = np.atleast_1d(np.asarray(eps_e_row, dtype=float))
    j = j_ul if j_ul is not None else len(eps_e_row)
    if j < 1:
        raise InvalidInputError("need at least one UL user")
    iota = scalar_of(iota_i)
    if not iota.terms and iota.const < 0:
        raise InvalidInputError("iota must be nonnegative")
    dim = j + 1
    eps_sq = float(np.sum(eps_e_row ** 2))
    top = np.zeros((dim, dim))
    top[:j, :j] = np.eye(j)
    expr = _scalar_times(iota, top, dim)
    if isinstance(p, str):
        mats = np.stack([-_unit_diag(dim, t) for t in range(j)])
        expr = expr + MatAffine(dim, atoms=[("lin", p, mats)])
    else:
        pd = np.zeros((dim, dim), dtype=complex)
        pd[:j, :j] = np.diag(np.atleast_1d(np.asarray(p, dtype=float)))
        expr = expr - pd
    corner = np.zeros((dim, dim))
    corner[j, j] = 1.0
    tail = scalar_of(p_tol_i) * (1.0 / 3.0) - scalar_of(beta_i) - iota * eps_sq
    expr = expr + _scalar_times(tail, corner, dim)
    return LmiBlock(expr, name="c4a")


def _unit_diag(dim: int, t: int) -> np.ndarray:
    m = np.zeros((dim, dim), dtype=complex)
    m[t, t] = 1.0
    return m


def build_lmi_c4b(w_list, beta_i, gamma_i, kappa_i, eps_d_i, n_t: int) -> LmiBlock:
    """LMI for the BS-PU error split: [kappa*I - sum_k W_k, 0; 0, -kappa*eps_D^2 - gamma + beta]."""
    dim = n_t + 1
    top = np.zeros((dim, dim))
    top[:n_t, :n_t] = np.eye(n_t)
    expr = _scalar_times(scalar_of(kappa_i), top, dim)
    for w in w_list:
        expr = expr - _embed(_as_mat(w, n_t), dim, 0)
    corner = np.zeros((dim, dim))
    corner[n_t, n_t] = 1.0
    tail = scalar_of(beta_i) - scalar_of(gamma_i) - scalar_of(kappa_i) * float(eps_d_i) ** 2
    expr = expr + _scalar_times(tail, corner, dim)
    return LmiBlock(expr, name="c4b")


def build_lmi_c4c(mode: str, s: Scenario, *, gamma_i, tau_i, delta_i, eps_r_i,
                  w_list=None, p=None, psi=None, b_psd=None, theta=None) -> LmiBlock:
    """LMI for the IRS-PU error split.

    fixed_psi: [delta*I_M - Psi B Psi^H, 0; 0, -delta*eps_R^2 - tau + gamma]
    with B = sum_k F W_k F^H + sum_j p_j h_R h_R^H affine in (W, p).
    theta: the Psi B Psi^H block is replaced by its eigen-expansion
    sum_s lambda_s diag(u_s) [Theta^T]_MM diag(u_s)^H, affine in Theta; the
    expansion reproduces Psi B Psi^H exactly at rank-one Theta.
    """
    m = s.params.m
    dim = m + 1
    top = np.zeros((dim, dim))
    top[:m, :m] = np.eye(m)
    expr = _scalar_times(scalar_of(delta_i), top, dim)

    if mode == "fixed_psi":
        psi_vec = np.exp(1j * np.asarray(psi, dtype=float))
        pf = psi_vec[:, None] * s.f                      # Psi @ F
        place = np.zeros((dim, m))
        place[:m, :] = np.eye(m)
        for k, w in enumerate(w_list if w_list is not None else []):
            wmat = _as_mat(w, s.params.n_t)
            expr = expr - _embed(wmat.conjugate_by(pf), dim, 0)
        if s.params.j_ul:
            if isinstance(p, str):
                mats = []
                for j in range(s.params.j_ul):
                    ph = psi_vec * s.h_r[j]
                    mj = np.zeros((dim, dim), dtype=complex)
                    mj[:m, :m] = -np.outer(ph, ph.conj())
                    mats.append(mj)
                expr = expr + MatAffine(dim, atoms=[("lin", p, np.stack(mats))])
            else:
                parr = np.atleast_1d(np.asarray(p, dtype=float))
                acc = np.zeros((dim, dim), dtype=complex)
                for j in range(s.params.j_ul):
                    ph = psi_vec * s.h_r[j]
                    acc[:m, :m] -= parr[j] * np.outer(ph, ph.conj())
                expr = expr + acc
    elif mode == "theta":
        b = np.asarray(b_psd, dtype=complex)
        if np.abs(b - b.conj().T).max(initial=0.0) > 1e-9 * max(1.0, np.abs(b).max(initial=0.0)):
            raise InvalidInputError("B must be Hermitian")
        lam, vecs = np.linalg.eigh(b)
        if lam.min(initial=0.0) < -PSD_TOL * max(1.0, lam.max(initial=0.0)):
            raise InvalidInputError("B must be PSD in theta mode")
        lam = np.clip(lam, 0.0, None)
        for sidx in range(len(lam)):
            if lam[sidx] <= 0.0:
                continue
            u = vecs[:, sidx]
            left = np.zeros((dim, dim), dtype=complex)
            left[:m, :m] = np.diag(u)
            right = np.zeros((dim, dim), dtype=complex)
            right[:m, :m] = np.diag(u.conj())
            if isinstance(theta, str):
                expr = expr + MatAffine(dim, atoms=[("sand", theta, -lam[sidx] * left, right, True)])
            else:
                th = np.asarray(theta, dtype=complex)
                expr = expr - lam[sidx] * (left @ th.T @ right)
    else:
        raise InvalidInputError(f"unknown mode {mode!r}")

    corner = np.zeros((dim, dim))
    corner[m, m] = 1.0
    tail = scalar_of(gamma_i) - scalar_of(tau_i) - scalar_of(delta_i) * float(eps_r_i) ** 2
    expr = expr + _scalar_times(tail, corner, dim)
    return LmiBlock(expr, name=f"c4c_{mode}")


def c4d_constraint(mode: str, s: Scenario, *, tau_i, w_list=None, p=None, psi=None,
                   theta=None, w_fixed=None, p_fixed=None, i: int = 0,
                   lift=None) -> AffineScalar:
    """Affine expression LHS - tau_i whose nonpositivity is the nominal-leakage split.

    fixed_psi: sum_k Tr(l_hat l_hat^H W_k) + sum_j p_j |theta_e|^2 - tau.
    theta: sum_k Tr(Theta L_i W_k L_i^H) + sum_j p_j Tr(Theta P_ij) - tau.
    """
    n_t = s.params.n_t
    if mode == "fixed_psi":
        psi_vec = np.exp(1j * np.asarray(psi, dtype=float))
        l_hat = s.l_d_hat[i] + s.f.conj().T @ (psi_vec.conj() * s.l_r_hat[i])
        kern = np.outer(l_hat, l_hat.conj())
        out = AffineScalar()
        for w in (w_list if w_list is not None else []):
            out = out + trace_of(w, kern, n_t)
        for j in range(s.params.j_ul):
            weight = abs(s.e_hat[i, j] + np.vdot(s.l_r_hat[i], psi_vec * s.h_r[j])) ** 2
            out = out + scalar_entry(p, j, s.params.j_ul) * weight
        return out - scalar_of(tau_i)
    if mode == "theta":
        from .lifting import LiftData
        ld: LiftData = lift
        out = AffineScalar()
        for k in range(s.params.k_dl):
            kern = ld.l_lift[i] @ np.asarray(w_fixed[k]) @ ld.l_lift[i].conj().T
            out = out + trace_of(theta, kern, s.params.m + 1)
        for j in range(s.params.j_ul):
            out = out + trace_of(theta, float(p_fixed[j]) * ld.p_lift[i][j], s.params.m + 1)
        return out - scalar_of(tau_i)
    raise InvalidInputError(f"unknown mode {mode!r}")


def scalar_entry(p, j: int, n: int) -> AffineScalar:
    """Entry j of a vector argument that may be a handle or numeric array."""
    if isinstance(p, str):
        coef = np.zeros(n)
        coef[j] = 1.0
        return AffineScalar(0.0, {p: coef})
    if isinstance(p, AffineScalar):
        raise InvalidInputError("pass per-entry AffineScalars explicitly")
    return AffineScalar(float(np.atleast_1d(p)[j]))


# ---------------------------------------------------------------------------
# sampling verifier
# ---------------------------------------------------------------------------

def _phase_aligned(target: np.ndarray, radius: float, reference: complex) -> np.ndarray:
    """Boundary error maximizing |reference + err^H target|."""
    nrm = np.linalg.norm(target)
    if nrm == 0.0 or radius == 0.0:
        return np.zeros_like(target)
    phase = reference / abs(reference) if abs(reference) > 0 else 1.0
    return radius * (target / nrm) * np.conj(phase) * np.sign(1.0)


def verify_robust_leakage(s: Scenario, a: Allocation, i: int, n_samples: int,
                          seed: int) -> dict:
    """Empirical certificate for the leakage constraint at PU i.

    Evaluates the true leakage at sampled error triples (always including the
    zero error and per-term worst-aligned boundary errors) and reports the
    maximum together with the violation flag against p_tol_i.
    """
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    psi_vec = np.exp(1j * a.psi)
    nt, m, j_ul = s.params.n_t, s.params.m, s.params.j_ul

    d_cands = [np.zeros(nt, dtype=complex)]
    r_cands = [np.zeros(m, dtype=complex)]
    for k in range(s.params.k_dl):
        nom = np.vdot(s.l_d_hat[i], a.w[k]) + np.vdot(psi_vec.conj() * s.l_r_hat[i], s.f @ a.w[k])
        d_cands.append(_phase_aligned(a.w[k], s.eps_d[i], nom))
        r_cands.append(_phase_aligned(psi_vec * (s.f @ a.w[k]), s.eps_r[i], nom))
    for j in range(j_ul):
        nom = s.e_hat[i, j] + np.vdot(s.l_r_hat[i], psi_vec * s.h_r[j])
        r_cands.append(_phase_aligned(psi_vec * s.h_r[j], s.eps_r[i], nom))
    w_sum = sum(np.outer(a.w[k], a.w[k].conj()) for k in range(s.params.k_dl)) \
        if s.params.k_dl else np.zeros((nt, nt))
    if s.params.k_dl and s.eps_d[i] > 0:
        top = np.linalg.eigh(0.5 * (w_sum + w_sum.conj().T))[1][:, -1]
        d_cands += [s.eps_d[i] * top, -s.eps_d[i] * top]
    b = coupling_matrix(s, a.w, a.p)
    if s.eps_r[i] > 0 and np.abs(b).max(initial=0.0) > 0:
        top = np.linalg.eigh(psi_vec[:, None] * b * psi_vec.conj()[None, :])[1][:, -1]
        r_cands += [s.eps_r[i] * top, -s.eps_r[i] * top]

    def aligned_e(dl_r: np.ndarray) -> np.ndarray:
        err = np.zeros(j_ul, dtype=complex)
        for j in range(j_ul):
            ref = s.e_hat[i, j] + np.vdot(s.l_r_hat[i] + dl_r, psi_vec * s.h_r[j])
            err[j] = s.eps_e[i, j] * (ref / abs(ref) if abs(ref) > 0 else 1.0)
        return err

    from .model import _uniform_ball

    max_leak = -np.inf
    count = 0
    for dd in d_cands:
        for dr in r_cands:
            ch = {"l_d": s.l_d_hat[i] + dd, "l_r": s.l_r_hat[i] + dr,
                  "e": s.e_hat[i] + aligned_e(dr)}
            max_leak = max(max_leak, interference_leakage(s, a, ch, i))
            count += 1
    while count < n_samples:
        dd = _uniform_ball(rng, nt, s.eps_d[i])
        dr = _uniform_ball(rng, m, s.eps_r[i])
        de = np.array([_uniform_ball(rng, 1, s.eps_e[i, j])[0] for j in range(j_ul)])
        ch = {"l_d": s.l_d_hat[i] + dd, "l_r": s.l_r_hat[i] + dr, "e": s.e_hat[i] + de}
        max_leak = max(max_leak, interference_leakage(s, a, ch, i))
        count += 1
    return {"max_leak": float(max_leak), "violated": bool(max_leak > s.params.p_tol[i])}
