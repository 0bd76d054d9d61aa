"""Physical scenario model: channels, CSI uncertainty, and performance metrics.

All quantities are kept in linear units (watts, linear channel gains); dB/dBm
values are converted once at the config boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

# Reference path-loss constants at d = 1 m, linear scale.
C_DIRECT = 1e-4          # -40 dB
C_REFLECT = 1e-8         # -80 dB (end-to-end product of both hops)
C_SEGMENT = 1e-4         # per-hop share so that the two hops multiply to C_REFLECT
ALPHA_BU = 3.9           # BS/user direct paths
ALPHA_BR = 2.1           # BS-IRS hop
ALPHA_RU = 2.3           # IRS-user hop


def db2lin(x_db: float) -> float:
    return 10.0 ** (x_db / 10.0)


def dbm2w(x_dbm: float) -> float:
    return 10.0 ** ((x_dbm - 30.0) / 10.0)


def w2dbm(x_w: float) -> float:
    return 10.0 * np.log10(x_w) + 30.0


class InvalidInputError(ValueError):
    """Raised when an operation precondition is violated."""


@dataclass
class SystemParams:
    """Scalar system parameters in linear units."""

    n_t: int
    m: int
    i_pu: int
    j_ul: int
    k_dl: int
    p_max_dl: float                 # W
    p_max_ul: np.ndarray            # (J,) W
    p_tol: np.ndarray               # (I,) W
    eta: float                      # residual-SI coefficient, linear
    sigma2_ul: float                # W per BS antenna
    sigma2_dl: np.ndarray           # (K,) W
    weights_ul: np.ndarray          # (J,)
    weights_dl: np.ndarray          # (K,)

    def __post_init__(self):
        self.p_max_ul = np.atleast_1d(np.asarray(self.p_max_ul, dtype=float))
        self.p_tol = np.atleast_1d(np.asarray(self.p_tol, dtype=float))
        self.sigma2_dl = np.atleast_1d(np.asarray(self.sigma2_dl, dtype=float))
        self.weights_ul = np.atleast_1d(np.asarray(self.weights_ul, dtype=float))
        self.weights_dl = np.atleast_1d(np.asarray(self.weights_dl, dtype=float))
        if self.n_t < 1 or self.m < 1:
            raise InvalidInputError("n_t and m must be >= 1")
        if self.n_t < self.j_ul:
            raise InvalidInputError("need n_t >= j_ul for UL detection")
        if self.p_max_dl <= 0 or np.any(self.p_max_ul <= 0) or np.any(self.p_tol <= 0):
            raise InvalidInputError("powers must be strictly positive")
        if not (0.0 < self.eta < 1.0):
            raise InvalidInputError("eta must lie in (0, 1)")
        if self.sigma2_ul <= 0 or np.any(self.sigma2_dl <= 0):
            raise InvalidInputError("noise powers must be strictly positive")
        if np.any(self.weights_ul < 0) or np.any(self.weights_dl < 0):
            raise InvalidInputError("weights must be nonnegative")
        for name, arr, n in (("p_max_ul", self.p_max_ul, self.j_ul),
                             ("p_tol", self.p_tol, self.i_pu),
                             ("sigma2_dl", self.sigma2_dl, self.k_dl),
                             ("weights_ul", self.weights_ul, self.j_ul),
                             ("weights_dl", self.weights_dl, self.k_dl)):
            if arr.shape != (n,):
                raise InvalidInputError(f"{name} must have shape ({n},)")


@dataclass
class ScenarioConfig:
    """Config-boundary description of a scenario; powers in dBm, gains in dB."""

    n_t: int = 4
    m: int = 4
    i_pu: int = 2
    j_ul: int = 3
    k_dl: int = 2
    p_max_dl_dbm: float = 30.0
    p_max_ul_dbm: float = 10.0
    p_tol_dbm: float = -90.0
    eta_db: float = -85.0
    sigma2_ul_dbm: float = -110.0
    sigma2_dl_dbm: float = -100.0
    weight_ul: float = 1.0
    weight_dl: float = 1.0
    upsilon2: float = 0.1           # normalized CSI error bound
    rician_db: float = 5.0
    cell_radius: float = 50.0       # m, sector radius
    bs_irs_dist: float = 50.0       # m
    min_dist: float = 5.0           # m, closest user placement
    sector_half_angle: float = np.pi / 3.0

    def params(self) -> SystemParams:
        return SystemParams(
            n_t=self.n_t, m=self.m, i_pu=self.i_pu, j_ul=self.j_ul, k_dl=self.k_dl,
            p_max_dl=dbm2w(self.p_max_dl_dbm),
            p_max_ul=np.full(self.j_ul, dbm2w(self.p_max_ul_dbm)),
            p_tol=np.full(self.i_pu, dbm2w(self.p_tol_dbm)),
            eta=db2lin(self.eta_db),
            sigma2_ul=dbm2w(self.sigma2_ul_dbm),
            sigma2_dl=np.full(self.k_dl, dbm2w(self.sigma2_dl_dbm)),
            weights_ul=np.full(self.j_ul, self.weight_ul),
            weights_dl=np.full(self.k_dl, self.weight_dl),
        )


@dataclass
class Scenario:
    """One channel realization plus PU CSI estimates and their uncertainty."""

    params: SystemParams
    f: np.ndarray                   # (M, N_T) BS -> IRS
    h_d: np.ndarray                 # (J, N_T) UL user -> BS, direct
    h_r: np.ndarray                 # (J, M) UL user -> IRS
    g_d: np.ndarray                 # (K, N_T) BS -> DL user, direct
    g_r: np.ndarray                 # (K, M) IRS -> DL user
    s_si: np.ndarray                # (N_T, N_T) self-interference channel
    q: np.ndarray                   # (J, K) UL user -> DL user cross gains
    l_d_hat: np.ndarray             # (I, N_T) BS -> PU estimates
    l_r_hat: np.ndarray             # (I, M) IRS -> PU estimates
    e_hat: np.ndarray               # (I, J) UL user -> PU estimates
    eps_d: np.ndarray               # (I,)
    eps_r: np.ndarray               # (I,)
    eps_e: np.ndarray               # (I, J)
    l_d_true: np.ndarray            # held out, verification only
    l_r_true: np.ndarray
    e_true: np.ndarray
    geometry: dict = field(default_factory=dict)

    def true_pu_channels(self, i: int) -> dict:
        return {"l_d": self.l_d_true[i], "l_r": self.l_r_true[i], "e": self.e_true[i]}

    def estimated_pu_channels(self, i: int) -> dict:
        return {"l_d": self.l_d_hat[i], "l_r": self.l_r_hat[i], "e": self.e_hat[i]}


@dataclass
class Allocation:
    """Resource-allocation decision variables."""

    w: np.ndarray                   # (K, N_T) DL beamformers
    p: np.ndarray                   # (J,) UL powers, W
    v: np.ndarray                   # (J, N_T) receive combiners
    psi: np.ndarray                 # (M,) IRS phases in [-pi, pi]

    def psi_mat(self) -> np.ndarray:
        return np.diag(np.exp(1j * self.psi))


def path_loss(kind: str, *dists: float) -> float:
    """Linear power path loss.

    direct: c_D * d^-alpha_BU ; reflected: c_R * d_BR^-alpha_BR * d_RU^-alpha_RU.
    """
    if any(d <= 0 for d in dists):
        raise InvalidInputError("distances must be positive")
    if kind == "direct":
        (d,) = dists
        return C_DIRECT * d ** (-ALPHA_BU)
    if kind == "reflected":
        d_br, d_ru = dists
        return C_REFLECT * d_br ** (-ALPHA_BR) * d_ru ** (-ALPHA_RU)
    raise InvalidInputError(f"unknown path-loss kind {kind!r}")


def _cn(rng: np.random.Generator, *shape: int) -> np.ndarray:
    """i.i.d. circularly-symmetric complex Gaussian, unit variance."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def _steering(n: int, angle: float) -> np.ndarray:
    return np.exp(1j * angle * np.arange(n))


def _rician_matrix(rng: np.random.Generator, rows: int, cols: int, kappa: float) -> np.ndarray:
    """Rician fading: deterministic ULA-steering LoS plus Rayleigh scatter."""
    a_rx = _steering(rows, rng.uniform(0.0, 2.0 * np.pi))
    a_tx = _steering(cols, rng.uniform(0.0, 2.0 * np.pi))
    los = np.outer(a_rx, a_tx.conj())
    nlos = _cn(rng, rows, cols)
    return np.sqrt(kappa / (1.0 + kappa)) * los + np.sqrt(1.0 / (1.0 + kappa)) * nlos


def _rician_vector(rng: np.random.Generator, n: int, kappa: float) -> np.ndarray:
    a = _steering(n, rng.uniform(0.0, 2.0 * np.pi))
    return np.sqrt(kappa / (1.0 + kappa)) * a + np.sqrt(1.0 / (1.0 + kappa)) * _cn(rng, n)


def _uniform_ball(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    """Uniform draw from the complex n-dim ball of the given radius."""
    direction = _cn(rng, n)
    nrm = np.linalg.norm(direction)
    if nrm == 0.0:
        return np.zeros(n, dtype=complex)
    r = radius * rng.uniform() ** (1.0 / (2 * n))
    return (r / nrm) * direction


def _sector_positions(rng: np.random.Generator, n: int, cfg: ScenarioConfig) -> np.ndarray:
    """Area-uniform positions in the sector facing the IRS, BS at the origin."""
    r0sq, r1sq = cfg.min_dist ** 2, cfg.cell_radius ** 2
    r = np.sqrt(rng.uniform(r0sq, r1sq, size=n))
    phi = rng.uniform(-cfg.sector_half_angle, cfg.sector_half_angle, size=n)
    return np.stack([r * np.cos(phi), r * np.sin(phi)], axis=1)


def generate_scenario(config: ScenarioConfig, seed: int) -> Scenario:
    """Draw one deterministic scenario for the given seed.

    Direct paths are Rayleigh, reflected hops Rician; true PU channels are
    sampled uniformly inside the uncertainty balls around the estimates with
    eps^2 = upsilon^2 * ||estimate||^2.
    """
    rng = np.random.default_rng(seed)
    params = config.params()
    nt, m = config.n_t, config.m
    i_pu, j_ul, k_dl = config.i_pu, config.j_ul, config.k_dl
    kappa = db2lin(config.rician_db)

    irs_pos = np.array([config.bs_irs_dist, 0.0])
    pos_pu = _sector_positions(rng, i_pu, config)
    pos_ul = _sector_positions(rng, j_ul, config)
    pos_dl = _sector_positions(rng, k_dl, config)

    def d_bs(p):
        return np.linalg.norm(p)

    def d_irs(p):
        return np.linalg.norm(p - irs_pos)

    # BS-IRS hop, shared by every reflected path
    f = np.sqrt(C_SEGMENT * config.bs_irs_dist ** (-ALPHA_BR)) * _rician_matrix(rng, m, nt, kappa)

    def direct_vec(p, n):
        return np.sqrt(C_DIRECT * d_bs(p) ** (-ALPHA_BU)) * _cn(rng, n)

    def reflected_vec(p):
        return np.sqrt(C_SEGMENT * d_irs(p) ** (-ALPHA_RU)) * _rician_vector(rng, m, kappa)

    h_d = np.stack([direct_vec(pos_ul[j], nt) for j in range(j_ul)]) if j_ul else np.zeros((0, nt), complex)
    h_r = np.stack([reflected_vec(pos_ul[j]) for j in range(j_ul)]) if j_ul else np.zeros((0, m), complex)
    g_d = np.stack([direct_vec(pos_dl[k], nt) for k in range(k_dl)]) if k_dl else np.zeros((0, nt), complex)
    g_r = np.stack([reflected_vec(pos_dl[k]) for k in range(k_dl)]) if k_dl else np.zeros((0, m), complex)
    s_si = _cn(rng, nt, nt)          # near-field, unit variance; eta absorbs cancellation

    # user-to-user direct scalars
    def direct_scalar(pa, pb):
        d = max(np.linalg.norm(pa - pb), config.min_dist)
        return np.sqrt(C_DIRECT * d ** (-ALPHA_BU)) * _cn(rng)

    q = np.array([[direct_scalar(pos_ul[j], pos_dl[k]) for k in range(k_dl)]
                  for j in range(j_ul)]).reshape(j_ul, k_dl)
    l_d_hat = np.stack([direct_vec(pos_pu[i], nt) for i in range(i_pu)])
    l_r_hat = np.stack([reflected_vec(pos_pu[i]) for i in range(i_pu)])
    e_hat = np.array([[direct_scalar(pos_ul[j], pos_pu[i]) for j in range(j_ul)]
                      for i in range(i_pu)]).reshape(i_pu, j_ul)

    ups = np.sqrt(config.upsilon2)
    eps_d = ups * np.linalg.norm(l_d_hat, axis=1)
    eps_r = ups * np.linalg.norm(l_r_hat, axis=1)
    eps_e = ups * np.abs(e_hat)

    l_d_true = l_d_hat + np.stack([_uniform_ball(rng, nt, eps_d[i]) for i in range(i_pu)])
    l_r_true = l_r_hat + np.stack([_uniform_ball(rng, m, eps_r[i]) for i in range(i_pu)])
    e_true = e_hat + np.array([[_uniform_ball(rng, 1, eps_e[i, j])[0] for j in range(j_ul)]
                               for i in range(i_pu)]).reshape(i_pu, j_ul)

    geometry = {
        "irs_pos": irs_pos, "pos_pu": pos_pu, "pos_ul": pos_ul, "pos_dl": pos_dl,
        "d_bs_pu": np.array([d_bs(p) for p in pos_pu]),
        "d_irs_pu": np.array([d_irs(p) for p in pos_pu]),
    }
    return Scenario(params=params, f=f, h_d=h_d, h_r=h_r, g_d=g_d, g_r=g_r, s_si=s_si,
                    q=q, l_d_hat=l_d_hat, l_r_hat=l_r_hat, e_hat=e_hat,
                    eps_d=eps_d, eps_r=eps_r, eps_e=eps_e,
                    l_d_true=l_d_true, l_r_true=l_r_true, e_true=e_true,
                    geometry=geometry)


# ---------------------------------------------------------------------------
# performance metrics
# ---------------------------------------------------------------------------

def dl_effective_channel(s: Scenario, psi: np.ndarray, k: int) -> np.ndarray:
    """g_hat_k = g_D,k + F^H Psi^H g_R,k so that the DL gain is g_hat_k^H w."""
    psi_vec = np.exp(1j * psi)
    return s.g_d[k] + s.f.conj().T @ (np.conj(psi_vec) * s.g_r[k])


def ul_effective_channel(s: Scenario, psi: np.ndarray, j: int) -> np.ndarray:
    """h_hat_j = h_D,j + F^H Psi h_R,j so that the UL gain is v^H h_hat_j."""
    psi_vec = np.exp(1j * psi)
    return s.h_d[j] + s.f.conj().T @ (psi_vec * s.h_r[j])


def dl_sinr(s: Scenario, a: Allocation, k: int) -> float:
    """Receive SINR of DL user k."""
    psi_vec = np.exp(1j * a.psi)
    gains = np.array([np.vdot(s.g_d[k], a.w[r]) + np.vdot(psi_vec.conj() * s.g_r[k], s.f @ a.w[r])
                      for r in range(s.params.k_dl)])
    desired = abs(gains[k]) ** 2
    mui = float(np.sum(np.abs(gains) ** 2) - desired)
    cci = sum(a.p[j] * abs(s.q[j, k] + np.vdot(s.g_r[k], psi_vec * s.h_r[j])) ** 2
              for j in range(s.params.j_ul))
    return desired / (mui + cci + s.params.sigma2_dl[k])


def residual_si(s: Scenario, a: Allocation, j: int) -> float:
    """Approximated residual self-interference eta*Tr(v v^H Diag(sum_k S w_k w_k^H S^H))."""
    sw = s.s_si @ a.w.T                      # (N_T, K)
    diag = np.sum(np.abs(sw) ** 2, axis=1)   # Diag(sum_k S W_k S^H)
    return float(s.params.eta * np.sum(np.abs(a.v[j]) ** 2 * diag))


def residual_si_full(s: Scenario, a: Allocation, j: int) -> float:
    """Four-term residual SI including the IRS-reflected components."""
    psi_vec = np.exp(1j * a.psi)
    t = s.s_si + s.f.conj().T @ (psi_vec[:, None] * s.f)
    tw = t @ a.w.T
    diag = np.sum(np.abs(tw) ** 2, axis=1)
    return float(s.params.eta * np.sum(np.abs(a.v[j]) ** 2 * diag))


def ul_sinr(s: Scenario, a: Allocation, j: int) -> float:
    """Receive SINR of UL user j at the BS."""
    if not np.any(a.v[j]):
        raise InvalidInputError("receive combiner v_j must be nonzero")
    psi_vec = np.exp(1j * a.psi)
    gains = np.array([np.vdot(a.v[j], s.h_d[t]) + np.vdot(a.v[j], s.f.conj().T @ (psi_vec * s.h_r[t]))
                      for t in range(s.params.j_ul)])
    desired = a.p[j] * abs(gains[j]) ** 2
    inter = float(np.sum(a.p * np.abs(gains) ** 2) - a.p[j] * abs(gains[j]) ** 2)
    noise = s.params.sigma2_ul * float(np.linalg.norm(a.v[j]) ** 2)
    return desired / (inter + residual_si(s, a, j) + noise)


def weighted_sum_rate(s: Scenario, a: Allocation) -> float:
    """Objective of the allocation problem: sum of weighted log2(1 + SINR)."""
    rate = 0.0
    for j in range(s.params.j_ul):
        if s.params.weights_ul[j] > 0.0:
            rate += s.params.weights_ul[j] * np.log2(1.0 + ul_sinr(s, a, j))
    for k in range(s.params.k_dl):
        if s.params.weights_dl[k] > 0.0:
            rate += s.params.weights_dl[k] * np.log2(1.0 + dl_sinr(s, a, k))
    return float(rate)


def per_user_rates(s: Scenario, a: Allocation) -> tuple[np.ndarray, np.ndarray]:
    ul = np.array([np.log2(1.0 + ul_sinr(s, a, j)) if np.any(a.v[j]) and a.p[j] > 0 else 0.0
                   for j in range(s.params.j_ul)])
    dl = np.array([np.log2(1.0 + dl_sinr(s, a, k)) for k in range(s.params.k_dl)])
    return ul, dl


def interference_leakage(s: Scenario, a: Allocation, pu_channels: dict, i: int) -> float:
    """Total power deposited at PU i, evaluated at the supplied PU channels."""
    l_d, l_r, e = pu_channels["l_d"], pu_channels["l_r"], pu_channels["e"]
    psi_vec = np.exp(1j * a.psi)
    leak = 0.0
    for k in range(s.params.k_dl):
        leak += abs(np.vdot(l_d, a.w[k]) + np.vdot(psi_vec.conj() * l_r, s.f @ a.w[k])) ** 2
    for j in range(s.params.j_ul):
        leak += a.p[j] * abs(e[j] + np.vdot(l_r, psi_vec * s.h_r[j])) ** 2
    return float(leak)


def rescale_scenario(s: Scenario, seg_gain: float) -> Scenario:
    """Unit-rescaled copy used to condition solver inputs.

    Every received path is the product of at most two channel segments, so a
    uniform equivalence transform must scale the IRS-side segments (F and the
    user/PU-to-IRS vectors, plus their error radii) by b, the direct channels
    and user-to-user scalars by b^2, and all noise powers and leakage
    tolerances by b^4.  SINRs, rates and the feasible set of (w, p, psi) are
    then invariant; powers stay in watts.
    """
    b = seg_gain
    b2, b4 = b ** 2, b ** 4
    p = s.params
    params = SystemParams(
        n_t=p.n_t, m=p.m, i_pu=p.i_pu, j_ul=p.j_ul, k_dl=p.k_dl,
        p_max_dl=p.p_max_dl, p_max_ul=p.p_max_ul.copy(),
        p_tol=p.p_tol * b4, eta=p.eta,
        sigma2_ul=p.sigma2_ul * b4, sigma2_dl=p.sigma2_dl * b4,
        weights_ul=p.weights_ul.copy(), weights_dl=p.weights_dl.copy(),
    )
    return Scenario(
        params=params, f=s.f * b, h_d=s.h_d * b2, h_r=s.h_r * b, g_d=s.g_d * b2,
        g_r=s.g_r * b, s_si=s.s_si * b2, q=s.q * b2,
        l_d_hat=s.l_d_hat * b2, l_r_hat=s.l_r_hat * b, e_hat=s.e_hat * b2,
        eps_d=s.eps_d * b2, eps_r=s.eps_r * b, eps_e=s.eps_e * b2,
        l_d_true=s.l_d_true * b2, l_r_true=s.l_r_true * b, e_true=s.e_true * b2,
        geometry=s.geometry,
    )


# ---------------------------------------------------------------------------
# JSON serialization (complex arrays as [re, im] pairs)
# ---------------------------------------------------------------------------

_COMPLEX_FIELDS = ("f", "h_d", "h_r", "g_d", "g_r", "s_si", "q",
                   "l_d_hat", "l_r_hat", "e_hat", "l_d_true", "l_r_true", "e_true")
_REAL_FIELDS = ("eps_d", "eps_r", "eps_e")


def _c2pairs(arr: np.ndarray):
    return np.stack([arr.real, arr.imag], axis=-1).tolist()


def _pairs2c(data) -> np.ndarray:
    arr = np.asarray(data, dtype=float)
    return arr[..., 0] + 1j * arr[..., 1]


def scenario_to_json(s: Scenario) -> str:
    doc = {"params": {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                      for k, v in asdict(s.params).items()}}
    for name in _COMPLEX_FIELDS:
        doc[name] = _c2pairs(getattr(s, name))
    for name in _REAL_FIELDS:
        doc[name] = getattr(s, name).tolist()
    return json.dumps(doc, sort_keys=True)


def scenario_from_json(text: str) -> Scenario:
    doc = json.loads(text)
    pr = doc["params"]
    params = SystemParams(
        n_t=pr["n_t"], m=pr["m"], i_pu=pr["i_pu"], j_ul=pr["j_ul"], k_dl=pr["k_dl"],
        p_max_dl=pr["p_max_dl"], p_max_ul=np.array(pr["p_max_ul"]),
        p_tol=np.array(pr["p_tol"]), eta=pr["eta"], sigma2_ul=pr["sigma2_ul"],
        sigma2_dl=np.array(pr["sigma2_dl"]), weights_ul=np.array(pr["weights_ul"]),
        weights_dl=np.array(pr["weights_dl"]),
    )
    fields = {name: _pairs2c(doc[name]) for name in _COMPLEX_FIELDS}
    fields.update({name: np.asarray(doc[name], dtype=float) for name in _REAL_FIELDS})
    return Scenario(params=params, geometry={}, **fields)
