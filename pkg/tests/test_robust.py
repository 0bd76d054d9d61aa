import numpy as np
import pytest

from conftest import desk_config, random_allocation, tiny_config
from fdcr.conic import AffineScalar, InvalidInputError
from fdcr.model import (Allocation, generate_scenario, interference_leakage,
                        rescale_scenario)
from fdcr import robust
from fdcr.robust import (SlackSet, ball_maxima, build_lmi_c4a, build_lmi_c4b,
                         build_lmi_c4c, c4d_constraint, canonical_slacks,
                         coupling_matrix, safe_leakage_bound,
                         split_bound_feasible, verify_robust_leakage)


def scaled_scenario(seed=7, cfg=None):
    s = generate_scenario(cfg or desk_config(), seed)
    return rescale_scenario(s, (3.0 / s.params.p_tol.min()) ** 0.25)


# ---------------------------------------------------------------------------
# slack set
# ---------------------------------------------------------------------------

def test_slack_set_validation():
    ok = SlackSet(beta=np.ones(2), gamma=np.ones(2), tau=np.ones(2),
                  delta=np.zeros(2), iota=np.zeros(2), kappa=np.zeros(2))
    assert np.all(ok.delta >= 0)
    with pytest.raises(InvalidInputError):
        SlackSet(beta=np.ones(2), gamma=np.ones(2), tau=np.ones(2),
                 delta=np.array([-1.0, 0.0]), iota=np.zeros(2), kappa=np.zeros(2))
    with pytest.raises(InvalidInputError):
        SlackSet(beta=np.array([np.inf, 0.0]), gamma=np.ones(2), tau=np.ones(2),
                 delta=np.zeros(2), iota=np.zeros(2), kappa=np.zeros(2))


# ---------------------------------------------------------------------------
# safe bound
# ---------------------------------------------------------------------------

def test_zero_radius_collapses_to_three_times_nominal():
    s = scaled_scenario(cfg=desk_config(upsilon2=0.0))
    a = random_allocation(s, seed=1, power_scale=1e-6)
    for i in range(s.params.i_pu):
        nominal = interference_leakage(s, a, s.estimated_pu_channels(i), i)
        assert safe_leakage_bound(s, a, i) == pytest.approx(3 * nominal, rel=1e-9)


def test_equal_terms_make_split_tight():
    # single PU, single DL stream with |a| = |b| = |c|: bound / true = 3
    cfg = tiny_config(j_ul=0, k_dl=1, n_t=1, m=1)
    s = generate_scenario(cfg, 0)
    s.l_d_hat = np.array([[1.0 + 0j]])
    s.l_r_hat = np.array([[0.0 + 0j]])
    s.eps_d = np.array([1.0])
    s.eps_r = np.array([0.0])
    a = Allocation(w=np.array([[1.0 + 0j]]), p=np.zeros(0),
                   v=np.zeros((0, 1), complex), psi=np.zeros(1))
    # terms: eps_D^2 ||w||^2 = 1, eps_R part 0... use aligned error to make
    # |Delta^H w| = |nominal| and the reflected term zero
    bound = safe_leakage_bound(s, a, 0)
    worst_true = interference_leakage(
        s, a, {"l_d": s.l_d_hat[0] + np.array([1.0 + 0j]),
               "l_r": s.l_r_hat[0], "e": np.zeros(0)}, 0)
    assert bound == pytest.approx(3 * 2.0)          # 3 (eps^2||w||^2 + nominal)
    assert worst_true == pytest.approx(4.0)         # |1 + 1|^2


def test_bound_matches_per_term_supremum_oracle():
    """Monte-Carlo supremum oracle: each split term's max over its own ball,
    sampling random boundary errors plus the aligned worst direction."""
    s = scaled_scenario(seed=5)
    a = random_allocation(s, seed=2, power_scale=1e-4)
    rng = np.random.default_rng(0)
    psi_vec = np.exp(1j * a.psi)
    i = 0
    n = 20000

    def ball_dirs(dim, radius):
        d = rng.standard_normal((n, dim)) + 1j * rng.standard_normal((n, dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return radius * d

    def term_max(dirs, target, radius):
        vals = np.abs(dirs.conj() @ target) ** 2
        nrm = np.linalg.norm(target)
        aligned = abs((radius * target / nrm).conj() @ target) ** 2 if nrm > 0 else 0.0
        return max(float(vals.max()), float(aligned))

    total = 0.0
    random_only = 0.0
    dirs_d = ball_dirs(s.params.n_t, s.eps_d[i])
    dirs_r = ball_dirs(s.params.m, s.eps_r[i])
    for k in range(s.params.k_dl):
        nominal = abs(np.vdot(s.l_d_hat[i], a.w[k])
                      + np.vdot(psi_vec.conj() * s.l_r_hat[i], s.f @ a.w[k])) ** 2
        total += term_max(dirs_d, a.w[k], s.eps_d[i]) + nominal
        total += term_max(dirs_r, psi_vec * (s.f @ a.w[k]), s.eps_r[i])
        random_only += (np.abs(dirs_d.conj() @ a.w[k]) ** 2).max() + nominal
        random_only += (np.abs(dirs_r.conj() @ (psi_vec * (s.f @ a.w[k]))) ** 2).max()
    for j in range(s.params.j_ul):
        nominal = abs(s.e_hat[i, j] + np.vdot(s.l_r_hat[i], psi_vec * s.h_r[j])) ** 2
        tr = term_max(dirs_r, psi_vec * s.h_r[j], s.eps_r[i])
        total += a.p[j] * (s.eps_e[i, j] ** 2 + tr + nominal)
        random_only += a.p[j] * (s.eps_e[i, j] ** 2 + nominal
                                 + (np.abs(dirs_r.conj() @ (psi_vec * s.h_r[j])) ** 2).max())
    bound = safe_leakage_bound(s, a, i)
    assert bound == pytest.approx(3 * total, rel=1e-9)
    # pure random sampling approaches the supremum from below
    assert 3 * random_only <= bound * (1 + 1e-12)
    assert 3 * random_only >= bound * (1 - 0.05)


def test_canonical_slack_decomposition_equivalence():
    """C-bar-4 holds iff the canonical slacks satisfy the split chain."""
    s = scaled_scenario(seed=9)
    for seed, scale in [(1, 1e-6), (2, 1e-3), (3, 1.0)]:
        a = random_allocation(s, seed=seed, power_scale=scale)
        for i in range(s.params.i_pu):
            beta, gamma, tau = canonical_slacks(s, a, i)
            e_max, d_max, r_max = ball_maxima(s, a, i)
            chain_ok = (e_max + beta <= s.params.p_tol[i] / 3.0 + 1e-15
                        and gamma + d_max <= beta + 1e-15
                        and tau + r_max <= gamma + 1e-15)
            assert chain_ok == split_bound_feasible(s, a, i)


# ---------------------------------------------------------------------------
# LMI builders
# ---------------------------------------------------------------------------

def test_c4a_hand_eigenvalue_case():
    blk = build_lmi_c4a(np.array([1.0]), 0.5, 1.0, np.array([0.5]), 3.0)
    mat = blk.eval({})
    assert mat.shape == (2, 2)
    # [iota - p, 0; 0, -iota eps^2 - beta + p_tol/3] = diag(0, 0.25)
    assert np.allclose(np.sort(np.linalg.eigvalsh(mat)), [0.0, 0.25], atol=1e-12)


def test_c4a_boundary_and_negative_cases():
    zero = build_lmi_c4a(np.array([0.0]), 1.0, 0.0, np.array([0.7]), 3.0)
    assert np.allclose(zero.eval({}), np.zeros((2, 2)))
    bad = build_lmi_c4a(np.array([2.0]), 0.0, 1.0, np.array([0.1]), 3.0)
    assert np.linalg.eigvalsh(bad.eval({})).min() < 0       # iota < max p
    with pytest.raises(InvalidInputError):
        build_lmi_c4a(np.array([1.0]), 0.0, -1.0, np.array([0.1]), 3.0)


def test_c4b_block_cases():
    n = 3
    zero = build_lmi_c4b([np.zeros((n, n))], 0.7, 0.7, 0.0, 0.5, n)
    assert np.allclose(zero.eval({}), np.zeros((n + 1, n + 1)))
    # single W = I، kappa = 1: top block zero; PSD iff beta - gamma >= eps^2
    eps = 0.4
    good = build_lmi_c4b([np.eye(n)], beta_i=1.0, gamma_i=1.0 - eps ** 2 - 0.01,
                         kappa_i=1.0, eps_d_i=eps, n_t=n)
    assert np.linalg.eigvalsh(good.eval({})).min() >= -1e-12
    tight = build_lmi_c4b([np.eye(n)], beta_i=1.0, gamma_i=1.0 - eps ** 2 + 0.01,
                          kappa_i=1.0, eps_d_i=eps, n_t=n)
    assert np.linalg.eigvalsh(tight.eval({})).min() < 0
    small_kappa = build_lmi_c4b([np.eye(n)], 1.0, 0.0, 0.5, eps, n)
    assert np.linalg.eigvalsh(small_kappa.eval({})).min() == pytest.approx(-0.5)


def test_c4c_scalar_hand_case():
    # M = 1, B = 2, delta = 3 -> top-left entry 1 (|Psi| = 1)
    cfg = tiny_config(m=1, j_ul=1, k_dl=1, n_t=1)
    s = generate_scenario(cfg, 0)
    s.f = np.array([[np.sqrt(2.0) + 0j]])
    s.h_r = np.zeros((1, 1), complex)
    blk = build_lmi_c4c("fixed_psi", s, gamma_i=0.0, tau_i=0.0, delta_i=3.0,
                        eps_r_i=0.0, w_list=[np.eye(1)], p=np.zeros(1),
                        psi=np.array([0.3]))
    mat = blk.eval({})
    assert mat[0, 0] == pytest.approx(1.0)


def test_c4c_b_zero_case():
    cfg = tiny_config(m=2, j_ul=1, k_dl=1, n_t=2)
    s = generate_scenario(cfg, 1)
    blk = build_lmi_c4c("fixed_psi", s, gamma_i=1.0, tau_i=0.2, delta_i=0.5,
                        eps_r_i=1.0, w_list=[np.zeros((2, 2))], p=np.zeros(1),
                        psi=np.zeros(2))
    # PSD iff delta >= 0 and gamma >= delta eps^2 + tau
    assert np.linalg.eigvalsh(blk.eval({})).min() >= -1e-12
    bad = build_lmi_c4c("fixed_psi", s, gamma_i=0.5, tau_i=0.2, delta_i=0.5,
                        eps_r_i=1.0, w_list=[np.zeros((2, 2))], p=np.zeros(1),
                        psi=np.zeros(2))
    assert np.linalg.eigvalsh(bad.eval({})).min() < 0


def test_c4c_theta_mode_requires_psd_b():
    s = generate_scenario(tiny_config(), 2)
    bad_b = -np.eye(s.params.m)
    with pytest.raises(InvalidInputError):
        build_lmi_c4c("theta", s, gamma_i=1.0, tau_i=0.0, delta_i=1.0,
                      eps_r_i=0.1, b_psd=bad_b, theta=np.eye(s.params.m + 1))


def test_c4c_cross_mode_consistency():
    """theta-mode block at a rank-one lift equals the fixed-psi block."""
    from fdcr.lifting import lift_theta

    s = scaled_scenario(seed=11)
    a = random_allocation(s, seed=4, power_scale=1e-3)
    i = 0
    fixed = build_lmi_c4c("fixed_psi", s, gamma_i=0.3, tau_i=0.1, delta_i=0.7,
                          eps_r_i=s.eps_r[i],
                          w_list=[np.outer(a.w[k], a.w[k].conj())
                                  for k in range(s.params.k_dl)],
                          p=a.p, psi=a.psi).eval({})
    b = coupling_matrix(s, a.w, a.p)
    theta = lift_theta(s, a.psi).theta_mat
    lifted = build_lmi_c4c("theta", s, gamma_i=0.3, tau_i=0.1, delta_i=0.7,
                           eps_r_i=s.eps_r[i], b_psd=b, theta=theta).eval({})
    assert np.abs(fixed - lifted).max() < 1e-10 * max(1.0, np.abs(fixed).max())


def test_c4d_cross_mode_consistency():
    from fdcr.lifting import build_lift, lift_theta

    s = scaled_scenario(seed=13)
    a = random_allocation(s, seed=6, power_scale=1e-3)
    lift = build_lift(s)
    theta = lift_theta(s, a.psi, lift).theta_mat
    w_mats = [np.outer(a.w[k], a.w[k].conj()) for k in range(s.params.k_dl)]
    for i in range(s.params.i_pu):
        fixed = c4d_constraint("fixed_psi", s, tau_i=0.0, w_list=w_mats,
                               p=a.p, psi=a.psi, i=i).eval({})
        lifted = c4d_constraint("theta", s, tau_i=0.0, theta=theta,
                                w_fixed=w_mats, p_fixed=a.p, i=i,
                                lift=lift).eval({"Theta": theta})
        nominal = interference_leakage(s, a, s.estimated_pu_channels(i), i)
        assert fixed == pytest.approx(nominal, rel=1e-10)
        assert lifted == pytest.approx(nominal, rel=1e-10)


def test_c4d_trivial_cases():
    s = scaled_scenario(seed=3)
    zero_w = [np.zeros((s.params.n_t, s.params.n_t))] * s.params.k_dl
    expr = c4d_constraint("fixed_psi", s, tau_i=0.5, w_list=zero_w,
                          p=np.zeros(s.params.j_ul), psi=np.zeros(s.params.m), i=0)
    assert expr.eval({}) == pytest.approx(-0.5)


def test_c4d_single_pu_hand_case():
    cfg = tiny_config(n_t=2, m=1, j_ul=0, k_dl=1, i_pu=1)
    s = generate_scenario(cfg, 0)
    s.l_d_hat = np.array([[1.0 + 0j, 0.0]])
    s.l_r_hat = np.zeros((1, 1), complex)
    expr = c4d_constraint("fixed_psi", s, tau_i=0.0,
                          w_list=[np.diag([2.0, 0.0]).astype(complex)],
                          p=np.zeros(0), psi=np.zeros(1), i=0)
    assert expr.eval({}) == pytest.approx(2.0)


def test_lmi_builders_affine_in_arguments():
    """build(alpha x1 + (1-alpha) x2) = alpha build(x1) + (1-alpha) build(x2)."""
    rng = np.random.default_rng(8)
    s = scaled_scenario(seed=15)
    n, alpha = s.params.n_t, 0.3

    def rand_psd():
        a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        return a @ a.conj().T

    w1, w2 = rand_psd(), rand_psd()
    mix = alpha * w1 + (1 - alpha) * w2
    b1 = build_lmi_c4b([w1], 1.0, 0.5, 2.0, 0.1, n).eval({})
    b2 = build_lmi_c4b([w2], 1.0, 0.5, 2.0, 0.1, n).eval({})
    bm = build_lmi_c4b([mix], 1.0, 0.5, 2.0, 0.1, n).eval({})
    assert np.allclose(bm, alpha * b1 + (1 - alpha) * b2)

    p1, p2 = rng.uniform(0, 1, s.params.j_ul), rng.uniform(0, 1, s.params.j_ul)
    pm = alpha * p1 + (1 - alpha) * p2
    a1 = build_lmi_c4a(p1, 0.2, 0.9, s.eps_e[0], 3.0).eval({})
    a2 = build_lmi_c4a(p2, 0.2, 0.9, s.eps_e[0], 3.0).eval({})
    am = build_lmi_c4a(pm, 0.2, 0.9, s.eps_e[0], 3.0).eval({})
    assert np.allclose(am, alpha * a1 + (1 - alpha) * a2)


def test_s_procedure_soundness_sampling():
    """PSD fixed-psi block implies the quadratic holds on the sampled ball."""
    s = scaled_scenario(seed=17)
    a = random_allocation(s, seed=9, power_scale=1e-4)
    i = 0
    b = coupling_matrix(s, a.w, a.p)
    lam_max = float(np.linalg.eigvalsh(b).max())
    delta = lam_max * 1.01
    tau = 0.0
    gamma = delta * s.eps_r[i] ** 2 + tau + 1e-15
    blk = build_lmi_c4c("fixed_psi", s, gamma_i=gamma, tau_i=tau, delta_i=delta,
                        eps_r_i=s.eps_r[i],
                        w_list=[np.outer(a.w[k], a.w[k].conj())
                                for k in range(s.params.k_dl)],
                        p=a.p, psi=a.psi)
    assert np.linalg.eigvalsh(blk.eval({})).min() >= -1e-10 * max(lam_max, 1.0)
    rng = np.random.default_rng(2)
    psi_vec = np.exp(1j * a.psi)
    pb = (psi_vec[:, None] * b) * psi_vec.conj()[None, :]
    for _ in range(10_000):
        d = rng.standard_normal(s.params.m) + 1j * rng.standard_normal(s.params.m)
        d *= s.eps_r[i] * rng.uniform() ** (1 / (2 * s.params.m)) / np.linalg.norm(d)
        quad = float(np.real(d.conj() @ pb @ d))
        assert quad + tau <= gamma + 1e-12


# ---------------------------------------------------------------------------
# sampling verifier
# ---------------------------------------------------------------------------

def test_verifier_zero_radius_returns_nominal():
    s = generate_scenario(desk_config(upsilon2=0.0), 2)
    a = random_allocation(s, seed=10, power_scale=1e-6)
    r = verify_robust_leakage(s, a, 0, 50, seed=1)
    nominal = interference_leakage(s, a, s.estimated_pu_channels(0), 0)
    assert r["max_leak"] == pytest.approx(nominal, rel=1e-12)


def test_verifier_respects_safe_bound(desk_scenario):
    """Any allocation passing the safe bound passes the sampled certificate."""
    from fdcr.algo import find_feasible_start

    s = desk_scenario
    a = find_feasible_start(s, 4)
    for i in range(s.params.i_pu):
        assert safe_leakage_bound(s, a, i) <= s.params.p_tol[i] * (1 + 1e-9)
        r = verify_robust_leakage(s, a, i, 10_000, seed=5)
        assert not r["violated"]
        assert r["max_leak"] <= s.params.p_tol[i]


def test_verifier_flags_scaled_up_allocation(desk_scenario):
    s = desk_scenario
    from fdcr.algo import find_feasible_start

    a = find_feasible_start(s, 4)
    worst = max(safe_leakage_bound(s, a, i) / s.params.p_tol[i]
                for i in range(s.params.i_pu))
    blow = np.sqrt(20.0 / worst)
    bad = Allocation(w=a.w * blow, p=np.minimum(a.p * blow ** 2, s.params.p_max_ul * 1e3),
                     v=a.v, psi=a.psi)
    assert any(verify_robust_leakage(s, bad, i, 200, seed=6)["violated"]
               for i in range(s.params.i_pu))


def test_verifier_requires_samples(desk_scenario):
    a = random_allocation(desk_scenario, seed=11)
    with pytest.raises(InvalidInputError):
        verify_robust_leakage(desk_scenario, a, 0, 0, seed=1)
