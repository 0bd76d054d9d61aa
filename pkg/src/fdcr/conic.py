"""Solver-agnostic convex-program IR and a conic backend.

Programs are built from affine scalar expressions and affine Hermitian-matrix
expressions over named variables, with linear, second-order-cone, PSD and
log-of-affine (exponential-cone) memberships.  The canonical objective is

    maximize  affine + sum_s (weight_s / ln 2) * ln(affine_s),

i.e. weighted log2 terms.  The shipped backend lowers to cvxpy (CLARABEL,
with SCS as fallback); block-diagonal LMIs are split into their diagonal
blocks and rescaled before lowering, which preserves the feasible set exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import InvalidInputError

HERMITIAN_ATOL = 1e-12


# ---------------------------------------------------------------------------
# complex <-> real embedding
# ---------------------------------------------------------------------------

def embed_hermitian(h: np.ndarray) -> np.ndarray:
    """Real embedding [[Re, -Im], [Im, Re]]; PSD iff the Hermitian input is."""
    h = np.asarray(h)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise InvalidInputError("expected a square matrix")
    tol = HERMITIAN_ATOL * max(1.0, float(np.abs(h).max(initial=0.0)))
    if np.abs(h - h.conj().T).max(initial=0.0) > tol:
        raise InvalidInputError("matrix is not Hermitian")
    re, im = h.real, h.imag
    return np.block([[re, -im], [im, re]])


def extract_hermitian(e: np.ndarray) -> np.ndarray:
    """Inverse of embed_hermitian (up to symmetrization of the blocks)."""
    e = np.asarray(e, dtype=float)
    n2 = e.shape[0]
    if e.ndim != 2 or e.shape[1] != n2 or n2 % 2:
        raise InvalidInputError("expected a square even-dimension matrix")
    n = n2 // 2
    re = 0.5 * (e[:n, :n] + e[n:, n:])
    im = 0.5 * (e[n:, :n] - e[:n, n:])
    h = re + 1j * im
    return 0.5 * (h + h.conj().T)


# ---------------------------------------------------------------------------
# affine expressions
# ---------------------------------------------------------------------------

@dataclass
class AffineScalar:
    """const + sum over handles of <coef, var>.

    For a real vector variable the coefficient is a real vector (dot product);
    for a Hermitian variable it is a Hermitian kernel A contributing
    Re Tr(A @ X).
    """

    const: float = 0.0
    terms: dict = field(default_factory=dict)

    def copy(self) -> "AffineScalar":
        return AffineScalar(self.const, {h: c.copy() for h, c in self.terms.items()})

    def _acc(self, handle: str, coef: np.ndarray, sign: float = 1.0):
        if handle in self.terms:
            self.terms[handle] = self.terms[handle] + sign * coef
        else:
            self.terms[handle] = sign * coef

    def __add__(self, other):
        out = self.copy()
        if isinstance(other, AffineScalar):
            out.const += other.const
            for h, c in other.terms.items():
                out._acc(h, c)
        else:
            out.const += float(other)
        return out

    __radd__ = __add__

    def __sub__(self, other):
        return self + (other * -1.0 if isinstance(other, AffineScalar) else -float(other))

    def __rsub__(self, other):
        return (self * -1.0) + other

    def __mul__(self, scalar: float):
        out = AffineScalar(self.const * scalar,
                           {h: c * scalar for h, c in self.terms.items()})
        return out

    __rmul__ = __mul__

    def eval(self, assign: dict) -> float:
        val = self.const
        for h, c in self.terms.items():
            x = np.asarray(assign[h])
            if c.ndim == 1:
                val += float(np.real(np.dot(c, x)))
            else:
                val += float(np.real(np.trace(c @ x)))
        return val


def scalar_of(x, handle_dim=None):
    """Coerce a float / handle string / AffineScalar into an AffineScalar."""
    if isinstance(x, AffineScalar):
        return x
    if isinstance(x, str):
        n = 1 if handle_dim is None else handle_dim
        coef = np.zeros(n)
        coef[0] = 1.0
        return AffineScalar(0.0, {x: coef})
    return AffineScalar(float(x))


@dataclass
class MatAffine:
    """Affine Hermitian-matrix-valued expression of dimension dim.

    atoms:
      ("lin", handle, M)            real var v -> sum_j v_j * M[j]
      ("sand", handle, L, R, t)     hermitian var X -> L @ (X.T if t else X) @ R
    """

    dim: int
    const: np.ndarray = None
    atoms: list = field(default_factory=list)

    def __post_init__(self):
        if self.const is None:
            self.const = np.zeros((self.dim, self.dim), dtype=complex)

    def copy(self) -> "MatAffine":
        return MatAffine(self.dim, self.const.copy(), list(self.atoms))

    def __add__(self, other: "MatAffine") -> "MatAffine":
        if isinstance(other, np.ndarray):
            other = MatAffine(self.dim, np.asarray(other, dtype=complex))
        if self.dim != other.dim:
            raise InvalidInputError("dimension mismatch")
        return MatAffine(self.dim, self.const + other.const, self.atoms + other.atoms)

    def __sub__(self, other):
        if isinstance(other, np.ndarray):
            other = MatAffine(self.dim, np.asarray(other, dtype=complex))
        return self + (other * -1.0)

    def __mul__(self, scalar: float) -> "MatAffine":
        out = MatAffine(self.dim, self.const * scalar)
        for atom in self.atoms:
            if atom[0] == "lin":
                out.atoms.append(("lin", atom[1], atom[2] * scalar))
            else:
                _, h, l, r, t = atom
                out.atoms.append(("sand", h, l * scalar, r, t))
        return out

    __rmul__ = __mul__

    def conjugate_by(self, left: np.ndarray, right: np.ndarray = None) -> "MatAffine":
        """left @ expr @ right (right defaults to left^H); exact congruence."""
        if right is None:
            right = left.conj().T
        dim = left.shape[0]
        out = MatAffine(dim, left @ self.const @ right)
        for atom in self.atoms:
            if atom[0] == "lin":
                out.atoms.append(("lin", atom[1], np.einsum("ab,jbc,cd->jad", left, atom[2], right)))
            else:
                _, h, l, r, t = atom
                out.atoms.append(("sand", h, left @ l, r @ right, t))
        return out

    def eval(self, assign: dict) -> np.ndarray:
        val = self.const.copy()
        for atom in self.atoms:
            if atom[0] == "lin":
                _, h, m = atom
                v = np.atleast_1d(np.asarray(assign[h], dtype=float))
                val = val + np.tensordot(v, m, axes=1)
            else:
                _, h, l, r, t = atom
                x = np.asarray(assign[h])
                val = val + l @ (x.T if t else x) @ r
        return 0.5 * (val + val.conj().T)

    def nonzero_pattern(self) -> np.ndarray:
        pat = np.abs(self.const) > 0
        for atom in self.atoms:
            if atom[0] == "lin":
                pat |= np.any(np.abs(atom[2]) > 0, axis=0)
            else:
                _, h, l, r, t = atom
                rows = np.any(np.abs(l) > 0, axis=1)
                cols = np.any(np.abs(r) > 0, axis=0)
                pat |= np.outer(rows, cols)
        return pat | pat.T

    def magnitude_hint(self, typ: dict) -> float:
        """Rough largest-entry scale used to normalize PSD blocks."""
        mag = float(np.abs(self.const).max(initial=0.0))
        for atom in self.atoms:
            if atom[0] == "lin":
                mag = max(mag, float(np.abs(atom[2]).max(initial=0.0)) * typ.get(atom[1], 1.0))
            else:
                _, h, l, r, t = atom
                lmax = float(np.abs(l).max(initial=0.0))
                rmax = float(np.abs(r).max(initial=0.0))
                mag = max(mag, lmax * rmax * l.shape[1] * typ.get(h, 1.0))
        return mag

    def submatrix(self, idx: np.ndarray) -> "MatAffine":
        out = MatAffine(len(idx), self.const[np.ix_(idx, idx)])
        for atom in self.atoms:
            if atom[0] == "lin":
                out.atoms.append(("lin", atom[1], atom[2][:, idx][:, :, idx]))
            else:
                _, h, l, r, t = atom
                out.atoms.append(("sand", h, l[idx, :], r[:, idx], t))
        return out


def lin_matrix_term(handle: str, mats: np.ndarray) -> MatAffine:
    mats = np.asarray(mats, dtype=complex)
    return MatAffine(mats.shape[1], atoms=[("lin", handle, mats)])


def sandwich_term(handle: str, left: np.ndarray, right: np.ndarray, transpose=False) -> MatAffine:
    return MatAffine(left.shape[0], atoms=[("sand", handle, np.asarray(left, complex),
                                            np.asarray(right, complex), bool(transpose))])


@dataclass
class LmiBlock:
    """Affine Hermitian-matrix function required to be PSD."""

    expr: MatAffine
    name: str = ""

    @property
    def dim(self) -> int:
        return self.expr.dim

    @property
    def constant(self) -> np.ndarray:
        return self.expr.const

    @property
    def terms(self) -> list:
        return self.expr.atoms

    def eval(self, assign: dict) -> np.ndarray:
        return self.expr.eval(assign)

    def is_psd_at(self, assign: dict, tol: float = 1e-9) -> bool:
        w = np.linalg.eigvalsh(self.eval(assign))
        return bool(w.min(initial=0.0) >= -tol)


# ---------------------------------------------------------------------------
# program
# ---------------------------------------------------------------------------

@dataclass
class VarSpec:
    name: str
    kind: str                       # "real" | "hermitian"
    dim: int
    nonneg: bool = False
    psd: bool = False
    lb: np.ndarray = None
    ub: np.ndarray = None
    typ: float = 1.0                # typical magnitude, conditioning hint


@dataclass
class SolveSettings:
    tol: float = 1e-8
    max_iters: int = 50000
    solver: str = "CLARABEL"
    verbose: bool = False


@dataclass
class SolveResult:
    status: str                     # optimal | infeasible | unbounded | numerical-failure | iteration-limit
    values: dict
    objective: float
    residuals: dict

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


class ConicProgram:
    """Container for variables, constraints and the canonical max objective."""

    def __init__(self):
        self.variables: dict[str, VarSpec] = {}
        self.eqs: list[AffineScalar] = []
        self.ineqs: list[AffineScalar] = []          # expr <= 0
        self.socs: list[tuple] = []                  # (t, [x...]) : ||x|| <= t
        self.lmis: list[LmiBlock] = []
        self.log_terms: list[tuple] = []             # (weight, affine)
        self.obj_affine = AffineScalar()
        self.obj_scale = 1.0                         # conditioning hint, > 0

    # -- variables ----------------------------------------------------------
    def add_real(self, name, n, nonneg=False, lb=None, ub=None, typ=1.0) -> str:
        if name in self.variables:
            raise InvalidInputError(f"duplicate handle {name}")
        self.variables[name] = VarSpec(name, "real", n, nonneg=nonneg,
                                       lb=None if lb is None else np.broadcast_to(lb, (n,)).astype(float),
                                       ub=None if ub is None else np.broadcast_to(ub, (n,)).astype(float),
                                       typ=typ)
        return name

    def add_hermitian(self, name, n, psd=True, typ=1.0) -> str:
        if name in self.variables:
            raise InvalidInputError(f"duplicate handle {name}")
        self.variables[name] = VarSpec(name, "hermitian", n, psd=psd, typ=typ)
        return name

    def var_entry(self, name: str, index: int = 0) -> AffineScalar:
        spec = self.variables[name]
        coef = np.zeros(spec.dim)
        coef[index] = 1.0
        return AffineScalar(0.0, {name: coef})

    def trace_term(self, name: str, kernel: np.ndarray) -> AffineScalar:
        """Re Tr(kernel @ X) for a Hermitian variable."""
        return AffineScalar(0.0, {name: np.asarray(kernel, dtype=complex)})

    # -- constraints ---------------------------------------------------------
    def add_eq(self, expr: AffineScalar):
        self.eqs.append(expr)

    def add_ineq(self, expr: AffineScalar):
        """expr <= 0"""
        self.ineqs.append(expr)

    def add_soc(self, t: AffineScalar, xs: list):
        self.socs.append((t, list(xs)))

    def add_lmi(self, block: LmiBlock):
        for handle in _block_handles(block):
            if handle not in self.variables:
                raise InvalidInputError(f"undeclared handle {handle}")
        self.lmis.append(block)

    def add_log_term(self, weight: float, affine: AffineScalar) -> str:
        """Objective gains weight * log2(affine); returns the term handle."""
        if weight < 0:
            raise InvalidInputError("log-term weight must be nonnegative")
        self.log_terms.append((float(weight), scalar_of(affine)))
        return f"_log{len(self.log_terms) - 1}"

    def add_objective(self, affine: AffineScalar):
        self.obj_affine = self.obj_affine + affine

    # -- evaluation ----------------------------------------------------------
    def objective_at(self, assign: dict) -> float:
        val = self.obj_affine.eval(assign)
        for w, expr in self.log_terms:
            val += (w / np.log(2.0)) * np.log(expr.eval(assign))
        return val

    def max_violation(self, assign: dict) -> float:
        worst = 0.0
        for e in self.eqs:
            worst = max(worst, abs(e.eval(assign)))
        for e in self.ineqs:
            worst = max(worst, max(0.0, e.eval(assign)))
        for t, xs in self.socs:
            nrm = np.sqrt(sum(x.eval(assign) ** 2 for x in xs))
            worst = max(worst, max(0.0, nrm - t.eval(assign)))
        for blk in self.lmis:
            w = np.linalg.eigvalsh(blk.eval(assign))
            worst = max(worst, max(0.0, -float(w.min())))
        for spec in self.variables.values():
            x = np.asarray(assign[spec.name])
            if spec.kind == "real":
                if spec.nonneg:
                    worst = max(worst, max(0.0, float((-x).max(initial=0.0))))
                if spec.lb is not None:
                    worst = max(worst, max(0.0, float((spec.lb - x).max(initial=0.0))))
                if spec.ub is not None:
                    worst = max(worst, max(0.0, float((x - spec.ub).max(initial=0.0))))
            elif spec.psd:
                w = np.linalg.eigvalsh(0.5 * (x + x.conj().T))
                worst = max(worst, max(0.0, -float(w.min())))
        return worst


def _block_handles(block: LmiBlock):
    return {atom[1] for atom in block.expr.atoms}


def _connected_blocks(pattern: np.ndarray) -> list:
    n = pattern.shape[0]
    seen = np.zeros(n, dtype=bool)
    comps = []
    for start in range(n):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            u = stack.pop()
            comp.append(u)
            for v in np.nonzero(pattern[u])[0]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        comps.append(np.array(sorted(comp)))
    return comps


# ---------------------------------------------------------------------------
# cvxpy backend
# ---------------------------------------------------------------------------

def _lower_affine(expr: AffineScalar, cpvars: dict):
    import cvxpy as cp

    out = expr.const
    for h, coef in expr.terms.items():
        x = cpvars[h]
        if coef.ndim == 1:
            out = out + coef @ x
        else:
            out = out + cp.real(cp.trace(coef @ x))
    return out


def _lower_mat(expr: MatAffine, cpvars: dict):
    import cvxpy as cp

    out: object = expr.const
    for atom in expr.atoms:
        if atom[0] == "lin":
            _, h, m = atom
            d = m.shape[1]
            flat = m.reshape(m.shape[0], d * d)
            out = out + cp.reshape(flat.T @ cpvars[h], (d, d), order="C")
        else:
            _, h, l, r, t = atom
            x = cpvars[h]
            out = out + l @ (x.T if t else x) @ r
    return out


_STATUS_MAP = {
    "optimal": "optimal",
    "infeasible": "infeasible",
    "unbounded": "unbounded",
    "infeasible_inaccurate": "infeasible",
    "unbounded_inaccurate": "unbounded",
    "optimal_inaccurate": "numerical-failure",
}


def solve(prog: ConicProgram, settings: SolveSettings = None) -> SolveResult:
    """Solve the program; never raises on solver trouble, reports status instead."""
    import cvxpy as cp

    settings = settings or SolveSettings()
    cpvars = {}      # expressions in natural units (typ * raw variable)
    raw_vars = {}
    constraints = []
    for spec in prog.variables.values():
        typ_scale = spec.typ if spec.typ > 0 else 1.0
        if spec.kind == "real":
            v = cp.Variable(spec.dim, name=spec.name, nonneg=spec.nonneg)
            expr = typ_scale * v
            if spec.lb is not None:
                constraints.append(expr >= spec.lb)
            if spec.ub is not None:
                constraints.append(expr <= spec.ub)
        else:
            v = cp.Variable((spec.dim, spec.dim), name=spec.name, hermitian=True)
            expr = typ_scale * v
            if spec.psd:
                constraints.append(v >> 0)
        raw_vars[spec.name] = v
        cpvars[spec.name] = expr

    for e in prog.eqs:
        constraints.append(_lower_affine(e, cpvars) == 0)
    for e in prog.ineqs:
        constraints.append(_lower_affine(e, cpvars) <= 0)
    for t, xs in prog.socs:
        constraints.append(cp.SOC(_lower_affine(t, cpvars),
                                  cp.hstack([_lower_affine(x, cpvars) for x in xs])))

    typ = {name: spec.typ for name, spec in prog.variables.items()}
    scaled_blocks = []
    for blk in prog.lmis:
        for idx in _connected_blocks(blk.expr.nonzero_pattern()):
            sub = blk.expr.submatrix(idx)
            mag = sub.magnitude_hint(typ)
            if mag > 0:
                sub = sub * (1.0 / mag)
            scaled_blocks.append(sub)
            if sub.dim == 1:
                # scalar PSD block is a plain inequality
                entry = AffineScalar(-float(np.real(sub.const[0, 0])))
                for atom in sub.atoms:
                    if atom[0] == "lin":
                        entry._acc(atom[1], -np.real(atom[2][:, 0, 0]))
                    else:
                        _, h, l, r, t = atom
                        kern = -np.outer(r[:, 0], l[0, :])
                        entry._acc(h, kern.T if t else kern)
                constraints.append(_lower_affine(entry, cpvars) <= 0)
            else:
                ex = _lower_mat(sub, cpvars)
                constraints.append(0.5 * (ex + cp.conj(cp.transpose(ex))) >> 0)

    obj = _lower_affine(prog.obj_affine, cpvars)
    for w, den in prog.log_terms:
        if w > 0:
            obj = obj + (w / np.log(2.0)) * cp.log(_lower_affine(den, cpvars))

    # cost handed to the solver is normalized by a builder-set hint so that a
    # large penalty weight does not dominate the dual-residual criterion
    # (argmax-invariant; reported objectives are evaluated unscaled)
    problem = cp.Problem(cp.Maximize(obj * (1.0 / prog.obj_scale)), constraints)
    import warnings as _warnings

    _warnings.filterwarnings("ignore", message="Solution may be inaccurate")

    def extract() -> SolveResult:
        status = _STATUS_MAP.get(problem.status, "numerical-failure")
        values = {}
        for name, var in raw_vars.items():
            if var.value is None:
                continue
            typ_scale = prog.variables[name].typ or 1.0
            val = typ_scale * np.asarray(var.value)
            if prog.variables[name].kind == "hermitian":
                val = 0.5 * (val + val.conj().T)
            values[name] = val
        if values:
            # a variable appearing in no constraint or objective never reaches
            # the solver; any value is admissible, use zero
            for name, spec in prog.variables.items():
                if name not in values:
                    values[name] = (np.zeros(spec.dim) if spec.kind == "real"
                                    else np.zeros((spec.dim, spec.dim), dtype=complex))
        objective = np.nan
        residuals = {"feas": np.nan, "gap": np.nan}
        if values:
            objective = prog.objective_at(values)
            for i, (w, den) in enumerate(prog.log_terms):
                values[f"_log{i}"] = float(np.log(max(den.eval(values), np.finfo(float).tiny)))
            worst = 0.0
            for e in prog.eqs:
                worst = max(worst, abs(e.eval(values)))
            for e in prog.ineqs:
                worst = max(worst, max(0.0, e.eval(values)))
            for t, xs in prog.socs:
                nrm = np.sqrt(sum(x.eval(values) ** 2 for x in xs))
                worst = max(worst, max(0.0, nrm - t.eval(values)))
            for sub in scaled_blocks:
                wmin = float(np.linalg.eigvalsh(sub.eval(values)).min())
                worst = max(worst, max(0.0, -wmin))
            residuals["feas"] = worst
            stats = problem.solver_stats
            if (stats is not None and stats.num_iters is not None
                    and stats.num_iters >= settings.max_iters):
                status = "iteration-limit"
            # solver certifies its gap criterion whenever it reports optimality
            residuals["gap"] = settings.tol if status == "optimal" else np.nan
        return SolveResult(status, values, objective, residuals)

    def near_feasible(res: SolveResult) -> bool:
        feas = res.residuals.get("feas", np.nan)
        return bool(res.values) and np.isfinite(feas) and feas <= 1e-5

    attempts = []
    try:
        if settings.solver == "CLARABEL":
            problem.solve(solver=cp.CLARABEL, max_iter=settings.max_iters,
                          tol_gap_abs=settings.tol, tol_gap_rel=settings.tol,
                          tol_feas=settings.tol, verbose=settings.verbose)
        else:
            problem.solve(solver=settings.solver, verbose=settings.verbose)
        attempts.append(extract())
    except Exception as err:
        attempts.append(SolveResult("numerical-failure", {}, np.nan,
                                    {"feas": np.nan, "gap": np.nan, "error": repr(err)}))
    first = attempts[0]
    if (settings.solver == "CLARABEL" and not first.ok and not near_feasible(first)):
        # rescue only: a stalled interior point near a degenerate face is still
        # a high-quality iterate, but a genuinely failed solve is not, and the
        # ADMM fallback at modest eps usually recovers something workable
        try:
            problem.solve(solver=cp.SCS, max_iters=min(settings.max_iters, 20000),
                          eps=max(settings.tol, 1e-6), verbose=settings.verbose)
            attempts.append(extract())
        except Exception as err:
            attempts.append(SolveResult("numerical-failure", {}, np.nan,
                                        {"feas": np.nan, "gap": np.nan,
                                         "error": repr(err)}))

    def rank(res: SolveResult):
        feas = res.residuals.get("feas", np.nan)
        return (0 if near_feasible(res) else 1, feas if np.isfinite(feas) else np.inf)

    return min(attempts, key=rank)


# ---------------------------------------------------------------------------
# debug dump
# ---------------------------------------------------------------------------

def program_to_json(prog: ConicProgram) -> str:
    """Loss-free debug dump of the program structure (not a stable format)."""
    import json

    def arr(a):
        a = np.asarray(a)
        if np.iscomplexobj(a):
            return {"re": a.real.tolist(), "im": a.imag.tolist()}
        return a.tolist()

    def aff(e: AffineScalar):
        return {"const": e.const, "terms": {h: arr(c) for h, c in e.terms.items()}}

    def mat(e: MatAffine):
        atoms = []
        for atom in e.atoms:
            if atom[0] == "lin":
                atoms.append({"kind": "lin", "handle": atom[1], "mats": arr(atom[2])})
            else:
                atoms.append({"kind": "sand", "handle": atom[1], "left": arr(atom[2]),
                              "right": arr(atom[3]), "transpose": atom[4]})
        return {"dim": e.dim, "const": arr(e.const), "atoms": atoms}

    doc = {
        "variables": [{"name": s.name, "kind": s.kind, "dim": s.dim,
                       "nonneg": s.nonneg, "psd": s.psd} for s in prog.variables.values()],
        "eqs": [aff(e) for e in prog.eqs],
        "ineqs": [aff(e) for e in prog.ineqs],
        "lmis": [{"name": b.name, **mat(b.expr)} for b in prog.lmis],
        "log_terms": [{"weight": w, "den": aff(d)} for w, d in prog.log_terms],
        "objective": aff(prog.obj_affine),
    }
    return json.dumps(doc)
