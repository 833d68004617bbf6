"""Pseudo-arclength continuation of equilibria and bifurcation analysis.

A branch is traced over one named parameter with a secant/tangent
predictor and a Newton corrector on the augmented system
``[F(x, lam) = 0; t . (X - X_pred) = 0]``, which traverses folds where a
parameter-parameterized Newton would fail.  Each accepted point carries
the spectrum of the reduced state matrix, smooth-limiter activities and
scalar test functions; sign changes of the test functions between
consecutive points are classified as saddle-node (fold), Hopf or
limit-induced events and refined by bisection along the branch.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .engine import (
    DaeSystem,
    EquilibriumSolution,
    Params,
    SpectrumReport,
    TOL_EQ,
    algebraic_condition,
    integrate,
    jacobian_fd,
    newton_equilibrium,
    reduced_state_matrix,
    eigenvalues,
)
from .errors import NonConvergenceError, SingularJacobianError

__all__ = [
    "ContinuationSettings",
    "BranchPoint",
    "Branch",
    "BifurcationRecord",
    "Boundary2D",
    "BoundaryRow",
    "continue_branch",
    "classify_bifurcations",
    "locate_bifurcation",
    "trace_boundary_2d",
    "limit_cycle_amplitude",
]

OMEGA_MIN = 1e-3        # rad/s: minimum |Im| for a pair to count as Hopf
HB_NOISE_REL = 1e-6     # ignore real-part crossings inside the FD noise band
SIB_COND_LIMIT = 1e12
AMPLITUDE_FLOOR = 1e-6


@dataclass(frozen=True)
class ContinuationSettings:
    h0: float = 0.01
    h_min: float = 1e-5
    h_max: float = 0.05
    max_steps: int = 2000
    param_min: float = 0.0
    param_max: float = 1e6
    direction: float = 1.0
    corrector_tol: float = TOL_EQ
    corrector_max_iter: int = 12


@dataclass(frozen=True)
class BranchPoint:
    """One converged continuation point with its stability fingerprint."""

    x: np.ndarray
    lam: float
    s: float
    spectrum: SpectrumReport
    activities: dict
    det_sign: float
    hb_metric: float
    hb_im: float
    alg_cond: float

    @property
    def n_unstable(self) -> int:
        return self.spectrum.n_unstable


@dataclass
class Branch:
    param: str
    points: list = field(default_factory=list)
    truncated: bool = False
    message: str = ""

    def __len__(self):
        return len(self.points)

    def __getitem__(self, i):
        return self.points[i]

    @property
    def lam_values(self):
        return np.array([pt.lam for pt in self.points])


@dataclass(frozen=True)
class BifurcationRecord:
    kind: str                     # SNB | HB | LIB | SIB-candidate
    lam: float
    x: np.ndarray
    s: float
    eig: complex | None
    tol_achieved: float
    n_unstable_before: int
    n_unstable_after: int
    limiter: str | None = None


@dataclass(frozen=True)
class BoundaryRow:
    param2: float
    kind: str                     # bifurcation kind, "none" or "error"
    lam: float                    # nan when kind is none/error
    message: str = ""


@dataclass(frozen=True)
class Boundary2D:
    param1: str
    param2: str
    rows: tuple


def _point_fingerprint(sys: DaeSystem, x, p: Params, lam: float,
                       s: float) -> BranchPoint:
    reduced = reduced_state_matrix(sys, x, p)
    spec = eigenvalues(reduced)
    sign, _ = np.linalg.slogdet(reduced)
    eigs = spec.eigenvalues
    cplx = eigs[np.abs(eigs.imag) > OMEGA_MIN]
    if cplx.size:
        k = int(np.argmax(cplx.real))
        hb_metric = float(cplx.real[k])
        hb_im = float(abs(cplx.imag[k]))
    else:
        hb_metric, hb_im = -np.inf, 0.0
    return BranchPoint(
        x=np.asarray(x, dtype=float).copy(), lam=lam, s=s, spectrum=spec,
        activities=sys.limiter_activity(x, p), det_sign=float(sign),
        hb_metric=hb_metric, hb_im=hb_im,
        alg_cond=algebraic_condition(sys, x, p))


def _dF_dlam(sys: DaeSystem, x, p: Params, param: str):
    lam = p[param]
    h = 1e-6 * max(1.0, abs(lam))
    fp = sys.residual(x, p.with_value(param, lam + h))
    fm = sys.residual(x, p.with_value(param, lam - h))
    return (fp - fm) / (2.0 * h)


def _corrector(sys: DaeSystem, param: str, p: Params, x_pred, lam_pred,
               tangent, x_ref, lam_ref, ds, tol, max_iter):
    """Newton on the augmented system with the pseudo-arclength constraint
    ``tangent . (X - X_ref) = ds``."""
    n = sys.n
    x = np.asarray(x_pred, dtype=float).copy()
    lam = float(lam_pred)
    for it in range(max_iter):
        pk = p.with_value(param, lam)
        f = sys.residual(x, pk)
        g = float(tangent[:n] @ (x - x_ref) + tangent[n] * (lam - lam_ref) - ds)
        norm = max(float(np.max(np.abs(f))), abs(g))
        if norm <= tol:
            return x, lam, it
        jac = jacobian_fd(sys, x, pk)
        flam = _dF_dlam(sys, x, pk, param)
        aug = np.zeros((n + 1, n + 1))
        aug[:n, :n] = jac
        aug[:n, n] = flam
        aug[n, :] = tangent
        rhs = np.concatenate([-f, [-g]])
        try:
            delta = np.linalg.solve(aug, rhs)
        except np.linalg.LinAlgError as exc:
            raise NonConvergenceError("singular augmented Jacobian") from exc
        x = x + delta[:n]
        lam = lam + delta[n]
    raise NonConvergenceError(
        f"corrector did not converge in {max_iter} iterations")


def _initial_tangent(sys: DaeSystem, param: str, p: Params, x, direction):
    jac = jacobian_fd(sys, x, p)
    flam = _dF_dlam(sys, x, p, param)
    try:
        dx = np.linalg.solve(jac, -flam)
    except np.linalg.LinAlgError as exc:
        raise SingularJacobianError(
            "Jacobian singular at the branch start (starting at a fold?)"
        ) from exc
    t = np.concatenate([dx, [1.0]])
    t /= np.linalg.norm(t)
    if direction < 0:
        t = -t
    return t


def continue_branch(sys: DaeSystem, start: EquilibriumSolution, param: str,
                    settings: ContinuationSettings = ContinuationSettings()
                    ) -> Branch:
    """Trace an equilibrium branch over ``param`` from a converged start."""
    p = start.params
    lam = p[param]
    branch = Branch(param=param)
    sol = newton_equilibrium(sys, start.x, p)
    branch.points.append(_point_fingerprint(sys, sol.x, p, lam, 0.0))
    tangent = _initial_tangent(sys, param, p, sol.x, settings.direction)

    h = settings.h0
    s = 0.0
    easy_streak = 0
    n = sys.n
    x, cur_lam = sol.x, lam
    while len(branch.points) < settings.max_steps:
        x_pred = x + h * tangent[:n]
        lam_pred = cur_lam + h * tangent[n]
        try:
            x_new, lam_new, iters = _corrector(
                sys, param, p, x_pred, lam_pred, tangent, x, cur_lam, h,
                settings.corrector_tol, settings.corrector_max_iter)
        except (NonConvergenceError, SingularJacobianError) as exc:
            if h <= settings.h_min * (1.0 + 1e-12):
                branch.truncated = True
                branch.message = (f"corrector failed at minimal step "
                                  f"(s={s:.4g}, lam={cur_lam:.6g}): {exc}")
                break
            h = max(h * 0.5, settings.h_min)
            easy_streak = 0
            continue
        if not settings.param_min <= lam_new <= settings.param_max:
            break
        ds_vec = np.concatenate([x_new - x, [lam_new - cur_lam]])
        s_new = s + float(np.linalg.norm(ds_vec))
        pk = p.with_value(param, lam_new)
        branch.points.append(
            _point_fingerprint(sys, x_new, pk, lam_new, s_new))
        tangent = ds_vec / np.linalg.norm(ds_vec)
        x, cur_lam, s = x_new, lam_new, s_new
        if iters <= 3:
            easy_streak += 1
            if easy_streak >= 3:
                h = min(h * 1.3, settings.h_max)
                easy_streak = 0
        else:
            easy_streak = 0
    return branch


def _test_value(point: BranchPoint, kind: str, limiter: str | None) -> float:
    if kind == "SNB":
        return point.det_sign
    if kind == "HB":
        return point.hb_metric
    if kind == "LIB":
        return point.activities[limiter] - 1.0
    if kind == "SIB-candidate":
        return math.log10(max(point.alg_cond, 1.0)) - math.log10(SIB_COND_LIMIT)
    raise ValueError(f"unknown bifurcation kind {kind!r}")


def classify_bifurcations(branch: Branch) -> list:
    """Scan a branch for sign changes of the kind-specific test functions.

    A fold (SNB) needs both a real-eigenvalue zero crossing (detected by a
    determinant sign flip of the reduced state matrix) and a sign change of
    ``d(lam)/ds``.  A Hopf needs a complex pair's real part to cross zero
    with |Im| above the rotation floor.  A limit-induced event needs a
    limiter activity crossing 1 together with a change in the number of
    unstable eigenvalues.  Records are coarse (segment midpoints); refine
    with :func:`locate_bifurcation`.
    """
    pts = branch.points
    records = []
    if len(pts) < 2:
        return records
    for i in range(1, len(pts)):
        a, b = pts[i - 1], pts[i]
        seg_records = []
        # fold: lam direction reverses at an interior point
        if i + 1 < len(pts):
            c = pts[i + 1]
            d1 = b.lam - a.lam
            d2 = c.lam - b.lam
            if d1 * d2 < 0.0 and a.det_sign * c.det_sign < 0.0:
                seg_records.append(("SNB", a, c, None))
        if (np.isfinite(a.hb_metric) and np.isfinite(b.hb_metric)
                and a.hb_metric * b.hb_metric < 0.0):
            floor = HB_NOISE_REL * max(1.0, 0.5 * (a.hb_im + b.hb_im))
            if max(abs(a.hb_metric), abs(b.hb_metric)) > floor:
                seg_records.append(("HB", a, b, None))
        for name in a.activities:
            ta = a.activities[name] - 1.0
            tb = b.activities[name] - 1.0
            if ta * tb < 0.0 and a.n_unstable != b.n_unstable \
                    and not seg_records:
                seg_records.append(("LIB", a, b, name))
        ca = math.log10(max(a.alg_cond, 1.0)) - math.log10(SIB_COND_LIMIT)
        cb = math.log10(max(b.alg_cond, 1.0)) - math.log10(SIB_COND_LIMIT)
        if ca * cb < 0.0 and cb > ca:
            seg_records.append(("SIB-candidate", a, b, None))
        for kind, lo, hi, limiter in seg_records:
            eig = _crossing_eigenvalue(kind, lo, hi)
            records.append(BifurcationRecord(
                kind=kind, lam=0.5 * (lo.lam + hi.lam),
                x=0.5 * (lo.x + hi.x), s=0.5 * (lo.s + hi.s), eig=eig,
                tol_achieved=abs(hi.lam - lo.lam),
                n_unstable_before=lo.n_unstable,
                n_unstable_after=hi.n_unstable, limiter=limiter))
    # de-duplicate records produced by overlapping fold windows
    unique = []
    for rec in records:
        if any(r.kind == rec.kind and abs(r.s - rec.s) < 1e-12
               for r in unique):
            continue
        unique.append(rec)
    return unique


def _crossing_eigenvalue(kind: str, lo: BranchPoint, hi: BranchPoint):
    eigs = hi.spectrum.eigenvalues
    if kind == "SNB":
        real = eigs[np.abs(eigs.imag) <= OMEGA_MIN]
        if real.size:
            return complex(real[np.argmin(np.abs(real.real))])
        return None
    if kind == "HB":
        cplx = eigs[np.abs(eigs.imag) > OMEGA_MIN]
        if cplx.size:
            return complex(cplx[np.argmin(np.abs(cplx.real))])
        return None
    return None


def locate_bifurcation(sys: DaeSystem, param: str, p: Params,
                       pt_a: BranchPoint, pt_b: BranchPoint, kind: str,
                       limiter: str | None = None,
                       lam_tol: float = 1e-6,
                       max_iter: int = 100) -> BifurcationRecord:
    """Bisection along the branch between two bracketing points.

    Each probe re-solves the equilibrium on the secant hyperplane and
    re-evaluates the kind-specific test function; the bracket shrinks
    until the parameter gap satisfies ``lam_tol`` and the arclength gap
    is negligible (folds are quadratic in arclength, so the parameter gap
    alone can be deceptively small on a symmetric bracket).
    """
    n = sys.n
    xa, la = pt_a.x.copy(), pt_a.lam
    xb, lb = pt_b.x.copy(), pt_b.lam
    fa = _test_value(pt_a, kind, limiter)
    fb = _test_value(pt_b, kind, limiter)
    if not (np.isfinite(fa) and np.isfinite(fb)) or fa * fb > 0.0:
        raise ValueError(
            f"test function for {kind} does not change sign across the "
            f"bracket ({fa:.3g} .. {fb:.3g})")
    na, nb = pt_a.n_unstable, pt_b.n_unstable
    s_width0 = max(float(np.linalg.norm(np.concatenate(
        [xb - xa, [lb - la]]))), 1e-12)
    pt_mid = None
    for _ in range(max_iter):
        secant = np.concatenate([xb - xa, [lb - la]])
        s_width = float(np.linalg.norm(secant))
        if s_width < 1e-14:
            break
        tangent = secant / s_width
        x_pred = 0.5 * (xa + xb)
        lam_pred = 0.5 * (la + lb)
        x_mid, lam_mid, _ = _corrector(
            sys, param, p, x_pred, lam_pred, tangent, xa, la,
            0.5 * s_width, TOL_EQ, 30)
        p_mid = p.with_value(param, lam_mid)
        pt_mid = _point_fingerprint(sys, x_mid, p_mid, lam_mid, 0.0)
        f_mid = _test_value(pt_mid, kind, limiter)
        if fa * f_mid <= 0.0:
            xb, lb, fb = x_mid, lam_mid, f_mid
        else:
            xa, la, fa = x_mid, lam_mid, f_mid
        lam_gap = abs(lb - la)
        if lam_gap <= lam_tol * max(1.0, abs(lam_mid)) \
                and s_width <= max(1e-10, 1e-8 * s_width0):
            break
    lam_star = 0.5 * (la + lb)
    x_star = 0.5 * (xa + xb)
    eig = _crossing_eigenvalue(kind, pt_a, pt_mid if pt_mid is not None
                               else pt_b)
    return BifurcationRecord(
        kind=kind, lam=lam_star, x=x_star, s=0.0, eig=eig,
        tol_achieved=abs(lb - la), n_unstable_before=na,
        n_unstable_after=nb, limiter=limiter)


def locate_all(sys: DaeSystem, branch: Branch, p: Params) -> list:
    """Classify a branch and refine every record by bisection."""
    refined = []
    for rec in classify_bifurcations(branch):
        try:
            lo, hi = _bracket_for(branch, rec)
            located = locate_bifurcation(
                sys, branch.param, p, lo, hi, rec.kind, rec.limiter)
            refined.append(replace(located, s=rec.s))
        except (NonConvergenceError, SingularJacobianError, ValueError):
            refined.append(rec)   # keep the coarse record
    return refined


def _bracket_for(branch: Branch, rec: BifurcationRecord):
    """Smallest sign-changing bracket of consecutive (or near-consecutive)
    branch points around a coarse record."""
    pts = branch.points

    def ok(lo, hi):
        fa = _test_value(lo, rec.kind, rec.limiter)
        fb = _test_value(hi, rec.kind, rec.limiter)
        return np.isfinite(fa) and np.isfinite(fb) and fa * fb < 0.0

    order = sorted(range(1, len(pts)),
                   key=lambda j: abs(0.5 * (pts[j - 1].s + pts[j].s) - rec.s))
    for j in order[:6]:
        if ok(pts[j - 1], pts[j]):
            return pts[j - 1], pts[j]
    for j in order[:6]:
        for lo_i, hi_i in ((j - 2, j), (j - 1, j + 1), (j - 2, j + 1)):
            if 0 <= lo_i < hi_i < len(pts) and ok(pts[lo_i], pts[hi_i]):
                return pts[lo_i], pts[hi_i]
    raise ValueError(f"no sign-changing bracket found for {rec.kind}")


def trace_boundary_2d(sys: DaeSystem, param1: str, param2: str, grid,
                      settings: ContinuationSettings = ContinuationSettings(),
                      x0=None, params: Params | None = None) -> Boundary2D:
    """First-bifurcation boundary over a grid of a second parameter.

    Each row re-solves the base equilibrium at the grid value, traces the
    branch over ``param1`` and records the first refined bifurcation (or
    an explicit marker).  Row failures are recorded in-row and the sweep
    proceeds.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size and np.any(np.diff(grid) <= 0.0):
        raise ValueError("boundary grid must be strictly increasing")
    if not np.all(np.isfinite(grid)):
        raise ValueError("boundary grid must be finite")
    base_p = params if params is not None else sys.params0
    guess = np.asarray(x0, dtype=float) if x0 is not None \
        else sys.initial_guess()
    rows = []
    for g in grid:
        p_row = base_p.with_value(param2, float(g))
        try:
            sol = newton_equilibrium(sys, guess, p_row)
            branch = continue_branch(sys, sol, param1, settings)
            records = locate_all(sys, branch, p_row)
            if records:
                first = min(records, key=lambda r: r.s)
                rows.append(BoundaryRow(float(g), first.kind, first.lam))
            else:
                rows.append(BoundaryRow(float(g), "none", float("nan")))
        except (NonConvergenceError, SingularJacobianError) as exc:
            rows.append(BoundaryRow(float(g), "error", float("nan"),
                                    str(exc)))
    return Boundary2D(param1, param2, tuple(rows))


def limit_cycle_amplitude(sys: DaeSystem, hb: BifurcationRecord, param: str,
                          lam_probe: float, observable: str,
                          params: Params | None = None,
                          perturbation: float | None = None) -> float:
    """Post-Hopf limit-cycle amplitude of one observable by simulation.

    Integrates from a perturbed equilibrium for ``20/|Im|`` seconds,
    discards the first half and returns half the peak-to-peak of the
    observable; returns 0 when the equilibrium at the probe is stable or
    the oscillation is still decaying (no sustained cycle).
    """
    if hb.eig is None or abs(hb.eig.imag) <= OMEGA_MIN:
        raise ValueError("record does not carry a Hopf crossing pair")
    p = (params if params is not None else sys.params0).with_value(
        param, lam_probe)
    sol = newton_equilibrium(sys, hb.x, p)
    reduced = reduced_state_matrix(sys, sol.x, p)
    eigs, vecs = np.linalg.eig(reduced)
    k = int(np.argmin(np.abs(eigs.imag - abs(hb.eig.imag))
                      + np.abs(eigs.real)))
    if float(np.max(eigs.real)) < 0.0:
        return 0.0
    omega_i = abs(eigs[k].imag) if abs(eigs[k].imag) > OMEGA_MIN \
        else abs(hb.eig.imag)
    direction = np.real(vecs[:, k])
    nrm = np.linalg.norm(direction)
    if nrm == 0.0:
        direction = np.ones_like(direction)
        nrm = np.linalg.norm(direction)
    direction /= nrm
    size = perturbation if perturbation is not None else \
        max(1e-3, math.sqrt(abs(lam_probe - hb.lam)))
    m = sys.mass(p)
    x0 = sol.x.copy()
    dyn = np.flatnonzero(m > 0.0)
    x0[dyn] += size * direction
    t_end = 20.0 / omega_i
    h = 2.0 * math.pi / omega_i / 200.0
    traj = integrate(sys, x0, p, t_end, h)
    col = traj.states[:, sys.state_index(observable)]
    keep = col[col.size // 2:]
    amp = 0.5 * float(np.max(keep) - np.min(keep))
    half = keep.size // 2
    amp_early = 0.5 * float(np.max(keep[:half]) - np.min(keep[:half]))
    amp_late = 0.5 * float(np.max(keep[half:]) - np.min(keep[half:]))
    if amp < AMPLITUDE_FLOOR or amp_late < 0.5 * amp_early:
        return 0.0
    return amp
