"""Candidate verification: conditions (A') and (B') for a proposed pair
(gbar_ai, F), metric completion, end-to-end pregeodesic checks, and the
one-parameter extension scan."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .errors import CompletionError, DegenerateMetricError
from .geometry import (KoszulData, Metric, ScalarField,
                       bracket_coefficients, default_step,
                       frame_metric_function, metric_in_frame)


@dataclass
class Candidate:
    """A proposed projective extension: the mixed block gbar_ai (functions on
    Q, slots against the system's complement fields) and the conformal
    exponent F; gbar_ij may pin the completion block."""

    gbar_ai: object                  # q -> (m, k) array
    F: ScalarField
    gbar_ij: object = None           # q -> (k, k) array, optional
    label: str = ""

    @classmethod
    def from_expressions(cls, system, entries, F_text="0", label=""):
        """entries maps (a_name, i_name) coordinate-name pairs to expression
        strings; unset slots are zero.  Names refer to frame positions: the
        a-names are the D-field order, the i-names the complement order."""
        m, k = system.m, system.k
        d_names = _frame_slot_names(system)[0]
        p_names = _frame_slot_names(system)[1]
        table = [[ex.Num(0.0)] * k for _ in range(m)]
        for (an, inm), text in entries.items():
            a = d_names.index(an)
            i = p_names.index(inm)
            table[a][i] = ex.parse(text) if isinstance(text, str) else text

        coords = system.space.coord_names
        params = {kk: vv for kk, vv in system.params.items()
                  if isinstance(vv, (int, float))}

        def gbar(q):
            env = dict(params)
            env.update(zip(coords, q))
            return np.array([[ex.evaluate(t, env) for t in row]
                             for row in table])

        F = ScalarField.from_expression(F_text, system.space, params=params)
        c = cls(gbar_ai=gbar, F=F, label=label)
        c.gbar_exprs = table
        c.F_expr = getattr(F, "expression", None)
        return c


def _frame_slot_names(system):
    d = tuple(f.name.split("_", 1)[-1] if f.name else str(a)
              for a, f in enumerate(system.frame.fields_d))
    p = tuple(f.name.split("_", 1)[-1] if f.name else str(i)
              for i, f in enumerate(system.frame.fields_perp))
    return d, p


@dataclass
class ResidualReport:
    max_abs: float
    tolerance: float
    passed: bool
    worst_point: list
    worst_indices: list
    per_point: list = field(default_factory=list)

    def to_json_dict(self):
        return {
            "max_abs": self.max_abs,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "worst_point": list(self.worst_point),
            "worst_indices": list(self.worst_indices),
        }

    def to_json(self):
        return json.dumps(self.to_json_dict(), sort_keys=True)


class _PointContext:
    """Shared per-point data for the condition residuals."""

    def __init__(self, system, cand, q):
        q = np.asarray(q, dtype=float)
        frame = system.frame
        m, k, n = frame.m, frame.k, frame.n
        self.q, self.m, self.k = q, m, k
        self.R = bracket_coefficients(frame, q)
        self.kdata = KoszulData(frame,
                                frame_metric_function(system.metric, frame),
                                q, self.R, metric=system.metric)
        G = self.kdata.G
        self.gab = G[:m, :m]
        self.gij = G[m:, m:]
        self.gbar = np.asarray(cand.gbar_ai(q), dtype=float)
        gradF = cand.F.gradient(q)
        A = frame.matrix(q)
        self.XF = A.T @ gradF  # X_alpha(F) for all frame slots
        # directional derivatives of gbar along the D fields
        h = default_step(q)
        self.Dgbar = np.empty((m, m, k))
        for a, f in enumerate(frame.fields_d):
            w = f(q)
            self.Dgbar[a] = (np.asarray(cand.gbar_ai(q + h * w), dtype=float)
                             - np.asarray(cand.gbar_ai(q - h * w),
                                          dtype=float)) / (2 * h)
        # Gamma^d_{ab} v^a v^b coefficients and the multiplier coefficients
        rhs = self.kdata.Qs[:m, :m, :m].reshape(m, -1)
        self.Gd = np.linalg.solve(2.0 * self.gab, rhs).reshape(m, m, m)
        self.lam = 0.5 * self.kdata.Qs[m:, :m, :m]


def condition_residuals(system, cand, q):
    """(A', B') residual arrays sharing one per-point context."""
    ctx = _PointContext(system, cand, q)
    return _condA_from_ctx(ctx), _condB_from_ctx(ctx)


def condition_A_residual(system, cand, q):
    """Symmetric residual T[a, b, c]; zero iff (A') holds at q for all
    constrained velocities.  Components are half the symmetrized form so the
    diagonal entries equal the quadratic-form coefficients."""
    return _condA_from_ctx(_PointContext(system, cand, q))


def _condA_from_ctx(ctx):
    m = ctx.m
    Rk = ctx.R[m:, :m, :m]          # R^k_{ac} with k over complement slots
    gb, gab, XF = ctx.gbar, ctx.gab, ctx.XF[:m]
    T = np.empty((m, m, m))
    for a in range(m):
        for b in range(m):
            for c in range(m):
                rterm = gb[b] @ Rk[:, a, c] + gb[a] @ Rk[:, b, c]
                fterm = (-gab[b, c] * XF[a] - gab[a, c] * XF[b]
                         + 2.0 * gab[a, b] * XF[c])
                T[a, b, c] = 0.5 * (rterm + fterm)
    return T


def condition_B_residual(system, cand, q):
    """Residual coefficients B[i, a, b] (symmetric in a, b); zero iff (B')
    holds at q."""
    return _condB_from_ctx(_PointContext(system, cand, q))


def _condB_from_ctx(ctx):
    m, k = ctx.m, ctx.k
    R, gb = ctx.R, ctx.gbar
    XFa, XFi = ctx.XF[:m], ctx.XF[m:]
    B = np.empty((k, m, m))
    for i in range(k):
        M = ctx.Dgbar[:, :, i]                       # X_a(gbar_{b i})
        M = M - np.einsum("d,dab->ab", gb[:, i], ctx.Gd)
        M = M + ctx.lam[i]
        # theta_kappa R^kappa_{i a} v^a  ->  gbar_{b kappa} R^kappa_{i a}
        M = M + np.einsum("bk,ka->ab", gb, R[m:, m + i, :m])
        M = M + np.outer(XFa, gb[:, i])              # gbar_{b i} X_a(F)
        M = M - ctx.gab * XFi[i]
        B[i] = 0.5 * (M + M.T)
    return B


def grid_residual_report(system, cand, which, grid=None, tol=1e-6):
    """Run a condition over a sample grid and aggregate a ResidualReport."""
    fn = {"A": condition_A_residual, "B": condition_B_residual}[which]
    pts = system.grid() if grid is None else grid
    per_point = []
    worst = -1.0
    worst_q, worst_idx = None, None
    for q in pts:
        T = fn(system, cand, q)
        val = float(np.max(np.abs(T)))
        per_point.append((np.asarray(q), val))
        if val > worst:
            worst = val
            worst_q = np.asarray(q)
            worst_idx = np.unravel_index(int(np.argmax(np.abs(T))), T.shape)
    return ResidualReport(max_abs=worst, tolerance=tol, passed=worst <= tol,
                          worst_point=list(map(float, worst_q)),
                          worst_indices=list(map(int, worst_idx)),
                          per_point=per_point)


def chaplygin_B_residual(structure, cand, traj):
    """Transport-form residual of (B') along an integrated trajectory:
    d/dt C_i + (d/dt F) C_i by central differences of the samples."""
    from .chaplygin import ChaplyginStructure  # cycle guard
    if not isinstance(structure, ChaplyginStructure):
        raise TypeError("chaplygin_B_residual needs a ChaplyginStructure")
    ts = traj.times
    Cs, Fs = [], []
    for s in traj.states:
        q = s.q
        G_ai = structure.blocks(q).G_ai
        gb = np.asarray(cand.gbar_ai(q), dtype=float)
        Cs.append((gb + G_ai).T @ s.v[: structure.m])
        Fs.append(cand.F(q))
    Cs = np.array(Cs)
    Fs = np.array(Fs)
    out = []
    for j in range(1, len(ts) - 1):
        dt0, dt1 = ts[j] - ts[j - 1], ts[j + 1] - ts[j]
        Cdot = (Cs[j + 1] - Cs[j - 1]) / (dt0 + dt1)
        Fdot = (Fs[j + 1] - Fs[j - 1]) / (dt0 + dt1)
        out.append(Cdot + Fdot * Cs[j])
    return np.array(out)


@dataclass
class CompletionInfo:
    s: float
    frame_matrix: object    # q -> full n x n hat-metric in the frame
    eigenvalues: dict       # per sampled point (tuple(q) -> eigenvalues)


def completion_frame_matrix(system, cand, s):
    """q -> e^{2F} [[g_ab, gbar],[gbar^T, gbar_ij]] with the Schur filling
    gbar_ij = gbar^T g_ab^{-1} gbar + s*g_ij when no block was supplied."""
    frame = system.frame
    m = frame.m

    def mat(q):
        fm = metric_in_frame(system.metric, frame, q)
        gb = np.asarray(cand.gbar_ai(q), dtype=float)
        if cand.gbar_ij is not None:
            gij = np.asarray(cand.gbar_ij(q), dtype=float)
        else:
            gij = gb.T @ np.linalg.solve(fm.g_ab, gb) + s * fm.g_ij
        n = frame.n
        out = np.empty((n, n))
        out[:m, :m] = fm.g_ab
        out[:m, m:] = gb
        out[m:, :m] = gb.T
        out[m:, m:] = gij
        return math.exp(2.0 * cand.F(q)) * out

    return mat


def complete_metric(system, cand, grid=None, margin=1e-6, s_max=2 ** 10):
    """Complete a candidate to a full metric on Q.

    Returns (Metric in the coordinate basis, CompletionInfo).  Raises
    CompletionError when no doubling step produces a positive-definite
    matrix on the grid (reporting the worst eigenvalue seen)."""
    frame = system.frame
    pts = system.grid() if grid is None else grid
    eigs = {}

    def pd_everywhere(s):
        mat = completion_frame_matrix(system, cand, s)
        worst = np.inf
        for q in pts:
            w = np.linalg.eigvalsh(mat(q))
            eigs[tuple(np.round(q, 12))] = w
            worst = min(worst, float(w[0]))
        return worst

    if cand.gbar_ij is not None:
        worst = pd_everywhere(0.0)
        if worst <= 0.0:
            raise CompletionError(
                f"supplied gbar_ij is not positive definite "
                f"(worst eigenvalue {worst:.6g})", worst_eigenvalue=worst)
        s = 0.0
    else:
        s = 1.0
        while True:
            # Schur complement of the filled block is s * g_ij
            worst_schur = np.inf
            for q in pts:
                fm = metric_in_frame(system.metric, frame, q)
                worst_schur = min(worst_schur,
                                  float(np.linalg.eigvalsh(s * fm.g_ij)[0]))
            if worst_schur >= margin:
                break
            s *= 2.0
            if s > s_max:
                raise CompletionError(
                    f"no completion with s <= {s_max} "
                    f"(worst Schur eigenvalue {worst_schur:.6g})",
                    worst_eigenvalue=worst_schur)
        worst = pd_everywhere(s)
        if worst <= 0.0:
            raise CompletionError(
                f"completed matrix not positive definite "
                f"(worst eigenvalue {worst:.6g})", worst_eigenvalue=worst)

    hat_frame = completion_frame_matrix(system, cand, s)

    def coord_matrix(q):
        A = frame.matrix(q)
        Ainv = np.linalg.inv(A)
        return Ainv.T @ hat_frame(q) @ Ainv

    metric = Metric(coord_matrix, name=f"completed:{cand.label or 'candidate'}")
    for q in pts:
        metric.check_positive_definite(q)
    return metric, CompletionInfo(s=s, frame_matrix=hat_frame,
                                  eigenvalues=eigs)


def pregeodesic_residual(system, ghat, F, state):
    """(a-part, i-part) defect of the projective-extension equations at a
    constrained state; ghat is a coordinate-basis metric on Q."""
    frame = system.frame
    m = frame.m
    q = state.q
    va = state.v
    if va.size != m:
        raise ValueError("pregeodesic_residual needs a constrained state")
    v = np.zeros(frame.n)
    v[:m] = va
    R = bracket_coefficients(frame, q)
    knh = KoszulData(frame, frame_metric_function(system.metric, frame), q, R,
                     metric=system.metric)
    a_nh = -np.linalg.solve(2.0 * knh.G[:m, :m], knh.rhs(v)[:m])
    khat = KoszulData(frame, frame_metric_function(ghat, frame), q, R)
    try:
        gam_hat = np.linalg.solve(2.0 * khat.G, khat.rhs(v))
    except np.linalg.LinAlgError:
        raise DegenerateMetricError(f"completed metric singular at {q}") from None
    P = float(F.gradient(q) @ (frame.matrix(q)[:, :m] @ va))
    res_a = a_nh - (-gam_hat[:m] + P * va)
    res_i = gam_hat[m:]
    return res_a, res_i


# ---------------------------------------------------------------- the scan

@dataclass
class ScanResult:
    best_beta: float
    best_residual: float
    curve: list      # (beta, residual) samples from the coarse grid


def scan_preserving_extension(system, ansatz, betas, points=None,
                              velocities=None, refine_iters=70):
    """Minimize the combined (A')+(B') residual (F = 0) over a scalar family.

    ansatz(beta) -> Candidate.  A coarse sweep over betas is refined by
    golden-section around the best bracket (the objective is convex in beta
    for the affine families used here)."""
    betas = list(betas)
    if not betas:
        raise ValueError("empty scan grid")
    pts = _default_scan_points(system) if points is None else points
    vels = _default_scan_velocities(system.m) if velocities is None \
        else velocities

    def objective(beta):
        cand = ansatz(beta)
        worst = 0.0
        for q in pts:
            A, B = condition_residuals(system, cand, q)
            worst = max(worst, float(np.max(np.abs(A))),
                        float(np.max(np.abs(B))))
        return worst

    curve = [(b, objective(b)) for b in betas]
    i = int(np.argmin([r for _, r in curve]))
    lo = betas[max(0, i - 1)]
    hi = betas[min(len(betas) - 1, i + 1)]
    a, b = float(lo), float(hi)
    gr = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - gr * (b - a)
    d = a + gr * (b - a)
    fc, fd = objective(c), objective(d)
    for _ in range(refine_iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - gr * (b - a)
            fc = objective(c)
        else:
            a, c, fc = c, d, fd
            d = a + gr * (b - a)
            fd = objective(d)
    best = 0.5 * (a + b)
    return ScanResult(best_beta=best, best_residual=objective(best),
                      curve=curve)


def _default_scan_points(system):
    grid = system.grid(2)
    pick = grid[:: max(1, len(grid) // 6)]
    center = 0.5 * (system.domain.lows + system.domain.highs)
    return np.vstack([pick, center[None, :]])


def _default_scan_velocities(m):
    vels = [np.eye(m)[a] for a in range(m)]
    vels.append(np.ones(m))
    if m >= 2:
        w = np.ones(m)
        w[1] = -1.3
        vels.append(w)
    return vels


def carriage_scan_ansatz(system):
    """The invariant one-parameter family for the two-wheeled carriage scan:
    per wheel, beta*(u +/- eta) over the complement slots, where u is the
    body-heading coframe on the generators and eta the angular slot."""

    def make(beta):
        def gbar(q):
            x, y, th = q[2], q[3], q[4]
            u = np.array([math.cos(th), math.sin(th),
                          x * math.sin(th) - y * math.cos(th)])
            eta = np.array([0.0, 0.0, 1.0])
            return beta * np.array([u + eta, u - eta])

        return Candidate(gbar_ai=gbar, F=ScalarField.constant(0.0),
                         label=f"carriage-scan:{beta:.6g}")

    return make
