"""Numerical differential geometry kernel.

Vector fields with analytic or finite-difference jacobians, anholonomic
frames, frame metrics, Lie brackets, and the Koszul contractions that back
all second-order dynamics.  Everything here is a pure function of its
arguments; per-point work inside one call is memoised but nothing is cached
across calls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .errors import (DegenerateFrameError, DegenerateMetricError,
                     NumericDomainError)

FD_SCALE = 1e-6  # central-difference step = FD_SCALE * max(1, |q|_inf)


def default_step(q):
    return FD_SCALE * max(1.0, float(np.max(np.abs(q))))


@dataclass(frozen=True)
class ConfigSpace:
    """Names the chart coordinates; dim >= 2 and names unique."""

    coord_names: tuple

    def __post_init__(self):
        names = tuple(self.coord_names)
        object.__setattr__(self, "coord_names", names)
        if len(names) < 2:
            raise ValueError("configuration space needs dim >= 2")
        if len(set(names)) != len(names):
            raise ValueError("coordinate names must be unique")

    @property
    def dim(self):
        return len(self.coord_names)

    def index(self, name):
        return self.coord_names.index(name)


class VectorField:
    """Coordinate components of a vector field, with a jacobian.

    The jacobian is analytic when the field was built from expression ASTs
    and a central finite difference otherwise.
    """

    def __init__(self, func, jac=None, name=""):
        self._func = func
        self._jac = jac
        self.name = name

    def __call__(self, q):
        v = np.asarray(self._func(np.asarray(q, dtype=float)), dtype=float)
        if not np.all(np.isfinite(v)):
            raise NumericDomainError(
                f"vector field {self.name or '<anonymous>'} non-finite at {q}")
        return v

    @property
    def has_analytic_jacobian(self):
        return self._jac is not None

    def jacobian(self, q):
        q = np.asarray(q, dtype=float)
        if self._jac is not None:
            J = np.asarray(self._jac(q), dtype=float)
        else:
            h = default_step(q)
            n = q.size
            cols = []
            for j in range(n):
                e = np.zeros(n)
                e[j] = h
                cols.append((self(q + e) - self(q - e)) / (2 * h))
            J = np.column_stack(cols)
        if not np.all(np.isfinite(J)):
            raise NumericDomainError(
                f"jacobian of {self.name or '<anonymous>'} non-finite at {q}")
        return J

    @classmethod
    def from_expressions(cls, component_texts, space, params=None, name=""):
        """Build from one expression string (or Expr) per coordinate.

        Components may reference coordinates and parameter names; the
        jacobian is assembled by exact differentiation.
        """
        params = dict(params or {})
        coords = space.coord_names
        comps = [t if isinstance(t, ex.Expr) else ex.parse(t)
                 for t in component_texts]
        if len(comps) != space.dim:
            raise ValueError("component count must equal space dimension")
        derivs = [[ex.differentiate(c, name_) for name_ in coords]
                  for c in comps]
        cfns = [ex.compile_fn(c, coords, params) for c in comps]
        dfns = [[ex.compile_fn(d, coords, params) for d in row]
                for row in derivs]

        def func(q):
            return np.array([f_(*q) for f_ in cfns])

        def jac(q):
            return np.array([[d_(*q) for d_ in row] for row in dfns])

        f = cls(func, jac, name=name)
        f.expressions = tuple(comps)
        return f


class ScalarField:
    """Scalar function on Q with a gradient (analytic when expression-built)."""

    def __init__(self, func, grad=None, name=""):
        self._func = func
        self._grad = grad
        self.name = name

    def __call__(self, q):
        v = float(self._func(np.asarray(q, dtype=float)))
        if not np.isfinite(v):
            raise NumericDomainError(
                f"scalar field {self.name or '<anonymous>'} non-finite at {q}")
        return v

    def gradient(self, q):
        q = np.asarray(q, dtype=float)
        if self._grad is not None:
            return np.asarray(self._grad(q), dtype=float)
        h = default_step(q)
        g = np.zeros(q.size)
        for j in range(q.size):
            e = np.zeros(q.size)
            e[j] = h
            g[j] = (self(q + e) - self(q - e)) / (2 * h)
        return g

    @classmethod
    def from_expression(cls, text, space, params=None, name=""):
        params = dict(params or {})
        coords = space.coord_names
        e0 = text if isinstance(text, ex.Expr) else ex.parse(text)
        grads = [ex.differentiate(e0, c) for c in coords]
        f0 = ex.compile_fn(e0, coords, params)
        gfns = [ex.compile_fn(g, coords, params) for g in grads]

        f = cls(lambda q: f0(*q),
                lambda q: np.array([g_(*q) for g_ in gfns]),
                name=name)
        f.expression = e0
        return f

    @classmethod
    def constant(cls, value):
        v = float(value)
        return cls(lambda q: v, lambda q: np.zeros(len(q)), name=str(value))


def directional_derivative(scalar, field, q):
    """Central difference of a scalar callable along field at q."""
    q = np.asarray(q, dtype=float)
    h = default_step(q)
    v = field(q) if isinstance(field, VectorField) else np.asarray(field)
    return (scalar(q + h * v) - scalar(q - h * v)) / (2 * h)


class Metric:
    """Coordinate-basis metric g_{alpha beta}(q).

    Positive definiteness is enforced by validation except when the
    possibly_degenerate flag is set (degenerate/indefinite built-ins).
    """

    def __init__(self, matrix_func, derivative_func=None,
                 possibly_degenerate=False, name=""):
        self._func = matrix_func
        self._deriv = derivative_func
        self.possibly_degenerate = possibly_degenerate
        self.name = name

    @property
    def has_analytic_derivative(self):
        return self._deriv is not None

    def derivative(self, q):
        """D[mu][alpha, beta] = d g_{alpha beta} / d q^mu (analytic only)."""
        return np.asarray(self._deriv(np.asarray(q, dtype=float)),
                          dtype=float)

    def __call__(self, q):
        g = np.asarray(self._func(np.asarray(q, dtype=float)), dtype=float)
        return 0.5 * (g + g.T)

    def check_positive_definite(self, q):
        try:
            np.linalg.cholesky(self(q))
        except np.linalg.LinAlgError:
            raise DegenerateMetricError(
                f"metric {self.name or '<anonymous>'} not PD at {q}") from None

    @classmethod
    def euclidean(cls, n):
        eye = np.eye(n)
        zeros = np.zeros((n, n, n))
        return cls(lambda q: eye, derivative_func=lambda q: zeros,
                   name="euclidean")

    @classmethod
    def from_expressions(cls, rows, space, params=None,
                         possibly_degenerate=False, name=""):
        params = dict(params or {})
        coords = space.coord_names
        n = space.dim
        entries = [[t if isinstance(t, ex.Expr) else ex.parse(t) for t in row]
                   for row in rows]
        if len(entries) != n or any(len(r) != n for r in entries):
            raise ValueError("metric needs an n x n table of expressions")

        cfns = [[ex.compile_fn(t, coords, params) for t in row]
                for row in entries]
        dfns = [[[ex.compile_fn(ex.differentiate(t, c), coords, params)
                  for t in row] for row in entries] for c in coords]

        def func(q):
            return np.array([[f_(*q) for f_ in row] for row in cfns])

        def deriv(q):
            return np.array([[[f_(*q) for f_ in row] for row in layer]
                             for layer in dfns])

        m = cls(func, derivative_func=deriv,
                possibly_degenerate=possibly_degenerate, name=name)
        m.expressions = entries
        return m


@dataclass(frozen=True)
class Frame:
    """Anholonomic frame split into the constraint part and its complement.

    fields_d span the constraint distribution (indices a = 0..m-1); the
    complement fields (indices i = 0..k-1) are g-orthogonal to them except
    for flagged degenerate built-ins.
    """

    fields_d: tuple
    fields_perp: tuple
    orthogonal: bool = True

    def __post_init__(self):
        object.__setattr__(self, "fields_d", tuple(self.fields_d))
        object.__setattr__(self, "fields_perp", tuple(self.fields_perp))

    @property
    def m(self):
        return len(self.fields_d)

    @property
    def k(self):
        return len(self.fields_perp)

    @property
    def n(self):
        return self.m + self.k

    @property
    def fields(self):
        return self.fields_d + self.fields_perp

    def matrix(self, q):
        """Columns are the frame fields' coordinate components at q."""
        return np.column_stack([f(q) for f in self.fields])


@dataclass(frozen=True)
class FramedMetric:
    """Metric blocks in a frame at one point; g_ai vanishes for orthogonal
    frames and is kept for diagnostics."""

    g_ab: np.ndarray
    g_ij: np.ndarray
    g_ai: np.ndarray

    @property
    def full(self):
        m, k = self.g_ab.shape[0], self.g_ij.shape[0]
        out = np.zeros((m + k, m + k))
        out[:m, :m] = self.g_ab
        out[m:, m:] = self.g_ij
        out[:m, m:] = self.g_ai
        out[m:, :m] = self.g_ai.T
        return out


@dataclass
class Box:
    """Axis-aligned sample domain with a default lattice resolution."""

    lows: np.ndarray
    highs: np.ndarray
    points_per_axis: int = 5

    def __post_init__(self):
        self.lows = np.asarray(self.lows, dtype=float)
        self.highs = np.asarray(self.highs, dtype=float)
        if self.lows.shape != self.highs.shape or np.any(self.lows > self.highs):
            raise ValueError("invalid box bounds")

    def grid(self, points_per_axis=None):
        p = points_per_axis or self.points_per_axis
        axes = [np.linspace(lo, hi, p) if hi > lo else np.array([lo])
                for lo, hi in zip(self.lows, self.highs)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def sample(self, rng, count):
        return rng.uniform(self.lows, self.highs, size=(count, self.lows.size))


@dataclass
class FramedSystem:
    """A purely kinetic nonholonomic system with an explicit frame."""

    space: ConfigSpace
    metric: Metric
    frame: Frame
    name: str = ""
    params: dict = field(default_factory=dict)
    domain: Box = None
    action: object = None  # GroupAction for Chaplygin built-ins/configs

    @property
    def m(self):
        return self.frame.m

    @property
    def k(self):
        return self.frame.k

    @property
    def n(self):
        return self.frame.n

    def grid(self, points_per_axis=None):
        if self.domain is None:
            raise ValueError(f"system {self.name!r} declares no domain box")
        return self.domain.grid(points_per_axis)


# ------------------------------------------------------------- operations

def lie_bracket(X, Y, q):
    """[X, Y] at q via jacobians: JY.X - JX.Y."""
    q = np.asarray(q, dtype=float)
    out = Y.jacobian(q) @ X(q) - X.jacobian(q) @ Y(q)
    if not np.all(np.isfinite(out)):
        raise NumericDomainError(f"bracket non-finite at {q}")
    return out


def frame_decompose(frame, v, q):
    """Coefficients c with sum_alpha c^alpha X_alpha(q) = v."""
    A = frame.matrix(q) if isinstance(frame, Frame) else np.column_stack(
        [f(q) for f in frame])
    v = np.asarray(v, dtype=float)
    try:
        c = np.linalg.solve(A, v)
    except np.linalg.LinAlgError:
        raise DegenerateFrameError(f"frame matrix singular at {q}") from None
    resid = np.linalg.norm(A @ c - v)
    if resid > 1e-10 * max(1.0, np.linalg.norm(v)):
        raise DegenerateFrameError(
            f"frame solve residual {resid:.3e} at {q}")
    return c


def bracket_coefficients(frame, q):
    """Full antisymmetric table R[gamma, alpha, beta] at q."""
    n = frame.n
    fields = frame.fields
    A = frame.matrix(q)
    R = np.zeros((n, n, n))
    for a in range(n):
        for b in range(a + 1, n):
            w = lie_bracket(fields[a], fields[b], q)
            try:
                c = np.linalg.solve(A, w)
            except np.linalg.LinAlgError:
                raise DegenerateFrameError(
                    f"frame matrix singular at {q}") from None
            R[:, a, b] = c
            R[:, b, a] = -c
    return R


def metric_in_frame(metric, frame, q):
    """Metric blocks g_ab, g_ij (and the diagnostic g_ai) at q."""
    A = frame.matrix(q)
    G = A.T @ metric(q) @ A
    m = frame.m
    return FramedMetric(g_ab=G[:m, :m], g_ij=G[m:, m:], g_ai=G[:m, m:])


def frame_metric_function(metric, frame):
    """q -> full n x n frame-component matrix of a coordinate metric."""

    def gf(q):
        A = frame.matrix(q)
        return A.T @ metric(q) @ A

    return gf


class KoszulData:
    """Per-point context for Koszul contractions: bracket table, frame
    metric, and the symmetrized quadratic-form coefficients Qs with

        M_alpha(v) = Qs[alpha, beta, gamma] v^beta v^gamma,
        2 g Gamma(v, v) = M(v).
    """

    def __init__(self, frame, frame_metric, q, R=None, metric=None):
        q = np.asarray(q, dtype=float)
        n = frame.n
        self.q = q
        self.R = bracket_coefficients(frame, q) if R is None else R
        analytic = (metric is not None and metric.has_analytic_derivative
                    and all(f.has_analytic_jacobian for f in frame.fields))
        if analytic:
            A = frame.matrix(q)
            g = metric(q)
            self.G = A.T @ g @ A
            Dg = metric.derivative(q)
            jacs = [f.jacobian(q) for f in frame.fields]
            DG = np.empty((n, n, n))
            for b in range(n):
                w = A[:, b]
                # columnwise transport of the frame plus the metric gradient
                JA = np.column_stack([jacs[c] @ w for c in range(n)])
                M1 = JA.T @ g @ A
                M2 = A.T @ np.einsum("m,mab->ab", w, Dg) @ A
                DG[b] = M1 + M1.T + M2
        else:
            self.G = frame_metric(q)
            h = default_step(q)
            DG = np.empty((n, n, n))
            for b, f in enumerate(frame.fields):
                w = f(q)
                DG[b] = (frame_metric(q + h * w)
                         - frame_metric(q - h * w)) / (2 * h)
        self.DG = DG
        # Q[alpha, beta, gamma] = 2 DG[beta][gamma, alpha]
        #                         - DG[alpha][beta, gamma]
        #                         - 2 g_{delta gamma} R^delta_{beta alpha}
        Q = (2.0 * np.transpose(DG, (2, 0, 1))
             - DG
             - 2.0 * np.einsum("dg,dba->abg", self.G, self.R))
        self.Qs = 0.5 * (Q + np.transpose(Q, (0, 2, 1)))

    def rhs(self, v):
        v = np.asarray(v, dtype=float)
        return np.einsum("abg,b,g->a", self.Qs, v, v)


def koszul_rhs(frame, frame_metric, q, v, R=None, metric=None):
    """RHS vector M with 2 g Gamma v v = M in the frame.

    M_alpha = [2 X_beta(g_{gamma alpha}) - X_alpha(g_{beta gamma})
               - 2 g_{delta gamma} R^delta_{beta alpha}] v^beta v^gamma.
    Directional derivatives of the frame metric use central differences
    along the frame fields.
    """
    return KoszulData(frame, frame_metric, q, R=R, metric=metric).rhs(v)


def christoffel_contraction(metric, frame, q, va, eps=0.0):
    """Levi-Civita contractions (Gamma^d_ab v^a v^b, Gamma^k_ab v^a v^b)
    for a constrained velocity (components only along the D fields).

    eps adds a regularization eps*I to the g_ab block before solving.
    """
    m, k = frame.m, frame.k
    v = np.zeros(frame.n)
    v[:m] = np.asarray(va, dtype=float)
    gf = frame_metric_function(metric, frame)
    data = KoszulData(frame, gf, q, metric=metric)
    M = data.rhs(v)
    G = data.G
    gab = G[:m, :m] + eps * np.eye(m)
    try:
        Gd = np.linalg.solve(2.0 * gab, M[:m])
    except np.linalg.LinAlgError:
        raise DegenerateMetricError(f"g_ab block singular at {q}") from None
    if k:
        try:
            Gk = np.linalg.solve(2.0 * G[m:, m:], M[m:])
        except np.linalg.LinAlgError:
            raise DegenerateMetricError(f"g_ij block singular at {q}") from None
    else:
        Gk = np.zeros(0)
    return Gd, Gk


def koszul_k_covector(metric, frame, q, va):
    """g_ki Gamma^k_ab v^a v^b read directly off the Koszul RHS (no g_ij
    inverse); this is the Lagrange-multiplier covector."""
    m = frame.m
    v = np.zeros(frame.n)
    v[:m] = np.asarray(va, dtype=float)
    gf = frame_metric_function(metric, frame)
    M = koszul_rhs(frame, gf, q, v, metric=metric)
    return 0.5 * M[m:]


def jacobi_residual(frame, q, delta=1e-4):
    """Max over triples of |[[X,Y],Z] + [[Y,Z],X] + [[Z,X],Y]| components.

    Nested brackets are taken with finite differences of the single-bracket
    values (step delta), so the bound is looser than for single brackets.
    """
    fields = frame.fields
    n = frame.n
    q = np.asarray(q, dtype=float)

    def bracket_func(a, b):
        return lambda qq: lie_bracket(fields[a], fields[b], qq)

    def fd_bracket(F, Z, qq):
        # [F, Z] where F is only available as a callable (no jacobian)
        h = delta
        nloc = qq.size
        JF = np.column_stack([
            (F(qq + h * e) - F(qq - h * e)) / (2 * h)
            for e in np.eye(nloc)])
        return Z.jacobian(qq) @ F(qq) - JF @ Z(qq)

    worst = 0.0
    for a in range(n):
        for b in range(a + 1, n):
            for c in range(b + 1, n):
                s = (fd_bracket(bracket_func(a, b), fields[c], q)
                     + fd_bracket(bracket_func(b, c), fields[a], q)
                     + fd_bracket(bracket_func(c, a), fields[b], q))
                worst = max(worst, float(np.max(np.abs(s))))
    return worst
