"""System definitions: the three built-in systems, the TOML config loader,
and the deterministic frame-construction machinery they share."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import expr as ex
from .errors import ConfigError, DegenerateMetricError
from .geometry import (Box, ConfigSpace, Frame, FramedSystem, Metric,
                       VectorField, metric_in_frame)

BUILTIN_NAMES = ("particle", "carriage", "r4math")


@dataclass
class GroupAction:
    """Chaplygin symmetry data attached to a system.

    The section re-embeds a reduced point; shift moves a point along the
    group for section-independence cross checks; project reads off the
    reduced coordinates (all built-ins use coordinate subsets).
    """

    generators: tuple
    reduced_coords: tuple
    reduced_indices: tuple
    section: object            # qred -> q
    shift: object              # (q, t) -> q
    fiber_coords: tuple = ()

    @property
    def k(self):
        return len(self.generators)

    @property
    def m(self):
        return len(self.reduced_coords)

    def project(self, q):
        return np.asarray(q, dtype=float)[list(self.reduced_indices)]


@dataclass
class SystemSpec:
    """Parsed configuration, before frames are constructed."""

    name: str
    coords: tuple
    metric_rows: list
    possibly_degenerate: bool
    constraint_oneforms: list    # list of rows of Expr, may be empty
    frame_d: list                # list of component-Expr rows, may be empty
    frame_perp: list
    frame_orthogonal: bool
    group_generators: list
    group_reduced: tuple
    group_section: list
    params: dict
    domain_lows: list
    domain_highs: list
    grid_points: int


# ----------------------------------------------------- expression utilities

def _e(text):
    return ex.parse(text) if isinstance(text, str) else text


def _const(x):
    return ex.Num(float(x))


def _dot_g(comps_a, grows, comps_b):
    """Expression for a^T g b with expression entries."""
    total = _const(0.0)
    for i, ai in enumerate(comps_a):
        for j, bj in enumerate(comps_b):
            total = ex.add(total, ex.mul(ai, ex.mul(grows[i][j], bj)))
    return total


def _expr_inverse(mat):
    """Cofactor inverse of a small (<=3) expression matrix."""
    n = len(mat)
    if n == 1:
        return [[ex.div(_const(1.0), mat[0][0])]]
    if n == 2:
        det = ex.sub(ex.mul(mat[0][0], mat[1][1]), ex.mul(mat[0][1], mat[1][0]))
        return [[ex.div(mat[1][1], det), ex.div(ex.neg(mat[0][1]), det)],
                [ex.div(ex.neg(mat[1][0]), det), ex.div(mat[0][0], det)]]
    if n == 3:
        def det2(a, b, c, d):
            return ex.sub(ex.mul(a, d), ex.mul(b, c))

        cof = [[None] * 3 for _ in range(3)]
        for i in range(3):
            for j in range(3):
                rows = [r for r in range(3) if r != i]
                cols = [c for c in range(3) if c != j]
                minor = det2(mat[rows[0]][cols[0]], mat[rows[0]][cols[1]],
                             mat[rows[1]][cols[0]], mat[rows[1]][cols[1]])
                cof[i][j] = minor if (i + j) % 2 == 0 else ex.neg(minor)
        det = _const(0.0)
        for j in range(3):
            det = ex.add(det, ex.mul(mat[0][j], cof[0][j]))
        return [[ex.div(cof[j][i], det) for j in range(3)] for i in range(3)]
    raise ValueError("expression inverse supported up to 3x3")


def _lincomb(rows, coeffs):
    """Sum_i coeffs[i] * rows[i], componentwise over expression rows."""
    n = len(rows[0])
    out = [_const(0.0)] * n
    for c, row in zip(coeffs, rows):
        out = [ex.add(o, ex.mul(c, comp)) for o, comp in zip(out, row)]
    return out


def chaplygin_complement_exprs(d_rows, vert_rows, grows):
    """Closed-form orthogonal complement X_i = V_i + K^b_i X_b with
    K = -G^{ab} G_{ai}; all inputs are expression component rows."""
    m = len(d_rows)
    Gab = [[_dot_g(d_rows[a], grows, d_rows[b]) for b in range(m)]
           for a in range(m)]
    Ginv = _expr_inverse(Gab)
    perp = []
    for vrow in vert_rows:
        Gai = [_dot_g(d_rows[a], grows, vrow) for a in range(m)]
        K = [ex.neg(sum_expr([ex.mul(Ginv[b][a], Gai[a]) for a in range(m)]))
             for b in range(m)]
        comp = _lincomb([vrow] + list(d_rows), [_const(1.0)] + K)
        perp.append(comp)
    return perp


def sum_expr(terms):
    total = _const(0.0)
    for t in terms:
        total = ex.add(total, t)
    return total


# ------------------------------------------------------------ construction

def _field_from_rows(rows, space, params, name=""):
    return VectorField.from_expressions(rows, space, params=params, name=name)


def constraint_kernel_exprs(oneforms, space, params, center):
    """Kernel basis of the constraint one-forms by symbolic Gaussian
    elimination.  The pivot pattern is chosen numerically at the box center
    (max-|entry| partial pivoting, ties broken by coordinate order) and the
    elimination itself is exact on the expression entries."""
    k = len(oneforms)
    n = space.dim
    env = dict(params)
    env.update(zip(space.coord_names, center))
    num = np.array([[ex.evaluate(mu, env) for mu in row] for row in oneforms])
    rows = [list(r) for r in oneforms]
    pivots = []
    work = num.astype(float)
    for r in range(k):
        candidates = [j for j in range(n) if j not in pivots]
        j = max(candidates, key=lambda jj: (abs(work[r, jj]), -jj))
        if abs(work[r, j]) < 1e-12:
            raise ConfigError("dependent_constraints",
                              f"constraint row {r} dependent at box center")
        pivots.append(j)
        work[r] = work[r] / work[r, j]
        rows[r] = [ex.div(e_, rows[r][j]) for e_ in rows[r]]
        for r2 in range(k):
            if r2 == r:
                continue
            factor = work[r2, j]
            work[r2] = work[r2] - factor * work[r]
            f_expr = rows[r2][j]
            rows[r2] = [ex.sub(a, ex.mul(f_expr, b))
                        for a, b in zip(rows[r2], rows[r])]
    free = [j for j in range(n) if j not in pivots]
    basis = []
    for f in free:
        comps = [_const(0.0)] * n
        comps[f] = _const(1.0)
        for r, p in enumerate(pivots):
            comps[p] = ex.neg(rows[r][f])
        basis.append(comps)
    return basis


def _numeric_complement(metric, d_fields, space):
    """Project coordinate fields off D with g and orthonormalize; slots are
    taken in coordinate order and near-null directions skipped."""
    n = space.dim
    m = len(d_fields)

    def basis_at(q):
        A = np.column_stack([f(q) for f in d_fields])
        g = metric(q)
        chosen = []
        for j in range(n):
            v = np.zeros(n)
            v[j] = 1.0
            # project off D
            GA = g @ A
            coef = np.linalg.solve(A.T @ GA, GA.T @ v)
            w = v - A @ coef
            for u in chosen:
                w = w - (u @ g @ w) * u
            norm2 = float(w @ g @ w)
            if norm2 > 1e-12:
                chosen.append(w / math.sqrt(norm2))
            if len(chosen) == n - m:
                break
        if len(chosen) < n - m:
            raise DegenerateMetricError("complement construction failed")
        return chosen

    def make(i):
        return VectorField(lambda q, i=i: basis_at(q)[i], name=f"perp{i}")

    return [make(i) for i in range(n - m)]


def validate_system(system, grid_points=3, orthogonality_tol=1e-9):
    """Invariant checks on a sample grid: frame invertibility, metric
    symmetry/PD (unless flagged), frame orthogonality (unless flagged)."""
    report = {"orthogonality": 0.0}
    for q in system.grid(grid_points):
        A = system.frame.matrix(q)
        if abs(np.linalg.det(A)) < 1e-12:
            raise ConfigError("bad_value", f"frame singular at {q}")
        if not system.metric.possibly_degenerate:
            system.metric.check_positive_definite(q)
        if system.frame.orthogonal:
            fm = metric_in_frame(system.metric, system.frame, q)
            off = float(np.max(np.abs(fm.g_ai))) if system.k else 0.0
            report["orthogonality"] = max(report["orthogonality"], off)
            if off > orthogonality_tol:
                raise ConfigError("bad_value",
                                  f"frame not g-orthogonal at {q}: {off:.2e}")
    return report


# ------------------------------------------------------------------ builtins

def builtin(name, **params):
    if name == "particle":
        return _particle(**params)
    if name == "carriage":
        return _carriage(**params)
    if name == "r4math":
        return _r4math(**params)
    raise ConfigError("bad_value", f"unknown builtin {name!r}; "
                      f"choose from {BUILTIN_NAMES}")


def _particle(rho="y"):
    space = ConfigSpace(("x", "y", "z"))
    rho_e = _e(rho)
    one, zero = _const(1.0), _const(0.0)
    grows = [[one if i == j else zero for j in range(3)] for i in range(3)]
    d_rows = [[one, zero, rho_e], [zero, one, zero]]
    vert = [[zero, zero, one]]
    perp_rows = chaplygin_complement_exprs(d_rows, vert, grows)
    frame = Frame(
        (_field_from_rows(d_rows[0], space, {}, "X_x"),
         _field_from_rows(d_rows[1], space, {}, "X_y")),
        (_field_from_rows(perp_rows[0], space, {}, "X_z"),))
    metric = Metric.euclidean(3)
    system = FramedSystem(
        space=space, metric=metric, frame=frame, name="particle",
        params={"rho": ex.pretty(rho_e)},
        domain=Box([-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]))
    rho_vars = ex.variables(rho_e)
    if "z" not in rho_vars:
        system.action = GroupAction(
            generators=(_field_from_rows(vert[0], space, {}, "V_z"),),
            reduced_coords=("x", "y"), reduced_indices=(0, 1),
            section=lambda qr: np.array([qr[0], qr[1], 0.0]),
            shift=lambda q, t: np.array([q[0], q[1], q[2] + t]),
            fiber_coords=("z",))
    else:
        # symmetry broken by construction; build_structure must reject it
        system.action = GroupAction(
            generators=(_field_from_rows(vert[0], space, {}, "V_z"),),
            reduced_coords=("x", "y"), reduced_indices=(0, 1),
            section=lambda qr: np.array([qr[0], qr[1], 0.0]),
            shift=lambda q, t: np.array([q[0], q[1], q[2] + t]),
            fiber_coords=("z",))
    return system


def carriage_ell1(R=1.0, c=1.0, m=2.0, m0=1.0, J=1.0, J2=1.0):
    """The special arm length with an unreparametrized geodesic extension."""
    return math.sqrt((R * R * m + 2 * J2) * (J * R * R + 2 * J2 * c * c)) / (m0 * R * R)


def _carriage(R=1.0, c=1.0, m=2.0, m0=1.0, J=1.0, J2=1.0, l=1.0):
    space = ConfigSpace(("psi1", "psi2", "x", "y", "theta"))
    p = {"R": float(R), "c": float(c), "m": float(m), "m0": float(m0),
         "J": float(J), "J2": float(J2), "l": float(l)}
    zero = _const(0.0)
    ct, st = ex.parse("cos(theta)"), ex.parse("sin(theta)")
    grows = [[zero] * 5 for _ in range(5)]
    grows[0][0] = grows[1][1] = _const(p["J2"])
    grows[2][2] = grows[3][3] = _const(p["m"])
    grows[4][4] = _const(p["J"])
    moment = p["m0"] * p["l"]
    grows[2][4] = grows[4][2] = ex.mul(_const(-moment), st)
    grows[3][4] = grows[4][3] = ex.mul(_const(moment), ct)
    half_r = _const(-p["R"] / 2.0)
    d_rows = [
        [_const(1.0), zero, ex.mul(half_r, ct), ex.mul(half_r, st),
         _const(-p["R"] / (2 * p["c"]))],
        [zero, _const(1.0), ex.mul(half_r, ct), ex.mul(half_r, st),
         _const(p["R"] / (2 * p["c"]))],
    ]
    vert = [
        [zero, zero, _const(1.0), zero, zero],
        [zero, zero, zero, _const(1.0), zero],
        [zero, zero, ex.parse("-y"), ex.parse("x"), _const(1.0)],
    ]
    perp_rows = chaplygin_complement_exprs(d_rows, vert, grows)
    frame = Frame(
        tuple(_field_from_rows(d_rows[a], space, {}, f"X_psi{a + 1}")
              for a in range(2)),
        tuple(_field_from_rows(perp_rows[i], space, {}, f"X_{nm}")
              for i, nm in enumerate(("x", "y", "theta"))))
    # full kinetic matrix goes indefinite once m0^2 l^2 > m J
    degenerate = p["m0"] ** 2 * p["l"] ** 2 >= p["m"] * p["J"] - 1e-12
    metric = Metric.from_expressions(grows, space,
                                     possibly_degenerate=degenerate,
                                     name="carriage")
    pi = math.pi

    def shift(q, t):
        ct_, st_ = math.cos(t), math.sin(t)
        return np.array([q[0], q[1],
                         q[2] * ct_ - q[3] * st_ + 0.7 * t,
                         q[2] * st_ + q[3] * ct_ + 0.4 * t,
                         q[4] + t])

    action = GroupAction(
        generators=tuple(_field_from_rows(v, space, {}, nm)
                         for v, nm in zip(vert, ("V_x", "V_y", "V_theta"))),
        reduced_coords=("psi1", "psi2"), reduced_indices=(0, 1),
        section=lambda qr: np.array([qr[0], qr[1], 0.0, 0.0, 0.0]),
        shift=shift, fiber_coords=("x", "y", "theta"))
    return FramedSystem(
        space=space, metric=metric, frame=frame, name="carriage", params=p,
        domain=Box([-pi, -pi, -1.0, -1.0, -pi], [pi, pi, 1.0, 1.0, pi]),
        action=action)


def _r4math(eps=0.0):
    space = ConfigSpace(("x", "y", "z", "u"))
    eps = float(eps)
    rows = [
        ["1+2*(y-z)+4*(y-z)^2", "1+(y-x)+4*(z-x)*(y-z)",
         "1+(x-z)+4*(x-y)*(y-z)", "1+4*(y-z)"],
        ["1+(y-x)+4*(z-x)*(y-z)", "1+2*(z-x)+4*(z-x)^2",
         "1+(z-y)+4*(z-x)*(x-y)", "1+4*(z-x)"],
        ["1+(x-z)+4*(x-y)*(y-z)", "1+(z-y)+4*(z-x)*(x-y)",
         "1+2*(x-y)+4*(x-y)^2", "1+4*(x-y)"],
        ["1+4*(y-z)", "1+4*(z-x)", "1+4*(x-y)", "4"],
    ]
    grows = [[_e(t) for t in row] for row in rows]
    if eps:
        # eps*I on the D-frame block == eps*(dx^2+dy^2+dz^2) in coordinates
        for j in range(3):
            grows[j][j] = ex.add(grows[j][j], _const(eps))
    d_rows = [
        [_const(1.0), _const(0.0), _const(0.0), ex.parse("-(y-z)")],
        [_const(0.0), _const(1.0), _const(0.0), ex.parse("-(z-x)")],
        [_const(0.0), _const(0.0), _const(1.0), ex.parse("-(x-y)")],
    ]
    vert = [[_const(0.0)] * 3 + [_const(1.0)]]
    if eps:
        perp_rows = chaplygin_complement_exprs(d_rows, vert, grows)
        orthogonal = True
    else:
        # printed g_ab block is singular: keep the printed complement,
        # which is not g-orthogonal to D
        perp_rows = [[_const(-1.0), _const(-1.0), _const(-1.0), _const(1.0)]]
        orthogonal = False
    frame = Frame(
        tuple(_field_from_rows(d_rows[a], space, {}, f"X_{nm}")
              for a, nm in enumerate("xyz")),
        (_field_from_rows(perp_rows[0], space, {}, "X_u"),),
        orthogonal=orthogonal)
    metric = Metric.from_expressions(grows, space,
                                     possibly_degenerate=(eps == 0.0),
                                     name="r4math")
    action = GroupAction(
        generators=(_field_from_rows(vert[0], space, {}, "V_u"),),
        reduced_coords=("x", "y", "z"), reduced_indices=(0, 1, 2),
        section=lambda qr: np.array([qr[0], qr[1], qr[2], 0.0]),
        shift=lambda q, t: np.array([q[0], q[1], q[2], q[3] + t]),
        fiber_coords=("u",))
    return FramedSystem(
        space=space, metric=metric, frame=frame, name="r4math",
        params={"eps": eps},
        domain=Box([-1.0] * 4, [1.0] * 4), action=action)


# --------------------------------------------------------------- the loader

def parse_config(text):
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("malformed", f"TOML parse failure: {e}") from None
    if raw.get("format") != 1:
        raise ConfigError("malformed", "missing or unsupported format key "
                          "(need format = 1)")
    try:
        coords = tuple(raw["space"]["coords"])
        metric_tbl = raw["metric"]
    except KeyError as e:
        raise ConfigError("malformed", f"missing section/key {e}") from None
    params = {k: float(v) for k, v in raw.get("params", {}).items()}
    defs_raw = raw.get("defs", {})
    defs = {}
    for name, text_ in defs_raw.items():
        e_ = _e(text_)
        defs[name] = ex.substitute(e_, defs)

    def pe(t):
        return ex.substitute(_e(t), defs)

    metric_rows = [[pe(t) for t in row] for row in metric_tbl["rows"]]
    constraints = [[pe(t) for t in row]
                   for row in raw.get("constraints", {}).get("oneforms", [])]
    frame_tbl = raw.get("frame", {})
    frame_d = [[pe(t) for t in row] for row in frame_tbl.get("d", [])]
    frame_perp = [[pe(t) for t in row] for row in frame_tbl.get("perp", [])]
    group = raw.get("group", {})
    gens = [[pe(t) for t in row] for row in group.get("generators", [])]
    domain = raw.get("domain", {})
    lows = domain.get("lows", [-1.0] * len(coords))
    highs = domain.get("highs", [1.0] * len(coords))
    if len(lows) != len(coords) or len(highs) != len(coords):
        raise ConfigError("malformed", "domain bounds must match coords")
    return SystemSpec(
        name=raw.get("name", "config"),
        coords=coords,
        metric_rows=metric_rows,
        possibly_degenerate=bool(metric_tbl.get("possibly_degenerate", False)),
        constraint_oneforms=constraints,
        frame_d=frame_d,
        frame_perp=frame_perp,
        frame_orthogonal=bool(frame_tbl.get("orthogonal", True)),
        group_generators=gens,
        group_reduced=tuple(group.get("reduced", ())),
        group_section=[pe(t) for t in group.get("section", [])],
        params=params,
        domain_lows=lows,
        domain_highs=highs,
        grid_points=int(domain.get("grid_points", 5)),
    )


def build_system(spec):
    try:
        space = ConfigSpace(spec.coords)
    except ValueError as e:
        raise ConfigError("malformed", str(e)) from None
    n = space.dim
    if len(spec.metric_rows) != n or any(len(r) != n for r in spec.metric_rows):
        raise ConfigError("malformed", "metric rows must be n x n")
    metric = Metric.from_expressions(
        spec.metric_rows, space, params=spec.params,
        possibly_degenerate=spec.possibly_degenerate, name=spec.name)
    box = Box(spec.domain_lows, spec.domain_highs, spec.grid_points)
    center = 0.5 * (box.lows + box.highs)

    if spec.frame_d:
        d_rows = spec.frame_d
    elif spec.constraint_oneforms:
        if any(len(r) != n for r in spec.constraint_oneforms):
            raise ConfigError("malformed", "constraint rows must have n entries")
        _check_constraint_rank(spec, space, box)
        d_rows = constraint_kernel_exprs(spec.constraint_oneforms, space,
                                         spec.params, center)
    else:
        raise ConfigError("malformed", "need [constraints] or [frame].d")

    d_fields = tuple(_field_from_rows(r, space, spec.params, f"X_d{a}")
                     for a, r in enumerate(d_rows))
    if spec.frame_perp:
        perp_fields = tuple(_field_from_rows(r, space, spec.params, f"X_p{i}")
                            for i, r in enumerate(spec.frame_perp))
    elif spec.group_generators:
        perp_rows = chaplygin_complement_exprs(d_rows, spec.group_generators,
                                               spec.metric_rows)
        perp_fields = tuple(_field_from_rows(r, space, spec.params, f"X_p{i}")
                            for i, r in enumerate(perp_rows))
    else:
        perp_fields = tuple(_numeric_complement(metric, d_fields, space))

    frame = Frame(d_fields, perp_fields, orthogonal=spec.frame_orthogonal)
    system = FramedSystem(space=space, metric=metric, frame=frame,
                          name=spec.name, params=dict(spec.params), domain=box)
    if spec.group_generators:
        system.action = _action_from_spec(spec, space)
    try:
        validate_system(system)
    except DegenerateMetricError as e:
        raise ConfigError("metric_not_pd", str(e)) from None
    return system


def _check_constraint_rank(spec, space, box):
    k = len(spec.constraint_oneforms)
    for q in box.grid(3):
        env = dict(spec.params)
        env.update(zip(space.coord_names, q))
        M = np.array([[ex.evaluate(t, env) for t in row]
                      for row in spec.constraint_oneforms])
        if np.linalg.matrix_rank(M, tol=1e-9) < k:
            raise ConfigError("dependent_constraints",
                              f"constraints dependent at {q}")


def _action_from_spec(spec, space):
    if not spec.group_reduced or not spec.group_section:
        raise ConfigError("malformed", "[group] needs reduced and section")
    try:
        idx = tuple(space.index(c) for c in spec.group_reduced)
    except ValueError as e:
        raise ConfigError("malformed", str(e)) from None
    gens = tuple(_field_from_rows(r, space, spec.params, f"V_{i}")
                 for i, r in enumerate(spec.group_generators))
    section_exprs = spec.group_section
    if len(section_exprs) != space.dim:
        raise ConfigError("malformed", "section needs one expression per coord")

    def section(qr):
        env = dict(spec.params)
        env.update(zip(spec.group_reduced, qr))
        return np.array([ex.evaluate(e_, env) for e_ in section_exprs])

    gen0 = gens[0]

    def shift(q, t, steps=64):
        # flow of the first generator, fixed-step RK4
        y = np.asarray(q, dtype=float)
        dt = t / steps
        for _ in range(steps):
            k1 = gen0(y)
            k2 = gen0(y + dt / 2 * k1)
            k3 = gen0(y + dt / 2 * k2)
            k4 = gen0(y + dt * k3)
            y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        return y

    fiber = tuple(c for c in space.coord_names if c not in spec.group_reduced)
    return GroupAction(generators=gens, reduced_coords=spec.group_reduced,
                       reduced_indices=idx, section=section, shift=shift,
                       fiber_coords=fiber)


def load_system(text_or_path):
    """Load a system from TOML text or a path to a .toml file."""
    text = text_or_path
    if "\n" not in text_or_path and text_or_path.endswith(".toml"):
        with open(text_or_path, "rb") as fh:
            return build_system(parse_config(fh.read().decode("utf-8")))
    return build_system(parse_config(text))
