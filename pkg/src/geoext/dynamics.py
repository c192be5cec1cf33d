"""Second-order dynamics: the nonholonomic field, geodesic and projective
sprays, fixed and adaptive Runge-Kutta integration, and point-set
comparison of base curves."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateMetricError, IntegrationError, NumericDomainError
from .geometry import (christoffel_contraction, frame_decompose,
                       frame_metric_function, koszul_k_covector, koszul_rhs,
                       metric_in_frame)


@dataclass
class State:
    """q plus quasi-velocities; len(v) == m means constrained (v^i == 0 by
    representation), len(v) == n means unconstrained in the full frame."""

    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.v = np.asarray(self.v, dtype=float)

    def embedded(self, n):
        """Zero-pad the velocity up to the full frame dimension."""
        if self.v.size == n:
            return self
        v = np.zeros(n)
        v[: self.v.size] = self.v
        return State(self.q, v)


@dataclass
class Trajectory:
    times: np.ndarray
    states: list
    monitors: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    def positions(self):
        return np.array([s.q for s in self.states])

    def velocities(self):
        return np.array([s.v for s in self.states])


def kinetic_energy(system, state):
    """E = 1/2 g(v, v) with v in the system's frame."""
    fm = metric_in_frame(system.metric, system.frame, state.q)
    v = state.embedded(system.n).v
    return 0.5 * float(v @ fm.full @ v)


def constraint_violation(system, state, qdot=None):
    """Max |v^i| of the coordinate velocity decomposed in the full frame."""
    if qdot is None:
        qdot = system.frame.matrix(state.q) @ state.embedded(system.n).v
    c = frame_decompose(system.frame, qdot, state.q)
    return float(np.max(np.abs(c[system.m:]))) if system.k else 0.0


def nonholonomic_field(system, state, eps=0.0):
    """(qdot, vdot) of the nonholonomic dynamics at a constrained state."""
    q, va = state.q, state.v
    if va.size != system.m:
        raise ValueError("nonholonomic_field needs a constrained state")
    A = system.frame.matrix(q)
    qdot = A[:, : system.m] @ va
    Gd, _ = christoffel_contraction(system.metric, system.frame, q, va, eps=eps)
    return qdot, -Gd


def lagrange_multipliers(system, state):
    """lambda_i = g_ki Gamma^k_ab v^a v^b at a constrained state."""
    return koszul_k_covector(system.metric, system.frame, state.q, state.v)


def geodesic_field(metric, frame, state):
    """Geodesic spray of a metric, full-frame Koszul solve."""
    q = state.q
    v = state.embedded(frame.n).v
    gf = frame_metric_function(metric, frame)
    from .geometry import KoszulData
    data = KoszulData(frame, gf, q, metric=metric)
    try:
        Gam = np.linalg.solve(2.0 * data.G, data.rhs(v))
    except np.linalg.LinAlgError:
        raise DegenerateMetricError(f"frame metric singular at {q}") from None
    qdot = frame.matrix(q) @ v
    return qdot, -Gam


def projective_field(metric, frame, P_coeffs, state):
    """Geodesic spray plus the reparametrization term (P_beta v^beta) v."""
    qdot, vdot = geodesic_field(metric, frame, state)
    v = state.embedded(frame.n).v
    P = float(np.asarray(P_coeffs(state.q), dtype=float) @ v)
    return qdot, vdot + P * v


@dataclass
class IntegrateOptions:
    method: str = "rk4"          # "rk4" or "rk45"
    dt: float = 1e-3             # fixed step (rk4) / initial step (rk45)
    rtol: float = 1e-10
    atol: float = 1e-12
    max_step: float = np.inf     # cap on the adaptive step (rk45)
    max_steps: int = 2_000_000
    record_every: int = 1        # thin the stored samples (rk4 only)


# Dormand-Prince 4(5) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784,
                   11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                   -92097 / 339200, 187 / 2100, 1 / 40])


def integrate(fieldfn, s0, t_end, opts=None, monitors=None):
    """Integrate a (qdot, vdot) field from s0 over [0, t_end].

    monitors maps names to callables State -> float, evaluated at every
    recorded sample.  Step failure raises IntegrationError with the partial
    trajectory attached.
    """
    opts = opts or IntegrateOptions()
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    monitors = monitors or {}
    nq, nv = s0.q.size, s0.v.size

    def pack(s):
        return np.concatenate([s.q, s.v])

    def unpack(y):
        return State(y[:nq], y[nq:])

    def rhs(y):
        qd, vd = fieldfn(unpack(y))
        out = np.concatenate([qd, vd])
        if not np.all(np.isfinite(out)):
            raise NumericDomainError("field evaluation non-finite")
        return out

    times = [0.0]
    samples = [State(s0.q.copy(), s0.v.copy())]

    def fail(msg, t):
        partial = _finish(times, samples, monitors)
        raise IntegrationError(f"{msg} at t={t:.6g}", partial=partial)

    y = pack(s0)
    t = 0.0
    try:
        if opts.method == "rk4":
            nsteps = int(round(t_end / opts.dt))
            dt = t_end / max(nsteps, 1)
            for i in range(max(nsteps, 1)):
                k1 = rhs(y)
                k2 = rhs(y + dt / 2 * k1)
                k3 = rhs(y + dt / 2 * k2)
                k4 = rhs(y + dt * k3)
                y = y + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
                t = (i + 1) * dt
                if (i + 1) % opts.record_every == 0 or i == nsteps - 1:
                    times.append(t)
                    samples.append(unpack(y))
        elif opts.method == "rk45":
            dt = min(opts.dt, t_end, opts.max_step)
            steps = 0
            while t < t_end - 1e-14:
                if steps > opts.max_steps:
                    fail("step budget exhausted", t)
                dt = min(dt, t_end - t, opts.max_step)
                ks = [rhs(y)]
                for row in _DP_A[1:]:
                    yi = y + dt * sum(a * k for a, k in zip(row, ks))
                    ks.append(rhs(yi))
                K = np.array(ks)
                y5 = y + dt * (_DP_B5 @ K)
                y4 = y + dt * (_DP_B4 @ K)
                scale = opts.atol + opts.rtol * np.maximum(np.abs(y), np.abs(y5))
                err = float(np.sqrt(np.mean(((y5 - y4) / scale) ** 2)))
                if err <= 1.0:
                    t += dt
                    y = y5
                    times.append(t)
                    samples.append(unpack(y))
                factor = 0.9 * (err + 1e-16) ** (-0.2)
                dt *= min(5.0, max(0.2, factor))
                if dt < 1e-14:
                    fail("step size underflow", t)
                steps += 1
        else:
            raise ValueError(f"unknown method {opts.method!r}")
    except NumericDomainError as e:
        fail(str(e), t)
    return _finish(times, samples, monitors)


def _finish(times, samples, monitors):
    data = {name: np.array([fn(s) for s in samples])
            for name, fn in monitors.items()}
    return Trajectory(np.asarray(times), samples, data)


def integrate_nonholonomic(system, s0, t_end, opts=None, eps=0.0,
                           extra_monitors=None):
    """Convenience wrapper with energy and constraint monitors filled."""
    monitors = {
        "energy": lambda s: kinetic_energy(system, s),
        "constraint_viol": lambda s: constraint_violation(system, s),
    }
    monitors.update(extra_monitors or {})
    return integrate(lambda s: nonholonomic_field(system, s, eps=eps),
                     s0, t_end, opts, monitors)


def integrate_geodesic(metric, frame, s0, t_end, opts=None,
                       extra_monitors=None):
    gf = frame_metric_function(metric, frame)
    monitors = {
        "energy": lambda s: 0.5 * float(
            s.embedded(frame.n).v @ gf(s.q) @ s.embedded(frame.n).v),
    }
    monitors.update(extra_monitors or {})
    return integrate(lambda s: geodesic_field(metric, frame, s),
                     s0, t_end, opts, monitors)


# ------------------------------------------------------- point-set compare

def arclength_resample(traj, metric, samples=512):
    """Reparametrize the base curve by metric arclength; returns (s, q(s))."""
    qs = traj.positions()
    if len(qs) < 2:
        raise ValueError("trajectory too short to resample")
    dq = np.diff(qs, axis=0)
    mid = 0.5 * (qs[1:] + qs[:-1])
    seg = np.array([np.sqrt(max(float(d @ metric(qm) @ d), 0.0))
                    for d, qm in zip(dq, mid)])
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total <= 0:
        raise ValueError("zero-length curve")
    sg = np.linspace(0.0, total, samples)
    cols = [np.interp(sg, s, qs[:, j]) for j in range(qs.shape[1])]
    return sg, np.stack(cols, axis=-1)


def compare_as_point_sets(t1, t2, metric, samples=512, length=None):
    """Max pointwise coordinate distance after arclength reparametrization.

    Both curves are resampled on a common arclength interval
    [0, min(L1, L2, length)].
    """
    s1, q1 = arclength_resample(t1, metric, samples)
    s2, q2 = arclength_resample(t2, metric, samples)
    L = min(s1[-1], s2[-1])
    if length is not None:
        L = min(L, length)
    sg = np.linspace(0.0, L, samples)
    r1 = np.stack([np.interp(sg, s1, q1[:, j]) for j in range(q1.shape[1])],
                  axis=-1)
    r2 = np.stack([np.interp(sg, s2, q2[:, j]) for j in range(q2.shape[1])],
                  axis=-1)
    return float(np.max(np.abs(r1 - r2)))


# ------------------------------------------------------------------- export

def trajectory_csv(traj, system):
    """CSV per the external contract: t,q1..qn,v1..vm,E,constraint_viol."""
    names = list(system.space.coord_names)
    mv = traj.states[0].v.size
    header = (["t"] + names + [f"v{i + 1}" for i in range(mv)]
              + ["E", "constraint_viol"])
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    energy = traj.monitors.get("energy")
    cviol = traj.monitors.get("constraint_viol")
    for idx, (t, s) in enumerate(zip(traj.times, traj.states)):
        e = energy[idx] if energy is not None else kinetic_energy(system, s)
        c = (cviol[idx] if cviol is not None
             else constraint_violation(system, s))
        row = ([f"{t:.17g}"] + [f"{x:.17g}" for x in s.q]
               + [f"{x:.17g}" for x in s.v] + [f"{e:.17g}", f"{c:.17g}"])
        buf.write(",".join(row) + "\n")
    return buf.getvalue()
