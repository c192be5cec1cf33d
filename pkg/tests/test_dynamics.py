import numpy as np
import pytest

from geoext.dynamics import (IntegrateOptions, State, compare_as_point_sets,
                             constraint_violation, geodesic_field, integrate,
                             integrate_geodesic, integrate_nonholonomic,
                             kinetic_energy, lagrange_multipliers,
                             nonholonomic_field, projective_field,
                             trajectory_csv)
from geoext.errors import IntegrationError
from geoext.extensions import Candidate, complete_metric
from geoext.geometry import (Box, ConfigSpace, Frame, FramedSystem, Metric,
                             VectorField, default_step)
from geoext.systems import builtin

RK_FINE = IntegrateOptions(method="rk45", rtol=1e-11, atol=1e-13,
                           max_step=2e-3)


def flat_system():
    e = np.eye(3)
    fields = [VectorField(lambda q, j=j: e[j], lambda q: np.zeros((3, 3)))
              for j in range(3)]
    frame = Frame((fields[0], fields[1]), (fields[2],))
    return FramedSystem(space=ConfigSpace(("x", "y", "z")),
                        metric=Metric.euclidean(3), frame=frame,
                        domain=Box([-1] * 3, [1] * 3), name="flat")


def test_nonholonomic_field_particle(particle):
    s = State(np.array([0.0, 1.0, 0.0]), np.array([1.0, 1.0]))
    qdot, vdot = nonholonomic_field(particle, s)
    assert np.allclose(qdot, [1.0, 1.0, 1.0], atol=1e-12)
    assert vdot[0] == pytest.approx(-0.5, abs=1e-9)
    assert vdot[1] == pytest.approx(0.0, abs=1e-9)


def test_rest_stays_at_rest(particle):
    s = State(np.array([0.3, -0.4, 0.2]), np.zeros(2))
    qdot, vdot = nonholonomic_field(particle, s)
    assert np.allclose(qdot, 0.0) and np.allclose(vdot, 0.0, atol=1e-12)


def _multiplier_elimination_qddot(system, q, qdot):
    """Coordinate-space oracle: solve the constrained Euler-Lagrange system
    [g mu^T; mu 0] [qddot; Lambda] = [EL rhs; -(d mu/dt) qdot]."""
    n = system.n
    k = system.k
    h = default_step(q)
    g = system.metric

    def mu_rows(qq):
        # constraint one-forms recovered from the frame: rows of the inverse
        # frame matrix pairing with the perp slots annihilate D
        Ainv = np.linalg.inv(system.frame.matrix(qq))
        return Ainv[system.m:, :]

    dg = np.empty((n, n, n))
    for e in range(n):
        step = np.zeros(n)
        step[e] = h
        dg[e] = (g(q + step) - g(q - step)) / (2 * h)
    # d/dt (g qdot) - 1/2 grad(qdot g qdot) = g qddot + (qdot.d)g qdot - ...
    rhs_el = -np.einsum("e,enm,m->n", qdot, dg, qdot) \
        + 0.5 * np.einsum("nem,e,m->n", dg, qdot, qdot)
    mu = mu_rows(q)
    dmu = np.empty((k, n))
    hv = h * qdot
    dmu[:] = (mu_rows(q + hv) - mu_rows(q - hv)) / (2 * h)
    big = np.zeros((n + k, n + k))
    big[:n, :n] = g(q)
    big[:n, n:] = mu.T
    big[n:, :n] = mu
    rhs = np.concatenate([rhs_el, -dmu @ qdot])
    sol = np.linalg.solve(big, rhs)
    return sol[:n]


def _qddot_from_frame(system, s):
    qdot, vdot = nonholonomic_field(system, s)
    A = system.frame.matrix(s.q)[:, : system.m]
    h = default_step(s.q)
    hv = h * qdot
    dA = (system.frame.matrix(s.q + hv)[:, : system.m]
          - system.frame.matrix(s.q - hv)[:, : system.m]) / (2 * h)
    return dA @ s.v + A @ vdot


@pytest.mark.parametrize("name", ["particle", "carriage"])
def test_against_multiplier_elimination_oracle(name, rng):
    system = builtin(name)
    for _ in range(3):
        q = rng.uniform(-0.7, 0.7, system.n)
        va = rng.uniform(-1, 1, system.m)
        s = State(q, va)
        qdot, _ = nonholonomic_field(system, s)
        ours = _qddot_from_frame(system, s)
        oracle = _multiplier_elimination_qddot(system, q, qdot)
        assert np.max(np.abs(ours - oracle)) <= 1e-7


def test_multipliers_flat_zero():
    system = flat_system()
    lam = lagrange_multipliers(system, State(np.zeros(3), np.ones(2)))
    assert np.allclose(lam, 0.0, atol=1e-12)


def test_multipliers_particle_value(particle):
    lam = lagrange_multipliers(particle,
                               State(np.array([0.0, 1.0, 0.0]),
                                     np.array([1.0, 1.0])))
    # g_zz Gamma^z contraction = rho'/(1+rho^2) vx vy at rho = 1
    assert lam[0] == pytest.approx(0.5, abs=1e-9)


def test_multipliers_match_definition_oracle(particle, rng):
    """lambda_i = d/dt[g(qdot, X_i)] - X_i^C(L) along the flow."""
    system = particle
    for _ in range(3):
        q = rng.uniform(-0.6, 0.6, 3)
        va = rng.uniform(-1, 1, 2)
        lam = lagrange_multipliers(system, State(q, va))
        dt = 2e-5
        traj = integrate_nonholonomic(
            system, State(q, va), 4 * dt, IntegrateOptions(dt=dt))
        Xi = system.frame.fields_perp[0]

        def p_i(s):
            qdot = system.frame.matrix(s.q)[:, :2] @ s.v
            return float(qdot @ system.metric(s.q) @ Xi(s.q))

        dpi = (p_i(traj.states[3]) - p_i(traj.states[1])) / (2 * dt)
        # X_i^C(L) at the middle sample
        s2 = traj.states[2]
        qdot = system.frame.matrix(s2.q)[:, :2] @ s2.v

        def lagr(qq, qd):
            return 0.5 * float(qd @ system.metric(qq) @ qd)

        h = default_step(s2.q)
        w = Xi(s2.q)
        dq_term = (lagr(s2.q + h * w, qdot) - lagr(s2.q - h * w, qdot)) / (2 * h)
        Jxi = Xi.jacobian(s2.q)
        dv_term = float((system.metric(s2.q) @ qdot) @ (Jxi @ qdot))
        lam2 = lagrange_multipliers(system, s2)
        assert abs(dpi - (dq_term + dv_term) - lam2[0]) <= 1e-8
        assert abs(lam[0] - lam2[0]) <= 1e-3  # continuity sanity


def test_geodesic_field_euclidean_straight():
    system = flat_system()
    s = State(np.zeros(3), np.array([1.0, -2.0, 0.5]))
    qdot, vdot = geodesic_field(system.metric, system.frame, s)
    assert np.allclose(qdot, [1.0, -2.0, 0.5])
    assert np.allclose(vdot, 0.0, atol=1e-12)


def test_geodesic_energy_conserved(particle):
    cand = Candidate.from_expressions(particle, {("x", "z"): "-y"},
                                      F_text="-0.5*ln(1+y^2)")
    ghat, _ = complete_metric(particle, cand)
    s0 = State(np.array([0.0, 0.5, 0.0]), np.array([0.6, -0.4, 0.3]))
    traj = integrate_geodesic(ghat, particle.frame, s0, 5.0, RK_FINE)
    drift = np.max(np.abs(traj.monitors["energy"]
                          - traj.monitors["energy"][0]))
    assert drift <= 1e-8


def test_geodesic_launched_in_D_stays_in_D(particle):
    cand = Candidate.from_expressions(particle, {("x", "z"): "-y"},
                                      F_text="-0.5*ln(1+y^2)")
    ghat, _ = complete_metric(particle, cand)
    s0 = State(np.array([0.0, 0.5, 0.0]), np.array([0.6, -0.4, 0.0]))
    traj = integrate_geodesic(ghat, particle.frame, s0, 2.0, RK_FINE)
    worst = max(abs(s.v[2]) for s in traj.states)
    assert worst <= 1e-8


def test_projective_field_reduces_to_geodesic(particle):
    s = State(np.array([0.1, 0.4, 0.0]), np.array([1.0, 0.5, -0.2]))
    q1, v1 = geodesic_field(particle.metric, particle.frame, s)
    q2, v2 = projective_field(particle.metric, particle.frame,
                              lambda q: np.zeros(3), s)
    assert np.allclose(q1, q2) and np.allclose(v1, v2)


def test_projective_field_matches_nonholonomic_on_D(particle):
    cand = Candidate.from_expressions(particle, {("x", "z"): "-y"},
                                      F_text="-0.5*ln(1+y^2)")
    ghat, _ = complete_metric(particle, cand)

    def P(q):
        grad = cand.F.gradient(q)
        A = particle.frame.matrix(q)
        out = np.zeros(3)
        out[:2] = A[:, :2].T @ grad
        return out

    for qv in ([0.0, 1.0, 0.0], [0.3, -0.5, 0.2]):
        s = State(np.array(qv), np.array([0.8, -0.7, 0.0]))
        qd, vd = projective_field(ghat, particle.frame, P, s)
        qdn, vdn = nonholonomic_field(particle, State(s.q, s.v[:2]))
        assert np.max(np.abs(qd - qdn)) <= 1e-9
        assert np.max(np.abs(vd[:2] - vdn)) <= 1e-8
        assert abs(vd[2]) <= 1e-8


def test_quadratic_spray_homogeneity(particle):
    s = State(np.array([0.2, 0.7, -0.1]), np.array([0.4, -0.3, 0.6]))
    _, v1 = geodesic_field(particle.metric, particle.frame, s)
    _, v2 = geodesic_field(particle.metric, particle.frame,
                           State(s.q, 2.0 * s.v))
    assert np.max(np.abs(v2 - 4.0 * v1)) <= 1e-7


def test_integrate_energy_and_constraint_drift(particle):
    s0 = State(np.array([0.0, 1.0, 0.0]), np.array([1.0, 1.0]))
    traj = integrate_nonholonomic(particle, s0, 1.0,
                                  IntegrateOptions(dt=1e-3))
    E = traj.monitors["energy"]
    assert np.max(np.abs(E - E[0])) <= 1e-9
    assert np.max(traj.monitors["constraint_viol"]) <= 1e-8


def test_integrate_zero_velocity_constant(particle):
    s0 = State(np.array([0.2, -0.3, 0.4]), np.zeros(2))
    traj = integrate_nonholonomic(particle, s0, 0.5,
                                  IntegrateOptions(dt=1e-2))
    assert np.max(np.abs(traj.positions() - s0.q)) <= 1e-12


def test_rk4_order_self_convergence(particle):
    s0 = State(np.array([0.0, 1.0, 0.0]), np.array([1.0, 1.0]))

    def endpoint(dt):
        traj = integrate_nonholonomic(particle, s0, 0.5,
                                      IntegrateOptions(dt=dt,
                                                       record_every=10 ** 9))
        return traj.positions()[-1]

    ref = endpoint(1.25e-3)
    e1 = np.max(np.abs(endpoint(2e-2) - ref))
    e2 = np.max(np.abs(endpoint(1e-2) - ref))
    assert 10.0 < e1 / e2 < 30.0


def test_integration_failure_keeps_partial():
    def bad_field(s):
        if s.q[0] > 0.5:
            return np.array([np.nan, 0.0]), np.zeros(1)
        return np.array([1.0, 0.0]), np.zeros(1)

    with pytest.raises(IntegrationError) as err:
        integrate(bad_field, State(np.zeros(2), np.zeros(1)), 2.0,
                  IntegrateOptions(dt=0.05))
    assert err.value.partial is not None
    assert len(err.value.partial.states) > 2


def test_compare_time_rescaled_trajectory(particle):
    s0 = State(np.array([0.0, 1.0, 0.0]), np.array([1.0, 1.0]))
    t1 = integrate_nonholonomic(particle, s0, 1.0, IntegrateOptions(dt=1e-3))
    t2 = integrate_nonholonomic(particle, State(s0.q, 2.0 * s0.v), 0.5,
                                IntegrateOptions(dt=5e-4))
    dist = compare_as_point_sets(t1, t2, particle.metric)
    assert dist <= 1e-6


def test_compare_conformal_constant_rescaling(particle):
    g2 = Metric(lambda q: 2.0 * np.eye(3))
    s0 = State(np.array([0.1, 0.4, 0.0]), np.array([0.7, 0.2, 0.3]))
    t1 = integrate_geodesic(particle.metric, particle.frame, s0, 1.0, RK_FINE)
    t2 = integrate_geodesic(g2, particle.frame, s0, 1.0, RK_FINE)
    assert compare_as_point_sets(t1, t2, particle.metric) <= 1e-7


def test_trajectory_point_set_equivalence(particle):
    cand = Candidate.from_expressions(particle, {("x", "z"): "-y"},
                                      F_text="-0.5*ln(1+y^2)")
    ghat, _ = complete_metric(particle, cand)
    q0 = np.array([0.0, 1.0, 0.0])
    va = np.array([1.0, 1.0])
    tnh = integrate_nonholonomic(particle, State(q0, va), 2.0, RK_FINE)
    tgeo = integrate_geodesic(ghat, particle.frame,
                              State(q0, np.array([1.0, 1.0, 0.0])),
                              2.0, RK_FINE)
    dist = compare_as_point_sets(tnh, tgeo, ghat, length=1.0)
    assert dist <= 1e-5


def test_compare_zero_length_curve_raises(particle):
    s0 = State(np.array([0.2, -0.3, 0.4]), np.zeros(2))
    t1 = integrate_nonholonomic(particle, s0, 0.1, IntegrateOptions(dt=1e-2))
    with pytest.raises(ValueError):
        compare_as_point_sets(t1, t1, particle.metric)


def test_trajectory_csv_contract(particle):
    s0 = State(np.array([0.0, 1.0, 0.0]), np.array([1.0, 1.0]))
    traj = integrate_nonholonomic(particle, s0, 0.02,
                                  IntegrateOptions(dt=1e-3))
    csv = trajectory_csv(traj, particle)
    lines = csv.strip().split("\n")
    assert lines[0] == "t,x,y,z,v1,v2,E,constraint_viol"
    assert len(lines) == len(traj.times) + 1
    last = lines[-1].split(",")
    assert float(last[-1]) <= 1e-9


def test_kinetic_energy_embedding(particle):
    s = State(np.array([0.0, 1.0, 0.0]), np.array([1.0, 1.0]))
    # 1/2 (g_xx vx^2 + g_yy vy^2) = 1/2 (2 + 1)
    assert kinetic_energy(particle, s) == pytest.approx(1.5)
    assert constraint_violation(particle, s) <= 1e-12


def test_projective_invariance_of_point_sets(particle):
    """Adding any linear reparametrization term leaves the base integral
    curves unchanged as point sets."""
    from geoext.dynamics import integrate

    P = lambda q: np.array([0.3, -0.2, 0.1])

    def spray(s):
        return geodesic_field(particle.metric, particle.frame, s)

    def reparam(s):
        return projective_field(particle.metric, particle.frame, P, s)

    s0 = State(np.array([0.1, 0.4, -0.2]), np.array([0.8, 0.5, -0.3]))
    opts = IntegrateOptions(method="rk45", rtol=1e-11, atol=1e-13,
                            max_step=2e-3)
    t1 = integrate(spray, s0, 1.2, opts)
    t2 = integrate(reparam, s0, 1.2, opts)
    dist = compare_as_point_sets(t1, t2, particle.metric, length=0.8)
    assert dist <= 1e-6
