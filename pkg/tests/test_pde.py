import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imdiff import tensor as T
from imdiff.implicit import implicit_step
from imdiff.pde import (CoeffFields, CviConstants, Grid1D, Grid2D, TruthCviOps, advdiff_matrix,
                        advdiff_rhs, advdiff_stencil, apply_stencil, burgers_rhs,
                        crank_nicolson_residual, cvi_molarity_residual, cvi_porosity_step,
                        cvi_rollout, laplacian_dirichlet, solve_molarity)
from imdiff.tensor import Tape, Tensor, finite_diff_grad


def total(rhs, g):
    return float(np.sum(rhs) * g.dx * g.dy)


def test_grid_validation_and_neighbors():
    with pytest.raises(ValueError):
        Grid2D(3, 8)
    g = Grid2D(5, 4)
    nb = g.neighbors
    # cell (4, 3) wraps east to (0, 3) and north to (4, 0)
    c = 4 + 5 * 3
    assert nb[1, c] == 0 + 5 * 3
    assert nb[3, c] == 4
    assert g.dx == 0.4 and g.dy == 0.25


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), level=st.floats(-3, 3))
def test_uniform_state_any_velocity(seed, level):
    rng = np.random.default_rng(seed)
    g = Grid2D(8, 6)
    co = CoeffFields(rng.uniform(-2, 2, g.n), rng.uniform(-2, 2, g.n), rng.uniform(0, 1))
    rhs = advdiff_rhs(np.full(g.n, level), co, g).data
    assert np.max(np.abs(rhs)) <= 1e-12 * max(1.0, abs(level))


def test_spike_diffusion_conserves():
    g = Grid2D(8, 8)
    phi = np.zeros(g.n)
    phi[19] = 1.0
    rhs = advdiff_rhs(phi, CoeffFields(np.zeros(g.n), np.zeros(g.n), 0.3), g).data
    assert abs(total(rhs, g)) <= 1e-10 * np.linalg.norm(phi)
    assert rhs[19] < 0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), ux=st.floats(-2, 2), uy=st.floats(-2, 2))
def test_constant_velocity_conserves(seed, ux, uy):
    g = Grid2D(8, 8)
    phi = np.random.default_rng(seed).standard_normal(g.n)
    rhs = advdiff_rhs(phi, CoeffFields(np.full(g.n, ux), np.full(g.n, uy), 0.1), g).data
    assert abs(total(rhs, g)) <= 1e-10 * np.linalg.norm(phi)


def test_upwind_first_order_convergence():
    errs = []
    for nx in (64, 128, 256):
        g = Grid2D(nx, 4)
        x, _ = g.centers()
        phi = np.sin(2 * np.pi * x / g.lx)
        rhs = advdiff_rhs(phi, CoeffFields(np.ones(g.n), np.zeros(g.n), 0.0), g).data
        exact = -(2 * np.pi / g.lx) * np.cos(2 * np.pi * x / g.lx)
        errs.append(np.max(np.abs(rhs - exact)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    np.testing.assert_allclose(orders, 1.0, atol=0.1)


def test_upwind_direction():
    g = Grid2D(8, 4)
    phi = np.zeros(g.n)
    phi[3] = 1.0
    right = advdiff_rhs(phi, CoeffFields(np.ones(g.n), np.zeros(g.n), 0.0), g).data
    left = advdiff_rhs(phi, CoeffFields(-np.ones(g.n), np.zeros(g.n), 0.0), g).data
    assert right[4] > 0 and right[2] == 0
    assert left[2] > 0 and left[4] == 0


def test_stencil_matches_dense_matrix():
    rng = np.random.default_rng(0)
    g = Grid2D(6, 5)
    co = CoeffFields(rng.uniform(-1, 1, g.n), rng.uniform(-1, 1, g.n), 0.2)
    phi = rng.standard_normal(g.n)
    np.testing.assert_allclose(advdiff_rhs(phi, co, g).data, advdiff_matrix(co, g) @ phi, atol=1e-12)


def test_stencil_gradient_wrt_velocity():
    rng = np.random.default_rng(1)
    g = Grid2D(6, 4)
    phi = rng.standard_normal(g.n)
    u0 = rng.uniform(0.2, 1.0, g.n) * rng.choice([-1, 1], g.n)
    tape = Tape()
    ux = tape.leaf(u0)
    out = T.sum(T.sin(advdiff_rhs(phi, CoeffFields(ux, np.zeros(g.n), 0.1), g)))
    gr = tape.backward(out)[ux]
    fd = finite_diff_grad(
        lambda v: np.sum(np.sin(advdiff_rhs(phi, CoeffFields(v, np.zeros(g.n), 0.1), g).data)), u0)
    np.testing.assert_allclose(gr, fd, rtol=1e-6, atol=1e-8)


def test_burgers_uniform_and_conservation():
    rng = np.random.default_rng(2)
    g = Grid2D(8, 8)
    nu = rng.uniform(0.01, 0.03, g.n)
    np.testing.assert_allclose(burgers_rhs(np.full(g.n, 0.7), nu, g).data, 0.0, atol=1e-13)
    u = rng.standard_normal(g.n)
    assert abs(total(burgers_rhs(u, nu, g).data, g)) <= 1e-10 * np.linalg.norm(u)
    diff_only = burgers_rhs(u, nu, g).data - burgers_rhs(u, np.zeros(g.n), g).data
    assert abs(total(diff_only, g)) <= 1e-10 * np.linalg.norm(u)


def test_burgers_matches_smooth_derivative():
    g = Grid2D(256, 4)
    x, _ = g.centers()
    u = 1.5 + 0.5 * np.sin(2 * np.pi * x / g.lx)
    rhs = burgers_rhs(u, np.zeros(g.n), g).data
    exact = -u * 0.5 * (2 * np.pi / g.lx) * np.cos(2 * np.pi * x / g.lx)
    assert np.max(np.abs(rhs - exact)) < 0.05 * np.max(np.abs(exact))


def test_cn_residual_examples():
    lam, dt = 2.0, 0.1
    f = lambda p: -lam * p  # noqa: E731
    nxt = Tensor([(1 - lam * dt / 2) / (1 + lam * dt / 2)])
    assert abs(crank_nicolson_residual(nxt, Tensor([1.0]), dt, f).data[0]) < 1e-15
    assert abs(crank_nicolson_residual(Tensor([1.1]), Tensor([1.0]), dt, f).data[0]) > 1e-3
    zero = lambda p: 0.0 * p  # noqa: E731
    assert np.all(crank_nicolson_residual(Tensor([3.0, 4.0]), Tensor([3.0, 4.0]), dt, zero).data == 0)
    assert np.any(crank_nicolson_residual(Tensor([3.0, 4.1]), Tensor([3.0, 4.0]), dt, zero).data != [0, 0])
    with pytest.raises(ValueError):
        crank_nicolson_residual(Tensor([1.0]), Tensor([1.0]), 0.0, f)


def test_cn_step_matches_dense_solve():
    rng = np.random.default_rng(3)
    g = Grid2D(8, 8)
    co = CoeffFields(rng.uniform(-1, 1, g.n), rng.uniform(-1, 1, g.n), 0.1)
    A = advdiff_matrix(co, g)
    st = advdiff_stencil(co, g)
    dt = 0.02
    phi = rng.standard_normal(g.n)
    res = lambda x, p, s: crank_nicolson_residual(  # noqa: E731
        x, p, dt, lambda v: apply_stencil(v, s, g))
    out = implicit_step(res, Tensor(phi), st, tol=1e-13).data
    I = np.eye(g.n)
    ref = np.linalg.solve(I - 0.5 * dt * A, (I + 0.5 * dt * A) @ phi)
    assert np.linalg.norm(out - ref) <= 1e-8 * np.linalg.norm(ref)


def test_cn_amplification_a_stable():
    rng = np.random.default_rng(4)
    g = Grid2D(8, 8)
    for co in (CoeffFields(np.full(g.n, 1.0), np.full(g.n, -0.5), 0.1),
               CoeffFields(rng.uniform(-1, 1, g.n), rng.uniform(-1, 1, g.n), 0.1)):
        lam = np.linalg.eigvals(advdiff_matrix(co, g))
        for dt in (1e-3, 1e-2, 1e-1, 10.0):
            z = lam * dt
            amp = np.abs((1 + z / 2) / (1 - z / 2))
            assert np.all(amp[lam.real <= 0] <= 1 + 1e-12)
    lam = np.linalg.eigvals(advdiff_matrix(CoeffFields(np.full(g.n, 1.0), np.full(g.n, -0.5), 0.1), g))
    assert np.all(lam.real <= 1e-10)


# ---------------------------------------------------------------- CVI

def test_harmonic_profile_zero_residual():
    g = Grid1D(16)
    x = g.centers()
    cl, cr = 0.4, 1.2
    C = cl + (cr - cl) * x / g.length
    const = CviConstants(c_left=cl, c_right=cr)

    class NoReaction(TruthCviOps):
        def sv(self, eps):
            return 0.0 * T._as_tensor(eps)

    r = cvi_molarity_residual(C, np.full(16, 0.5), NoReaction(), g, const).data
    np.testing.assert_allclose(r, 0.0, atol=1e-9)


def test_zero_molarity_zero_inlet():
    g = Grid1D(16)
    r = cvi_molarity_residual(np.zeros(16), np.full(16, 0.5), TruthCviOps(), g,
                              CviConstants(c_left=0.0, c_right=0.0)).data
    np.testing.assert_array_equal(r, 0.0)


def test_molarity_solve_matches_dense():
    g = Grid1D(32)
    const = CviConstants()
    D, R = np.full(32, 0.5), np.full(32, 3.0)
    nb, coef = g.stencil
    L = np.zeros((32, 32))
    for m in range(3):
        np.add.at(L, (np.arange(32), nb[m]), coef[m])
    b = np.zeros(32)
    b[0] = b[-1] = 2.0 / g.dx ** 2
    ref = np.linalg.solve(D[:, None] * L - np.diag(R), -D * b)
    for method in ("cg", "jacobi"):
        C, rep = solve_molarity(D, R, g, const, method=method, tol=1e-13, max_iter=200000)
        assert rep.converged
        np.testing.assert_allclose(C, ref, atol=1e-8)
    r = laplacian_dirichlet(Tensor(ref), g, 1.0, 1.0).data * D - R * ref
    np.testing.assert_allclose(r, 0.0, atol=1e-8)


def test_porosity_step_examples():
    ops = TruthCviOps()
    eps = np.array([0.3, 0.5, 0.7])
    np.testing.assert_array_equal(cvi_porosity_step(eps, np.zeros(3), 0.1, ops).data, eps)

    class ConstRate:
        def k(self, e):
            return T.constant(np.ones(np.shape(T._as_tensor(e).data)))

        sv = k

    const = CviConstants(q=2.0, Ms=1.5, rho_s=3.0)
    e = Tensor(np.array([0.5, 0.0021]))
    C = np.full(2, 1.0)
    dt = 1e-3
    for step in range(3):
        e = cvi_porosity_step(e, C, dt, ConstRate(), const)
        expected = 0.5 - (step + 1) * dt * 2.0 * 1.5 / 3.0
        assert e.data[0] == pytest.approx(expected, abs=1e-15)
    assert e.data[1] == const.eps_min
    with pytest.raises(ValueError):
        cvi_porosity_step(eps, np.zeros(3), 0.0, ops)


def test_cvi_rollout_monotone_and_residual():
    g = Grid1D(32)
    eps0 = 0.6 + 0.05 * np.sin(2 * np.pi * g.centers())
    eps_hist, C_hist = cvi_rollout(eps0, TruthCviOps(), g, dt=5e-4, steps=20)
    E = np.array([e.data for e in eps_hist])
    assert np.all(np.diff(E, axis=0) <= 0)
    assert np.all(E >= 1e-4)
    for e, C in zip(eps_hist[:-1], C_hist):
        r = cvi_molarity_residual(C.data, e.data, TruthCviOps(), g).data
        assert np.max(np.abs(r)) < 1e-6


def test_burgers_cn_rollout_matches_fine_rk4():
    from imdiff.data import (CosineFieldSpec, GpIcSpec, burgers_truth_rhs, rk4_reference_rollout,
                             sample_gp_ic, viscosity_truth)
    from imdiff.models import BurgersModel
    from imdiff.training import RolloutConfig, relative_error_l1, rollout

    g = Grid2D(32, 16)
    nu = viscosity_truth(CosineFieldSpec.sample(7, 2).steady(), g)
    ic = sample_gp_ic(GpIcSpec(seed=3), g)
    times = [0.05, 0.1, 0.15, 0.2]
    _, ref = rk4_reference_rollout(ic, burgers_truth_rhs(g, nu), 1e-3, 0.2, times)
    traj = rollout(ic, np.zeros(0), RolloutConfig(dt=0.01, t_end=0.2), BurgersModel(g, truth=nu))
    for t, r in zip(times, ref):
        assert relative_error_l1(traj.at(t).data, r) <= 0.02
