import numpy as np
import pytest

from imdiff import tensor as T
from imdiff.implicit import (AdjointSolveError, AdjointWarmStart, ImplicitStepContext, StepFailure,
                             implicit_step, implicit_step_backward, naive_unrolled_step)
from imdiff.pde import CoeffFields, Grid2D, advdiff_stencil, apply_stencil
from imdiff.rootfind import RootStats
from imdiff.tensor import MemoryMeter, Tape, Tensor, finite_diff_grad


def cn_decay(dt):
    return lambda x, prev, lam: x - prev + (0.5 * dt) * lam * (x + prev)


def advdiff_cn(grid, dt):
    def residual(x, prev, stencil):
        return x - prev - (0.5 * dt) * (apply_stencil(x, stencil, grid) + apply_stencil(prev, stencil, grid))
    return residual


def test_linear_residual():
    out = implicit_step(lambda x, p, a: x - a * p, Tensor([1.0]), Tensor([0.9]))
    assert out.data[0] == pytest.approx(0.9, abs=1e-12)


def test_cn_decay_closed_form():
    dt = 0.1
    out = implicit_step(cn_decay(dt), Tensor([2.0]), Tensor([1.0]), tol=1e-14)
    assert out.data[0] == pytest.approx(2.0 * 0.95 / 1.05, rel=1e-13)


def test_uniform_state_unchanged_zero_velocity():
    g = Grid2D(8, 8)
    st = advdiff_stencil(CoeffFields(np.zeros(g.n), np.zeros(g.n), 0.1), g)
    out = implicit_step(advdiff_cn(g, 0.01), Tensor(np.full(g.n, 1.7)), st)
    np.testing.assert_allclose(out.data, 1.7, atol=1e-12)


def test_linear_scalar_backward():
    a, b, g = 0.7, -1.3, 2.5
    res = lambda x, p, th: x - a * p - b * th  # noqa: E731
    ctx = ImplicitStepContext(np.array([a * 1.0 + b * 0.5]), np.array([1.0]), np.array([0.5]), res)
    gp, gth = implicit_step_backward(ctx, np.array([g]))
    assert gp[0] == pytest.approx(a * g, rel=1e-10)
    assert gth[0] == pytest.approx(b * g, rel=1e-10)


def test_single_tape_node_and_residual_contract():
    g = Grid2D(8, 8)
    rng = np.random.default_rng(0)
    tape = Tape()
    prev = tape.leaf(rng.standard_normal(g.n))
    st = tape.leaf(advdiff_stencil(CoeffFields(rng.uniform(-1, 1, g.n), rng.uniform(-1, 1, g.n), 0.1), g).data)
    n0 = len(tape)
    stats = RootStats()
    out = implicit_step(advdiff_cn(g, 0.02), prev, st, tol=1e-11, stats=stats)
    assert len(tape) == n0 + 1
    assert stats.newton_steps >= 1
    r = advdiff_cn(g, 0.02)(Tensor(out.data), Tensor(prev.data), Tensor(st.data)).data
    f0 = advdiff_cn(g, 0.02)(Tensor(prev.data), Tensor(prev.data), Tensor(st.data)).data
    assert np.linalg.norm(r) <= 1e-11 * max(1.0, np.linalg.norm(f0))


def _grads(step_fn, prev0, theta0, w):
    tape = Tape()
    prev, theta = tape.leaf(prev0), tape.leaf(theta0)
    out = step_fn(prev, theta)
    g = tape.backward(T.sum(T.sin(out) * w))
    return g[prev], g[theta]


def test_adjoint_matches_unrolled_and_fd():
    g = Grid2D(8, 8)
    rng = np.random.default_rng(1)
    dt = 0.01
    res = advdiff_cn(g, dt)
    prev0 = rng.standard_normal(g.n)
    st0 = advdiff_stencil(CoeffFields(rng.uniform(-1, 1, g.n), rng.uniform(-1, 1, g.n), 0.1), g).data
    w = rng.standard_normal(g.n)
    im = _grads(lambda p, th: implicit_step(res, p, th, tol=1e-13, adjoint_tol=1e-12), prev0, st0, w)
    nv = _grads(lambda p, th: naive_unrolled_step(res, p, th, K_fixed=60), prev0, st0, w)
    for a, b in zip(im, nv):
        assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(b)

    def loss(th):
        x = implicit_step(res, Tensor(prev0), Tensor(th.reshape(st0.shape)), tol=1e-13)
        return float(np.sum(np.sin(x.data) * w))

    idx = rng.choice(st0.size, 12, replace=False)
    fd = finite_diff_grad(loss, st0, eps=1e-6, indices=idx).reshape(-1)[idx]
    np.testing.assert_allclose(im[1].reshape(-1)[idx], fd, rtol=1e-4, atol=1e-9)


def test_theta_ignored_gives_zero_gradient():
    gp, gth = _grads(lambda p, th: implicit_step(lambda x, pp, t: x - 0.5 * pp, p, th),
                     np.ones(3), np.ones(2), np.ones(3))
    np.testing.assert_array_equal(gth, 0.0)
    np.testing.assert_allclose(gp, 0.5 * np.cos(0.5), rtol=1e-8)


def test_naive_matches_implicit_forward():
    g = Grid2D(8, 8)
    rng = np.random.default_rng(2)
    res = advdiff_cn(g, 0.01)
    prev = Tensor(rng.standard_normal(g.n))
    st = advdiff_stencil(CoeffFields(rng.uniform(-1, 1, g.n), rng.uniform(-1, 1, g.n), 0.1), g)
    a = implicit_step(res, prev, st, tol=1e-13)
    b = naive_unrolled_step(res, prev, st, K_fixed=60)
    np.testing.assert_allclose(a.data, b.data, atol=1e-8)


def test_naive_affine_one_iteration_exact():
    out = naive_unrolled_step(lambda x, p, th: x - 2.0 * p - th, Tensor([1.0]), Tensor([0.5]), K_fixed=1)
    assert out.data[0] == 2.5
    with pytest.raises(ValueError):
        naive_unrolled_step(lambda x, p, th: x, Tensor([1.0]), Tensor([0.5]), K_fixed=0)


def test_naive_memory_affine_in_K_implicit_constant():
    g = Grid2D(8, 8)
    res = advdiff_cn(g, 0.01)
    st0 = advdiff_stencil(CoeffFields(np.ones(g.n), -np.ones(g.n), 0.1), g).data

    def cost(fn):
        meter = MemoryMeter()
        tape = Tape(meter)
        prev, th = tape.leaf(np.sin(np.arange(g.n))), tape.leaf(st0)
        fn(prev, th)
        return meter.peak_nodes, meter.peak_scalars

    naive = [cost(lambda p, th: naive_unrolled_step(res, p, th, K)) for K in (2, 4, 8)]
    nodes = [c[0] for c in naive]
    assert nodes[1] - nodes[0] > 0
    assert nodes[2] - nodes[1] == 2 * (nodes[1] - nodes[0])
    im = [cost(lambda p, th: implicit_step(res, p, th, method="fixed-point", tol=tol))
          for tol in (1e-4, 1e-8, 1e-12)]
    assert len(set(im)) == 1


def test_forward_failure_names_step():
    with pytest.raises(StepFailure, match="step 7"):
        implicit_step(lambda x, p, th: x * x + 1.0, Tensor([1.0]), Tensor([0.0]),
                      step_index=7, max_iter=3)


def test_adjoint_failure_names_step():
    tape = Tape()
    p = tape.leaf(np.ones(4))
    # residual with zero Jacobian in x: the adjoint system has no solution
    out = implicit_step(lambda x, pp, th: 0.0 * x + th, p, tape.leaf(np.zeros(4)), step_index=3,
                        solver=lambda f, x0, pp, th: (pp, 0))
    with pytest.raises(AdjointSolveError, match="step 3"):
        tape.backward(T.sum(out))


def test_warm_start_records_iterations():
    warm = AdjointWarmStart()
    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0]))
    lam = tape.leaf(np.array([1.0]))
    for i in range(3):
        x = implicit_step(cn_decay(0.1), x, lam, step_index=i, warm=warm)
    tape.backward(T.sum(x))
    assert len(warm.iterations) == 3 and warm.w is not None
