import numpy as np
import pytest

from cogd.bilinear import (BEALE_C_CANONICAL, BealeProblem, BilinearLS, beale_constrained_grad,
                           beale_constrained_value, beale_grad, beale_value, contour_csv,
                           contour_grid, grad_A, grad_x, residual_ghat, run_bilinear_ls,
                           run_toy, toy_cogd_config, toy_ghat, toy_starts)
from cogd.core import ShapeError
from cogd.optim import CoGDConfig, OptimizerConfig
from helpers import central_diff, rel_err


def test_residual_examples():
    b = np.array([1.0, -2.0])
    np.testing.assert_array_equal(residual_ghat(BilinearLS(np.eye(2), b, b)), [0.0, 0.0])
    np.testing.assert_array_equal(residual_ghat(BilinearLS(np.eye(2), [0.0, 0.0], b)), -b)
    p = BilinearLS([[1.0, 0.0], [0.0, 2.0]], [1.0, 1.0], [0.0, 0.0])
    np.testing.assert_array_equal(residual_ghat(p), [1.0, 2.0])


def test_shape_and_lambda_validation():
    with pytest.raises(ShapeError):
        BilinearLS(np.eye(2), [1.0, 2.0, 3.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        BilinearLS(np.eye(2), [1.0, 2.0], [1.0, 2.0], lam=-1.0)


def test_grad_A_examples():
    rng = np.random.default_rng(0)
    A, b = rng.standard_normal((3, 2)), rng.standard_normal(3)
    g = grad_A(BilinearLS(A, np.zeros(2), b))
    assert np.all(g == 0.0)
    x = rng.standard_normal(2)
    assert np.allclose(grad_A(BilinearLS(A, x, A @ x)), 0.0, atol=1e-15)
    # residual (1, 2) with x = (3,)
    p = BilinearLS([[1.0], [1.0]], [3.0], [2.0, 1.0])
    np.testing.assert_array_equal(grad_A(p), [[3.0], [6.0]])


def test_grad_x_examples():
    A = np.random.default_rng(1).standard_normal((3, 2))
    x = np.array([0.5, -1.0])
    np.testing.assert_allclose(grad_x(BilinearLS(A, x, A @ x)), 0.0, atol=1e-15)
    np.testing.assert_array_equal(grad_x(BilinearLS(np.eye(2), [2.0, -3.0], [0.0, 0.0])), [2.0, -3.0])
    np.testing.assert_array_equal(grad_x(BilinearLS(np.eye(2), [2.0, 0.0], [0.0, 0.0], lam=1.0)),
                                  [3.0, 0.0])


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(20):
        A, x, b = rng.standard_normal((4, 3)), rng.standard_normal(3), rng.standard_normal(4)
        p = BilinearLS(A, x, b, reg_A=0.3)
        fA = central_diff(lambda a: BilinearLS(a, x, b, reg_A=0.3).smooth_objective(), A)
        fx = central_diff(lambda v: BilinearLS(A, v, b, reg_A=0.3).smooth_objective(), x)
        assert rel_err(grad_A(p), fA) <= 1e-5
        assert rel_err(grad_x(p), fx) <= 1e-5


def test_beale_examples():
    assert beale_value(BealeProblem(3.0, 0.5, *BEALE_C_CANONICAL)) == 0.0
    p = BealeProblem(0.0, 0.0)
    assert beale_constrained_value(p) == 1.5 ** 2 + 2.25 ** 2 + 2.62 ** 2
    g = beale_constrained_grad(BealeProblem(1.0, 1.0))
    fd = central_diff(lambda z: beale_constrained_value(BealeProblem(*z)), [1.0, 1.0])
    assert rel_err(g, fd) <= 1e-6


def test_beale_penalised_value_non_negative():
    rng = np.random.default_rng(3)
    for x1, x2 in rng.uniform(-4, 4, size=(200, 2)):
        assert beale_constrained_value(BealeProblem(x1, x2)) >= 0.0


def test_toy_ghat_factorises_dense_gradient():
    p = BealeProblem(1.3, 0.7)
    _, g2 = beale_grad(p)
    assert np.isclose(p.x1 * toy_ghat(p, "x1_sparse"), g2, rtol=1e-14)
    g1, _ = beale_grad(p)
    assert np.isclose(p.x2 * toy_ghat(p, "x2_sparse"), g1, rtol=1e-14)
    with pytest.raises(ValueError):
        toy_ghat(p, "both")


def test_run_toy_zero_iterations():
    tr = run_toy(OptimizerConfig("sgd", 0.001), iters=0)
    assert len(tr) == 1 and tr.path_length == 0.0


def test_run_toy_cogd_path_shorter_from_default_start():
    cfg = OptimizerConfig("sgd", 0.001)
    base = run_toy(cfg, None, iters=200)
    co = run_toy(cfg, toy_cogd_config(), iters=200)
    assert co.path_length < base.path_length


def test_run_toy_is_deterministic():
    cfg = OptimizerConfig("sgd", 0.001)
    a = run_toy(cfg, toy_cogd_config(), start=(1.1, 1.4), iters=50)
    b = run_toy(cfg, toy_cogd_config(), start=(1.1, 1.4), iters=50)
    assert a.to_csv() == b.to_csv()


def test_run_toy_cogd_off_reproduces_plain_optimizer():
    cfg = OptimizerConfig("momentum", 0.005)
    tr = run_toy(cfg, None, start=(1.1, 1.2), iters=30)
    from cogd.optim import Optimizer
    opt, z = Optimizer(cfg), np.array([1.1, 1.2])
    for _ in range(30):
        z = opt.step(z, np.array(beale_constrained_grad(BealeProblem(*z))))
    assert tr.iterates[-1].tobytes() == z.tobytes()


def test_run_toy_beta_zero_matches_baseline():
    cfg = OptimizerConfig("adam", 0.1)
    base = run_toy(cfg, None, iters=50)
    co = run_toy(cfg, toy_cogd_config(beta_scale=0.0), iters=50)
    np.testing.assert_array_equal(base.iterates, co.iterates)


def test_run_toy_both_orientations_run():
    cfg = OptimizerConfig("sgd", 0.001)
    for o in ("x1_sparse", "x2_sparse"):
        assert len(run_toy(cfg, toy_cogd_config(), iters=20, orientation=o)) == 21
    with pytest.raises(ValueError):
        run_toy(cfg, iters=1, orientation="x3")


def test_run_toy_divergence_is_reported():
    with pytest.raises(FloatingPointError):
        run_toy(OptimizerConfig("momentum", 0.005), start=(3.0, 2.0), iters=200)


def test_toy_starts_seeded_and_inside_box():
    a, b = toy_starts(5, 0), toy_starts(5, 0)
    assert a == b and a != toy_starts(5, 1)
    for x1, x2 in a:
        assert 0.75 <= x1 <= 1.25 and 1.0 <= x2 <= 1.5


def test_contour_csv_layout():
    rows = contour_grid(n=3)
    assert len(rows) == 9
    lines = contour_csv(rows).splitlines()
    assert lines[0] == "x1,x2,F"
    assert lines[1].startswith("-1.0,-1.5,")


def test_bilinear_ls_converges_with_fixed_identity():
    b = np.array([0.5, -1.0, 2.0])
    p = BilinearLS(np.eye(3), np.zeros(3), b)
    _, final = run_bilinear_ls(p, OptimizerConfig("sgd", 0.1), iters=300, update_A=False)
    assert np.linalg.norm(final.A @ final.x - b) < 1e-4


def test_bilinear_ls_first_A_step_is_frozen_at_zero_x():
    rng = np.random.default_rng(4)
    p = BilinearLS(rng.standard_normal((3, 2)), np.zeros(2), rng.standard_normal(3))
    tr, final = run_bilinear_ls(p, OptimizerConfig("sgd", 0.1), iters=1)
    np.testing.assert_array_equal(final.A, p.A)
    assert not np.array_equal(final.x, p.x)


def test_bilinear_ls_beta_zero_identical_to_baseline():
    rng = np.random.default_rng(5)
    p = BilinearLS(rng.standard_normal((4, 3)), rng.standard_normal(3) * 0.1,
                   rng.standard_normal(4), lam=0.1)
    cfg = OptimizerConfig("sgd", 0.01)
    base, _ = run_bilinear_ls(p, cfg, None, iters=40)
    co, _ = run_bilinear_ls(p, cfg, CoGDConfig(beta_scale=0.0, alpha_x=10.0, alpha_A=0.0), iters=40)
    np.testing.assert_array_equal(base.iterates, co.iterates)


def test_bilinear_ls_smooth_objective_non_increasing():
    rng = np.random.default_rng(6)
    Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    p = BilinearLS(Q[:, :3] + 0.1, rng.standard_normal(3), rng.standard_normal(5))
    tr, _ = run_bilinear_ls(p, OptimizerConfig("sgd", 1e-3), iters=100)
    obj = tr.objectives
    assert np.all(np.diff(obj) <= 1e-15)
