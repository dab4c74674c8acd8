"""Concrete bilinear objectives and their optimization loops.

Two problems live here: the generic least-squares model
``1/2 ||b - A x||^2 + lam ||x||_1 + R(A)`` and the Beale toy function with
an added ``|x1| + x2^2`` penalty, whose bilinear part is ``x1 * x2``.
"""

import csv
import io
from dataclasses import dataclass

import numpy as np

from .core import ShapeError, as_matrix, as_vector, make_rng
from .optim import (CoGDConfig, OptTrace, Optimizer, cogd_update,
                    difference_ratios)


@dataclass
class BilinearLS:
    """``1/2 ||b - A x||^2 + lam ||x||_1 + reg_A/2 ||A||_F^2``."""

    A: np.ndarray
    x: np.ndarray
    b: np.ndarray
    lam: float = 0.0
    reg_A: float = 0.0

    def __post_init__(self):
        self.A = as_matrix(self.A, "A").copy()
        self.x = as_vector(self.x, "x").copy()
        self.b = as_vector(self.b, "b").copy()
        if self.A.shape != (self.b.shape[0], self.x.shape[0]):
            raise ShapeError(f"A {self.A.shape} incompatible with x {self.x.shape}, b {self.b.shape}")
        if self.lam < 0 or self.reg_A < 0:
            raise ValueError("lam and reg_A must be non-negative")

    def smooth_objective(self):
        r = residual_ghat(self)
        return 0.5 * float(r @ r) + 0.5 * self.reg_A * float(np.sum(self.A ** 2))

    def objective(self):
        return self.smooth_objective() + self.lam * float(np.sum(np.abs(self.x)))


def residual_ghat(p):
    """The residual ``A x - b``, the factor shared by both gradients."""
    return p.A @ p.x - p.b


def grad_A(p):
    """Gradient in `A`: the outer product ``(A x - b) x^T`` plus ``reg_A * A``.

    It is exactly zero when ``x = 0`` and no regulariser is configured.
    """
    g = np.outer(residual_ghat(p), p.x)
    if p.reg_A:
        g = g + p.reg_A * p.A
    return g


def grad_x(p):
    """``A^T (A x - b) + lam * sign(x)``, with subgradient 0 at 0."""
    return p.A.T @ residual_ghat(p) + p.lam * np.sign(p.x)


def run_bilinear_ls(p, optimizer, cogd=None, iters=100, update_A=True):
    """Alternate gradient steps on `A` then `x` for `iters` rounds.

    Parameters
    ----------
    p : BilinearLS
      Starting point; not modified.
    optimizer : OptimizerConfig
      Used (with separate state) for both variables.
    cogd : CoGDConfig or None
      When given, the `x` step is coordinated after every step on `x`.
    iters : int
    update_A : bool
      Hold `A` fixed when False.

    Returns
    -------
    trace : OptTrace
      Iterates are ``concat(A.ravel(), x)``.
    final : BilinearLS
    """
    p = BilinearLS(p.A, p.x, p.b, p.lam, p.reg_A)
    opt_A, opt_x = Optimizer(optimizer), Optimizer(optimizer)
    trace = OptTrace()

    def full_grad_norm():
        gx = grad_x(p)
        gA = grad_A(p) if update_A else np.zeros_like(p.A)
        return float(np.sqrt(np.sum(gA ** 2) + gx @ gx))

    def iterate():
        return np.concatenate([p.A.ravel(), p.x])

    trace.append(iterate(), p.objective(), full_grad_norm(), 0.0)
    for t in range(iters):
        before = iterate()
        A_old = p.A.copy()
        if update_A:
            p.A = opt_A.step(p.A, grad_A(p))
        x_old = p.x
        x_next = opt_x.step(p.x, grad_x(p))
        fired = False
        if cogd is not None:
            p.x = x_next
            ratios = difference_ratios(p.A - A_old, x_next - x_old, cogd.fd_eps)
            x_next, fired = cogd_update(x_next, x_old, p.A, residual_ghat(p), ratios,
                                        cogd, optimizer.learning_rate, iteration=t)
        p.x = x_next
        after = iterate()
        trace.append(after, p.objective(), full_grad_norm(),
                     float(np.linalg.norm(after - before)), fired)
    return trace, p


BEALE_C = (1.5, 2.25, 2.62)
BEALE_C_CANONICAL = (1.5, 2.25, 2.625)


@dataclass
class BealeProblem:
    """Beale function, optionally with the ``|x1| + x2^2`` penalty.

    The third constant defaults to 2.62; pass ``c3=2.625`` for the
    textbook function.
    """

    x1: float = 1.0
    x2: float = 1.5
    c1: float = BEALE_C[0]
    c2: float = BEALE_C[1]
    c3: float = BEALE_C[2]

    def residuals(self):
        x1, x2 = self.x1, self.x2
        return (self.c1 - x1 + x1 * x2,
                self.c2 - x1 + x1 * x2 * x2,
                self.c3 - x1 + x1 * x2 * x2 * x2)

    def at(self, x1, x2):
        return BealeProblem(float(x1), float(x2), self.c1, self.c2, self.c3)


def beale_value(p):
    r1, r2, r3 = p.residuals()
    return float(r1 * r1 + r2 * r2 + r3 * r3)


def beale_grad(p):
    """Analytic gradient of the unpenalised Beale function."""
    r1, r2, r3 = p.residuals()
    x1, x2 = p.x1, p.x2
    d_dx1 = 2.0 * (r1 * (x2 - 1.0) + r2 * (x2 * x2 - 1.0) + r3 * (x2 * x2 * x2 - 1.0))
    d_dx2 = 2.0 * x1 * (r1 + r2 * 2.0 * x2 + r3 * 3.0 * x2 * x2)
    return float(d_dx1), float(d_dx2)


def beale_constrained_value(p):
    """``beale(x1, x2) + |x1| + x2^2``."""
    return beale_value(p) + abs(p.x1) + p.x2 ** 2


def beale_constrained_grad(p):
    """Gradient of :func:`beale_constrained_value`, ``d|x1|/dx1 = sign(x1)``."""
    g1, g2 = beale_grad(p)
    return g1 + float(np.sign(p.x1)), g2 + 2.0 * p.x2


TOY_ORIENTATIONS = ("x1_sparse", "x2_sparse")


def toy_ghat(p, orientation="x1_sparse", eps=1e-8):
    """Residual factor of the dense variable's gradient in the toy problem.

    With `x1` sparse the Beale gradient in `x2` is ``x1 * ghat`` exactly, so
    ``ghat = 2 sum_k k r_k x2^(k-1)``.  With `x2` sparse the factor is
    obtained by dividing the `x1` gradient by the (guarded) `x2`.
    """
    if orientation == "x1_sparse":
        r1, r2, r3 = p.residuals()
        x2 = p.x2
        return float(2.0 * (r1 + 2.0 * x2 * r2 + 3.0 * x2 * x2 * r3))
    if orientation == "x2_sparse":
        g1, _ = beale_grad(p)
        denom = np.sign(p.x2) * max(abs(p.x2), eps) if p.x2 != 0 else eps
        return float(g1 / denom)
    raise ValueError(f"unknown orientation {orientation!r}")


def toy_cogd_config(beta_scale=0.001):
    """Detector thresholds of the toy experiment: 1 for `x1`, 0.5 for `x2`."""
    return CoGDConfig(beta_scale=beta_scale, alpha_x=1.0, alpha_A=0.5,
                      norm_x="l1", norm_A="l2", coordination_period=1)


def run_toy(optimizer, cogd=None, start=(1.0, 1.5), iters=200,
            orientation="x1_sparse", problem=None):
    """Minimise the penalised Beale function from `start`.

    Both coordinates take a joint optimizer step; with `cogd` the sparse
    coordinate is then coordinated against the dense one.  In the default
    orientation `x1` is the sparse variable (threshold ``cogd.alpha_x``)
    and `x2` the dense one (``cogd.alpha_A``).

    Returns
    -------
    OptTrace
      ``iters + 1`` records, the first being the start point.
    """
    if orientation not in TOY_ORIENTATIONS:
        raise ValueError(f"unknown orientation {orientation!r}")
    base = problem if problem is not None else BealeProblem()
    s, d = (0, 1) if orientation == "x1_sparse" else (1, 0)
    z = np.array(start, dtype=np.float64)
    opt = Optimizer(optimizer)
    trace = OptTrace()

    def record(z, step, fired):
        p = base.at(*z)
        g = np.array(beale_constrained_grad(p))
        value = beale_constrained_value(p)
        if not (np.all(np.isfinite(g)) and np.isfinite(value)):
            raise FloatingPointError(f"toy run diverged after {len(trace)} records")
        trace.append(z, value, float(np.linalg.norm(g)), step, fired)

    record(z, 0.0, False)
    for t in range(iters):
        p = base.at(*z)
        z_next = opt.step(z, np.array(beale_constrained_grad(p)))
        fired = False
        if cogd is not None:
            after = base.at(*z_next)
            ghat = np.array([toy_ghat(after, orientation, cogd.fd_eps)])
            ratios = difference_ratios([[z_next[d] - z[d]]], [z_next[s] - z[s]], cogd.fd_eps)
            xs, fired = cogd_update(z_next[s:s + 1], z[s:s + 1], z_next[d:d + 1], ghat,
                                    ratios, cogd, optimizer.learning_rate, iteration=t)
            z_next = z_next.copy()
            z_next[s] = xs[0]
        record(z_next, float(np.linalg.norm(z_next - z)), fired)
        z = z_next
    return trace


def toy_starts(n=5, seed=0, center=(1.0, 1.5), jitter=(0.25, 0.25)):
    """`n` start points around `center` with seeded uniform jitter.

    `x1` is jittered symmetrically by ``jitter[0]``; `x2` only downwards by
    up to ``2 * jitter[1]``, since Momentum at step 0.005 diverges from
    starts with ``x2`` much above 1.5.
    """
    rng = make_rng(seed, "toy-jitter")
    out = []
    for _ in range(n):
        u = rng.uniform(-1.0, 1.0, size=2)
        out.append((float(center[0] + jitter[0] * u[0]),
                    float(center[1] - jitter[1] * (1.0 + u[1]))))
    return out


def contour_grid(x1_range=(-1.0, 4.0), x2_range=(-1.5, 2.0), n=101, problem=None):
    """Penalised Beale values on a regular grid as ``(x1, x2, F)`` rows."""
    base = problem if problem is not None else BealeProblem()
    rows = []
    for x1 in np.linspace(*x1_range, n):
        for x2 in np.linspace(*x2_range, n):
            rows.append((float(x1), float(x2), beale_constrained_value(base.at(x1, x2))))
    return rows


def contour_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("x1", "x2", "F"))
    for r in rows:
        w.writerow([repr(v) for v in r])
    return buf.getvalue()
