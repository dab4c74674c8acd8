"""First-order optimizers and the cogradient coordination rule.

The baseline optimizers (SGD, Momentum, Adam) all *descend*: they subtract
the gradient of the objective being minimised.  The coordination layer watches
a pair of coupled variables and, when the sparse one has collapsed while its
partner is still large, adds a coupling term to the sparse variable's update::

    x_hat = x_next + beta * x_prev,      beta = beta_scale * eta * c

where ``c_j = sum_i ghat_i * dA_ij / dx_j`` is estimated from the change of
both variables over the last coordination period.
"""

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import ShapeError, as_vector, norm

logger = logging.getLogger(__name__)

OPTIMIZER_KINDS = ("sgd", "momentum", "adam")


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    learning_rate: float = 1e-3
    momentum_coef: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum_coef < 1:
            raise ValueError("momentum_coef must lie in [0, 1)")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if not self.adam_eps > 0:
            raise ValueError("adam_eps must be positive")


@dataclass
class OptimizerState:
    """Moment buffers of one optimizer run."""

    t: int = 0
    velocity: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None


def baseline_step(config, state, x, grad):
    """Take one SGD/Momentum/Adam step and return the new iterate.

    `state` is updated in place.  `x` and `grad` may have any (equal) shape.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if x.shape != grad.shape:
        raise ShapeError(f"x has shape {x.shape} but grad has shape {grad.shape}")
    lr = config.learning_rate
    state.t += 1
    if config.kind == "sgd":
        return x - lr * grad
    if config.kind == "momentum":
        if state.velocity is None:
            state.velocity = np.zeros_like(x)
        state.velocity = config.momentum_coef * state.velocity + grad
        return x - lr * state.velocity
    # adam
    if state.m is None:
        state.m = np.zeros_like(x)
        state.v = np.zeros_like(x)
    b1, b2 = config.adam_beta1, config.adam_beta2
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    mhat = state.m / (1 - b1 ** state.t)
    vhat = state.v / (1 - b2 ** state.t)
    return x - lr * mhat / (np.sqrt(vhat) + config.adam_eps)


class Optimizer:
    """Stateful wrapper around :func:`baseline_step`."""

    def __init__(self, config):
        self.config = config
        self.state = OptimizerState()

    def step(self, x, grad):
        return baseline_step(self.config, self.state, x, grad)


@dataclass
class CoGDConfig:
    """Parameters of the coordination rule.

    Parameters
    ----------
    beta_scale : float
      Scalar multiplying ``eta * c`` to form the projection weight.
    alpha_x, alpha_A : float
      Norm thresholds for the sparse and the dense variable.
    norm_x, norm_A : {'l1', 'l2'}
      Norms used by the detector.
    coordination_period : int
      Iterations between detector evaluations.
    fd_eps : float
      Difference ratios with ``|dx_j| < fd_eps`` are replaced by 1.
    """

    beta_scale: float = 0.001
    alpha_x: float = 1.0
    alpha_A: float = 0.5
    norm_x: str = "l1"
    norm_A: str = "l2"
    coordination_period: int = 1
    fd_eps: float = 1e-8

    def __post_init__(self):
        if not self.beta_scale >= 0:
            raise ValueError("beta_scale must be non-negative")
        if self.coordination_period < 1:
            raise ValueError("coordination_period must be >= 1")
        if not self.fd_eps > 0:
            raise ValueError("fd_eps must be positive")
        for n in (self.norm_x, self.norm_A):
            if n not in ("l1", "l2"):
                raise ValueError(f"unknown norm {n!r}")


@dataclass
class CoGDState:
    x_prev: np.ndarray = None
    A_prev: np.ndarray = None
    c: np.ndarray = None
    detector_log: list = field(default_factory=list)


def detect_asynchrony(x_val, A_val, cfg):
    """True when the sparse variable is small while its partner is large.

    ``s(v) = [R(v) > alpha]`` with a strict inequality, and the detector is
    ``(not s(x)) and s(A)``.
    """
    s_x = norm(x_val, cfg.norm_x) > cfg.alpha_x
    s_A = norm(A_val, cfg.norm_A) > cfg.alpha_A
    return bool((not s_x) and s_A)


def difference_ratios(delta_A, delta_x, fd_eps=1e-8):
    """Finite-difference estimate of ``dA_ij / dx_j``.

    Parameters
    ----------
    delta_A : ndarray, shape (M, N)
      Change of the dense variable over the last period.
    delta_x : ndarray, shape (N,)
      Change of the sparse variable over the same period.
    fd_eps : float
      Columns whose denominator satisfies ``|dx_j| < fd_eps`` get ratio 1.
    """
    delta_A = np.asarray(delta_A, dtype=np.float64)
    delta_x = np.asarray(delta_x, dtype=np.float64)
    if delta_A.ndim != 2 or delta_x.ndim != 1 or delta_A.shape[1] != delta_x.shape[0]:
        raise ShapeError(f"delta_A {delta_A.shape} incompatible with delta_x {delta_x.shape}")
    degenerate = np.abs(delta_x) < fd_eps
    safe = np.where(degenerate, 1.0, delta_x)
    return np.where(degenerate[None, :], 1.0, delta_A / safe[None, :])


def coupling_vector(ghat, ratios):
    """``c_j = sum_i ghat_i * ratios_ij``."""
    ghat = as_vector(ghat, "ghat")
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.ndim != 2 or ratios.shape[0] != ghat.shape[0]:
        raise ShapeError(f"ratios {ratios.shape} incompatible with ghat of length {ghat.shape[0]}")
    return ghat @ ratios


def project_coupled(x_next, x_prev, beta):
    """The projection ``x_next + beta * x_prev`` (elementwise)."""
    x_next = np.asarray(x_next, dtype=np.float64)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if x_next.shape != x_prev.shape or beta.shape != x_next.shape:
        raise ShapeError(f"shapes {x_next.shape}, {x_prev.shape}, {beta.shape} differ")
    return x_next + beta * x_prev


def cogd_update(x_next, x_prev, A_val, ghat, ratios, cfg, eta, iteration=0):
    """Coordinated iterate for the sparse variable.

    Parameters
    ----------
    x_next : ndarray
      Iterate produced by the underlying optimizer.
    x_prev : ndarray
      Iterate before that step.
    A_val : ndarray
      Current value of the coupled dense variable.
    ghat : ndarray, shape (M,)
      Residual-like factor of the dense variable's gradient.
    ratios : ndarray, shape (M, N)
      Output of :func:`difference_ratios`.
    cfg : CoGDConfig
    eta : float
      Learning rate of the sparse variable.
    iteration : int
      The detector is only evaluated when ``iteration`` is a multiple of
      ``cfg.coordination_period``.

    Returns
    -------
    x_hat : ndarray
    fired : bool
    """
    x_next = np.asarray(x_next, dtype=np.float64)
    if iteration % cfg.coordination_period != 0:
        return x_next.copy(), False
    fired = detect_asynchrony(x_next, A_val, cfg)
    if not fired or cfg.beta_scale == 0:
        return x_next.copy(), fired
    c = coupling_vector(ghat, ratios)
    beta = cfg.beta_scale * eta * c
    return project_coupled(x_next, x_prev, beta.reshape(x_next.shape)), fired


TRACE_HEADER = ("iter", "objective", "grad_norm", "step_norm", "detector_fired")


@dataclass
class TraceRecord:
    iterate: np.ndarray
    objective: float
    grad_norm: float
    step_norm: float
    detector_fired: bool


class OptTrace:
    """Per-iteration record of an optimization run.

    The first record is the starting point, with zero step norm.
    """

    def __init__(self):
        self.records = []

    def append(self, iterate, objective, grad_norm, step_norm, detector_fired=False):
        self.records.append(TraceRecord(np.array(iterate, dtype=np.float64),
                                        float(objective), float(grad_norm),
                                        float(step_norm), bool(detector_fired)))

    def __len__(self):
        return len(self.records)

    @property
    def path_length(self):
        return float(sum(r.step_norm for r in self.records))

    @property
    def iterates(self):
        return np.array([r.iterate for r in self.records])

    @property
    def objectives(self):
        return np.array([r.objective for r in self.records])

    @property
    def fired_count(self):
        return sum(r.detector_fired for r in self.records)

    def to_csv(self, fh=None):
        """Write the trace as CSV; return the text when `fh` is None."""
        buf = io.StringIO() if fh is None else fh
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for i, r in enumerate(self.records):
            w.writerow([i, repr(r.objective), repr(r.grad_norm),
                        repr(r.step_norm), int(r.detector_fired)])
        if fh is None:
            return buf.getvalue()
        return None
