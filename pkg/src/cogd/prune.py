"""Soft-mask channel pruning of a single convolution layer.

Output channel ``j`` of :class:`MaskedConvLayer` is ::

    F_out[j] = f(sum_i corr(F_in[i], W[i, j] * m[j]))

with ``corr`` circular cross-correlation, ``corr(x, k)[h, w] =
sum_{p,q} k[p, q] x[h+p, w+q]``.  Under this indexing the kernel gradient is
exactly ``dL/dW[i, j] = m[j] * ghat[i, j]`` where ``ghat[i, j][p, q] =
sum_{h,w} U[j][h, w] F_in[i][h+p, w+q]`` and ``U`` is the gradient at the
pre-activation.  A zero mask entry therefore freezes every kernel feeding
that channel, which is the situation the mask coordination repairs.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .core import ShapeError, as_vector, make_rng
from .optim import Optimizer, OptimizerConfig

ACTIVATIONS = ("identity", "relu")


@dataclass
class MaskedConvLayer:
    """Kernels ``W[i, j]`` of shape (I, J, p, q) and a soft mask of length J."""

    W: np.ndarray
    m: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.W = np.array(self.W, dtype=np.float64)
        self.m = as_vector(self.m, "m").copy()
        if self.W.ndim != 4:
            raise ShapeError(f"W must have shape (I, J, p, q), got {self.W.shape}")
        if self.m.shape[0] != self.W.shape[1]:
            raise ShapeError(f"mask length {self.m.shape[0]} differs from {self.W.shape[1]} out-channels")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_channels(self):
        return self.W.shape[0]

    @property
    def out_channels(self):
        return self.W.shape[1]

    def copy(self):
        return MaskedConvLayer(self.W.copy(), self.m.copy(), self.activation)

    def filter_norms(self):
        """``||sum_i W[i, j]||_2`` for every output channel."""
        return channel_norms(self.W)


def channel_norms(W):
    s = np.sum(W, axis=0)
    return np.sqrt(np.sum(s * s, axis=(-2, -1)))


@dataclass
class PruneConfig:
    """Mask sparsity and coordination settings.

    Parameters
    ----------
    lambda_m : float
      l1 weight on the mask.
    prune_rate : float
      ``a`` in (0, 1); the filter-norm threshold is exceeded by a fraction
      ``a`` of the channels.
    alpha_m : float
      Mask magnitude threshold.
    beta_scale : float
    mask_div_eps : float
      Guard for dividing by the mask when recovering ``ghat``.
    fd_eps : float
      Guard for the ``dW / dm`` difference ratio.
    """

    lambda_m: float = 0.0
    prune_rate: float = 0.5
    alpha_m: float = 0.5
    beta_scale: float = 0.001
    mask_div_eps: float = 1e-8
    fd_eps: float = 1e-8

    def __post_init__(self):
        if self.lambda_m < 0:
            raise ValueError("lambda_m must be non-negative")
        if not 0 < self.prune_rate < 1:
            raise ValueError("prune_rate must lie in (0, 1)")
        if not self.mask_div_eps > 0:
            raise ValueError("mask_div_eps must be positive")
        if self.beta_scale < 0:
            raise ValueError("beta_scale must be non-negative")


def _check_input(layer, F):
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 3 or F.shape[0] != layer.in_channels:
        raise ShapeError(f"input must have shape ({layer.in_channels}, H, W), got {F.shape}")
    p, q = layer.W.shape[2:]
    if F.shape[1] < p or F.shape[2] < q:
        raise ShapeError("kernel larger than the feature maps")
    return F


def preactivation(layer, F):
    """``sum_i corr(F[i], W[i, j] m[j])`` for every ``j``, shape (J, H, W)."""
    F = _check_input(layer, F)
    shape = F.shape[1:]
    Wm = layer.W * layer.m[None, :, None, None]
    padded = np.zeros(Wm.shape[:2] + shape)
    padded[..., : Wm.shape[2], : Wm.shape[3]] = Wm
    k_spec = np.fft.rfft2(padded)
    F_spec = np.fft.rfft2(F)
    out = np.sum(np.conj(k_spec) * F_spec[:, None], axis=0)
    return np.fft.irfft2(out, s=shape)


def masked_forward(layer, F):
    """Forward pass of the masked layer; output shape (J, H, W)."""
    z = preactivation(layer, F)
    if layer.activation == "relu":
        return np.maximum(z, 0.0)
    return z


def masked_forward_direct(layer, F):
    """Loop reference for :func:`masked_forward`."""
    F = _check_input(layer, F)
    I, J, P, Q = layer.W.shape
    out = np.zeros((J,) + F.shape[1:])
    for j in range(J):
        for i in range(I):
            k = layer.W[i, j] * layer.m[j]
            for p in range(P):
                for q in range(Q):
                    out[j] += k[p, q] * np.roll(F[i], (-p, -q), axis=(0, 1))
    if layer.activation == "relu":
        out = np.maximum(out, 0.0)
    return out


def ghat_of(layer, F, upstream):
    """``ghat[i, j][p, q] = sum_{h,w} U[j][h, w] F[i][h+p, w+q]``."""
    F = _check_input(layer, F)
    U = np.asarray(upstream, dtype=np.float64)
    if U.shape != (layer.out_channels,) + F.shape[1:]:
        raise ShapeError(f"upstream must have shape {(layer.out_channels,) + F.shape[1:]}, got {U.shape}")
    P, Q = layer.W.shape[2:]
    cross = np.fft.irfft2(np.conj(np.fft.rfft2(U))[None] * np.fft.rfft2(F)[:, None], s=F.shape[1:])
    return cross[..., :P, :Q]


def grad_W(layer, F, upstream):
    """Kernel gradient ``m[j] * ghat[i, j]``, shape (I, J, p, q).

    `upstream` is the loss gradient at the pre-activation; for a relu layer
    the caller multiplies the output gradient by the active set first.
    """
    return layer.m[None, :, None, None] * ghat_of(layer, F, upstream)


def grad_m(layer, F, upstream):
    """``dL/dm[j] = sum_i <W[i, j], ghat[i, j]>``."""
    return np.einsum("ijpq,ijpq->j", layer.W, ghat_of(layer, F, upstream))


def recover_ghat(grad, m, eps=1e-8):
    """Divide kernel gradients by their guarded channel mask.

    ``grad`` has shape (I, J, p, q) and `m` length J; scalar inputs are
    accepted for a single channel.  The divisor is ``sign(m) max(|m|, eps)``
    with ``sign(0) = 1``.
    """
    grad = np.asarray(grad, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    div = np.where(m < 0, -1.0, 1.0) * np.maximum(np.abs(m), eps)
    if grad.ndim == 4:
        if div.shape != (grad.shape[1],):
            raise ShapeError("mask length differs from the gradient's out-channels")
        div = div[None, :, None, None]
    return grad / div


def filter_threshold(norms, prune_rate):
    """Threshold exceeded by a fraction `prune_rate` of the channel norms."""
    return float(np.quantile(np.asarray(norms, dtype=np.float64), 1.0 - prune_rate))


def asynchronous_channels(m, W, cfg):
    """Channels whose mask is small while their summed kernel is large."""
    norms = channel_norms(W)
    return (np.abs(m) <= cfg.alpha_m) & (norms > filter_threshold(norms, cfg.prune_rate))


def mask_cogd_update(m_next, m_prev, W, ghat, cfg, eta, W_prev=None):
    """Coordinate the soft mask with the kernels.

    Channel ``j`` is projected, ``m_j <- m_next_j + beta_j m_prev_j``, when
    ``|m_prev_j| <= alpha_m`` and ``||sum_i W[i, j]||`` exceeds the
    ``(1 - prune_rate)`` quantile of those norms.  ``beta_j =
    beta_scale * eta * c_j`` with ``c_j = sum_{i,p,q} ghat[i, j] dW[i, j] / dm_j``;
    a ratio whose ``|dm_j| < fd_eps`` is replaced by 1.

    Parameters
    ----------
    m_next, m_prev : ndarray, shape (J,)
      Mask after and before the last coordination period.
    W : ndarray, shape (I, J, p, q)
      Current kernels.
    ghat : ndarray, shape (I, J, p, q)
      Recovered kernel gradient factor.
    cfg : PruneConfig
    eta : float
      Mask learning rate.
    W_prev : ndarray or None
      Kernels at the previous coordination; without them ``dW = 0``.

    Returns
    -------
    m_hat : ndarray
    fired : ndarray of bool
    """
    m_next = as_vector(m_next, "m_next")
    m_prev = as_vector(m_prev, "m_prev")
    W = np.asarray(W, dtype=np.float64)
    ghat = np.asarray(ghat, dtype=np.float64)
    if m_prev.shape != m_next.shape or W.ndim != 4 or W.shape[1] != m_next.shape[0]:
        raise ShapeError("mask and kernel shapes are inconsistent")
    if ghat.shape != W.shape:
        raise ShapeError(f"ghat shape {ghat.shape} differs from W shape {W.shape}")
    fired = asynchronous_channels(m_prev, W, cfg)
    out = m_next.copy()
    if not fired.any() or cfg.beta_scale == 0:
        return out, fired
    dW = np.zeros_like(W) if W_prev is None else W - np.asarray(W_prev, dtype=np.float64)
    dm = m_next - m_prev
    degenerate = np.abs(dm) < cfg.fd_eps
    ratio = np.where(degenerate[None, :, None, None], 1.0,
                     dW / np.where(degenerate, 1.0, dm)[None, :, None, None])
    c = np.sum(ghat * ratio, axis=(0, 2, 3))
    beta = cfg.beta_scale * eta * c
    out[fired] = m_next[fired] + beta[fired] * m_prev[fired]
    return out, fired


def loss_and_grads(layer, dataset, weight_decay=0.0):
    """Per-pixel mean squared-error loss and its gradients over `dataset`.

    The data term is ``1 / (2 n H W) sum ||F_out - target||^2`` over the `n`
    samples.

    Returns ``(loss, grad_W, grad_m, ghat)``; the loss includes the
    ``weight_decay / 2 ||W||^2`` term, grad_W its gradient, and ghat is the
    mean kernel gradient factor (before the weight decay).
    """
    n = len(dataset) * int(np.prod(np.shape(dataset[0][0])[1:]))
    loss = 0.0
    gh = np.zeros_like(layer.W)
    for F, target in dataset:
        z = preactivation(layer, F)
        out = np.maximum(z, 0.0) if layer.activation == "relu" else z
        r = out - target
        loss += 0.5 * float(np.sum(r * r)) / n
        U = r if layer.activation == "identity" else r * (z > 0)
        gh += ghat_of(layer, F, U) / n
    gW = layer.m[None, :, None, None] * gh + weight_decay * layer.W
    gm = np.einsum("ijpq,ijpq->j", layer.W, gh)
    loss += 0.5 * weight_decay * float(np.sum(layer.W ** 2))
    return loss, gW, gm, gh


@dataclass
class PruneTrace:
    """Per-epoch masks, channel filter norms and detector flags."""

    masks: list = field(default_factory=list)
    filter_norms: list = field(default_factory=list)
    fired: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def asynchronous_counts(self):
        return [int(np.sum(f)) for f in self.fired]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("epoch", "channel", "mask_value", "filter_norm", "detector_fired"))
        for e, (m, n, f) in enumerate(zip(self.masks, self.filter_norms, self.fired)):
            for j in range(len(m)):
                w.writerow([e, j, repr(float(m[j])), repr(float(n[j])), int(f[j])])
        return buf.getvalue()


def train_toy_pruner(layer, dataset, epochs=100, optimizer=None, cogd=None, seed=0,
                     lambda_m=None, weight_decay=1e-3, steps_per_epoch=1, monitor=None):
    """Train kernels and mask on a regression task.

    Each epoch takes `steps_per_epoch` full-batch steps on
    ``loss(W m) + lambda_m ||m||_1 + weight_decay / 2 ||W||^2`` with the l1
    term handled by its proximal map, records the trajectory, then, when
    `cogd` is given, coordinates the mask against the kernels using the
    epoch-boundary snapshots.

    Parameters
    ----------
    layer : MaskedConvLayer
      Starting point; not modified.
    dataset : list of (input, target)
    epochs : int
    optimizer : OptimizerConfig or None
      Shared by kernels and mask (separate state); SGD at 0.01 by default.
    cogd : PruneConfig or None
    seed : int
      Recorded for reproducibility; training is deterministic given the
      inputs.
    lambda_m : float or None
      Defaults to ``cogd.lambda_m`` or 0.
    monitor : PruneConfig or None
      Thresholds used for the recorded detector flags; defaults to `cogd`
      or ``PruneConfig()``.

    Returns
    -------
    layer : MaskedConvLayer
    trace : PruneTrace
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    opt_cfg = optimizer if optimizer is not None else OptimizerConfig("sgd", 0.01)
    if lambda_m is None:
        lambda_m = cogd.lambda_m if cogd is not None else 0.0
    mon = monitor if monitor is not None else (cogd if cogd is not None else PruneConfig())
    layer = layer.copy()
    opt_W, opt_m = Optimizer(opt_cfg), Optimizer(opt_cfg)
    eta = opt_cfg.learning_rate
    trace = PruneTrace()
    for _ in range(epochs):
        m_prev, W_prev = layer.m.copy(), layer.W.copy()
        for _ in range(steps_per_epoch):
            loss, gW, gm, _ = loss_and_grads(layer, dataset, weight_decay)
            layer.W = opt_W.step(layer.W, gW)
            m = opt_m.step(layer.m, gm)
            layer.m = np.sign(m) * np.maximum(np.abs(m) - eta * lambda_m, 0.0)
        loss, gW, _, _ = loss_and_grads(layer, dataset, weight_decay)
        if not (np.isfinite(loss) and np.all(np.isfinite(layer.m))):
            raise FloatingPointError(f"training diverged at epoch {len(trace.losses)}")
        trace.losses.append(loss + lambda_m * float(np.sum(np.abs(layer.m))))
        trace.masks.append(layer.m.copy())
        trace.filter_norms.append(layer.filter_norms())
        trace.fired.append(asynchronous_channels(layer.m, layer.W, mon))
        if cogd is not None:
            ghat = recover_ghat(gW - weight_decay * layer.W, layer.m, cogd.mask_div_eps)
            layer.m, _ = mask_cogd_update(layer.m, m_prev, layer.W, ghat, cogd, eta, W_prev)
    return layer, trace


def planted_task(channels=8, in_channels=4, size=8, kernel=3, samples=16, seed=0,
                 dead_scale=3.0):
    """Regression task whose targets vanish on the upper half of the channels.

    A teacher layer with unit mask generates targets; its kernels into
    channels ``j >= channels // 2`` are zero.  The student starts with
    the teacher's kernels plus noise on the informative channels, random
    kernels of norm scale `dead_scale` on the dead ones, and a unit mask.

    Returns
    -------
    dataset : list of (input, target)
    student : MaskedConvLayer
    dead : ndarray of int
      Indices of the planted dead channels.
    """
    rng = make_rng(seed, "planted-prune")
    J, I = channels, in_channels
    W_t = rng.standard_normal((I, J, kernel, kernel)) / kernel
    W_t[:, J // 2:] = 0.0
    teacher = MaskedConvLayer(W_t, np.ones(J))
    dataset = []
    for _ in range(samples):
        F = rng.standard_normal((I, size, size))
        dataset.append((F, masked_forward(teacher, F)))
    W_s = W_t + 0.1 * rng.standard_normal(W_t.shape) / kernel
    W_s[:, J // 2:] = dead_scale * rng.standard_normal((I, J - J // 2, kernel, kernel)) / kernel
    student = MaskedConvLayer(W_s, np.ones(J))
    return dataset, student, np.arange(J // 2, J)


def pruned_channels(layer, tol=1e-3):
    """Indices of channels whose mask magnitude is below `tol`."""
    return np.flatnonzero(np.abs(layer.m) < tol)


def pruned_report(layer, tol=1e-3):
    """Plain-text report, one ``channel kept|pruned`` line per channel."""
    pruned = set(pruned_channels(layer, tol).tolist())
    return "".join(f"{j} {'pruned' if j in pruned else 'kept'}\n" for j in range(layer.out_channels))
