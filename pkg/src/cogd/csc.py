"""Convolutional sparse coding with ADMM and cogradient coordination.

The model is ``1/2 ||b - M sum_k a_k * x_k||^2 + lam sum_k ||x_k||_1`` under
``||a_k||_2 <= 1``, with ``*`` circular convolution and ``M`` an optional
binary observation mask.  Filters and codes are learned by alternating two
ADMM solvers:

* code update -- split ``x = z``; the quadratic ``x`` step is solved by
  conjugate gradient, the ``z`` step is soft thresholding;
* kernel update -- filters are optimised as image-sized arrays ``d = g``;
  ``g`` is projected onto zero-outside-support, unit-norm arrays.

Convolutions are evaluated with real FFTs; the linear systems are still
solved iteratively, so masks (which break the Fourier diagonalisation) need
no special handling.  Without a mask, ``solver="fft"`` solves the same
systems exactly frequency by frequency.
"""

import csv
import io
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import ImageGrid, ShapeError, make_rng, pad_kernel, pixels_of
from .optim import CoGDConfig

logger = logging.getLogger(__name__)

BANK_MAGIC = b"COGDFB1\n"


def soft_threshold(v, t):
    """Proximal operator of ``t * ||.||_1``: ``sign(v) max(|v| - t, 0)``."""
    if t < 0:
        raise ValueError("threshold must be non-negative")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def project_unit_ball(v, support=None):
    """Project onto ``{u : u = 0 outside support, ||u||_2 <= 1}``.

    Parameters
    ----------
    v : ndarray
      Array whose last two axes are spatial; projection is applied to each
      leading index separately.
    support : tuple of int or None
      ``(k, k)`` support in the top-left corner; None keeps all entries.
    """
    v = np.array(v, dtype=np.float64)
    if support is not None:
        cropped = np.zeros_like(v)
        cropped[..., : support[0], : support[1]] = v[..., : support[0], : support[1]]
        v = cropped
    axes = tuple(range(-min(v.ndim, 2), 0))
    n = np.sqrt(np.sum(v * v, axis=axes, keepdims=True))
    outside = n > 1.0
    u = np.where(outside, v / np.where(outside, n, 1.0), v)
    # rounding can leave ||u|| one ulp above 1; shrink until it is not
    over = outside & (np.sqrt(np.sum(u * u, axis=axes, keepdims=True)) > 1.0)
    while np.any(over):
        u = np.where(over, u * (1.0 - 2.0 ** -52), u)
        over = np.sqrt(np.sum(u * u, axis=axes, keepdims=True)) > 1.0
    return u


class FilterBank:
    """`K` square filters of size `k`, each inside the unit l2 ball."""

    def __init__(self, filters):
        f = np.array(filters, dtype=np.float64)
        if f.ndim != 3 or f.shape[1] != f.shape[2]:
            raise ShapeError(f"filters must have shape (K, k, k), got {f.shape}")
        norms = np.sqrt(np.sum(f * f, axis=(1, 2)))
        if np.any(norms > 1.0 + 1e-12):
            raise ValueError("filters must satisfy ||a_k||_2 <= 1")
        self.filters = f
        self.norms = norms

    @classmethod
    def random(cls, K, k, seed=0):
        """Unit-norm standard normal filters from ``make_rng(seed, 'init')``."""
        rng = make_rng(seed, "init")
        f = rng.standard_normal((K, k, k))
        f /= np.sqrt(np.sum(f * f, axis=(1, 2), keepdims=True))
        return cls(project_unit_ball(f))

    @property
    def K(self):
        return self.filters.shape[0]

    @property
    def size(self):
        return self.filters.shape[1]

    def padded(self, shape):
        return np.stack([pad_kernel(a, shape) for a in self.filters])

    def spectra(self, shape):
        return np.fft.rfft2(self.padded(shape))

    def to_bytes(self):
        K, k = self.K, self.size
        return (BANK_MAGIC + struct.pack("<II", K, k)
                + self.filters.astype("<f8").tobytes())

    @classmethod
    def from_bytes(cls, data):
        data = bytes(data)
        if data[: len(BANK_MAGIC)] != BANK_MAGIC:
            raise ValueError("not a filter bank file (bad magic)")
        off = len(BANK_MAGIC)
        if len(data) < off + 8:
            raise ValueError("truncated filter bank header")
        K, k = struct.unpack("<II", data[off:off + 8])
        body = data[off + 8:]
        if len(body) != 8 * K * k * k:
            raise ValueError(f"filter bank payload has {len(body)} bytes, expected {8 * K * k * k}")
        return cls(np.frombuffer(body, dtype="<f8").reshape(K, k, k))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass
class CodeMaps:
    """`K` coefficient maps, each the size of the image."""

    maps: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 3:
            raise ShapeError(f"code maps must have shape (K, H, W), got {self.maps.shape}")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")

    @classmethod
    def zeros(cls, K, shape, lam=0.0):
        return cls(np.zeros((K,) + tuple(shape)), lam)

    @property
    def l1_norms(self):
        return np.sum(np.abs(self.maps), axis=(1, 2))


@dataclass
class AdmmState:
    """Warm-startable ADMM variables for one subproblem.

    ``primal`` is the variable of the quadratic step, ``split`` the one of
    the proximal step and ``dual`` the scaled multiplier.
    """

    rho: float = 1.0
    primal: np.ndarray = None
    split: np.ndarray = None
    dual: np.ndarray = None
    primal_res: list = field(default_factory=list)
    dual_res: list = field(default_factory=list)
    cg_failures: int = 0

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be positive")


def _mask_array(mask, shape):
    if mask is None:
        return None
    m = np.asarray(getattr(mask, "mask", mask), dtype=np.float64)
    if m.shape != tuple(shape):
        raise ShapeError(f"mask shape {m.shape} differs from image shape {tuple(shape)}")
    return m


def synthesize(spectra, maps):
    """``sum_k a_k * x_k`` given filter spectra of shape (K, H, W//2+1)."""
    shape = maps.shape[1:]
    return np.fft.irfft2(np.sum(spectra * np.fft.rfft2(maps), axis=0), s=shape)


def adjoint(spectra, r):
    """Adjoint of :func:`synthesize`: correlation of `r` with every filter."""
    return np.fft.irfft2(np.conj(spectra) * np.fft.rfft2(r)[None], s=r.shape)


def cg(apply, rhs, x0, tol=1e-6, maxiter=50):
    """Conjugate gradient for a symmetric positive definite operator.

    Returns ``(x, converged, relres)`` where ``relres = ||rhs - A x|| / ||rhs||``
    and convergence means ``relres <= tol``.
    """
    x = x0.copy()
    r = rhs - apply(x)
    bnorm = np.sqrt(np.sum(rhs * rhs))
    if bnorm == 0.0:
        return np.zeros_like(x), True, 0.0
    p = r.copy()
    rr = np.sum(r * r)
    for _ in range(maxiter):
        if np.sqrt(rr) <= tol * bnorm:
            break
        Ap = apply(p)
        alpha = rr / np.sum(p * Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = np.sum(r * r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    relres = float(np.sqrt(rr) / bnorm)
    return x, relres <= tol, relres


def _solve_rank_one(spec, rhs, rho):
    """Solve ``(conj(s) s^T + rho I) x = rhs`` independently per frequency."""
    rf = np.fft.rfft2(rhs)
    shape = rhs.shape[1:]
    proj = np.sum(spec * rf, axis=0)
    denom = rho + np.sum(np.abs(spec) ** 2, axis=0)
    xf = (rf - np.conj(spec) * (proj / denom)[None]) / rho
    return np.fft.irfft2(xf, s=shape)


def _solve_gram(specs, rhs, rho):
    """Solve ``(sum_n conj(s_n) s_n^T + rho I) x = rhs`` per frequency."""
    shape = rhs.shape[1:]
    rf = np.moveaxis(np.fft.rfft2(rhs), 0, -1)
    S = np.moveaxis(np.stack(specs), 1, -1)  # (N, H, Wf, K)
    G = np.einsum("nhwk,nhwl->hwkl", np.conj(S), S)
    G = G + rho * np.eye(rhs.shape[0])
    xf = np.linalg.solve(G, rf[..., None])[..., 0]
    return np.fft.irfft2(np.moveaxis(xf, -1, 0), s=shape)


def _record(admm, x, z, z_old):
    admm.primal_res.append(float(np.sqrt(np.sum((x - z) ** 2))))
    admm.dual_res.append(float(admm.rho * np.sqrt(np.sum((z - z_old) ** 2))))


def code_update(bank, codes, image, mask=None, admm=None, inner_iters=10,
                cg_tol=1e-6, cg_maxiter=50, solver="cg"):
    """Update the coefficient maps with the filters held fixed.

    Parameters
    ----------
    bank : FilterBank
    codes : CodeMaps
      Current maps; ``codes.lam`` is the sparsity weight.
    image : ImageGrid or ndarray
    mask : InpaintingMask, ndarray or None
      Observation mask restricting the data term.
    admm : AdmmState or None
      Warm-start state, updated in place.  A fresh state is created from
      `codes` when None or empty.
    inner_iters : int
      ADMM iterations.
    solver : {'cg', 'fft'}
      'fft' solves the quadratic step exactly; it requires ``mask=None``.

    Returns
    -------
    CodeMaps
      The sparse (thresholded) iterate.
    """
    b = pixels_of(image)
    if codes.maps.shape != (bank.K,) + b.shape:
        raise ShapeError(f"codes {codes.maps.shape} incompatible with bank K={bank.K}, image {b.shape}")
    m = _mask_array(mask, b.shape)
    if solver == "fft" and m is not None:
        raise ValueError("the fft solver does not support masks")
    if admm is None:
        admm = AdmmState()
    if admm.split is None:
        admm.split = codes.maps.copy()
        admm.primal = codes.maps.copy()
        admm.dual = np.zeros_like(codes.maps)
    rho = admm.rho
    spec = bank.spectra(b.shape)
    mb = b if m is None else m * b
    Atb = adjoint(spec, mb)

    def normal(v):
        s = synthesize(spec, v)
        return adjoint(spec, s if m is None else m * s) + rho * v

    x, z, u = admm.primal, admm.split, admm.dual
    for _ in range(inner_iters):
        rhs = Atb + rho * (z - u)
        if solver == "fft":
            x = _solve_rank_one(spec, rhs, rho)
        else:
            x, ok, relres = cg(normal, rhs, x, cg_tol, cg_maxiter)
            if not ok:
                admm.cg_failures += 1
                logger.debug("code CG stopped at relative residual %.3g", relres)
        z_old = z
        z = soft_threshold(x + u, codes.lam / rho)
        u = u + x - z
        _record(admm, x, z, z_old)
    admm.primal, admm.split, admm.dual = x, z, u
    return CodeMaps(z.copy(), codes.lam)


def kernel_update(bank, codes, images, admm=None, inner_iters=10, mask=None,
                  cg_tol=1e-6, cg_maxiter=50, solver="cg"):
    """Update the filters with all coefficient maps held fixed.

    Parameters
    ----------
    bank : FilterBank
    codes : CodeMaps or list of CodeMaps
      One entry per image.
    images : image or list of images
    admm : AdmmState or None
      Warm-start state over image-sized filter arrays, updated in place.
    inner_iters : int
    mask : mask, list of masks or None
    solver : {'cg', 'fft'}

    Returns
    -------
    FilterBank
      Every filter lies exactly in the unit ball.  Filters whose maps are
      all zero receive no data gradient and only get projected.
    """
    if isinstance(codes, CodeMaps):
        codes, images = [codes], [images]
        mask = [mask]
    elif mask is None or not isinstance(mask, (list, tuple)):
        mask = [mask] * len(codes)
    bs = [pixels_of(im) for im in images]
    shape = bs[0].shape
    if any(c.maps.shape != (bank.K,) + shape for c in codes):
        raise ShapeError("code maps inconsistent with the bank or images")
    ms = [_mask_array(mk, shape) for mk in mask]
    if solver == "fft" and any(mk is not None for mk in ms):
        raise ValueError("the fft solver does not support masks")
    k = bank.size
    if admm is None:
        admm = AdmmState()
    if admm.split is None:
        padded = bank.padded(shape)
        admm.split = padded.copy()
        admm.primal = padded.copy()
        admm.dual = np.zeros_like(padded)
    rho = admm.rho
    cspec = [np.fft.rfft2(c.maps) for c in codes]
    Xtb = sum(adjoint(cs, b if mk is None else mk * b) for cs, b, mk in zip(cspec, bs, ms))

    def normal(v):
        out = rho * v
        for cs, mk in zip(cspec, ms):
            s = synthesize(cs, v)
            out = out + adjoint(cs, s if mk is None else mk * s)
        return out

    d, g, v = admm.primal, admm.split, admm.dual
    for _ in range(inner_iters):
        rhs = Xtb + rho * (g - v)
        if solver == "fft":
            if len(cspec) == 1:
                d = _solve_rank_one(cspec[0], rhs, rho)
            else:
                d = _solve_gram(cspec, rhs, rho)
        else:
            d, ok, relres = cg(normal, rhs, d, cg_tol, cg_maxiter)
            if not ok:
                admm.cg_failures += 1
                logger.debug("kernel CG stopped at relative residual %.3g", relres)
        g_old = g
        g = project_unit_ball(d + v, support=(k, k))
        v = v + d - g
        _record(admm, d, g, g_old)
    admm.primal, admm.split, admm.dual = d, g, v
    return FilterBank(project_unit_ball(g[:, :k, :k]))


def reconstruct(bank, codes):
    """``sum_k a_k * x_k``."""
    return synthesize(bank.spectra(codes.maps.shape[1:]), codes.maps)


def objective_terms(bank, codes, image, mask=None):
    """Return ``(data_term, l1_term)`` of the (masked) CSC objective."""
    b = pixels_of(image)
    r = reconstruct(bank, codes) - b
    m = _mask_array(mask, b.shape)
    if m is not None:
        r = m * r
    return 0.5 * float(np.sum(r * r)), codes.lam * float(np.sum(np.abs(codes.maps)))


def objective(bank, codes, image, mask=None):
    data, l1 = objective_terms(bank, codes, image, mask)
    return data + l1


def csc_cogd_config(beta_scale=0.1):
    """Coordination settings for CSC: l1 on maps, l2 on filters, once per epoch.

    Thresholds are recomputed every epoch from the current maps and filters,
    so ``alpha_x`` and ``alpha_A`` of the returned config are unused.
    """
    return CoGDConfig(beta_scale=beta_scale, norm_x="l1", norm_A="l2",
                      coordination_period=1)


def _norms(arr, kind):
    if kind == "l1":
        return np.sum(np.abs(arr), axis=(-2, -1))
    return np.sqrt(np.sum(arr * arr, axis=(-2, -1)))


def cogd_coordinate_codes(bank, codes_next, codes_prev, ghat, cfg, bank_prev=None,
                          eta=1.0, filter_norms=None):
    """Apply the coordination rule to every map index ``k``.

    Map ``k`` is projected, ``x_k <- x_k + beta_k * x_prev_k``, when its norm
    is at most the mean map norm while the norm of filter ``k`` exceeds the
    median filter norm.  ``beta = cfg.beta_scale * eta * c`` with ::

        c_{k,p} = (corr(ghat, a_k - a_prev_k))_p / (x_k - x_prev_k)_p

    and ``c_{k,p} = sum(ghat)`` where the denominator is below ``cfg.fd_eps``.

    Parameters
    ----------
    bank, bank_prev : FilterBank
      Filters now and at the previous coordination.
    codes_next, codes_prev : CodeMaps
      Maps now and at the previous coordination.
    ghat : ndarray
      Residual ``A x - b`` (masked when a mask is in use), image-shaped.
    cfg : CoGDConfig
    eta : float
      Step size of the code variable.
    filter_norms : ndarray or None
      Norms used by the filter-side test; defaults to ``bank.norms``.

    Returns
    -------
    codes : CodeMaps
    fired : ndarray of bool, shape (K,)
    """
    K = bank.K
    if codes_prev is None or bank_prev is None:
        logger.warning("no previous state for coordination; passing codes through")
        return CodeMaps(codes_next.maps.copy(), codes_next.lam), np.zeros(K, dtype=bool)
    x_next, x_prev = codes_next.maps, codes_prev.maps
    if x_next.shape != x_prev.shape or x_next.shape[0] != K:
        raise ShapeError("inconsistent code map shapes")
    ghat = np.asarray(ghat, dtype=np.float64)
    if ghat.shape != x_next.shape[1:]:
        raise ShapeError(f"ghat shape {ghat.shape} differs from map shape {x_next.shape[1:]}")
    x_norms = _norms(x_next, cfg.norm_x)
    if filter_norms is None:
        filter_norms = _norms(bank.filters, cfg.norm_A)
    fired = (x_norms <= np.mean(x_norms)) & (filter_norms > np.median(filter_norms))
    out = x_next.copy()
    if not fired.any() or cfg.beta_scale == 0:
        return CodeMaps(out, codes_next.lam), fired
    shape = ghat.shape
    dspec = bank.spectra(shape) - bank_prev.spectra(shape)
    num = adjoint(dspec[fired], ghat)
    dx = x_next[fired] - x_prev[fired]
    degenerate = np.abs(dx) < cfg.fd_eps
    c = np.where(degenerate, np.sum(ghat), num / np.where(degenerate, 1.0, dx))
    out[fired] = x_next[fired] + cfg.beta_scale * eta * c * x_prev[fired]
    return CodeMaps(out, codes_next.lam), fired


@dataclass
class EpochRecord:
    epoch: int
    objective: float
    l1_term: float
    data_term: float
    detector_fired_count: int


HISTORY_HEADER = ("epoch", "objective", "l1_term", "data_term", "detector_fired_count")


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for h in history:
        w.writerow([h.epoch, repr(h.objective), repr(h.l1_term), repr(h.data_term),
                    h.detector_fired_count])
    return buf.getvalue()


@dataclass
class LearnResult:
    bank: FilterBank
    codes: list
    history: list
    code_admm: list
    kernel_admm: AdmmState


def learn(images, K=100, k=11, lam=0.05, outer_epochs=20, cogd=None, seed=0,
          masks=None, rho=1.0, inner_loops=1, admm_iters=10, cg_tol=1e-6,
          cg_maxiter=50, eta=1.0, solver="cg"):
    """Learn a filter bank and per-image maps by alternating ADMM solvers.

    Each outer epoch first coordinates the maps (when `cogd` is given),
    then runs `inner_loops` rounds of kernel update followed by code update.
    The objective is recorded at the end of every epoch.

    Parameters
    ----------
    images : list of ImageGrid or ndarray
      Same-sized images.
    K, k : int
      Number and size of filters.
    lam : float
      Sparsity weight.
    outer_epochs : int
    cogd : CoGDConfig or None
      See :func:`csc_cogd_config`.
    seed : int
      Seeds the filter initialisation; maps start at zero.
    masks : list or None
      Per-image observation masks, used for learning from incomplete data.
    rho : float
      ADMM penalty of both subproblems.
    eta : float
      Code step size entering the coordination weight.

    Returns
    -------
    LearnResult
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if not images:
        raise ValueError("images must be non-empty")
    bs = [pixels_of(im) for im in images]
    shape = bs[0].shape
    if any(b.shape != shape for b in bs):
        raise ShapeError("all images must have the same shape")
    ms = [None] * len(bs) if masks is None else [_mask_array(m, shape) for m in masks]
    bank = FilterBank.random(K, k, seed)
    codes = [CodeMaps.zeros(K, shape, lam) for _ in bs]
    code_admm = [AdmmState(rho) for _ in bs]
    kernel_admm = AdmmState(rho)
    prev_bank, prev_codes = None, None
    history = []
    for epoch in range(outer_epochs):
        fired_count = 0
        if cogd is not None and prev_bank is not None:
            if kernel_admm.primal is not None:
                fnorms = _norms(kernel_admm.primal[:, :k, :k], cogd.norm_A)
            else:
                fnorms = None
            for n, b in enumerate(bs):
                ghat = reconstruct(bank, codes[n]) - b
                if ms[n] is not None:
                    ghat = ms[n] * ghat
                new, fired = cogd_coordinate_codes(bank, codes[n], prev_codes[n], ghat, cogd,
                                                   bank_prev=prev_bank, eta=eta,
                                                   filter_norms=fnorms)
                fired_count += int(fired.sum())
                codes[n] = new
                if code_admm[n].split is not None:
                    code_admm[n].split = new.maps.copy()
        prev_bank = bank
        prev_codes = [CodeMaps(c.maps.copy(), c.lam) for c in codes]
        for _ in range(inner_loops):
            bank = kernel_update(bank, codes, bs, kernel_admm, admm_iters, mask=ms,
                                 cg_tol=cg_tol, cg_maxiter=cg_maxiter, solver=solver)
            codes = [code_update(bank, codes[n], bs[n], ms[n], code_admm[n], admm_iters,
                                 cg_tol, cg_maxiter, solver)
                     for n in range(len(bs))]
        data = l1 = 0.0
        for n, b in enumerate(bs):
            dt, lt = objective_terms(bank, codes[n], b, ms[n])
            data += dt
            l1 += lt
        history.append(EpochRecord(epoch, data + l1, l1, data, fired_count))
        logger.info("epoch %d objective %.6g fired %d", epoch, data + l1, fired_count)
    return LearnResult(bank, codes, history, code_admm, kernel_admm)


def infer_codes(bank, image, lam, mask=None, admm_iters=100, rho=1.0, cg_tol=1e-6,
                cg_maxiter=50, solver="cg"):
    """Sparse-code one image with fixed filters, starting from zero maps."""
    b = pixels_of(image)
    codes = CodeMaps.zeros(bank.K, b.shape, lam)
    return code_update(bank, codes, b, mask, AdmmState(rho), admm_iters, cg_tol,
                       cg_maxiter, solver)


def inpaint(image, bank, mask, lam, admm_iters=100, rho=1.0, cg_tol=1e-6, cg_maxiter=50):
    """Infer maps from the observed pixels only, then reconstruct everything."""
    m = _mask_array(mask, pixels_of(image).shape)
    codes = infer_codes(bank, pixels_of(image), lam, m, admm_iters, rho, cg_tol, cg_maxiter)
    return reconstruct(bank, codes)


def code_image(image, bank, lam, mask=None, normalize=True, admm_iters=100, rho=1.0,
               cg_tol=1e-6, cg_maxiter=50, solver="cg"):
    """Sparse-code an image with fixed filters and return its reconstruction.

    With `normalize` the image is standardised using the mean and std of the
    observed pixels only (all pixels without a mask), coded, reconstructed
    and mapped back to the original intensity scale.  With a mask this is
    inpainting: unobserved pixels influence nothing but the output.

    Returns
    -------
    ImageGrid
      Same dynamic range as `image`.
    """
    px = pixels_of(image)
    m = _mask_array(mask, px.shape)
    mean, std = 0.0, 1.0
    if normalize:
        vals = px if m is None else px[m > 0]
        if vals.size:
            mean, std = float(vals.mean()), float(vals.std())
        if std < 1e-8:
            std = 1.0
    b = (px - mean) / std
    if m is not None:
        b = b * m
    codes = infer_codes(bank, b, lam, m, admm_iters, rho, cg_tol, cg_maxiter,
                        solver if m is None else "cg")
    peak = image.range_max if isinstance(image, ImageGrid) else 1.0
    return ImageGrid(reconstruct(bank, codes) * std + mean, peak)
