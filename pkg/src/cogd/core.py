"""Dense numeric containers and the convolution primitives shared by all
workloads.

Vectors and matrices are plain ``float64`` numpy arrays; :func:`as_vector`
and :func:`as_matrix` validate them at API boundaries.  Images carry their
dynamic range in :class:`ImageGrid`.
"""

import zlib
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class NonFiniteError(ValueError):
    """Raised when a NaN or infinity reaches a public operation."""


def _check_finite(a, name):
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains non-finite entries")


def as_vector(v, name="vector"):
    """Return `v` as a validated 1-D float64 array of length >= 1."""
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1 or a.size < 1:
        raise ShapeError(f"{name} must be 1-D and non-empty, got shape {a.shape}")
    _check_finite(a, name)
    return a


def as_matrix(m, name="matrix"):
    """Return `m` as a validated 2-D float64 array."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.size < 1:
        raise ShapeError(f"{name} must be 2-D and non-empty, got shape {a.shape}")
    _check_finite(a, name)
    return a


@dataclass(frozen=True)
class ImageGrid:
    """A single-channel image with an explicit dynamic range.

    Parameters
    ----------
    pixels : ndarray
      2-D array of pixel values.
    range_max : float, optional (default 1.0)
      Peak value used by PSNR/SSIM (1.0 or 255.0 in practice).
    """

    pixels: np.ndarray
    range_max: float = 1.0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or min(px.shape) < 1:
            raise ShapeError(f"image must be 2-D and non-empty, got {px.shape}")
        if not self.range_max > 0:
            raise ValueError("range_max must be positive")
        _check_finite(px, "image")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)
        object.__setattr__(self, "range_max", float(self.range_max))

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape


def pixels_of(img):
    """Return the pixel array of an :class:`ImageGrid` or array-like."""
    if isinstance(img, ImageGrid):
        return img.pixels
    return np.asarray(img, dtype=np.float64)


def matvec(A, x):
    """Matrix-vector product with shape checking."""
    A = as_matrix(A, "A")
    x = as_vector(x, "x")
    if A.shape[1] != x.shape[0]:
        raise ShapeError(f"A has {A.shape[1]} columns but x has length {x.shape[0]}")
    return A @ x


def norm(v, kind="l2"):
    """l1 or l2 norm of the flattened input."""
    a = np.ravel(np.asarray(v, dtype=np.float64))
    if kind == "l1":
        return float(np.sum(np.abs(a)))
    if kind == "l2":
        return float(np.sqrt(np.sum(a * a)))
    raise ValueError(f"unknown norm kind {kind!r}")


def _check_kernel(shape, kernel):
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2:
        raise ShapeError(f"kernel must be 2-D, got shape {kernel.shape}")
    if kernel.shape[0] > shape[0] or kernel.shape[1] > shape[1]:
        raise ShapeError(f"kernel {kernel.shape} larger than image {tuple(shape)}")
    return kernel


def pad_kernel(kernel, shape):
    """Zero-pad a kernel to `shape` with its origin at index (0, 0)."""
    kernel = _check_kernel(shape, kernel)
    out = np.zeros(shape, dtype=np.float64)
    out[: kernel.shape[0], : kernel.shape[1]] = kernel
    return out


def conv2d_circular_direct(x, kernel):
    """Reference circular convolution by explicit summation.

    ``out[y, x] = sum_{p,q} kernel[p, q] * x[(y - p) % H, (x - q) % W]``
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = _check_kernel(x.shape, kernel)
    out = np.zeros_like(x)
    for p in range(kernel.shape[0]):
        for q in range(kernel.shape[1]):
            if kernel[p, q] != 0.0:
                out += kernel[p, q] * np.roll(x, (p, q), axis=(0, 1))
    return out


def conv2d_circular_fft(x, kernel):
    """Circular convolution via the 2-D DFT; agrees with the direct path."""
    x = np.asarray(x, dtype=np.float64)
    kf = np.fft.rfft2(pad_kernel(kernel, x.shape))
    return np.fft.irfft2(kf * np.fft.rfft2(x), s=x.shape)


def conv2d_circular(image, kernel, method="fft"):
    """Circular (wrap-around) 2-D convolution, output the size of the input.

    Parameters
    ----------
    image : ImageGrid or ndarray
      Input image.
    kernel : array_like
      2-D kernel no larger than the image, origin at index (0, 0).
    method : {'fft', 'direct'}
      Evaluation path.  Both give the same result to about 1e-12.

    Returns
    -------
    ImageGrid or ndarray
      Same type as `image`.
    """
    x = pixels_of(image)
    if method == "fft":
        out = conv2d_circular_fft(x, kernel)
    elif method == "direct":
        out = conv2d_circular_direct(x, kernel)
    else:
        raise ValueError(f"unknown method {method!r}")
    if isinstance(image, ImageGrid):
        return ImageGrid(out, image.range_max)
    return out


def correlate2d_circular_direct(x, kernel):
    """Circular cross-correlation, ``out[h, w] = sum k[p, q] x[h+p, w+q]``."""
    x = np.asarray(x, dtype=np.float64)
    kernel = _check_kernel(x.shape, kernel)
    out = np.zeros_like(x)
    for p in range(kernel.shape[0]):
        for q in range(kernel.shape[1]):
            if kernel[p, q] != 0.0:
                out += kernel[p, q] * np.roll(x, (-p, -q), axis=(0, 1))
    return out


def correlate2d_circular(x, kernel):
    """FFT evaluation of :func:`correlate2d_circular_direct`."""
    x = np.asarray(x, dtype=np.float64)
    kf = np.fft.rfft2(pad_kernel(kernel, x.shape))
    return np.fft.irfft2(np.conj(kf) * np.fft.rfft2(x), s=x.shape)


def make_rng(seed, label=""):
    """Philox generator for one named consumer of a run's seed.

    Streams for distinct labels are independent; the mapping from
    ``(seed, label)`` to bits is fixed across platforms.
    """
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF,
                                  zlib.crc32(label.encode("utf-8"))])
    return np.random.Generator(np.random.Philox(seq))
