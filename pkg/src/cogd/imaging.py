"""Image quality metrics, PGM I/O, normalisation and subsampling masks."""

import csv
import io
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .core import ImageGrid, ShapeError, make_rng, pixels_of


class PgmError(ValueError):
    """Malformed or unsupported PGM data."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def _same_shape(a, b):
    pa, pb = pixels_of(a), pixels_of(b)
    if pa.shape != pb.shape:
        raise ShapeError(f"image shapes differ: {pa.shape} vs {pb.shape}")
    return pa, pb


def _range_of(a, b):
    ra = a.range_max if isinstance(a, ImageGrid) else 1.0
    rb = b.range_max if isinstance(b, ImageGrid) else 1.0
    if ra != rb:
        raise ValueError(f"dynamic ranges differ: {ra} vs {rb}")
    return ra


def psnr(a, b):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    pa, pb = _same_shape(a, b)
    peak = _range_of(a, b)
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(x, window):
    views = np.lib.stride_tricks.sliding_window_view(x, window.shape)
    return np.einsum("ijkl,kl->ij", views, window)


def ssim(a, b, window_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean structural similarity over all valid window positions.

    Uses a Gaussian window and ``L = range_max`` in the stabilising
    constants ``C1 = (k1 L)^2`` and ``C2 = (k2 L)^2``.
    """
    pa, pb = _same_shape(a, b)
    peak = _range_of(a, b)
    if min(pa.shape) < window_size:
        raise ShapeError(f"image {pa.shape} smaller than the {window_size}x{window_size} window")
    w = gaussian_window(window_size, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = _filter_valid(pa, w), _filter_valid(pb, w)
    var_a = _filter_valid(pa * pa, w) - mu_a * mu_a
    var_b = _filter_valid(pb * pb, w) - mu_b * mu_b
    cov = _filter_valid(pa * pb, w) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class QualityReport:
    """PSNR/SSIM per image plus their means."""

    names: list = field(default_factory=list)
    psnr_db: list = field(default_factory=list)
    ssim: list = field(default_factory=list)

    def add(self, name, reference, test):
        self.names.append(name)
        self.psnr_db.append(psnr(reference, test))
        self.ssim.append(ssim(reference, test))

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr_db))

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("image", "psnr_db", "ssim"))
        for n, p, s in zip(self.names, self.psnr_db, self.ssim):
            w.writerow([n, "inf" if math.isinf(p) else repr(float(p)), repr(float(s))])
        return buf.getvalue()


_WS = b" \t\r\n\v\f"


def _read_header_tokens(data, count):
    """Return `count` whitespace-separated header tokens and the end offset."""
    tokens = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and (data[i] in _WS or data[i] == ord("#")):
            if data[i] == ord("#"):
                while i < n and data[i] not in b"\r\n":
                    i += 1
            else:
                i += 1
        if i >= n:
            raise PgmError("truncated header", i)
        start = i
        while i < n and data[i] not in _WS and data[i] != ord("#"):
            i += 1
        tokens.append((data[start:i], start))
    return tokens, i


def read_pgm(data):
    """Decode P5 (binary) or P2 (ASCII) PGM bytes with maxval <= 255.

    Returns an :class:`ImageGrid` scaled to ``[0, 1]``.
    """
    data = bytes(data)
    if len(data) < 2:
        raise PgmError("truncated magic number", 0)
    magic = data[:2]
    if magic not in (b"P5", b"P2"):
        raise PgmError(f"unsupported format {magic!r}", 0)
    tokens, end = _read_header_tokens(data, 4)
    values = []
    for tok, off in tokens[1:]:
        if not re.fullmatch(rb"[0-9]+", tok):
            raise PgmError(f"invalid header field {tok!r}", off)
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise PgmError("image dimensions must be positive", tokens[1][1])
    if not 1 <= maxval <= 255:
        raise PgmError(f"unsupported maxval {maxval}", tokens[3][1])
    npix = width * height
    if magic == b"P5":
        if end >= len(data) or data[end] not in _WS:
            raise PgmError("missing whitespace after maxval", end)
        start = end + 1
        payload = data[start:start + npix]
        if len(payload) < npix:
            raise PgmError(f"truncated payload: expected {npix} bytes, got {len(payload)}",
                           start + len(payload))
        px = np.frombuffer(payload, dtype=np.uint8).astype(np.float64)
    else:
        body = data[end:]
        px = []
        for m in re.finditer(rb"[^\s]+", body):
            tok = m.group()
            if not tok.isdigit():
                raise PgmError(f"invalid sample {tok!r}", end + m.start())
            px.append(int(tok))
            if len(px) == npix:
                break
        if len(px) < npix:
            raise PgmError(f"truncated payload: expected {npix} samples, got {len(px)}", len(data))
        px = np.array(px, dtype=np.float64)
    if np.any(px > maxval):
        raise PgmError("sample exceeds maxval")
    return ImageGrid(px.reshape(height, width) / maxval, 1.0)


def write_pgm(img):
    """Encode as binary P5 with maxval 255, rounding half up and clamping."""
    if isinstance(img, ImageGrid):
        px = img.pixels * (255.0 / img.range_max)
    else:
        px = np.asarray(img, dtype=np.float64) * 255.0
    q = np.clip(np.floor(px + 0.5), 0, 255).astype(np.uint8)
    h, w = q.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()


def load_pgm(path):
    with open(path, "rb") as fh:
        return read_pgm(fh.read())


def save_pgm(path, img):
    with open(path, "wb") as fh:
        fh.write(write_pgm(img))


def contrast_normalize(img):
    """Global standardisation: subtract the mean, divide by the std.

    The dynamic range is divided by the same std.  Images with std below
    1e-8 are only mean-centred.
    """
    grid = img if isinstance(img, ImageGrid) else ImageGrid(img)
    px = grid.pixels
    centred = px - px.mean()
    std = float(centred.std())
    if std < 1e-8:
        return ImageGrid(centred, grid.range_max)
    return ImageGrid(centred / std, grid.range_max / std)


@dataclass(frozen=True)
class InpaintingMask:
    """Binary observation mask: 1 marks an observed pixel."""

    mask: np.ndarray
    keep_fraction: float

    @property
    def shape(self):
        return self.mask.shape


def make_subsample_mask(h, w, keep_fraction, seed, label="mask"):
    """I.i.d. Bernoulli(`keep_fraction`) mask from a Philox stream.

    The stream is ``make_rng(seed, label)``, so masks are reproducible
    bit for bit across platforms.  Use distinct labels for distinct images
    of one run.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must lie in (0, 1]")
    rng = make_rng(seed, label)
    m = (rng.random((h, w)) < keep_fraction).astype(np.float64)
    return InpaintingMask(m, float(keep_fraction))


def synthetic_image(h=64, w=64, seed=0):
    """A deterministic piecewise-smooth test image in ``[0, 1]``.

    Mix of a smooth background, a few flat shapes and an oriented grating,
    standing in for natural images when none are supplied.
    """
    rng = make_rng(seed, "synthetic-image")
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w]).reshape(2, 1, 1)
    g = rng.normal(size=4)
    img = 0.3 + 0.15 * (g[0] * xx + g[1] * yy) + 0.05 * g[2] * np.sin(3 * np.pi * xx * yy)
    for _ in range(4):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        ry, rx = rng.uniform(0.08, 0.25, size=2)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img = np.where(inside, rng.uniform(0.1, 0.9), img)
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(4, 9)
    cy, cx = rng.uniform(0.3, 0.7, size=2)
    patch = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / 0.02))
    img = img + 0.2 * patch * np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)))
    # light smoothing so edges are not single-pixel steps
    k = np.array([0.25, 0.5, 0.25])
    img = sum(k[i] * np.roll(img, i - 1, axis=0) for i in range(3))
    img = sum(k[i] * np.roll(img, i - 1, axis=1) for i in range(3))
    return ImageGrid(np.clip(img, 0.0, 1.0), 1.0)
