"""2-D convolution and noise-robust Laplacian sharpness.

Images are 2-D ``float`` arrays (rows x cols). Borders are handled by
replicating the edge pixels, and output size equals input size.

The noise-robust Laplacian uses separable kernels derived here from linear
constraints rather than typed-in tap tables:

* a 7-tap symmetric second-derivative kernel that is zero on constants,
  returns exactly 2 on ``x**2`` and has a double zero at the Nyquist
  frequency, so it is flat there and rejects pixel-level noise;
* a 5-tap symmetric smoother with unit DC gain and the same double zero
  at Nyquist.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Tuple

import numpy as np

DERIVATIVE_TAPS = 7
SMOOTHER_TAPS = 5


class ImagingError(Exception):
    pass


class KernelTooLarge(ImagingError):
    pass


def as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ImagingError(f"expected a non-empty 2-D image, got shape {arr.shape}")
    return arr


def conv2d(img, kernel) -> np.ndarray:
    """True 2-D convolution (kernel flipped) with replicate padding, same size out."""
    img = as_image(img)
    k = np.asarray(kernel, dtype=float)
    if k.ndim == 1:
        k = k.reshape(1, -1)
    kh, kw = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ImagingError("kernel dimensions must be odd")
    rows, cols = img.shape
    if kh > rows or kw > cols:
        raise KernelTooLarge(f"{kh}x{kw} kernel does not fit a {rows}x{cols} image")
    ry, rx = kh // 2, kw // 2
    padded = np.pad(img, ((ry, ry), (rx, rx)), mode="edge")
    out = np.zeros_like(img)
    # out[y, x] = sum_{i,j} k[i, j] * img[y + ry - i, x + rx - j]
    for i in range(kh):
        for j in range(kw):
            w = k[i, j]
            if w == 0.0:
                continue
            oy, ox = kh - 1 - i, kw - 1 - j
            out += w * padded[oy:oy + rows, ox:ox + cols]
    return out


def _symmetric_design(n_taps: int, rows) -> np.ndarray:
    """Solve for a symmetric kernel from constraints on its half taps.

    ``rows`` is a list of ``(coefficient function of offset k, target)``;
    the function gives the weight of tap ``±k`` in the constraint.
    """
    half = n_taps // 2
    A = np.array([[f(k) * (1 if k == 0 else 2) for k in range(half + 1)] for f, _ in rows], dtype=float)
    b = np.array([t for _, t in rows], dtype=float)
    h = np.linalg.solve(A, b)
    return np.concatenate([h[:0:-1], h])


@lru_cache(maxsize=None)
def _second_derivative_taps(n_taps: int = DERIVATIVE_TAPS) -> Tuple[float, ...]:
    # DC zero, second moment 2, response and its 2nd frequency derivative zero at Nyquist
    taps = _symmetric_design(n_taps, [
        (lambda k: 1.0, 0.0),
        (lambda k: k * k / 2.0, 1.0),
        (lambda k: (-1.0) ** k, 0.0),
        (lambda k: k * k * (-1.0) ** k, 0.0),
    ])
    return tuple(float(v) for v in np.round(taps * 64) / 64)


@lru_cache(maxsize=None)
def _smoother_taps(n_taps: int = SMOOTHER_TAPS) -> Tuple[float, ...]:
    taps = _symmetric_design(n_taps, [
        (lambda k: 1.0, 1.0),
        (lambda k: (-1.0) ** k, 0.0),
        (lambda k: k * k * (-1.0) ** k, 0.0),
    ])
    return tuple(float(v) for v in np.round(taps * 64) / 64)


def second_derivative_kernel() -> np.ndarray:
    return np.array(_second_derivative_taps())


def smoothing_kernel() -> np.ndarray:
    return np.array(_smoother_taps())


@lru_cache(maxsize=None)
def _laplacian_kernel() -> np.ndarray:
    dxx = np.array(_second_derivative_taps())
    s = np.array(_smoother_taps())
    size = max(len(dxx), len(s))
    pad = (size - len(s)) // 2
    s_full = np.pad(s, pad)
    # rows index y, columns index x
    k = np.outer(s_full, dxx) + np.outer(dxx, s_full)
    k.setflags(write=False)
    return k


def noise_robust_laplacian_kernel() -> np.ndarray:
    """The combined 2-D kernel ``S(y) Dxx(x) + Dyy(y) S(x)``."""
    return _laplacian_kernel().copy()


def noise_robust_laplacian(img) -> np.ndarray:
    """Laplacian that is exact on quadratics and rejects Nyquist-rate noise."""
    img = as_image(img)
    size = _laplacian_kernel().shape[0]
    if img.shape[0] < size or img.shape[1] < size:
        raise KernelTooLarge(f"image {img.shape} is smaller than the {size}x{size} Laplacian kernel")
    return conv2d(img, _laplacian_kernel())


SOBEL_CLASS_LAPLACIAN = np.array([[0.0, 1.0, 0.0],
                                  [1.0, -4.0, 1.0],
                                  [0.0, 1.0, 0.0]])


def sobel_laplacian_reference(img) -> np.ndarray:
    """Classical 3x3 Laplacian, the noisy baseline the robust filter is compared with."""
    return conv2d(img, SOBEL_CLASS_LAPLACIAN)


def sharpness(lap) -> float:
    """Largest absolute value of a Laplacian field."""
    return float(np.max(np.abs(np.asarray(lap, dtype=float))))


def gaussian_kernel_1d(sigma: float, radius: int) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma: float, radius: int) -> np.ndarray:
    img = as_image(img)
    k = gaussian_kernel_1d(sigma, radius)
    return conv2d(conv2d(img, k.reshape(1, -1)), k.reshape(-1, 1))


# ---------------------------------------------------------------------------
# plain-text grid format: "rows cols" header then whitespace separated values


def write_grid(img) -> str:
    img = as_image(img)
    lines = [f"{img.shape[0]} {img.shape[1]}"]
    for row in img:
        lines.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def read_grid(text: str) -> np.ndarray:
    tokens = text.split()
    if len(tokens) < 2:
        raise ImagingError("missing rows/cols header")
    rows, cols = int(tokens[0]), int(tokens[1])
    values = [float(t) for t in tokens[2:]]
    if rows < 1 or cols < 1 or len(values) != rows * cols:
        raise ImagingError(f"expected {rows}x{cols} values, got {len(values)}")
    return np.array(values).reshape(rows, cols)
