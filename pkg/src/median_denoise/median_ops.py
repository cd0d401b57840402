"""Median selection: classic filters and the differentiable median layer.

The median layer replaces every element of every feature channel with the
median of its k x k zero-padded neighborhood and remembers *which* window
element was selected (the argmedian), so the backward pass can route the
gradient to that single input element, max-pooling style.

Border policy differs by dimensionality, on purpose:

* 2D (layer and classic filter): zero "SAME" padding.  Border medians are
  biased toward zero; kept as-is for fidelity to the extraction semantics.
* 1D: the window shrinks at the boundaries, so short signals are not dragged
  to zero at the ends.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import psnr

__all__ = [
    "MedianLayerSpec",
    "GaussianKernelSpec",
    "extract_patches",
    "median_layer_forward",
    "median_layer_backward",
    "median_filter_2d",
    "median_filter_1d",
    "gaussian_kernel",
    "gaussian_filter",
    "repeated_median",
    "alternate_filters_1d",
]


@dataclass(frozen=True)
class MedianLayerSpec:
    """Window size for a median layer; the selection rank follows from it."""

    kernel_size: int = 3

    def __post_init__(self):
        k = self.kernel_size
        if k < 3 or k % 2 == 0:
            raise ValueError(f"kernel_size must be odd and >= 3, got {k}")

    @property
    def median_rank(self) -> int:
        """1-based rank of the selected element in descending order."""
        return self.kernel_size * self.kernel_size // 2 + 1


@dataclass(frozen=True)
class GaussianKernelSpec:
    """Sampled-Gaussian smoothing kernel; weights are normalized to sum 1."""

    window: int = 5
    sigma: float | None = None

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and positive, got {self.window}")
        if self.sigma is None:
            object.__setattr__(self, "sigma", self.window / 4.0)
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")


def gaussian_kernel(spec: GaussianKernelSpec) -> np.ndarray:
    r = spec.window // 2
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / spec.sigma) ** 2)
    return k / k.sum()


def extract_patches(channel: np.ndarray, kernel_size: int) -> np.ndarray:
    """All k x k neighborhoods of a 2D array, zero-padded, row-major.

    Returns shape (h, w, k*k); patch (i, j) lists the window centered at
    (i, j).
    """
    if kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd, got {kernel_size}")
    channel = np.asarray(channel)
    if channel.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {channel.shape}")
    k = kernel_size
    pad = k // 2
    padded = np.pad(channel, pad)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k))
    return windows.reshape(channel.shape[0], channel.shape[1], k * k)


def _window_values(x: np.ndarray, k: int) -> np.ndarray:
    """(n, c, h, w) -> (n, c, h, w, k*k) zero-padded window values."""
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return windows.reshape(x.shape + (k * k,))


def median_layer_forward(x: np.ndarray, kernel_size: int = 3):
    """Exact per-window median of a (n, c, h, w) tensor, channel by channel.

    Returns ``(out, argmedian)`` where ``argmedian[n, c, i, j]`` is the flat
    row-major index, within the k x k window, of the element that became the
    median.  Ties go to the candidate a stable descending sort would place at
    the median rank (for an all-equal window: the center).
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected (n, c, h, w), got shape {x.shape}")
    k = int(kernel_size)
    if k < 3 or k % 2 == 0:
        raise ValueError(f"kernel_size must be odd and >= 3, got {k}")
    vals = _window_values(x, k)
    mid = k * k // 2  # 0-based position of the median in either sort order
    med = np.partition(vals, mid, axis=-1)[..., mid]
    is_med = vals == med[..., None]
    greater = (vals > med[..., None]).sum(axis=-1, dtype=np.int16)
    # occurrence (0-based, flat order) of the median value that holds the rank
    occurrence = mid - greater
    argmedian = np.argmax(is_med, axis=-1).astype(np.int8)
    slow = occurrence > 0  # duplicated median value: walk to the right copy
    if slow.any():
        eq = is_med[slow]
        hits = np.cumsum(eq, axis=-1, dtype=np.int16) == \
            (occurrence[slow] + 1)[:, None]
        argmedian[slow] = np.argmax(hits & eq, axis=-1).astype(np.int8)
    return med, argmedian


def median_layer_backward(grad_out: np.ndarray, argmedian: np.ndarray,
                          input_shape: tuple, kernel_size: int) -> np.ndarray:
    """Scatter each output gradient onto the input element it selected.

    Gradients whose argmedian points at a zero-pad position fall outside the
    image and are dropped (the output does not depend on any input there).
    """
    k = int(kernel_size)
    n, c, h, w = input_shape
    if grad_out.shape != (n, c, h, w) or argmedian.shape != (n, c, h, w):
        raise ValueError(
            f"stale or mismatched argmedian: grad_out {grad_out.shape}, "
            f"indices {argmedian.shape}, expected {(n, c, h, w)}")
    idx = argmedian.astype(np.int64)
    if idx.min() < 0 or idx.max() >= k * k:
        raise ValueError("argmedian indices out of range for kernel size "
                         f"{k}; they do not belong to this forward pass")
    pad = k // 2
    hp, wp = h + 2 * pad, w + 2 * pad
    rows = np.arange(h)[:, None] + idx // k
    cols = np.arange(w)[None, :] + idx % k
    base = np.arange(n * c, dtype=np.int64).reshape(n, c, 1, 1) * (hp * wp)
    lin = base + rows * wp + cols
    acc = np.bincount(lin.ravel(), weights=grad_out.ravel(),
                      minlength=n * c * hp * wp)
    acc = acc.reshape(n, c, hp, wp)[:, :, pad:pad + h, pad:pad + w]
    return acc.astype(grad_out.dtype, copy=False)


def median_filter_2d(image: np.ndarray, kernel_size: int = 3) -> np.ndarray:
    """Classic zero-padded median filter on a 2D image (or (h, w, c) stack)."""
    image = np.asarray(image)
    if image.ndim == 3:
        return np.stack(
            [median_filter_2d(image[..., ch], kernel_size)
             for ch in range(image.shape[2])], axis=-1)
    if image.ndim != 2:
        raise ValueError(f"expected 2D or (h, w, c), got shape {image.shape}")
    out, _ = median_layer_forward(image[None, None], kernel_size)
    return out[0, 0]


def median_filter_1d(signal: np.ndarray, window: int = 5) -> np.ndarray:
    """1D median filter whose window shrinks at the signal boundaries."""
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != 1:
        raise ValueError(f"expected a 1D signal, got shape {signal.shape}")
    r = window // 2
    n = signal.size
    out = np.empty_like(signal)
    for i in range(n):
        out[i] = np.median(signal[max(0, i - r):min(n, i + r + 1)])
    return out


def gaussian_filter(signal: np.ndarray, spec: GaussianKernelSpec) -> np.ndarray:
    """Normalized Gaussian smoothing, zero-padded; 2D applies it separably."""
    signal = np.asarray(signal, dtype=np.float64)
    k = gaussian_kernel(spec)
    if signal.ndim == 1:
        return np.convolve(signal, k, mode="same")
    if signal.ndim == 2:
        rows = np.apply_along_axis(np.convolve, 1, signal, k, mode="same")
        return np.apply_along_axis(np.convolve, 0, rows, k, mode="same")
    raise ValueError(f"expected 1D or 2D input, got shape {signal.shape}")


def repeated_median(image: np.ndarray, kernel_size: int, n_iterations: int,
                    reference: np.ndarray):
    """Apply the 2D median filter repeatedly, scoring PSNR after each pass.

    Returns ``(images, trajectory)`` of length ``n_iterations + 1``:
    ``images[i]`` is the result after ``i`` applications (index 0 is the
    unfiltered input) and ``trajectory[i]`` its PSNR against ``reference``.
    """
    reference = np.asarray(reference)
    image = np.asarray(image)
    if reference.shape != image.shape:
        raise ValueError(
            f"reference shape {reference.shape} != image shape {image.shape}")
    images = [image]
    trajectory = [psnr(image, reference)]
    current = image
    for _ in range(n_iterations):
        current = median_filter_2d(current, kernel_size)
        images.append(current)
        trajectory.append(psnr(current, reference))
    return images, trajectory


def alternate_filters_1d(signal: np.ndarray, schedule, reference: np.ndarray,
                         window: int = 5, sigma: float | None = None):
    """Apply a median/gaussian schedule to a 1D signal, recording MSE.

    ``schedule`` is a sequence of ``"median"`` / ``"gaussian"`` strings.
    Returns ``(signals, mses)`` with one entry per schedule step; MSE is
    measured against ``reference`` on the signal's own scale.
    """
    schedule = list(schedule)
    if not schedule:
        raise ValueError("schedule must be non-empty")
    signal = np.asarray(signal, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    gspec = GaussianKernelSpec(window=window, sigma=sigma)
    signals = []
    mses = []
    current = signal
    for kind in schedule:
        if kind == "median":
            current = median_filter_1d(current, window)
        elif kind == "gaussian":
            current = gaussian_filter(current, gspec)
        else:
            raise ValueError(f"unknown filter kind {kind!r}")
        signals.append(current)
        mses.append(float(np.mean((current - reference) ** 2)))
    return signals, mses
