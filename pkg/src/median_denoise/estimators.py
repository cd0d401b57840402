"""Scikit-learn style wrappers so the denoisers compose with pipelines.

All estimators treat X as a sequence of images: a list of 2D/(h, w, c)
arrays or a stacked (n, h, w[, c]) array, with values in [0, 1].
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import median_ops, network, training
from .noise import NoiseSpec, apply_salt_pepper

__all__ = ["MedianFilterDenoiser", "SaltPepperNoiser", "ResidualMedianDenoiser"]


def _iter_images(X):
    X = np.asarray(X) if not isinstance(X, (list, tuple)) else X
    if isinstance(X, np.ndarray) and X.ndim in (2, 3) and not isinstance(X, list):
        # single image, or (n, h, w) stack; disambiguate: a trailing dim of
        # 1 or 3 on a 3D array is treated as channels of a single image
        if X.ndim == 2 or (X.ndim == 3 and X.shape[-1] in (1, 3)):
            return [X]
    return list(X)


class MedianFilterDenoiser(TransformerMixin, BaseEstimator):
    """Classic (optionally repeated) median filter as a stateless transformer."""

    def __init__(self, kernel_size=3, iterations=1):
        self.kernel_size = kernel_size
        self.iterations = iterations

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        out = []
        for img in _iter_images(X):
            img = np.asarray(img)
            for _ in range(self.iterations):
                img = median_ops.median_filter_2d(img, self.kernel_size)
            out.append(img)
        return out if isinstance(X, (list, tuple)) else np.asarray(out)


class SaltPepperNoiser(TransformerMixin, BaseEstimator):
    """Deterministic salt-and-pepper contamination of [0, 1] images."""

    def __init__(self, level=0.5, seed=0, channel_mode="per_channel"):
        self.level = level
        self.seed = seed
        self.channel_mode = channel_mode

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        out = []
        for i, img in enumerate(_iter_images(X)):
            spec = NoiseSpec(level=self.level,
                             seed=np.random.SeedSequence(
                                 (self.seed, i)).generate_state(1)[0],
                             channel_mode=self.channel_mode)
            out.append(apply_salt_pepper(np.asarray(img), spec))
        return out if isinstance(X, (list, tuple)) else np.asarray(out)


class ResidualMedianDenoiser(TransformerMixin, BaseEstimator):
    """The median-layer residual CNN behind a fit/transform interface.

    ``fit(X)`` takes *clean* [0, 1] images, cuts patches, and trains against
    freshly contaminated copies; ``transform(X)`` denoises noisy images of
    any size.
    """

    def __init__(self, blocks=4, features=32, median_kernel=3,
                 leading_medians=2, median_half=True, block_kind="residual",
                 steps=500, batch_size=8, lr=1e-3,
                 noise_levels=(0.3, 0.5, 0.7), patch_size=40, seed=0):
        self.blocks = blocks
        self.features = features
        self.median_kernel = median_kernel
        self.leading_medians = leading_medians
        self.median_half = median_half
        self.block_kind = block_kind
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.noise_levels = noise_levels
        self.patch_size = patch_size
        self.seed = seed

    def fit(self, X, y=None):
        images = [np.asarray(img, dtype=np.float32) for img in _iter_images(X)]
        if not images:
            raise ValueError("fit requires at least one image")
        channels = 3 if (images[0].ndim == 3 and images[0].shape[-1] == 3) else 1
        cfg = network.NetworkConfig(
            blocks=self.blocks, features=self.features,
            median_kernel=self.median_kernel,
            leading_medians=self.leading_medians,
            median_half=self.median_half, block_kind=self.block_kind,
            in_channels=channels, seed=self.seed)
        self.model_ = network.build_network(cfg)
        patchset = training.PatchSet.from_images(images, self.patch_size)
        optimizer = training.make_optimizer(
            self.model_, training.TrainConfig(lr=self.lr,
                                              batch_size=self.batch_size))
        self.losses_ = []
        for step in range(1, self.steps + 1):
            noisy, clean = patchset.batch(self.seed, step, self.batch_size,
                                          self.noise_levels)
            self.losses_.append(
                training.train_step(self.model_, optimizer, noisy, clean))
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        out = []
        for img in _iter_images(X):
            img = np.asarray(img, dtype=np.float32)
            had_channels = img.ndim == 3
            chw = img.transpose(2, 0, 1) if had_channels else img[None]
            denoised = self.model_.predict(chw[None], mode="eval")[0]
            out.append(denoised.transpose(1, 2, 0) if had_channels
                       else denoised[0])
        return out if isinstance(X, (list, tuple)) else np.asarray(out)

    @classmethod
    def from_checkpoint(cls, path) -> "ResidualMedianDenoiser":
        """Wrap a trained checkpoint for inference-only use."""
        model, _, _ = network.load_checkpoint(path)
        cfg = model.config
        est = cls(blocks=cfg.blocks, features=cfg.features,
                  median_kernel=cfg.median_kernel,
                  leading_medians=cfg.leading_medians,
                  median_half=cfg.median_half, block_kind=cfg.block_kind,
                  seed=cfg.seed)
        est.model_ = model
        return est
