"""Salt-and-pepper contamination with reproducible seeding.

Each sampling unit draws two uniforms r1, r2 in [0, 1): if r1 < p the unit is
contaminated, becoming pepper when r2 < 0.5 and salt otherwise; untouched
units keep their exact input value.  The random stream is consumed in raster
order by a seeded PCG64 generator, so (image, spec) fully determines the
output on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import psnr

__all__ = ["NoiseSpec", "apply_salt_pepper", "noisy_psnr_reference",
           "build_training_set"]

CHANNEL_MODES = ("per_channel", "per_pixel")


@dataclass(frozen=True)
class NoiseSpec:
    """Noise level, sampling granularity, seed, and the two extreme values."""

    level: float
    seed: int = 0
    channel_mode: str = "per_channel"
    salt: float = 1.0
    pepper: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.level < 1.0:
            raise ValueError(f"noise level must be in (0, 1), got {self.level}")
        if self.channel_mode not in CHANNEL_MODES:
            raise ValueError(
                f"channel_mode must be one of {CHANNEL_MODES}, got {self.channel_mode!r}")
        if not self.salt > self.pepper:
            raise ValueError(
                f"salt ({self.salt}) must exceed pepper ({self.pepper})")

    @classmethod
    def for_8bit(cls, level: float, seed: int = 0,
                 channel_mode: str = "per_channel") -> "NoiseSpec":
        return cls(level=level, seed=seed, channel_mode=channel_mode,
                   salt=255.0, pepper=0.0)


def apply_salt_pepper(image: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Contaminate an image (2D grayscale or (h, w, c) color).

    In ``per_channel`` mode every array element is its own sampling unit; in
    ``per_pixel`` mode one draw per spatial position hits all channels at
    once.
    """
    image = np.asarray(image)
    if image.ndim not in (2, 3):
        raise ValueError(f"expected 2D or (h, w, c) image, got shape {image.shape}")
    if image.min() < spec.pepper or image.max() > spec.salt:
        raise ValueError(
            f"image values [{image.min()}, {image.max()}] fall outside "
            f"[pepper={spec.pepper}, salt={spec.salt}]")
    if spec.channel_mode == "per_pixel" and image.ndim == 3:
        unit_shape = image.shape[:2] + (1,)
    else:
        unit_shape = image.shape
    rng = np.random.default_rng(spec.seed)
    r1 = rng.random(unit_shape)
    r2 = rng.random(unit_shape)
    hit = r1 < spec.level
    pepper_hit = np.broadcast_to(hit & (r2 < 0.5), image.shape)
    salt_hit = np.broadcast_to(hit & (r2 >= 0.5), image.shape)
    out = image.copy()
    out[pepper_hit] = spec.pepper
    out[salt_hit] = spec.salt
    return out


def noisy_psnr_reference(clean: np.ndarray, spec: NoiseSpec) -> float:
    """Contaminate then score: the PSNR of the noisy image vs its clean source.

    Scoring always happens on the 8-bit scale; normalized-space images
    (salt <= 1) are rescaled by 255 before the comparison.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noisy = apply_salt_pepper(clean, spec)
    scale = 255.0 if spec.salt <= 1.0 else 1.0
    return psnr(noisy * scale, clean * scale)


DEFAULT_LEVELS = tuple(round(0.1 * i, 1) for i in range(1, 10))


def build_training_set(images, patch_size: int = 70,
                       levels=DEFAULT_LEVELS, seed: int = 0,
                       stride: int | None = None,
                       channel_mode: str = "per_channel"):
    """Pair every clean patch with contaminated versions at every level.

    ``images`` are normalized [0, 1] arrays, 2D or (h, w, c).  Patches come
    from a non-overlapping grid (stride defaults to the patch size).  Yields
    ``(noisy, clean, level)`` with both patches in (c, h, w) layout, float32,
    in a deterministic order: image, then grid position, then level.  Noise
    seeds are derived from (seed, image, position, level), so the same clean
    patch appears with an independent noise realization per level.
    """
    if stride is None:
        stride = patch_size
    levels = list(levels)
    for img_idx, image in enumerate(images):
        image = np.asarray(image, dtype=np.float32)
        if image.ndim == 2:
            image = image[..., None]
        h, w = image.shape[:2]
        if patch_size > h or patch_size > w:
            raise ValueError(
                f"patch size {patch_size} exceeds image {img_idx} "
                f"dimensions {h}x{w}")
        pos_idx = 0
        for i in range(0, h - patch_size + 1, stride):
            for j in range(0, w - patch_size + 1, stride):
                clean = image[i:i + patch_size, j:j + patch_size, :]
                for lvl_idx, level in enumerate(levels):
                    spec = NoiseSpec(
                        level=level,
                        seed=np.random.SeedSequence(
                            (seed, img_idx, pos_idx, lvl_idx)).generate_state(1)[0],
                        channel_mode=channel_mode)
                    noisy = apply_salt_pepper(clean, spec)
                    yield (noisy.transpose(2, 0, 1).astype(np.float32),
                           clean.transpose(2, 0, 1).astype(np.float32),
                           level)
                pos_idx += 1
