"""Random view augmentation for single-channel images."""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .exceptions import ConfigurationError


@dataclass(frozen=True)
class AugmentationSpec:
    """Augmentation family; every random draw comes from the caller's generator.

    ``crop_scale`` is the range of crop area as a fraction of the image,
    ``brightness`` the half-width of the additive offset and ``contrast`` the
    half-width of the multiplicative factor around 1.
    """

    crop_scale: tuple = (0.4, 1.0)
    flip_prob: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.1, 1.0)
    use_crop: bool = True
    use_flip: bool = True
    use_jitter: bool = True
    use_blur: bool = True

    def __post_init__(self):
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ConfigurationError(f"crop scale range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale}")
        for name in ("flip_prob", "blur_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigurationError(f"{name} must lie in [0, 1]")
        if self.brightness < 0 or not 0 <= self.contrast < 1:
            raise ConfigurationError("brightness must be >= 0 and contrast in [0, 1)")
        if not 0 <= self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ConfigurationError("blur sigma range must be ordered and non-negative")

    @classmethod
    def disabled(cls):
        return cls(use_crop=False, use_flip=False, use_jitter=False, use_blur=False)


def _interp_matrix(out_size, start, length, in_size):
    """Rows of linear-interpolation weights sampling ``[start, start+length)``."""
    centers = start + (np.arange(out_size) + 0.5) * (length / out_size) - 0.5
    centers = np.clip(centers, 0, in_size - 1)
    lo = np.floor(centers).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = centers - lo
    weights = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(weights, (rows, lo), 1 - frac)
    np.add.at(weights, (rows, hi), frac)
    return weights


def random_resized_crop(image, scale, rng):
    h, w = image.shape
    area = rng.uniform(*scale)
    aspect = np.exp(rng.uniform(np.log(3 / 4), np.log(4 / 3)))
    crop_w = min(np.sqrt(area * aspect) * w, w)
    crop_h = min(np.sqrt(area / aspect) * h, h)
    if crop_w < 1 or crop_h < 1:
        raise ConfigurationError(f"crop of {crop_h:.2f}x{crop_w:.2f} pixels is degenerate")
    top = rng.uniform(0, h - crop_h)
    left = rng.uniform(0, w - crop_w)
    return _interp_matrix(h, top, crop_h, h) @ image @ _interp_matrix(w, left, crop_w, w).T


def augment(image, spec, rng):
    """Return an augmented copy of a ``(1, h, w)`` or ``(h, w)`` image in ``[0, 1]``."""
    image = np.asarray(image, dtype=np.float64)
    shape = image.shape
    x = image.reshape(shape[-2:]).copy()
    if spec.use_crop:
        x = random_resized_crop(x, spec.crop_scale, rng)
    if spec.use_flip and rng.random() < spec.flip_prob:
        x = x[:, ::-1].copy()
    if spec.use_jitter:
        x = x * rng.uniform(1 - spec.contrast, 1 + spec.contrast) + rng.uniform(-spec.brightness, spec.brightness)
    if spec.use_blur and rng.random() < spec.blur_prob:
        x = gaussian_filter(x, rng.uniform(*spec.blur_sigma), mode="reflect")
    return np.clip(x, 0.0, 1.0).reshape(shape)
