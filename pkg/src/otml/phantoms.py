"""Procedural grayscale phantoms standing in for radiographs.

Each image is a smooth textured background with class-dependent bright
structures: round "nodules" and thin "streaks". Sample ``i`` of a dataset
draws from its own PCG64 stream seeded with ``(seed, i)``, so samples can be
generated in any order or in parallel with identical results.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError

# class -> (nodules, streaks, nodule contrast range)
_RECIPES = {
    0: (0, 0, None),
    1: (1, 0, (0.25, 0.45)),
    2: (0, 1, None),
    3: (1, 1, (0.25, 0.45)),
    4: (2, 0, (0.25, 0.45)),
    5: (0, 2, None),
    6: (1, 0, (0.08, 0.16)),
    7: (1, 2, (0.25, 0.45)),
}
_KINDS = {
    0: "background",
    1: "nodule",
    2: "streak",
    3: "nodule+streak",
    4: "two nodules",
    5: "two streaks",
    6: "faint nodule",
    7: "nodule+two streaks",
}


@dataclass
class PhantomSample:
    image: np.ndarray
    label: int
    kind: str
    position: tuple = None
    size: float = None
    seed: tuple = field(default=())


def sample_rng(seed, index):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _background(rng, yy, xx, h, w):
    img = np.full((h, w), rng.uniform(0.15, 0.35))
    for _ in range(3):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        img += rng.uniform(0.02, 0.06) * np.cos(2 * np.pi * (fy * yy / h + fx * xx / w) + phase)
    img += rng.uniform(-0.08, 0.08) * (yy / h - 0.5)
    return img + rng.normal(0, 0.02, size=(h, w))


def _nodule(rng, yy, xx, h, w, contrast):
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    ry, rx = rng.uniform(0.06, 0.14, size=2) * min(h, w)
    angle = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = (dy * np.cos(angle) + dx * np.sin(angle)) / ry
    v = (-dy * np.sin(angle) + dx * np.cos(angle)) / rx
    radius = np.sqrt(u * u + v * v)
    blob = rng.uniform(*contrast) / (1.0 + np.exp((radius - 1.0) * 6.0))
    return blob, (float(cy), float(cx)), float(max(ry, rx))


def _streak(rng, yy, xx, h, w):
    length = rng.uniform(0.4, 0.7) * min(h, w)
    angle = rng.uniform(0, np.pi)
    cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
    ty, tx = np.sin(angle), np.cos(angle)
    along = (yy - cy) * ty + (xx - cx) * tx
    across = -(yy - cy) * tx + (xx - cx) * ty
    overshoot = np.maximum(np.abs(along) - length / 2, 0.0)
    dist2 = across**2 + overshoot**2
    width = rng.uniform(0.6, 1.2)
    line = rng.uniform(0.2, 0.35) * np.exp(-dist2 / (2 * width**2))
    return line, (float(cy), float(cx)), float(length)


def make_phantom(label, h, w, rng):
    """One phantom image of class ``label``; returns ``(image, position, size)``."""
    nodules, streaks, contrast = _RECIPES[label]
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    img = _background(rng, yy, xx, h, w)
    position = size = None
    for _ in range(nodules):
        blob, pos, radius = _nodule(rng, yy, xx, h, w, contrast)
        img += blob
        position, size = position or pos, size or radius
    for _ in range(streaks):
        line, pos, length = _streak(rng, yy, xx, h, w)
        img += line
        position, size = position or pos, size or length
    return np.clip(img, 0.0, 1.0), position, size


def gen_phantom_dataset(n, num_classes=4, h=32, w=32, seed=0):
    """Balanced list of :class:`PhantomSample`; sample ``i`` has label ``i % num_classes``."""
    if not 2 <= num_classes <= 8:
        raise ConfigurationError("num_classes must be between 2 and 8")
    samples = []
    for i in range(n):
        label = i % num_classes
        image, position, size = make_phantom(label, h, w, sample_rng(seed, i))
        samples.append(
            PhantomSample(
                image=image[None],
                label=label,
                kind=_KINDS[label],
                position=position,
                size=size,
                seed=(seed, i),
            )
        )
    return samples


def as_arrays(samples):
    """Stack samples into ``(n, 1, h, w)`` images and an integer label vector."""
    images = np.stack([s.image for s in samples])
    labels = np.array([s.label for s in samples], dtype=int)
    return images, labels
