"""Seeded image corruptions (fog, Gaussian noise) and dataset normalization.

Images are float arrays in ``[0, 1]`` shaped ``(C, H, W)`` or batches
``(B, C, H, W)``. Every random draw goes through :func:`attnrobust.rng.make_rng`
so a ``(seed, severity, image)`` triple always yields the same output.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError
from .rng import derive_seed, make_rng


class Kind(str, enum.Enum):
    FOG = "fog"
    GAUSSIAN_NOISE = "gaussian"
    NONE = "none"


class Scenario(str, enum.Enum):
    CLEAN = "clean"
    TRAIN_ONLY = "train"
    TEST_ONLY = "test"
    TRAIN_AND_TEST = "both"

    @property
    def corrupts_train(self) -> bool:
        return self in (Scenario.TRAIN_ONLY, Scenario.TRAIN_AND_TEST)

    @property
    def corrupts_test(self) -> bool:
        return self in (Scenario.TEST_ONLY, Scenario.TRAIN_AND_TEST)


_SCENARIO_ALIASES = {
    "train_only": "train", "trainonly": "train", "test_only": "test", "testonly": "test",
    "train_and_test": "both", "trainandtest": "both", "none": "clean",
}


def parse_scenario(value: str | Scenario) -> Scenario:
    if isinstance(value, Scenario):
        return value
    key = value.strip().lower().replace("-", "_")
    return Scenario(_SCENARIO_ALIASES.get(key, key))


@dataclass(frozen=True)
class CorruptionSpec:
    """Which corruption, how strong, which seed, and which splits get it.

    ``severity`` is the fog strength for :attr:`Kind.FOG` and the noise
    standard deviation for :attr:`Kind.GAUSSIAN_NOISE`.
    """

    kind: Kind = Kind.FOG
    severity: float = 1.0
    seed: int = 0
    scenario: Scenario = Scenario.CLEAN

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        object.__setattr__(self, "scenario", parse_scenario(self.scenario))
        if self.kind is not Kind.NONE and not self.severity > 0:
            raise ConfigError(f"severity must be > 0 for {self.kind.value}, got {self.severity}")

    @property
    def active(self) -> bool:
        return self.kind is not Kind.NONE


# ---------------------------------------------------------------------------
# fog


def _next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def plasma_fractal(size: int, rng: np.random.Generator, roughness: float = 3.0) -> np.ndarray:
    """Diamond-square height map on a ``size x size`` torus, scaled to ``[0, 1]``.

    ``size`` must be a power of two. Displacement amplitude starts at 100
    and is divided by ``roughness`` at every level, so larger ``roughness``
    gives smoother haze.
    """
    if size < 1 or size & (size - 1):
        raise DomainError(f"plasma size must be a power of two, got {size}")
    hmap = np.zeros((size, size), dtype=np.float64)
    step = size
    wibble = 100.0

    def displaced(mean):
        return mean / 4.0 + wibble * rng.uniform(-wibble, wibble, mean.shape)

    while step >= 2:
        half = step // 2
        # squares: centre of each cell from its four corners
        corners = hmap[0:size:step, 0:size:step]
        total = corners + np.roll(corners, -1, axis=0)
        total = total + np.roll(total, -1, axis=1)
        hmap[half:size:step, half:size:step] = displaced(total)
        # diamonds: edge midpoints from the two adjacent corners and centres
        corners = hmap[0:size:step, 0:size:step]
        centres = hmap[half:size:step, half:size:step]
        ltsum = corners + np.roll(corners, -1, axis=0) + centres + np.roll(centres, 1, axis=1)
        ttsum = corners + np.roll(corners, -1, axis=1) + centres + np.roll(centres, 1, axis=0)
        hmap[half:size:step, 0:size:step] = displaced(ltsum)
        hmap[0:size:step, half:size:step] = displaced(ttsum)
        step = half
        wibble /= roughness
    hmap -= hmap.min()
    peak = hmap.max()
    return hmap / peak if peak > 0 else hmap


def fog_haze(height: int, width: int, seed: int, roughness: float = 3.0) -> np.ndarray:
    """Haze map in ``[0, 1]`` of shape ``(height, width)`` for ``seed``."""
    size = _next_pow2(max(height, width))
    return plasma_fractal(size, make_rng(seed, "fog"), roughness)[:height, :width]


def fog(image: np.ndarray, severity: float, seed: int, roughness: float = 3.0) -> np.ndarray:
    """Blend a plasma-fractal haze into ``image``.

    With haze ``m`` in ``[0, 1]`` and severity ``s`` each pixel becomes
    ``(x + s * m) / (1 + s * m)``: a per-pixel convex mix of the pixel and
    white. Output stays in ``[0, 1]``, every pixel brightens monotonically
    with ``s``, and ``s -> 0`` recovers the input.

    Raises:
        DomainError: on negative severity or values outside ``[0, 1]``.
    """
    if severity < 0:
        raise DomainError(f"fog severity must be >= 0, got {severity}")
    x = np.asarray(image)
    if x.ndim != 3:
        raise DomainError(f"fog expects a (C, H, W) image, got shape {x.shape}")
    if severity == 0:
        return x.copy()
    m = fog_haze(x.shape[1], x.shape[2], seed, roughness).astype(x.dtype)
    sm = severity * m
    return np.clip((x + sm) / (1.0 + sm), 0.0, 1.0).astype(x.dtype, copy=False)


def gaussian_noise(image: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add zero-mean normal noise with standard deviation ``sigma``, clamp to [0, 1]."""
    if sigma < 0:
        raise DomainError(f"noise sigma must be >= 0, got {sigma}")
    x = np.asarray(image)
    if sigma == 0:
        return x.copy()
    noise = make_rng(seed, "gaussian").standard_normal(x.shape) * sigma
    return np.clip(x + noise, 0.0, 1.0).astype(x.dtype, copy=False)


def corrupt(image: np.ndarray, kind: Kind | str, severity: float, seed: int) -> np.ndarray:
    kind = Kind(kind)
    if kind is Kind.FOG:
        return fog(image, severity, seed)
    if kind is Kind.GAUSSIAN_NOISE:
        return gaussian_noise(image, severity, seed)
    return np.asarray(image).copy()


# ---------------------------------------------------------------------------
# per-image seeds and scenarios

SPLIT_TRAIN = "train"
SPLIT_TEST = "test"


def image_seed(seed: int, split: str, index: int, epoch: int | None = None) -> int:
    """Seed for one image: ``hash(seed, split, index)`` or, for per-epoch
    training corruption, ``hash(seed, split, epoch, index)``."""
    if epoch is None:
        return derive_seed(seed, split, index)
    return derive_seed(seed, split, "epoch", epoch, index)


def corrupt_batch(
    images: np.ndarray,
    spec: CorruptionSpec,
    split: str,
    indices: np.ndarray | None = None,
    epoch: int | None = None,
) -> np.ndarray:
    """Corrupt every image of ``(B, C, H, W)`` with its own derived seed.

    ``indices`` are the dataset positions of the images (defaults to
    ``0..B-1``); seeds depend on dataset position, not batch position.
    """
    images = np.asarray(images)
    if not spec.active:
        return images.copy()
    if indices is None:
        indices = np.arange(len(images))
    out = np.empty_like(images)
    for j, (img, idx) in enumerate(zip(images, indices)):
        out[j] = corrupt(img, spec.kind, spec.severity, image_seed(spec.seed, split, int(idx), epoch))
    return out


def apply_scenario(
    train_set: np.ndarray, test_set: np.ndarray, spec: CorruptionSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt the splits named by ``spec.scenario``; the others are returned as-is.

    Seeds are ``image_seed(spec.seed, split, index)`` with ``split`` being
    ``"train"`` or ``"test"``, so the same index in the two splits never
    shares a haze pattern.
    """
    train_out, test_out = train_set, test_set
    if spec.active and spec.scenario.corrupts_train:
        train_out = corrupt_batch(train_set, spec, SPLIT_TRAIN)
    if spec.active and spec.scenario.corrupts_test:
        test_out = corrupt_batch(test_set, spec, SPLIT_TEST)
    return train_out, test_out


# ---------------------------------------------------------------------------
# normalization


def _channel_stats(means, stds, ndim: int):
    means = np.asarray(means, dtype=np.float64)
    stds = np.asarray(stds, dtype=np.float64)
    if (stds <= 0).any():
        raise DomainError(f"normalization stds must be > 0, got {stds}")
    shape = (-1, 1, 1) if ndim == 3 else (1, -1, 1, 1)
    return means.reshape(shape), stds.reshape(shape)


def normalize(batch: np.ndarray, means, stds) -> np.ndarray:
    """Per-channel ``(x - mean) / std`` for ``(C,H,W)`` or ``(B,C,H,W)``."""
    x = np.asarray(batch)
    m, s = _channel_stats(means, stds, x.ndim)
    return ((x - m) / s).astype(x.dtype, copy=False)


def denormalize(batch: np.ndarray, means, stds) -> np.ndarray:
    x = np.asarray(batch)
    m, s = _channel_stats(means, stds, x.ndim)
    return (x * s + m).astype(x.dtype, copy=False)
