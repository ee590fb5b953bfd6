"""Acquisition corruption: smooth bias field, gamma shift and additive noise.

    corrupted = clip((I * B), 0, 1) ** g + noise

with ``B = exp(field)`` where ``field`` is a coarse Gaussian grid upsampled
trilinearly, ``g = exp(gamma)`` and i.i.d. Gaussian voxel noise.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .geom3d import Volume3


@dataclass(frozen=True)
class NoiseParams:
    sigma_bias_max: float = 0.3
    sigma_gamma: float = 0.2
    sigma_noise_max: float = 0.05
    bias_grid: tuple[int, int, int] = (4, 4, 4)
    seed: int = 0
    exact: bool = False        # use the caps as the sigmas instead of U[0, cap] draws

    def __post_init__(self):
        if min(self.sigma_bias_max, self.sigma_gamma, self.sigma_noise_max) < 0:
            raise ValueError("noise caps must be non-negative")
        object.__setattr__(self, "bias_grid", tuple(int(g) for g in self.bias_grid))

    @classmethod
    def training(cls, seed: int = 0) -> "NoiseParams":
        return cls(0.3, 0.2, 0.05, seed=seed)

    @classmethod
    def zero(cls, seed: int = 0) -> "NoiseParams":
        return cls(0.0, 0.0, 0.0, seed=seed)


def paper_test_params(seed: int = 0) -> NoiseParams:
    """Caps used for the evaluation pairs: bias 0.2, gamma 0.2, noise 0.03."""
    return NoiseParams(0.2, 0.2, 0.03, seed=seed)


@dataclass
class NoiseDraw:
    sigma_bias: float
    bias_grid: list            # nested lists, shape bias_grid
    gamma: float
    sigma_noise: float
    noise_seed: int
    dims: tuple = field(default=())

    @property
    def exponent(self) -> float:
        return float(np.exp(self.gamma))

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, s: str) -> "NoiseDraw":
        d = json.loads(s)
        d["dims"] = tuple(d.get("dims", ()))
        return cls(**d)


def upsample_linear(grid: np.ndarray, dims) -> np.ndarray:
    """Trilinear upsampling with grid nodes pinned to the volume corners."""
    grid = np.asarray(grid, dtype=float)
    coords = [np.linspace(0.0, g - 1.0, n) if n > 1 else np.zeros(1) for g, n in zip(grid.shape, dims)]
    mesh = np.meshgrid(*coords, indexing="ij")
    return ndimage.map_coordinates(grid, mesh, order=1, mode="nearest")


def draw_noise(params: NoiseParams, dims, rng: np.random.Generator) -> NoiseDraw:
    sigma_b = params.sigma_bias_max if params.exact else float(rng.uniform(0.0, params.sigma_bias_max))
    grid = rng.normal(0.0, 1.0, size=params.bias_grid) * sigma_b
    gamma = float(rng.normal(0.0, params.sigma_gamma)) if params.sigma_gamma > 0 else 0.0
    sigma_n = params.sigma_noise_max if params.exact else float(rng.uniform(0.0, params.sigma_noise_max))
    noise_seed = int(rng.integers(0, 2 ** 63 - 1))
    return NoiseDraw(sigma_b, grid.tolist(), gamma, sigma_n, noise_seed, tuple(int(n) for n in dims))


def bias_field(draw: NoiseDraw, dims) -> np.ndarray:
    return np.exp(upsample_linear(np.asarray(draw.bias_grid), dims))


def apply_draw(image, draw: NoiseDraw, with_noise: bool = True) -> np.ndarray:
    """Replay a recorded draw on an image array."""
    img = np.asarray(getattr(image, "data", image), dtype=float)
    out = np.clip(img * bias_field(draw, img.shape), 0.0, 1.0) ** draw.exponent
    if with_noise and draw.sigma_noise > 0:
        out = out + np.random.default_rng(draw.noise_seed).normal(0.0, draw.sigma_noise, size=img.shape)
    return out


def corrupt(image: Volume3, params: NoiseParams, rng: np.random.Generator | None = None
            ) -> tuple[Volume3, NoiseDraw]:
    """Apply one random corruption; returns the corrupted volume and its draw record."""
    img = np.asarray(image.data, dtype=float)
    if img.min() < -1e-9 or img.max() > 1.0 + 1e-9:
        raise ValueError("corrupt expects intensities in [0, 1]")
    rng = np.random.default_rng(params.seed) if rng is None else rng
    draw = draw_noise(params, img.shape, rng)
    return image.like(apply_draw(np.clip(img, 0.0, 1.0), draw)), draw
