"""Equirectangular (lat-long) environment maps.

Convention: world +z is the polar axis. A texel at column ``i`` and row
``j`` has ``u = (i + 0.5) / W`` and ``v = (j + 0.5) / H``; azimuth
``phi = 2*pi*u - pi`` and polar angle ``theta = pi*v`` so row 0 looks up.
The direction is ``(sin(theta)cos(phi), sin(theta)sin(phi), cos(theta))``.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.ndimage import map_coordinates

from ..exceptions import ConfigError


def direction_from_angles(theta, phi):
    theta, phi = np.broadcast_arrays(np.asarray(theta, dtype=np.float64), np.asarray(phi, dtype=np.float64))
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def uv_from_direction(dirs):
    dirs = np.asarray(dirs, dtype=np.float64)
    theta = np.arccos(np.clip(dirs[..., 2], -1.0, 1.0))
    phi = np.arctan2(dirs[..., 1], dirs[..., 0])
    u = np.mod((phi + np.pi) / (2 * np.pi), 1.0)
    v = theta / np.pi
    return u, v


@dataclass(frozen=True, eq=False)
class EnvironmentMap:
    """Distant illumination ``L_i(w)`` stored as an (H, W, 3) float array."""

    radiance: np.ndarray

    def __post_init__(self):
        L = np.asarray(self.radiance, dtype=np.float64)
        if L.ndim != 3 or L.shape[2] != 3:
            raise ConfigError(f"environment map must be (H, W, 3), got {L.shape}")
        if not np.all(np.isfinite(L)) or np.any(L < 0):
            raise ConfigError("environment radiance must be finite and non-negative")
        L.setflags(write=False)
        object.__setattr__(self, "radiance", L)

    @property
    def height(self):
        return self.radiance.shape[0]

    @property
    def width(self):
        return self.radiance.shape[1]

    @cached_property
    def directions(self):
        H, W = self.height, self.width
        theta = np.pi * (np.arange(H) + 0.5) / H
        phi = 2 * np.pi * (np.arange(W) + 0.5) / W - np.pi
        return direction_from_angles(theta[:, None], phi[None, :])

    @cached_property
    def solid_angles(self):
        H, W = self.height, self.width
        theta = np.pi * (np.arange(H) + 0.5) / H
        w = np.sin(theta) * (2 * np.pi / W) * (np.pi / H)
        return np.broadcast_to(w[:, None], (H, W)).copy()

    @cached_property
    def texels(self):
        """Flattened ``(dirs, L * dOmega)`` with zero-weight texels dropped."""
        dirs = self.directions.reshape(-1, 3)
        weighted = (self.radiance * self.solid_angles[..., None]).reshape(-1, 3)
        keep = np.any(weighted > 0, axis=1)
        return dirs[keep], weighted[keep]

    def lookup(self, dirs):
        """Bilinear radiance lookup for arbitrary directions (wraps in azimuth)."""
        u, v = uv_from_direction(dirs)
        x = u * self.width - 0.5
        y = v * self.height - 0.5
        shape = np.shape(x)
        x = x.ravel()
        y = np.clip(y.ravel(), 0, self.height - 1)
        # pad one column on each side for azimuthal wrap
        padded = np.concatenate([self.radiance[:, -1:], self.radiance, self.radiance[:, :1]], axis=1)
        out = np.stack(
            [map_coordinates(padded[..., c], [y, x + 1], order=1, mode="nearest") for c in range(3)],
            axis=-1,
        )
        return out.reshape(shape + (3,))

    def rotated(self, R):
        """Environment seen after rotating the world by ``R``: ``L'(w) = L(R^T w)``."""
        R = np.asarray(R, dtype=np.float64)
        src = self.directions @ R  # row-vector form of R^T w
        return EnvironmentMap(np.maximum(self.lookup(src), 0.0))

    def scaled(self, s):
        return EnvironmentMap(self.radiance * s)

    def mean_radiance(self):
        w = self.solid_angles[..., None]
        return (self.radiance * w).sum(axis=(0, 1)) / w.sum()

    @classmethod
    def constant(cls, value, width=64, height=32):
        value = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,))
        return cls(np.broadcast_to(value, (height, width, 3)).copy())

    @classmethod
    def from_function(cls, fn, width=64, height=32):
        """Sample ``fn(dirs) -> (..., 3)`` at texel centers."""
        tmp = cls.constant(0.0, width, height)
        return cls(np.asarray(fn(tmp.directions), dtype=np.float64))


def synthetic_sky(width=64, height=32, seed=0):
    """A smooth, colourful "natural" environment: sky gradient plus coloured lobes.

    Lobe directions and colours are drawn from ``seed``; the result is
    deterministic.
    """
    rng = np.random.default_rng(seed)
    lobes = []
    for k in range(5):
        theta = rng.uniform(0.15 * np.pi, 0.75 * np.pi)
        phi = rng.uniform(-np.pi, np.pi)
        color = rng.uniform(0.2, 1.0, size=3)
        color[k % 3] *= 3.0
        sharp = rng.uniform(6.0, 20.0)
        lobes.append((direction_from_angles(theta, phi), color * rng.uniform(1.0, 3.0), sharp))

    def fn(d):
        z = d[..., 2:3]
        sky = np.concatenate([0.25 + 0.15 * z, 0.3 + 0.2 * z, 0.45 + 0.3 * z], axis=-1)
        sky = np.where(z > 0, sky, np.concatenate([0.2 + 0 * z, 0.15 + 0 * z, 0.1 + 0 * z], axis=-1) * (1 + 0.5 * z))
        out = sky.copy()
        for mu, color, sharp in lobes:
            out = out + color * np.exp(sharp * (d @ mu - 1.0))[..., None]
        return out

    return EnvironmentMap.from_function(fn, width, height)
