"""Input validation helpers shared by the estimators."""

import numbers

import numpy as np

from .exceptions import ConfigError, GeometryError


def check_image(image, name="image", channels=3):
    arr = np.asarray(image, dtype=np.float64)
    if channels == 1 and arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    expected = 2 if channels == 1 else 3
    if arr.ndim != expected or (channels > 1 and arr.shape[2] != channels):
        raise ConfigError(f"{name} must have shape (H, W{', %d' % channels if channels > 1 else ''}), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} contains non-finite values")
    return arr


def check_mask(mask, shape, name="mask"):
    if mask is None:
        return np.ones(shape[:2], dtype=bool)
    m = np.asarray(mask).astype(bool)
    if m.shape != tuple(shape[:2]):
        raise ConfigError(f"{name} shape {m.shape} does not match image {shape[:2]}")
    return m


def check_unit(v, name="direction", atol=1e-6):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 3:
        raise ConfigError(f"{name} must be 3-vectors")
    norms = np.linalg.norm(v, axis=-1)
    if not np.allclose(norms, 1.0, atol=atol):
        raise ConfigError(f"{name} must be unit length")
    return v


def check_rotation(R, name="rotation", atol=1e-6):
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ConfigError(f"{name} must be 3x3")
    if not np.allclose(R @ R.T, np.eye(3), atol=atol) or abs(np.linalg.det(R) - 1.0) > atol:
        raise ConfigError(f"{name} must be orthonormal with determinant +1")
    return R


def check_positive(value, name, allow_zero=False):
    if not isinstance(value, numbers.Real) or not np.isfinite(value):
        raise ConfigError(f"{name} must be a finite number, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigError(f"{name} must be {'>= 0' if allow_zero else '> 0'}, got {value!r}")
    return float(value)


def check_int(value, name, minimum=0):
    if not isinstance(value, numbers.Integral) or value < minimum:
        raise ConfigError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_nonempty(mask, what="mask"):
    if not np.any(mask):
        raise GeometryError(f"{what} is empty")
