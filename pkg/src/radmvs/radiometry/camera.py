"""Pinhole cameras.

Camera frame follows the OpenCV convention (x right, y down, z forward);
``X_cam = R @ X_world + t``. Pixel ``(row i, col j)`` has its center at
image coordinates ``(u, v) = (j, i)``.

Shape-from-shading works in the *viewer frame* of a camera: x right, y
up, z pointing back toward the camera, i.e. ``diag(1, -1, -1)`` applied to
camera coordinates. Normals that face the camera have positive viewer z.
"""

from dataclasses import dataclass

import numpy as np

from .._validation import check_rotation
from ..exceptions import ConfigError

VIEWER_FLIP = np.diag([1.0, -1.0, -1.0])


@dataclass(frozen=True, eq=False)
class Camera:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        if K.shape != (3, 3) or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ConfigError("intrinsics must be a 3x3 matrix with positive focal lengths")
        R = check_rotation(self.R, "camera rotation")
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        for arr in (K, R, t):
            arr.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def look_at(cls, eye, target, up, focal, width, height):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ConfigError("up vector parallel to viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        K = np.array([[focal, 0.0, (width - 1) / 2.0], [0.0, focal, (height - 1) / 2.0], [0.0, 0.0, 1.0]])
        return cls(K, R, -R @ eye, width, height)

    @property
    def center(self):
        return -self.R.T @ self.t

    @property
    def optical_axis(self):
        """Forward viewing direction in world coordinates."""
        return self.R[2].copy()

    @property
    def to_viewer(self):
        """Rotation world -> viewer frame."""
        return VIEWER_FLIP @ self.R

    @property
    def extrinsics(self):
        return np.hstack([self.R, self.t[:, None]])

    def world_to_camera(self, X):
        return np.asarray(X, dtype=np.float64) @ self.R.T + self.t

    def camera_to_world(self, Xc):
        return (np.asarray(Xc, dtype=np.float64) - self.t) @ self.R

    def project(self, X):
        """World points (..., 3) -> pixel coords (u, v) and camera depth z."""
        Xc = self.world_to_camera(X)
        z = Xc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.K[0, 0] * Xc[..., 0] / z + self.K[0, 2]
            v = self.K[1, 1] * Xc[..., 1] / z + self.K[1, 2]
        return u, v, z

    def pixel_grid(self):
        v, u = np.meshgrid(np.arange(self.height, dtype=np.float64), np.arange(self.width, dtype=np.float64),
                           indexing="ij")
        return u, v

    def rays_camera(self, u=None, v=None):
        """Camera-frame ray directions with unit z (so depth scales them directly)."""
        if u is None:
            u, v = self.pixel_grid()
        x = (u - self.K[0, 2]) / self.K[0, 0]
        y = (v - self.K[1, 2]) / self.K[1, 1]
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def backproject(self, depth, u=None, v=None):
        """Depth (along the optical axis) -> world points."""
        rays = self.rays_camera(u, v)
        return self.camera_to_world(rays * np.asarray(depth)[..., None])

    def transformed(self, R_w, t_w):
        """Camera after the world is moved by ``X' = R_w X + t_w``."""
        R_w = np.asarray(R_w, dtype=np.float64)
        R = self.R @ R_w.T
        return Camera(self.K, R, self.t - R @ np.asarray(t_w, dtype=np.float64), self.width, self.height)
