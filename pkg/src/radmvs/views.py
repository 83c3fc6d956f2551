"""Lightweight containers shared across stages."""

from dataclasses import dataclass

import numpy as np

from ._validation import check_image, check_mask


@dataclass(frozen=True, eq=False)
class View:
    """One calibrated HDR observation of the object."""

    image: np.ndarray
    camera: object
    mask: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        img = check_image(self.image)
        object.__setattr__(self, "image", img)
        object.__setattr__(self, "mask", check_mask(self.mask, img.shape) & np.all(img > 0, axis=2))
        if img.shape[:2] != (self.camera.height, self.camera.width):
            from .exceptions import ConfigError
            raise ConfigError(f"image {img.shape[:2]} does not match camera size "
                              f"{(self.camera.height, self.camera.width)}")

    def scaled(self, s):
        return View(self.image * s, self.camera, self.mask, self.name)


@dataclass(frozen=True, eq=False)
class DepthNormalMaps:
    """Per-view depth (along the optical axis) and camera-frame normals."""

    depth: np.ndarray
    normal: np.ndarray
    mask: np.ndarray
    confidence: np.ndarray = None
