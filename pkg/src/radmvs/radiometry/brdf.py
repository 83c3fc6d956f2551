"""Homogeneous BRDFs.

All ``evaluate`` methods broadcast over leading axes of ``wi``, ``wo`` and
``n`` (unit vectors in one common frame) and return RGB reflectance with
a trailing axis of 3. Reflectance is zero whenever ``wi . n <= 0`` or
``wo . n <= 0``.

Microfacet lobe
---------------
::

    rho = kd / pi + F * D * G / (4 (n.wi) (n.wo))
    D   = a^2 / (pi ((n.h)^2 (a^2 - 1) + 1)^2)                 GGX / Trowbridge-Reitz
    G   = G1(wi) G1(wo),  G1(v) = 2 (n.v) / ((n.v) + sqrt(a^2 + (1 - a^2)(n.v)^2))
    F   = ks + (1 - ks)(1 - wi.h)^5                              Schlick

with ``h = normalize(wi + wo)`` and ``a`` the roughness used directly
(no squaring).
"""

from dataclasses import dataclass

import numpy as np

from ..exceptions import ConfigError

MERL_RES = (90, 90, 180)
MERL_SCALE = np.array([1.0 / 1500.0, 1.15 / 1500.0, 1.66 / 1500.0])

_CHUNK = 512


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _rgb(value, name, lo=0.0, hi=None):
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (3,)).copy()
    if not np.all(np.isfinite(arr)) or np.any(arr < lo) or (hi is not None and np.any(arr > hi)):
        raise ConfigError(f"{name} out of range: {arr}")
    arr.setflags(write=False)
    return arr


class Brdf:
    """Base class; subclasses implement ``evaluate``."""

    kind = "abstract"

    def evaluate(self, wi, wo, n):
        raise NotImplementedError

    def shade(self, normals, wo, dirs, weighted):
        """Sum ``weighted_t * rho(dir_t, wo, n) * max(0, dir_t . n)`` over texels.

        ``normals`` is (N, 3); ``wo`` is (3,) or (N, 3); ``dirs`` and
        ``weighted`` are (T, 3). Returns (N, 3).
        """
        normals = np.asarray(normals, dtype=np.float64)
        wo = np.broadcast_to(np.asarray(wo, dtype=np.float64), normals.shape)
        out = np.empty((normals.shape[0], 3))
        for s in range(0, normals.shape[0], _CHUNK):
            n = normals[s:s + _CHUNK, None, :]
            o = wo[s:s + _CHUNK, None, :]
            rho = self.evaluate(dirs[None], o, n)
            cos = np.maximum(dirs @ normals[s:s + _CHUNK].T, 0.0).T
            out[s:s + _CHUNK] = np.einsum("nt,ntc,tc->nc", cos, rho, weighted)
        return out

    def to_params(self):
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Lambertian(Brdf):
    albedo: np.ndarray

    kind = "lambertian"

    def __post_init__(self):
        object.__setattr__(self, "albedo", _rgb(self.albedo, "albedo", 0.0, 1.0))

    def evaluate(self, wi, wo, n):
        wi, wo, n = np.broadcast_arrays(np.asarray(wi, float), np.asarray(wo, float), np.asarray(n, float))
        ok = (_dot(wi, n) > 0) & (_dot(wo, n) > 0)
        return np.where(ok[..., None], self.albedo / np.pi, 0.0)

    def shade(self, normals, wo, dirs, weighted):
        normals = np.asarray(normals, dtype=np.float64)
        wo = np.broadcast_to(np.asarray(wo, dtype=np.float64), normals.shape)
        out = np.empty((normals.shape[0], 3))
        for st in range(0, normals.shape[0], _CHUNK):
            cos = np.maximum(normals[st:st + _CHUNK] @ dirs.T, 0.0)
            out[st:st + _CHUNK] = cos @ weighted
        visible = _dot(normals, wo) > 0
        return np.where(visible[:, None], out * (self.albedo / np.pi), 0.0)

    def to_params(self):
        return {"albedo": self.albedo.tolist()}

    def __repr__(self):
        return f"Lambertian(albedo={self.albedo.tolist()})"


def _ggx_d(cos_h, a2):
    denom = cos_h * cos_h * (a2 - 1.0) + 1.0
    return a2 / (np.pi * denom * denom)


def _smith_g1(cos_v, a2):
    cos_v = np.maximum(cos_v, 0.0)
    return 2.0 * cos_v / (cos_v + np.sqrt(a2 + (1.0 - a2) * cos_v * cos_v) + 1e-300)


@dataclass(frozen=True, eq=False)
class Microfacet(Brdf):
    diffuse: np.ndarray
    specular: np.ndarray
    roughness: float

    kind = "microfacet"

    def __post_init__(self):
        object.__setattr__(self, "diffuse", _rgb(self.diffuse, "diffuse", 0.0, 1.0))
        object.__setattr__(self, "specular", _rgb(self.specular, "specular", 0.0, 1.0))
        a = float(self.roughness)
        if not (0.0 < a <= 1.0):
            raise ConfigError(f"roughness must be in (0, 1], got {a}")
        object.__setattr__(self, "roughness", a)

    def evaluate(self, wi, wo, n):
        wi, wo, n = np.broadcast_arrays(np.asarray(wi, float), np.asarray(wo, float), np.asarray(n, float))
        ci = _dot(wi, n)
        co = _dot(wo, n)
        ok = (ci > 0) & (co > 0)
        h = wi + wo
        hn = np.linalg.norm(h, axis=-1, keepdims=True)
        h = h / np.where(hn > 0, hn, 1.0)
        a2 = self.roughness ** 2
        D = _ggx_d(_dot(n, h), a2)
        G = _smith_g1(ci, a2) * _smith_g1(co, a2)
        s = (1.0 - np.clip(_dot(wi, h), 0.0, 1.0)) ** 5
        F = self.specular + (1.0 - self.specular) * s[..., None]
        with np.errstate(divide="ignore", invalid="ignore"):
            spec = (D * G / (4.0 * ci * co))[..., None] * F
        rho = self.diffuse / np.pi + spec
        return np.where(ok[..., None], rho, 0.0)

    def shade(self, normals, wo, dirs, weighted):
        wo = np.asarray(wo, dtype=np.float64)
        if wo.ndim != 1:
            return super().shade(normals, wo, dirs, weighted)
        P, A, B = self.shade_terms(normals, wo, dirs, weighted)
        return self.diffuse * P + self.specular * A + B

    def shade_terms(self, normals, wo, dirs, weighted):
        """Shading split as ``diffuse * P + specular * A + B`` for a constant view ``wo``.

        ``P`` is the cosine-weighted irradiance over pi and does not depend
        on any parameter; ``A`` and ``B`` depend on the roughness only.
        """
        normals = np.asarray(normals, dtype=np.float64)
        wo = np.asarray(wo, dtype=np.float64)
        # constant view: the half vector and Fresnel factor depend only on the texel
        h = _normalize(dirs + wo)
        s = (1.0 - np.clip(_dot(dirs, h), 0.0, 1.0)) ** 5
        w_base = weighted * (1.0 - s)[:, None]
        w_fres = weighted * s[:, None]
        a2 = self.roughness ** 2
        N = normals.shape[0]
        P, A, B = np.zeros((N, 3)), np.zeros((N, 3)), np.zeros((N, 3))
        for st in range(0, N, _CHUNK):
            n = normals[st:st + _CHUNK]
            co = n @ wo
            ci = n @ dirs.T
            lit = (ci > 0) & (co[:, None] > 0)
            D = _ggx_d(n @ h.T, a2)
            G = _smith_g1(ci, a2) * _smith_g1(co, a2)[:, None]
            with np.errstate(divide="ignore", invalid="ignore"):
                X = np.where(lit, D * G / (4.0 * np.where(co > 0, co, 1.0))[:, None], 0.0)
            sl = slice(st, st + len(n))
            P[sl] = (np.where(lit, ci, 0.0) @ weighted) / np.pi
            A[sl] = X @ w_base
            B[sl] = X @ w_fres
        return P, A, B

    def to_params(self):
        return {"diffuse": self.diffuse.tolist(), "specular": self.specular.tolist(), "roughness": self.roughness}

    def __repr__(self):
        return (f"Microfacet(diffuse={self.diffuse.tolist()}, specular={self.specular.tolist()}, "
                f"roughness={self.roughness})")


def half_diff_angles(wi, wo, n):
    """Rusinkiewicz half/difference angles ``(theta_h, theta_d, phi_d)``."""
    wi, wo, n = np.broadcast_arrays(np.asarray(wi, float), np.asarray(wo, float), np.asarray(n, float))
    # any tangent frame works for an isotropic BRDF
    helper = np.where(np.abs(n[..., :1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    t = _normalize(np.cross(helper, n))
    b = np.cross(n, t)

    def local(v):
        return np.stack([_dot(v, t), _dot(v, b), _dot(v, n)], axis=-1)

    li, lo = local(wi), local(wo)
    half = li + lo
    half = half / np.maximum(np.linalg.norm(half, axis=-1, keepdims=True), 1e-300)
    theta_h = np.arccos(np.clip(half[..., 2], -1.0, 1.0))
    phi_h = np.arctan2(half[..., 1], half[..., 0])
    # rotate wi by -phi_h about z, then by -theta_h about y
    c, s = np.cos(phi_h), np.sin(phi_h)
    x = li[..., 0] * c + li[..., 1] * s
    y = -li[..., 0] * s + li[..., 1] * c
    z = li[..., 2]
    c, s = np.cos(theta_h), np.sin(theta_h)
    dx = x * c - z * s
    dz = x * s + z * c
    theta_d = np.arccos(np.clip(dz, -1.0, 1.0))
    phi_d = np.arctan2(y, dx)
    return theta_h, theta_d, phi_d


def merl_indices(theta_h, theta_d, phi_d):
    """Table indices following the reference MERL lookup (truncating, square-root theta_h)."""
    th = np.asarray(theta_h, dtype=np.float64)
    td = np.asarray(theta_d, dtype=np.float64)
    pd = np.asarray(phi_d, dtype=np.float64)
    ih = np.sqrt(np.maximum(th, 0.0) / (np.pi / 2) * 90.0 * 90.0).astype(np.int64)
    ih = np.where(th <= 0.0, 0, np.clip(ih, 0, 89))
    idd = np.clip((td / (np.pi / 2) * 90.0).astype(np.int64), 0, 89)
    pd = np.where(pd < 0.0, pd + np.pi, pd)
    ip = np.clip((pd / np.pi * 90.0).astype(np.int64), 0, 89)
    return ih, idd, ip


@dataclass(frozen=True, eq=False)
class MerlTabulated(Brdf):
    """Measured BRDF table of shape (90, 90, 180, 3), already channel-scaled."""

    table: np.ndarray

    kind = "merl"

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.shape != MERL_RES + (3,):
            raise ConfigError(f"MERL table must have shape {MERL_RES + (3,)}, got {t.shape}")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    def evaluate(self, wi, wo, n):
        wi, wo, n = np.broadcast_arrays(np.asarray(wi, float), np.asarray(wo, float), np.asarray(n, float))
        ok = (_dot(wi, n) > 0) & (_dot(wo, n) > 0)
        ih, idd, ip = merl_indices(*half_diff_angles(wi, wo, n))
        vals = self.table[ih, idd, ip]
        return np.where(ok[..., None], vals, 0.0)

    def to_params(self):
        return {}


def brdf_from_params(kind, params):
    if kind == "lambertian":
        return Lambertian(params["albedo"])
    if kind == "microfacet":
        return Microfacet(params["diffuse"], params["specular"], params["roughness"])
    raise ConfigError(f"unknown BRDF kind {kind!r}")
