"""Multi-view orchestration: per-view SfS, plane sweep with neighbours, joint estimation."""

import logging

import numpy as np
from sklearn.base import BaseEstimator, clone

from .exceptions import ConfigError
from .fusion import select_neighbors
from .mvs import PlaneSweepMVS, ViewData
from .parallel import pmap
from .reflectance import BrdfParams, alternate, initial_albedo
from .sfs import ShapeFromShading

log = logging.getLogger(__name__)


def neighbor_ids(cameras, ref, up=(0.0, 0.0, 1.0)):
    """Two neighbours per side for rings of five or more views, otherwise every other view."""
    if len(cameras) >= 5:
        return list(select_neighbors(cameras, ref, up).sources)
    return [i for i in range(len(cameras)) if i != ref]


def estimate_densities(views, env, brdf, sfs=None):
    sfs = clone(sfs) if sfs is not None else ShapeFromShading()
    sfs.set_params(env=env, brdf=brdf).fit()
    return [sfs.transform(v) for v in views]


def estimate_geometry(views, env, brdf, sfs=None, mvs=None, up=(0.0, 0.0, 1.0), densities=None):
    """Depth/normal maps for every view, each swept against its neighbours."""
    mvs = mvs if mvs is not None else PlaneSweepMVS()
    if densities is None and mvs.beta_normal > 0:
        densities = estimate_densities(views, env, brdf, sfs)
    data = [ViewData(v, None if densities is None else densities[i]) for i, v in enumerate(views)]
    cams = [v.camera for v in views]
    est = clone(mvs).fit()

    def one(i):
        return est.predict([data[i]] + [data[j] for j in neighbor_ids(cams, i, up)])

    return pmap(one, range(len(views)))


class JointEstimator(BaseEstimator):
    """Alternating geometry / reflectance estimation over a set of calibrated views.

    ``fit(views)`` sets ``params_`` (BrdfParams), ``maps_`` (one
    DepthNormalMaps per view) and ``history_`` (round, phase, objective).
    """

    def __init__(self, env=None, rounds=3, family="microfacet", budget=40, blur_sigma=4.0, snap=True,
                 cone_deg=15.0, sfs=None, mvs=None, up=(0.0, 0.0, 1.0), init=None):
        self.env = env
        self.rounds = rounds
        self.family = family
        self.budget = budget
        self.blur_sigma = blur_sigma
        self.snap = snap
        self.cone_deg = cone_deg
        self.sfs = sfs
        self.mvs = mvs
        self.up = up
        self.init = init

    def fit(self, X, y=None, frozen_maps=None):
        if self.env is None:
            raise ConfigError("JointEstimator needs env")
        views = list(X)
        init = self.init if self.init is not None else BrdfParams("lambertian", initial_albedo(views, self.env))

        def geometry(brdf):
            return estimate_geometry(views, self.env, brdf, self.sfs, self.mvs, self.up)

        state = alternate(views, self.env, self.rounds, geometry, self.family, self.budget, self.blur_sigma,
                          self.snap, self.cone_deg, frozen_maps=frozen_maps, init=init)
        self.params_ = state.params
        self.maps_ = state.maps
        self.history_ = state.history
        self.best_round_ = state.best_round
        return self

    def predict(self, X=None):
        return self.maps_
