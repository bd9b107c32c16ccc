"""Shared fixtures: small corpora, fitted priors, and smoothed variants.

The "smooth" hyperparameter fixture widens the count mixtures away from
the EM variance floor; finite-difference checks need a loss surface whose
curvature stays well below 1/step, which razor-thin count spikes violate.
"""

from __future__ import annotations

import numpy as np
import pytest

from scenesync.gmm import Gmm1D, Gmm2D
from scenesync.objective import HyperParams, default_robust_params
from scenesync.priors import CountPrior, PriorModel, fit_priors
from scenesync.synthgen import (
    CorruptionConfig,
    GrammarConfig,
    corrupt,
    default_class_table,
    generate,
)


@pytest.fixture(scope="session")
def table():
    return default_class_table()


@pytest.fixture(scope="session")
def grammar():
    return GrammarConfig()


@pytest.fixture(scope="session")
def train_scenes(grammar):
    return generate(grammar, 60, seed=11)


@pytest.fixture(scope="session")
def prior(train_scenes):
    return fit_priors(train_scenes, seed=1)


def widen_counts(prior, extra_var=0.09):
    """Copy of a prior with count mixtures widened off the variance floor."""
    cm = {
        c: Gmm1D(m.weights, m.means, m.variances + extra_var)
        for c, m in prior.counts.class_mixtures.items()
    }
    pm = {
        p: Gmm2D(m.weights, m.means, m.covs + extra_var * np.eye(2))
        for p, m in prior.counts.pair_mixtures.items()
    }
    counts = CountPrior(cm, pm, prior.counts.class_tables, prior.counts.pair_tables)
    return PriorModel(prior.class_table, prior.translation, prior.relative, counts)


@pytest.fixture(scope="session")
def smooth_prior(prior):
    return widen_counts(prior)


@pytest.fixture(scope="session")
def hyper(table, prior):
    return HyperParams(default_robust_params(table), prior, edge_gating=True)


@pytest.fixture(scope="session")
def smooth_hyper(table, smooth_prior):
    return HyperParams(default_robust_params(table), smooth_prior, edge_gating=True)


@pytest.fixture(scope="session")
def test_scenes(grammar):
    return generate(grammar, 8, seed=77)


@pytest.fixture(scope="session")
def bundles(test_scenes):
    cfg = CorruptionConfig()
    return [corrupt(s, cfg, seed=300 + k) for k, s in enumerate(test_scenes)]


def fd_gradient(fun, x, step=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for j in range(flat.size):
        h = step * max(1.0, abs(flat[j]))
        xp = flat.copy()
        xm = flat.copy()
        xp[j] += h
        xm[j] -= h
        gf[j] = (fun(xp.reshape(x.shape)) - fun(xm.reshape(x.shape))) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
