"""Shared fixtures: one synthetic world and fitted models reused per session."""

import numpy as np
import pytest

from sirakit import (BoostConfig, MultitaskConfig, SyntheticWorldSpec,
                     fit_multitask, generate_world, gpboost_train,
                     prepared_samples)


@pytest.fixture(scope="session")
def small_world():
    spec = SyntheticWorldSpec(seed=7, n_samples=140, n_noise_variables=14,
                              n_sparse_variables=6)
    return generate_world(spec)


@pytest.fixture(scope="session")
def small_prepared(small_world):
    samples, series = prepared_samples(small_world, select_k=8)
    return samples, series


@pytest.fixture(scope="session")
def mtg_small(small_prepared):
    samples, _ = small_prepared
    return fit_multitask(samples[:110],
                         MultitaskConfig(epochs=150, seed=7),
                         tasks=("d18O", "d2H"))


@pytest.fixture(scope="session")
def gb_small(small_prepared):
    samples, _ = small_prepared
    return gpboost_train(samples[:110], BoostConfig(rounds=20, seed=7),
                         task="d18O")


@pytest.fixture
def rng():
    return np.random.default_rng(42)
