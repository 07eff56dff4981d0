"""Shared fixtures: tiny phantom data, small classifier specs, random
probability volumes. Everything is seeded so the suite is deterministic."""

import numpy as np
import pytest
import torch

import cardioseg as cs

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_spec():
    return cs.PhantomSpec(depth_range=(4, 4), image_size=(16, 16), noise_sigma=0.03, seed=5)


@pytest.fixture(scope="session")
def tiny_pairs(tiny_spec):
    """Three small phantom (volume, mask) pairs, D=4, 16x16."""
    return cs.generate_phantom(tiny_spec, 3)


@pytest.fixture(scope="session")
def small_specs():
    """Two deterministic classifier specs small enough for fast forward passes."""
    return [
        cs.ClassifierSpec(base_channels=4, depth_levels=2, bottleneck_channels=16,
                          dropout_p=0.0, seed=s)
        for s in (1, 2)
    ]


@pytest.fixture(scope="session")
def small_members(small_specs):
    return [cs.init_classifier(s) for s in small_specs]


@pytest.fixture
def prob_factory():
    """Random (D, 4, H, W) probability volumes (valid channel softmax)."""

    def make(seed, d=3, h=8, w=8, scale=1.0, dtype=torch.float32):
        g = torch.Generator().manual_seed(seed)
        logits = torch.randn(d, 4, h, w, generator=g, dtype=dtype) * scale
        return torch.softmax(logits, dim=1)

    return make


@pytest.fixture
def mask_factory():
    """Random (D, H, W) uint8 label masks with values in {0..3}."""

    def make(seed, d=4, h=8, w=8):
        rng = np.random.default_rng(seed)
        return cs.LabelMask(rng.integers(0, 4, size=(d, h, w)).astype(np.uint8))

    return make
