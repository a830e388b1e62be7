from __future__ import annotations

import numpy as np
import pytest

from config.settings import FeatureConfig, SynthSpec
from services.meshio import Mesh, TagDictionary, normalize_name
from services.synth import box, generate_dataset


def make_tags(spec: dict[str, list[str]]) -> TagDictionary:
    tags = list(spec)
    synonyms = {}
    for i, tag in enumerate(tags):
        for name in [tag] + spec[tag]:
            synonyms[normalize_name(name)] = i
    return TagDictionary(tags=tags, synonyms=synonyms)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cube():
    v, f = box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), subdiv=1)
    return Mesh(v, f)


@pytest.fixture
def two_cubes():
    v1, f1 = box((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), subdiv=1)
    v2, f2 = box((3.0, 0.0, 0.0), (1.0, 1.0, 1.0), subdiv=1)
    return Mesh(np.vstack([v1, v2]), np.vstack([f1, f2 + len(v1)]))


@pytest.fixture
def tags():
    return make_tags({"top": ["tabletop", "board"], "leg": ["legs"], "foot": ["feet"]})


@pytest.fixture
def small_features():
    return FeatureConfig(samples=600, neighbors=12, part_samples=150, grid=8, render_size=32, seed=3)


@pytest.fixture(scope="session")
def table_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tables")
    spec = SynthSpec(template="table", count=6, tag_drop=0.2, tag_coarsen=0.0, tag_error=0.0,
                     train_fraction=0.5, seed=11)
    generate_dataset(spec, root)
    return root
