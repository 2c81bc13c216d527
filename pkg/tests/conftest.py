import hypothesis
import numpy as np
import pytest

from concept_scope import toymodels
from concept_scope.backend import load_model_bundle
from concept_scope.cache import CACHE_ENV, ArrayCache, CachedModel

hypothesis.settings.register_profile("ci", deadline=None, max_examples=60)
hypothesis.settings.load_profile("ci")


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "default-cache"))


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("models")


@pytest.fixture(scope="session")
def quadrant_bundle(model_dir):
    return load_model_bundle(toymodels.quadrant_model(model_dir / "quadrant"))


@pytest.fixture(scope="session")
def rgb_bundle(model_dir):
    # logit_c = sum of channel c; channels are R, G, B, gray
    weights = np.vstack([np.eye(3), toymodels.GRAY[None]])
    return load_model_bundle(toymodels.channel_sum_model(model_dir / "rgb", weights))


@pytest.fixture(scope="session")
def constant_bundle(model_dir):
    return load_model_bundle(toymodels.constant_model(model_dir / "const"))


@pytest.fixture
def quadrant(quadrant_bundle):
    return CachedModel(quadrant_bundle)


@pytest.fixture
def cached_quadrant(quadrant_bundle, tmp_path):
    return CachedModel(quadrant_bundle, ArrayCache(tmp_path / "cache"))


@pytest.fixture
def fixture_dir(tmp_path):
    return toymodels.quadrant_fixture(tmp_path / "fx")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
