import os

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from concept_scope import toymodels
from concept_scope.backend import ChannelMask, load_model_bundle
from concept_scope.cache import CACHE_ENV, ArrayCache, CachedModel, default_cache_dir, key_digest
from concept_scope.io import (
    atomic_write_bytes,
    config_hash,
    dumps_json,
    matrix_to_csv,
    read_matrix_csv,
    write_matrix_csv,
)


def test_env_var_sets_default_dir(tmp_path, monkeypatch):
    monkeypatch.setenv(CACHE_ENV, str(tmp_path / "elsewhere"))
    assert default_cache_dir() == tmp_path / "elsewhere"
    assert ArrayCache().root == tmp_path / "elsewhere"


def test_roundtrip_and_counters(tmp_path):
    cache = ArrayCache(tmp_path)
    key = ("logits", "abc", 3)
    assert cache.get(key) is None
    cache.put(key, np.arange(4.0))
    np.testing.assert_array_equal(cache.get(key), np.arange(4.0))
    assert (cache.hits, cache.misses) == (1, 1)
    calls = []
    cache.get_or_compute(("x",), lambda: calls.append(1) or np.ones(2))
    cache.get_or_compute(("x",), lambda: calls.append(1) or np.ones(2))
    assert len(calls) == 1
    assert cache.clear() == 2
    assert cache.get(key) is None
    assert ArrayCache(tmp_path / "never").clear() == 0


def test_keys_are_order_and_type_sensitive():
    assert key_digest((1, 2)) != key_digest((2, 1))
    assert key_digest(("1",)) != key_digest((1,))


def test_no_temp_files_left(tmp_path):
    cache = ArrayCache(tmp_path)
    for i in range(5):
        cache.put((i,), np.full(3, i))
    assert not list(tmp_path.rglob("*.tmp"))


def test_cached_model_skips_backend_on_hit(quadrant_bundle, tmp_path, rng):
    imgs = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(3)]
    keys = [("img", i) for i in range(3)]
    m1 = CachedModel(quadrant_bundle, ArrayCache(tmp_path))
    a = m1.logits(imgs, None, keys)
    assert m1.inference_calls == 3
    m2 = CachedModel(quadrant_bundle, ArrayCache(tmp_path))
    b = m2.logits(imgs, None, keys)
    assert m2.inference_calls == 0
    np.testing.assert_array_equal(a, b)
    # a different mask is a different cache entry
    m2.logits(imgs, ChannelMask.of([0], 8), keys)
    assert m2.inference_calls == 3


def test_partial_hits_only_compute_misses(quadrant_bundle, tmp_path, rng):
    imgs = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(4)]
    m = CachedModel(quadrant_bundle, ArrayCache(tmp_path))
    m.logits(imgs[:2], None, [0, 1])
    out = m.logits(imgs, None, [0, 1, 2, 3])
    assert m.inference_calls == 4
    np.testing.assert_allclose(out, CachedModel(quadrant_bundle).logits(imgs), rtol=1e-6)


def test_model_change_invalidates(tmp_path, rng):
    a = load_model_bundle(toymodels.quadrant_model(tmp_path / "a"))
    b = load_model_bundle(toymodels.quadrant_model(tmp_path / "b", head_bias=(1.0, 0.0)))
    img = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)]
    cache = ArrayCache(tmp_path / "c")
    la = CachedModel(a, cache).logits(img, None, ["k"])
    lb = CachedModel(b, cache).logits(img, None, ["k"])
    assert lb[0, 0] == pytest.approx(la[0, 0] + 1.0)


# -- io -------------------------------------------------------------------------

def test_identical_bytes_not_rewritten(tmp_path):
    p = atomic_write_bytes(tmp_path / "a" / "f.txt", b"hello")
    before = os.stat(p).st_mtime_ns
    os.utime(p, ns=(before - 10**9, before - 10**9))
    stamped = os.stat(p).st_mtime_ns
    atomic_write_bytes(p, b"hello")
    assert os.stat(p).st_mtime_ns == stamped
    atomic_write_bytes(p, b"changed")
    assert p.read_bytes() == b"changed"


def test_json_is_canonical():
    a = dumps_json({"b": np.float64(1.5), "a": np.arange(2)})
    b = dumps_json({"a": [0, 1], "b": 1.5})
    assert a == b
    assert config_hash({"x": 1, "y": 2}) == config_hash({"y": 2, "x": 1})
    assert config_hash({"x": 1}) != config_hash({"x": 2})


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_matrix_csv_roundtrip_is_exact(m):
    assert np.array_equal(np.loadtxt(matrix_to_csv(m).splitlines(), delimiter=",", ndmin=2), m)


def test_matrix_csv_file(tmp_path):
    m = np.array([[0.1, 2.0], [3.0, 1e-17]])
    assert np.array_equal(read_matrix_csv(write_matrix_csv(tmp_path / "m.csv", m)), m)
