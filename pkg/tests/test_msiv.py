import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from concept_scope import toymodels
from concept_scope.cache import CachedModel
from concept_scope.msiv import (
    MsivConfig,
    minmax,
    msiv_run,
    quadtree_search,
    rank_scorer,
    render_overlay,
    run_metadata,
    save_png,
    upsample,
)
from concept_scope.ranking import build_concept_space


def class0_set():
    return [toymodels.quadrant_image(32, tl, br=max(tl // 4, 8)) for tl in toymodels.CLASS0_TL]


@pytest.fixture
def class0_space(quadrant):
    imgs = class0_set()
    return imgs, build_concept_space(quadrant, imgs, list(range(8)), 0)


# -- level loop ------------------------------------------------------------------

def test_levels_for_224_and_28():
    seen = []

    def score(cells, patch):
        seen.append(patch)
        return [1.0] * len(cells)

    res = quadtree_search(score, 224, MsivConfig(delta=0.5, min_patch=28))
    assert seen == [112, 56, 28]
    assert res.dim == 8


def test_default_min_patch_is_eighth():
    assert MsivConfig().resolve_min_patch(224) == 28


def test_all_zero_scores_stop_at_level_one():
    res = quadtree_search(lambda cells, p: [0.0] * len(cells), 32, MsivConfig())
    assert res.early_stop_level == 1 and len(res.levels) == 1
    assert not res.importance.any()


def test_threshold_uses_raw_scores():
    # level-1 raw scores 10, 8, 1, 0: with delta 0.75 threshold is 7.5 -> two cells kept
    table = {(0, 0): 10.0, (0, 1): 8.0, (1, 0): 1.0, (1, 1): 0.0}

    def score(cells, patch):
        return [table.get(c, 1.0) if patch == 16 else 1.0 for c in cells]

    res = quadtree_search(score, 32, MsivConfig(delta=0.75, min_patch=8))
    assert res.levels[0].threshold == 7.5
    assert res.levels[0].selected == [(0, 0), (0, 1)]
    assert len(res.levels[1].scores) == 8


def test_negative_scores_rejected():
    with pytest.raises(ValueError):
        quadtree_search(lambda cells, p: [-1.0] * len(cells), 32, MsivConfig())


def test_children_row_major_and_inside_parents():
    calls = []

    def score(cells, patch):
        calls.append(list(cells))
        return [float(i == 0) for i in range(len(cells))]

    quadtree_search(score, 32, MsivConfig(delta=1.0, min_patch=4))
    assert calls[0] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert calls[1] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert calls[2] == [(0, 0), (0, 1), (1, 0), (1, 1)]


def test_minmax_constant_is_zero():
    assert not minmax(np.full((2, 2), 3.0)).any()
    np.testing.assert_array_equal(minmax(np.array([[1.0, 3.0]])), [[0.0, 1.0]])


def test_config_validation():
    for bad in (0.0, 1.5):
        with pytest.raises(ValueError):
            MsivConfig(delta=bad)
    with pytest.raises(ValueError):
        MsivConfig(metric="l2")


# -- scorers ------------------------------------------------------------------------

def test_rank_scorer_metrics(class0_space):
    _, space = class0_space
    new = np.array([0.0, 0.0])
    caoc, init = rank_scorer(space, 0, "caoc")
    kendall, _ = rank_scorer(space, 0, "kendall")
    pd, _ = rank_scorer(space, 0, "pd")
    assert init == 0
    assert caoc(new) == 7
    # moving the top item to the bottom of 8 flips 7 of 28 pairs
    assert kendall(new) == pytest.approx(2 * 7 / 28)
    assert pd(new) == pytest.approx(16.0, rel=1e-5)
    assert caoc(space.logits[0]) == 0 and kendall(space.logits[0]) == 0 and pd(space.logits[0]) == 0
    with pytest.raises(ValueError):
        rank_scorer(space, 0, "other")


# -- full run on the quadrant model ----------------------------------------------------

def test_quadrant_scenario(quadrant, class0_space):
    imgs, space = class0_space
    res = msiv_run(quadrant, space, 0, imgs[0], MsivConfig())
    np.testing.assert_array_equal(res.level_scores(1), [[7, 0], [0, 0]])
    first = res.levels[0].contribution
    assert (first[:4, :4] == 1).all() and first.sum() == 16
    for rec in res.levels[1:]:
        assert all(a < 2 ** (rec.level - 1) and b < 2 ** (rec.level - 1) for a, b in rec.scores)
    assert res.importance[:4, :4].sum() / res.importance.sum() >= 0.95


def test_constant_model_stops_early(constant_bundle, rng):
    model = CachedModel(constant_bundle)
    imgs = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(4)]
    space = build_concept_space(model, imgs, list(range(4)), 0)
    for metric in ("caoc", "kendall", "pd"):
        res = msiv_run(model, space, 2, imgs[2], MsivConfig(metric=metric))
        assert res.early_stop_level == 1
        assert not res.importance.any()


def test_wrong_image_size(quadrant, class0_space):
    _, space = class0_space
    with pytest.raises(ValueError):
        msiv_run(quadrant, space, 0, np.zeros((16, 16, 3), np.uint8), MsivConfig())


def test_occlusions_are_cached(cached_quadrant):
    imgs = class0_set()
    space = build_concept_space(cached_quadrant, imgs, list(range(8)), 0)
    a = msiv_run(cached_quadrant, space, 0, imgs[0], MsivConfig(), key="img0")
    before = cached_quadrant.inference_calls
    b = msiv_run(cached_quadrant, space, 0, imgs[0], MsivConfig(), key="img0")
    assert cached_quadrant.inference_calls == before
    np.testing.assert_array_equal(a.importance, b.importance)


# -- rendering ---------------------------------------------------------------------------

def test_all_ones_is_identity(rng):
    img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    out, empty = render_overlay(img, np.ones((8, 8)))
    assert np.array_equal(out, img) and not empty


def test_all_zeros_is_black_with_warning(rng):
    img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    with pytest.warns(RuntimeWarning):
        out, empty = render_overlay(img, np.zeros((8, 8)))
    assert empty and not out.any()


def test_left_half_kept(rng):
    img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    m = np.zeros((8, 8))
    m[:, :4] = 1
    out, _ = render_overlay(img, m)
    assert np.array_equal(out[:, :16], img[:, :16]) and not out[:, 16:].any()


def test_non_finite_importance_rejected():
    with pytest.raises(ValueError):
        render_overlay(np.zeros((8, 8, 3), np.uint8), np.array([[np.nan]]))


@given(st.integers(1, 4), st.integers(1, 4))
def test_upsample_blocks(n, f):
    m = np.arange(n * n, dtype=float).reshape(n, n)
    up = upsample(m, n * f)
    assert up.shape == (n * f, n * f)
    assert np.array_equal(up[::f, ::f], m)


def test_png_and_metadata(tmp_path, quadrant, class0_space):
    imgs, space = class0_space
    res = msiv_run(quadrant, space, 0, imgs[0], MsivConfig())
    out, _ = render_overlay(imgs[0], res.importance)
    save_png(tmp_path / "o.png", out)
    assert (tmp_path / "o.png").read_bytes()[:4] == b"\x89PNG"
    meta = run_metadata(res, MsivConfig(), 32, image_key="x")
    json.dumps(meta)
    assert meta["grid_side"] == 8 and meta["min_patch"] == 4 and meta["min_patch_default"]
    assert meta["level_log"][0]["selected"] == [[0, 0]]
