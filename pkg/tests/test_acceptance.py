"""Acceptance criteria; each test prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

import filecmp
import itertools
import shutil
import time

import numpy as np
import pytest

from concept_scope import pipeline, toymodels
from concept_scope.backend import load_model_bundle
from concept_scope.cache import CachedModel
from concept_scope.clustering import kmeans
from concept_scope.evalmetrics import CUB_PARTS, BACKGROUND, PartAnnotations, faithfulness, localize
from concept_scope.mage import MageConfig, patch_norms, representatives_from_norms
from concept_scope.msiv import MsivConfig, msiv_run, upsample
from concept_scope.patching import PatchGrid
from concept_scope.ranking import (
    ConceptOutputSpace,
    RankSequence,
    build_concept_space,
    caoc_kendall,
    caoc_positional,
    descending_order,
    occluded_rank,
    position_after_replacement,
    rank,
)


@pytest.fixture
def report(capsys):
    def emit(number, name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {name}" + (f" ({detail})" if detail else ""))
        assert ok, f"criterion {number} failed: {detail}"

    return emit


def _space(column, c=0):
    column = np.asarray(column, dtype=np.float64)
    return ConceptOutputSpace(c, "all", list(range(len(column))), np.stack([column, -column], axis=1))


def test_01_synthetic_end_to_end(report, tmp_path):
    start = time.process_time()
    bundle = load_model_bundle(toymodels.quadrant_model(tmp_path))
    model = CachedModel(bundle)
    imgs = [toymodels.quadrant_image(32, tl, br=max(tl // 4, 8)) for tl in toymodels.CLASS0_TL]
    space = build_concept_space(model, imgs, list(range(8)), 0)
    init = rank(space).position(0)
    occluded = imgs[0].copy()
    occluded[:16, :16] = 0
    _, demoted = occluded_rank(space, 0, model.logits([occluded])[0])
    res = msiv_run(model, space, 0, imgs[0], MsivConfig())
    elapsed = time.process_time() - start
    level1 = res.level_scores(1)
    share = res.importance[:4, :4].sum() / res.importance.sum()
    ok = (init, demoted) == (0, 7) and np.array_equal(level1, [[7, 0], [0, 0]]) and share >= 0.95 and elapsed < 10
    report(1, "synthetic end-to-end oracle", ok,
           f"level-1 {level1.ravel().tolist()}, top-left mass {share:.3f}, {elapsed:.2f}s CPU")


def test_02_noop_invariance(report):
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(2, 17))
        column = rng.integers(-3, 4, n).astype(float)  # many ties
        space = _space(column)
        j = int(rng.integers(n))
        new = np.array([column[j], rng.normal()])  # other classes may move, class c does not
        before = rank(space)
        after, pos = occluded_rank(space, j, new)
        if caoc_positional(before.position(j), pos) != 0 or caoc_kendall(before, after) != 1.0:
            bad += 1
    report(2, "no-op occlusion invariance", bad == 0, f"1000 trials, {bad} violations")


def _kendall_oracle(a, b):
    pos_b = {x: i for i, x in enumerate(b)}
    conc = disc = 0
    for x, y in itertools.combinations(a, 2):  # x before y in a
        if pos_b[x] < pos_b[y]:
            conc += 1
        else:
            disc += 1
    return (conc - disc) / (conc + disc)


def test_03_ranking_oracle(report):
    rng = np.random.default_rng(3)
    worst_pos, worst_tau = 0, 0.0
    for _ in range(10_000):
        n = int(rng.integers(2, 9))
        column = rng.integers(0, 6, n).astype(float)
        j = int(rng.integers(n))
        new_value = float(rng.integers(-1, 7))
        # exhaustive re-sort: python sort on (-value, index) keys
        before = [i for _, i in sorted((-v, i) for i, v in enumerate(column))]
        changed = column.copy()
        changed[j] = new_value
        after = [i for _, i in sorted((-v, i) for i, v in enumerate(changed))]
        expected = abs(before.index(j) - after.index(j))
        init = int(np.flatnonzero(descending_order(column) == j)[0])
        got = caoc_positional(init, position_after_replacement(column, j, new_value))
        worst_pos = max(worst_pos, abs(got - expected))
        tau = caoc_kendall(RankSequence(list(descending_order(column))), list(descending_order(changed)))
        worst_tau = max(worst_tau, abs(tau - _kendall_oracle(before, after)))
    ok = worst_pos == 0 and worst_tau <= 1e-12
    report(3, "ranking oracle", ok, f"10000 trials, max |dpos| {worst_pos}, max |dtau| {worst_tau:.1e}")


def test_04_representative_dimension(report):
    grid = PatchGrid(224, 56)
    reps = representatives_from_norms([np.zeros((3, len(grid)))] * 512, 5, grid)
    small = all(
        len(representatives_from_norms([np.zeros((1, 4))] * nb, t, PatchGrid(4, 2))[0]) == 2 * t * nb
        for nb in (1, 2, 7) for t in (1, 2, 4)
    )
    report(4, "representative dimension 2 * t * n_images", len(reps[0]) == 5120 and small, f"512 images, t=5 -> {len(reps[0])}")


def test_05_restrict_additivity(report, tmp_path):
    model = CachedModel(load_model_bundle(toymodels.quadrant_model(tmp_path)))
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
        s_p = int(rng.choice([4, 8, 16]))
        norms = patch_norms(model, img, MageConfig(s_p, 1))
        whole = np.abs(model.features([img])[0].astype(np.float64)).sum(axis=(1, 2))
        rel = np.abs(norms.sum(axis=1) - whole) / np.maximum(whole, 1e-12)
        worst = max(worst, float(rel.max()))
    report(5, "restrict-mode L1 additivity", worst <= 1e-5, f"20 images, max rel err {worst:.1e}")


def test_06_kmeans(report):
    rng = np.random.default_rng(6)
    bad = 0
    for _ in range(100):
        n = int(rng.integers(3, 65))
        dim = int(rng.integers(1, 11))
        X = rng.integers(0, 5, (n, dim)).astype(float) if rng.random() < 0.5 else rng.normal(size=(n, dim))
        k = int(rng.integers(2, min(n, 8) + 1))
        part = kmeans(X, k, seed=int(rng.integers(1 << 30)))
        monotone = all(b <= a for a, b in zip(part.history, part.history[1:]))
        d2 = ((X[:, None] - part.centroids[None]) ** 2).sum(axis=2)
        nearest = np.all(d2[np.arange(n), part.labels] <= d2.min(axis=1))
        bad += not (monotone and nearest and part.converged)
    a = rng.normal(0, 1, (20, 2))
    b = rng.normal(0, 1, (20, 2)) + 100
    labels = kmeans(np.vstack([a, b]), 2, seed=0).labels
    truth = np.repeat([0, 1], 20)
    mis = min(int((labels != truth).sum()), int((labels != 1 - truth).sum()))
    report(6, "k-means fixpoint, monotonicity, two blobs", bad == 0 and mis == 0,
           f"100 instances, {bad} violations, {mis} blob misassignments")


def _audit(result) -> bool:
    """Every nonzero contribution sits inside a cell selected at each coarser level."""
    dim = result.dim
    for rec in result.levels:
        ys, xs = np.nonzero(rec.contribution)
        for prev in result.levels[: rec.level - 1]:
            u = dim // 2 ** prev.level
            allowed = {tuple(c) for c in prev.selected}
            if any((y // u, x // u) not in allowed for y, x in zip(ys, xs)):
                return False
    return True


def test_07_quadtree_containment(report, tmp_path):
    rng = np.random.default_rng(7)
    bad = nonzero_levels = 0
    for m in range(50):
        weights = rng.uniform(-1, 1, (int(rng.integers(2, 5)), 3))
        bundle = load_model_bundle(toymodels.channel_sum_model(
            tmp_path / f"m{m}", weights, pool=int(rng.choice([2, 4])), head_bias=rng.normal(size=2)
        ))
        model = CachedModel(bundle)
        n = int(rng.integers(4, 10))
        imgs = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(n)]
        space = build_concept_space(model, imgs, list(range(n)), 0)
        cfg = MsivConfig(float(rng.choice([0.25, 0.5, 0.75, 0.9])), int(rng.choice([4, 8])),
                         str(rng.choice(["caoc", "kendall", "pd"])))
        target = int(rng.integers(n))
        res = msiv_run(model, space, target, imgs[target], cfg)
        nonzero_levels += sum(bool(r.contribution.any()) for r in res.levels[1:])
        bad += not _audit(res)
    report(7, "quadtree containment audit", bad == 0, f"50 models, {bad} violations, {nonzero_levels} deep levels audited")


class _Affine:
    """Wraps a model, applying x -> 2x + 1 to one logit."""

    def __init__(self, model, c):
        self.model, self.bundle, self.c = model, model.bundle, c

    def logits(self, images, mask=None, keys=None):
        out = self.model.logits(images, mask, keys).astype(np.float64)
        out[:, self.c] = 2 * out[:, self.c] + 1
        return out


def test_08_monotone_transform(report, tmp_path):
    bundle = load_model_bundle(toymodels.channel_sum_model(tmp_path, np.vstack([np.eye(3), toymodels.GRAY[None]])))
    base = CachedModel(bundle)
    moved = _Affine(base, 0)
    rng = np.random.default_rng(8)
    ok, pd_changed = True, False
    for _ in range(5):
        imgs = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(8)]
        s1 = build_concept_space(base, imgs, list(range(8)), 0)
        s2 = build_concept_space(moved, imgs, list(range(8)), 0)
        ok &= rank(s1).order == rank(s2).order
        j = int(rng.integers(8))
        occ = imgs[j].copy()
        occ[:16] = 0
        a_seq, a_pos = occluded_rank(s1, j, base.logits([occ])[0])
        b_seq, b_pos = occluded_rank(s2, j, moved.logits([occ])[0])
        ok &= a_pos == b_pos and caoc_kendall(rank(s1), a_seq) == caoc_kendall(rank(s2), b_seq)
        r1 = msiv_run(base, s1, j, imgs[j], MsivConfig(metric="caoc"))
        r2 = msiv_run(moved, s2, j, imgs[j], MsivConfig(metric="caoc"))
        ok &= [r.selected for r in r1.levels] == [r.selected for r in r2.levels]
        p1 = msiv_run(base, s1, j, imgs[j], MsivConfig(metric="pd"))
        p2 = msiv_run(moved, s2, j, imgs[j], MsivConfig(metric="pd"))
        pd_changed |= p1.levels[0].scores != p2.levels[0].scores
    report(8, "x -> 2x+1 invariance", ok and pd_changed, f"rank/CaOC/selection invariant={ok}, PD changed={pd_changed}")


def test_09_faithfulness(report, tmp_path):
    model = CachedModel(load_model_bundle(toymodels.quadrant_model(tmp_path)))
    rng = np.random.default_rng(9)
    imgs, classes, responsible, opposite = [], [], [], []
    tl = np.zeros((32, 32), bool)
    tl[:16, :16] = True
    br = np.zeros((32, 32), bool)
    br[16:, 16:] = True
    for _ in range(20):
        strong, weak = int(rng.integers(120, 256)), int(rng.integers(8, 100))
        if rng.random() < 0.5:  # class 0 lives in the top-left quadrant
            imgs.append(toymodels.quadrant_image(32, strong, br=weak))
            classes.append(0)
            responsible.append(tl)
            opposite.append(br)
        else:
            imgs.append(toymodels.quadrant_image(32, weak, br=strong))
            classes.append(1)
            responsible.append(br)
            opposite.append(tl)
    hit = faithfulness(model, imgs, responsible, classes).fraction_class_change
    miss = faithfulness(model, imgs, opposite, classes).fraction_class_change
    report(9, "faithfulness sanity", hit == 1.0 and miss == 0.0, f"responsible {hit:.0%}, opposite {miss:.0%}")


def _localize_oracle(m, parts, bbox, size):
    up = upsample(m, size)
    w = tot_x = tot_y = 0.0
    for y in range(size):
        for x in range(size):
            v = up[y, x]
            if v:
                w += v
                tot_x += v * (x + 0.5)
                tot_y += v * (y + 0.5)
    cx, cy = tot_x / w, tot_y / w
    x0, y0, x1, y1 = bbox
    if not (x0 <= cx <= x1 and y0 <= cy <= y1):
        return BACKGROUND
    best, best_key = None, None
    for name, px, py, vis in parts:
        if not vis:
            continue
        key = ((px - cx) ** 2 + (py - cy) ** 2, CUB_PARTS.index(name))
        if best_key is None or key < best_key:
            best, best_key = name, key
    return best


def test_10_localization_geometry(report):
    rng = np.random.default_rng(10)
    bad = 0
    for _ in range(200):
        size = int(rng.choice([32, 64]))
        side = int(rng.choice([2, 4, 8, 16]))
        m = np.where(rng.random((side, side)) < 0.3, rng.integers(1, 5, (side, side)), 0).astype(float)
        if not m.any():
            m[int(rng.integers(side)), int(rng.integers(side))] = 1.0
        names = rng.choice(CUB_PARTS, size=int(rng.integers(1, 8)), replace=False)
        parts = [(str(nm), float(rng.integers(0, size)), float(rng.integers(0, size)), bool(rng.random() < 0.8))
                 for nm in names]
        parts[0] = (*parts[0][:3], True)
        xa, xb = sorted(rng.integers(0, size + 1, 2))
        ya, yb = sorted(rng.integers(0, size + 1, 2))
        bbox = (float(xa), float(ya), float(xb), float(yb))
        got = localize(m, PartAnnotations(parts, bbox), size)
        bad += got != _localize_oracle(m, parts, bbox, size)
    report(10, "localization geometry oracle", bad == 0, f"200 instances, {bad} mismatches")


def test_11_determinism(report, tmp_path):
    a = toymodels.quadrant_fixture(tmp_path / "a")["root"]
    b = tmp_path / "b"
    shutil.copytree(a, b)
    for root, cache in ((a, "cache_a"), (b, "cache_b")):
        cfg, base = pipeline.load_config(root / "config.json", {"cache_dir": str(tmp_path / cache)})
        pipeline.run_pipeline(cfg, base)
    files = sorted(p.relative_to(a / "artifacts") for p in (a / "artifacts").rglob("*") if p.is_file())
    other = sorted(p.relative_to(b / "artifacts") for p in (b / "artifacts").rglob("*") if p.is_file())
    same = files == other and all(filecmp.cmp(a / "artifacts" / f, b / "artifacts" / f, shallow=False) for f in files)
    report(11, "byte-identical artifacts across runs", same and len(files) > 0, f"{len(files)} files compared")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
