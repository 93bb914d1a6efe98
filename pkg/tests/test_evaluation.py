import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsgfa import evaluation as E
from fsgfa.misalign import preset


def brute_verify(dist, same, fold):
    """Exhaustive sweep: every candidate threshold, explicit loops, first best wins."""
    accs = []
    for f in sorted(set(fold)):
        train = [(d, s) for d, s, k in zip(dist, same, fold) if k != f]
        test = [(d, s) for d, s, k in zip(dist, same, fold) if k == f]
        values = sorted({d for d, _ in train})
        cands = [values[0] - 1.0] + [(a + b) / 2 for a, b in zip(values, values[1:])] + [values[-1] + 1.0]
        best_t, best_correct = None, -1
        for t in cands:
            correct = sum((d <= t) == s for d, s in train)
            if correct > best_correct:
                best_t, best_correct = t, correct
        accs.append(sum((d <= best_t) == s for d, s in test) / len(test))
    return accs


def brute_auc(dist, same):
    pos = [d for d, s in zip(dist, same) if s]
    neg = [d for d, s in zip(dist, same) if not s]
    wins = sum(1.0 if p < n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_roc(dist, same):
    """(FPR, TPR) at "no pair accepted" and then at every distinct distance."""
    pos = sum(1 for s in same if s)
    neg = len(same) - pos
    points = [(0.0, 0.0)]
    for t in sorted(set(dist)):
        tp = sum(1 for d, s in zip(dist, same) if s and d <= t)
        fp = sum(1 for d, s in zip(dist, same) if not s and d <= t)
        points.append((fp / neg, tp / pos))
    return points


def test_cosine_distance_endpoints():
    a = np.array([1.0, 0.0, 0.0])
    assert E.cosine_distance(a, a) == 0
    assert E.cosine_distance(a, np.array([0.0, 1.0, 0.0])) == 1
    assert E.cosine_distance(a, -a) == 2


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_cosine_distance_symmetric(seed):
    f = E.unit_normalize(np.random.default_rng(seed).normal(size=(2, 8)))
    assert E.cosine_distance(f[0], f[1]) == E.cosine_distance(f[1], f[0])
    assert 0 <= E.cosine_distance(f[0], f[1]) <= 2


def test_perfect_separation():
    dist = np.r_[np.linspace(0, 0.4, 10), np.linspace(0.6, 1, 10)]
    same = np.r_[np.ones(10, bool), np.zeros(10, bool)]
    fold = np.tile(np.arange(10), 2)
    r = E.verify_10fold(dist, same, fold)
    assert r.mean == 1.0 and r.std == 0.0
    curve = E.roc_curve(dist, same)
    assert (0.0, 1.0) in curve and curve[0] == (0.0, 0.0) and curve[-1] == (1.0, 1.0)
    assert E.auc(dist, same) == 1.0


@pytest.mark.parametrize("seed", range(20))
def test_verify_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = 20 if seed % 2 else 50
    dist = np.round(rng.uniform(0, 2, n), 1)  # coarse rounding forces ties
    same = rng.uniform(size=n) < 0.5
    fold = np.arange(n) % 10
    r = E.verify_10fold(dist, same, fold)
    assert r.fold_accuracy.tolist() == brute_verify(dist.tolist(), same.tolist(), fold.tolist())
    assert r.mean == pytest.approx(np.mean(r.fold_accuracy))


@pytest.mark.parametrize("seed", range(20))
def test_auc_matches_pairwise_count(seed):
    rng = np.random.default_rng(seed)
    dist = np.round(rng.uniform(0, 2, 50), 1)
    same = rng.uniform(size=50) < 0.5
    same[:2] = [True, False]
    assert E.auc(dist, same) == brute_auc(dist, same)


@pytest.mark.parametrize("seed", range(20))
def test_roc_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 51))
    dist = np.round(rng.uniform(0, 2, n), 1)  # coarse grid forces ties
    same = rng.random(n) < 0.5
    same[:2] = [True, False]
    assert E.roc_curve(dist, same) == brute_roc(list(dist), list(same))


def test_roc_monotone_and_resampled():
    rng = np.random.default_rng(0)
    dist, same = rng.uniform(0, 2, 200), rng.uniform(size=200) < 0.5
    curve = E.roc_curve(dist, same)
    xs, ys = map(np.array, zip(*curve))
    assert np.all(np.diff(xs) >= 0) and np.all(np.diff(ys) >= 0)
    grid = E.roc_curve(dist, same, points=11)
    assert len(grid) == 11 and grid[0][0] == 0 and grid[-1] == (1.0, 1.0)


def test_random_features_are_near_chance():
    accs, aucs = [], []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        feats = E.unit_normalize(rng.normal(size=(100, 16)))
        labels = rng.integers(0, 10, 100)
        pairs = E.make_pairs(labels, 200, 10, seed)
        d = pairs.distances(feats)
        accs.append(E.verify_10fold(d, pairs.same, pairs.fold).mean)
        aucs.append(E.auc(d, pairs.same))
    assert 0.4 <= np.mean(accs) <= 0.6
    assert all(0.4 <= a <= 0.6 for a in aucs)


def test_held_out_fold_never_sets_its_threshold():
    rng = np.random.default_rng(1)
    dist, same = rng.uniform(0, 2, 100), rng.uniform(size=100) < 0.5
    fold = np.arange(100) % 10
    base = E.verify_10fold(dist, same, fold)
    poisoned = dist.copy()
    poisoned[fold == 3] = np.where(same[fold == 3], 5.0, -5.0)  # adversarial fold 3
    r = E.verify_10fold(poisoned, same, fold)
    assert r.thresholds[3] == base.thresholds[3]
    assert r.fold_accuracy[3] == 0.0


def test_ties_count_as_match():
    dist = np.array([0.5, 0.5])
    assert E.accuracy_at(dist, np.array([True, True]), 0.5) == 1.0


def test_scale_invariance_of_protocol():
    rng = np.random.default_rng(2)
    raw = rng.normal(size=(60, 8))
    labels = np.repeat(np.arange(6), 10)
    pairs = E.make_pairs(labels, 60, 10, 0)
    d1 = pairs.distances(E.unit_normalize(raw))
    d2 = pairs.distances(E.unit_normalize(raw * 7.5))
    np.testing.assert_allclose(d1, d2, atol=1e-12)
    r1 = E.verify_10fold(d1, pairs.same, pairs.fold)
    r2 = E.verify_10fold(d2, pairs.same, pairs.fold)
    assert r1.fold_accuracy.tolist() == r2.fold_accuracy.tolist()


def test_empty_or_single_fold_rejected():
    with pytest.raises(ValueError):
        E.verify_10fold(np.array([0.1, 0.2]), np.array([True, False]), np.array([0, 0]))


def test_make_pairs_balanced_folds(tmp_path):
    labels = np.repeat(np.arange(10), 12)
    pairs = E.make_pairs(labels, 600, 10, 0)
    assert len(pairs) == 600
    for f in range(10):
        sel = pairs.fold == f
        assert sel.sum() == 60 and pairs.same[sel].sum() == 30
    assert np.all((labels[pairs.a] == labels[pairs.b]) == pairs.same)
    names = [f"img{i}" for i in range(len(labels))]
    E.write_pairs(tmp_path / "p.tsv", pairs, names)
    back = E.read_pairs(tmp_path / "p.tsv", names)
    for field in ("a", "b", "same", "fold"):
        np.testing.assert_array_equal(getattr(back, field), getattr(pairs, field))


def test_unit_normalize_rejects_zero():
    with pytest.raises(ValueError):
        E.unit_normalize(np.zeros((2, 3)))
    f = E.unit_normalize(np.random.default_rng(0).normal(size=(5, 4)))
    assert np.allclose(np.linalg.norm(f, axis=1), 1, atol=1e-6)


def test_identify_trivial_cases():
    eye = np.eye(4)
    assert E.identify_rank1(eye, [0, 1, 2, 3], eye, [0, 1, 2, 3]) == 1.0
    gallery = np.eye(6)[:3]
    distractors = np.eye(6)[3:]
    assert E.identify_rank1(gallery, [0, 1, 2], gallery, [0, 1, 2], distractors) == 1.0
    with pytest.raises(ValueError):
        E.identify_rank1(np.zeros((0, 3)), [], eye[:1, :3], [0])


def test_identify_matches_exhaustive_scan():
    rng = np.random.default_rng(3)
    g = E.unit_normalize(rng.normal(size=(8, 5)))
    gl = np.arange(8) % 4
    p = E.unit_normalize(rng.normal(size=(10, 5)))
    pl = rng.integers(0, 4, 10)
    d = E.unit_normalize(rng.normal(size=(5, 5)))
    allg, alll = np.vstack([g, d]), list(gl) + [-1] * 5
    hits = 0
    for probe, label in zip(p, pl):
        best = min(range(len(allg)), key=lambda k: E.cosine_distance(probe, allg[k]))
        hits += alll[best] == label
    assert E.identify_rank1(g, gl, p, pl, d) == hits / 10


def test_crop_mode_parsing():
    assert E.parse_crop_mode("m6").margin == preset(6)
    assert E.parse_crop_mode("whole").kind == "whole"
    assert E.parse_crop_mode("margin:1,1,1,1").margin.as_tuple() == (1, 1, 1, 1)
    for bad in ("m9", "margin:1,2", "sideways"):
        with pytest.raises(ValueError):
            E.parse_crop_mode(bad)


def test_extract_features_modes(tmp_path):
    from fsgfa import data as D
    from fsgfa import networks as N

    m = D.generate_dataset(tmp_path, identities=1, renders=1, val_identities=1, val_renders=3)
    samples = E.load_samples(m, m.split("val"))
    b = N.build(N.DESK, 0, components=N.TEST_COMPONENTS)
    for mode in ("optimal", "m2", "random", "whole"):
        f = E.extract_features(b, samples, E.parse_crop_mode(mode), seed=4)
        assert f.shape == (3, 128)
        assert np.allclose(np.linalg.norm(f, axis=1), 1, atol=1e-6)
    r1 = E.extract_features(b, samples, E.parse_crop_mode("random"), seed=4)
    r2 = E.extract_features(b, samples, E.parse_crop_mode("random"), seed=4)
    np.testing.assert_array_equal(r1, r2)
    assert b.F.training  # mode restored


def test_whole_mode_ignores_box():
    img = np.random.default_rng(0).integers(0, 256, (112, 112, 3)).astype(np.uint8)
    from fsgfa.misalign import BBox
    a = E.eval_crop(img, None, BBox(0, 0, 5, 5), E.CropMode("whole"), 112)
    np.testing.assert_array_equal(a, img)


def test_reports(tmp_path):
    r = E.VerificationResult(np.array([0.9, 1.0]), np.array([0.5, 0.5]))
    E.write_accuracy_csv(tmp_path / "acc.csv", {"m1": r, "whole": r})
    rows = (tmp_path / "acc.csv").read_text().splitlines()
    assert rows == ["mode,mean,std", "m1,95.00,5.00", "whole,95.00,5.00"]
    curve = [(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)]
    E.write_roc_csv(tmp_path / "roc.csv", curve)
    E.write_roc_svg(tmp_path / "roc.svg", {"model": curve})
    E.write_roc_svg(tmp_path / "roc2.svg", {"model": curve})
    assert (tmp_path / "roc.svg").read_bytes() == (tmp_path / "roc2.svg").read_bytes()
    assert b"<svg" in (tmp_path / "roc.svg").read_bytes()
