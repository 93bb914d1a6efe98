import numpy as np
import pytest
from scipy import ndimage

from fsgfa import data as D
from fsgfa.imaging import warp_affine
from fsgfa.misalign import BBox
from fsgfa.shapeprior import KeypointSet


@pytest.fixture(scope="module")
def face():
    spec = D.make_identities(1, 0)[0]
    return spec, D.render_identity_sample(spec, D.Jitter(), np.random.default_rng(0))


def test_zero_jitter_renders_identically():
    spec = D.IdentitySpec.from_seed(3)
    a = D.render_identity_sample(spec, D.Jitter.none(), np.random.default_rng(1))
    b = D.render_identity_sample(spec, D.Jitter.none(), np.random.default_rng(2))
    assert a[0].tobytes() == b[0].tobytes()
    np.testing.assert_array_equal(a[1].points, b[1].points)


def test_same_seed_same_render():
    spec = D.IdentitySpec.from_seed(4)
    a = D.render_identity_sample(spec, D.Jitter(), np.random.default_rng(9))
    b = D.render_identity_sample(spec, D.Jitter(), np.random.default_rng(9))
    assert a[0].tobytes() == b[0].tobytes() and a[2] == b[2]


@pytest.mark.parametrize("seed", range(5))
def test_eye_keypoints_inside_rendered_eyes(seed):
    spec = D.make_identities(5, 1)[seed]
    img, kps, _ = D.render_identity_sample(spec, D.Jitter.none(), np.random.default_rng(seed))
    eye_rgb = np.rint(spec.color("eye")).astype(int)
    mask = np.all(np.abs(img.astype(int) - eye_rgb) <= 2, axis=-1)
    assert mask.sum() > 10
    dist = ndimage.distance_transform_edt(~mask)
    for x, y in kps.points[36:48]:
        assert dist[int(round(y)), int(round(x))] <= 1.0


def test_box_encloses_jaw_tightly(face):
    _, (img, kps, box) = face
    jaw = kps.points[:17]
    assert box.x1 <= jaw[:, 0].min() + 0.5 <= box.x1 + 3
    assert box.x2 - 3 <= jaw[:, 0].max() + 0.5 <= box.x2
    assert jaw[:, 1].max() + 0.5 <= box.y2


def test_identities_are_separated():
    specs = D.make_identities(30, 5)
    units = np.array([s.unit() for s in specs])
    gaps = np.abs(units[:, None] - units[None]).max(axis=-1)
    assert gaps[~np.eye(30, dtype=bool)].min() >= D.MIN_SEPARATION
    assert D.make_identities(30, 5) == specs


def test_aligned_crop_size(face):
    _, (img, kps, box) = face
    assert D.well_aligned_crop(img, kps, box, 224).shape == (224, 224, 3)
    assert D.well_aligned_crop(img, kps, box, 112).shape == (112, 112, 3)


def _eye_angle_deg(points):
    l, r = points[36:42].mean(axis=0), points[42:48].mean(axis=0)
    return np.degrees(np.arctan2(r[1] - l[1], r[0] - l[0]))


def test_canonical_pose_is_a_fixed_point(face):
    _, (img, kps, box) = face
    _, m = D.well_aligned_crop(img, kps, box, 112, return_transform=True)
    aligned = kps.transformed(m, (112, 112))
    t = D.alignment_transform(aligned, 112)
    assert abs(np.degrees(t.rotation)) < 1
    assert 0.99 <= t.scale <= 1.01


def test_rotated_source_is_straightened(face):
    _, (img, kps, box) = face
    c = np.array([71.5, 71.5])
    th = np.deg2rad(15)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    m = np.hstack([rot, (c - rot @ c)[:, None]])
    rotated = kps.transformed(m, kps.frame)
    assert abs(_eye_angle_deg(rotated.points) - _eye_angle_deg(kps.points) - 15) < 1e-6
    inv = np.linalg.inv(np.vstack([m, [0, 0, 1]]))[:2]
    rot_img = warp_affine(img, inv, 144, 144)
    _, m2 = D.well_aligned_crop(rot_img, rotated, box, 112, return_transform=True)
    assert abs(_eye_angle_deg(rotated.transformed(m2, (112, 112)).points)) < 1


def test_collinear_reference_points_rejected():
    pts = np.zeros((68, 2))
    pts[:, 0] = np.arange(68)
    with pytest.raises(ValueError, match="collinear"):
        D.well_aligned_crop(np.zeros((80, 80, 3)), KeypointSet(pts, (80, 80)), None, 112)


def test_random_crop_size_and_reproducibility(face):
    _, (img, kps, box) = face
    a = D.random_crop(img, box, np.random.default_rng(3), 224)
    b = D.random_crop(img, box, np.random.default_rng(3), 224)
    assert a.shape == (224, 224, 3) and np.array_equal(a, b)
    assert D.random_crop(img, box, np.random.default_rng(3), 112).shape == (112, 112, 3)


@pytest.mark.parametrize("out, span", [(224, 32), (112, 16)])
def test_random_crop_offsets_cover_range(face, out, span):
    _, (img, kps, box) = face
    rng = np.random.default_rng(0)
    offsets = []
    for _ in range(400):
        _, m = D.random_crop(img, box, rng, out, return_transform=True)
        b = box.expand(10)
        big = out * 256 // 224
        offsets.append(-(m[0, 2] - ((0.5 - b.x1) * big / b.width - 0.5)))
    offsets = np.rint(offsets)
    assert offsets.min() == 0 and offsets.max() == span


def test_random_crop_transform_tracks_pixels():
    img = np.full((100, 120, 3), 50, np.uint8)
    img[40:43, 60:63] = 255  # 3x3 spot centred at (61, 41)
    box = BBox(30, 20, 90, 80)
    crop, m = D.random_crop(img, box, np.random.default_rng(5), 112, return_transform=True)
    expect = m @ np.array([61.0, 41.0, 1.0])
    peak = np.unravel_index(crop[..., 0].argmax(), crop.shape[:2])
    assert abs(peak[1] - expect[0]) <= 1 and abs(peak[0] - expect[1]) <= 1


def test_normalize_values():
    assert D.normalize(np.array([127.5]))[0] == 0
    v = D.normalize(np.array([0, 255], np.uint8))
    assert v[1] == 0.99609375 and v[0] == -0.99609375


def test_normalize_round_trip_all_bytes():
    vals = np.arange(256, dtype=np.uint8).reshape(16, 16, 1).repeat(3, axis=2)
    t = D.normalize(vals)
    assert t.shape == (3, 16, 16) and t.dtype == np.float32
    assert D.denormalize(t).tobytes() == vals.tobytes()
    assert D.denormalize(np.full((3, 2, 2), 5.0)).max() == 255


def test_generate_dataset_layout_and_determinism(tmp_path):
    kw = dict(identities=3, renders=2, seed=7, val_identities=2, val_renders=2, canvas=96)
    m = D.generate_dataset(tmp_path / "a", **kw)
    D.generate_dataset(tmp_path / "b", **kw)
    assert D.tree_digest(tmp_path / "a") == D.tree_digest(tmp_path / "b")
    assert len(m.split("train")) == 6 and len(m.split("val")) == 4
    assert (tmp_path / "a/train/id_2/img_1.png").exists()
    assert (tmp_path / "a/val/id_0/img_0.kps").read_text().count("\n") == 68
    assert len((tmp_path / "a/train/id_0/img_0.bbox").read_text().split()) == 4
    back = D.DatasetManifest.read(tmp_path / "a")
    assert back.records == m.records and back.num_classes() == 3
    with pytest.raises(FileExistsError):
        D.generate_dataset(tmp_path / "a", **kw)


def test_val_identities_are_distinct_people(tmp_path):
    m = D.generate_dataset(tmp_path, identities=2, renders=1, val_identities=2, val_renders=1, canvas=96)
    train = [m.load(r)[0] for r in m.split("train")]
    val = [m.load(r)[0] for r in m.split("val")]
    assert all(not np.array_equal(a, b) for a in train for b in val)


def test_counting_twenty_by_thirty(tmp_path):
    m = D.generate_dataset(tmp_path, identities=20, renders=30, val_identities=0, canvas=64)
    assert len(m.split("train")) == 600 and m.num_classes() == 20


def test_manifest_rejects_missing_files(tmp_path):
    D.generate_dataset(tmp_path, identities=1, renders=1, val_identities=0, canvas=64)
    (tmp_path / "train/id_0/img_0.kps").unlink()
    with pytest.raises(FileNotFoundError):
        D.DatasetManifest.read(tmp_path)


def test_pair_source_coherence(tmp_path):
    m = D.generate_dataset(tmp_path, identities=2, renders=2, val_identities=0, canvas=144)
    src = D.PairSource(m, "train", out=112)
    p = src.pair(1, np.random.default_rng(0))
    q = src.pair(1, np.random.default_rng(0))
    assert p.x_w.shape == p.x_r.shape == (3, 112, 112)
    assert np.array_equal(p.x_r, q.x_r) and p.label == src.label(1)
    for arr in (p.x_w, p.x_r):
        assert np.abs(arr).max() <= D.NORM_LIMIT
    # the well-aligned crop re-derives from the stored source
    img, kps, box = m.load(m.split("train")[1])
    expect = D.normalize(np.clip(np.rint(D.well_aligned_crop(img, kps, box, 112)), 0, 255).astype(np.uint8))
    np.testing.assert_array_equal(p.x_w, expect)
