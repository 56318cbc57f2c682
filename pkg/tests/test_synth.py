import numpy as np
import pytest
from hypothesis import given, strategies as st

from shoeprint_lab import imaging as I
from shoeprint_lab import synth as S

from conftest import tree_digest


# ---------------------------------------------------------------- profile

def test_profile_examples():
    for g in S.GENDERS:
        w = lambda a, r: S.age_weight_profile(a, g, r)
        assert w(40, 1) >= w(20, 1) and w(40, 1) >= w(70, 1)
        assert w(70, 2) >= w(20, 2)
    gap = lambda a: S.age_weight_profile(a, "female", 6) - S.age_weight_profile(a, "male", 6)
    assert gap(60) > gap(20)


@given(age=st.floats(7, 80), region=st.integers(0, 7))
def test_profile_shape(age, region):
    w = S.age_weight_profile(age, "male", region)
    assert w >= 0
    if region in S.INNER_SITES:
        assert w <= S.age_weight_profile(40, "male", region)
    elif age >= 40:
        assert w == S.age_weight_profile(40, "male", region)


def test_profile_errors():
    with pytest.raises(ValueError):
        S.age_weight_profile(6, "male", 0)
    with pytest.raises(ValueError):
        S.age_weight_profile(30, "other", 0)
    with pytest.raises(ValueError):
        S.age_weight_profile(30, "male", 8)
    assert len(S.profile_table()) == 74 * 2 * 8


# ---------------------------------------------------------------- single prints

def test_generate_print_deterministic_and_mirrored():
    cfg = S.SynthConfig()
    p = S.make_subject(3, 1, cfg)
    a, b = S.generate_print(p, "left", cfg), S.generate_print(p, "left", cfg)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    clean_l = S.generate_print(p, "left", cfg, noise=False).pixels.astype(int)
    clean_r = S.generate_print(p, "right", cfg, noise=False).pixels.astype(int)
    assert np.abs(np.fliplr(clean_l) - clean_r).max() <= 1
    noisy = np.abs(np.fliplr(a.pixels.astype(int)) - S.generate_print(p, "right", cfg).pixels)
    # difference of two independent noise draws has std sigma * sqrt(2)
    assert np.mean(noisy > 3 * np.sqrt(2) * cfg.noise_sigma + 1) < 0.01
    with pytest.raises(ValueError):
        S.generate_print(p, "pair", cfg)


def test_generated_print_survives_segmentation():
    cfg = S.SynthConfig()
    img = S.generate_print(S.make_subject(0, 0, cfg), "right", cfg)
    mask = I.threshold_mask(img, cfg.threshold)
    assert len(I.find_contours(mask)) == 1
    assert mask.sum() == np.count_nonzero(img.pixels)


def _region_mean(cohort, cfg, region):
    return np.mean([I.region_stats(S.generate_print(p, "left", cfg).pixels, "left")[region].mean_pressure
                    for p in cohort])


def test_older_cohort_presses_harder_on_r2():
    cfg = S.SynthConfig()
    young = [S.make_subject(i, 4, cfg, age=20) for i in range(500)]
    old = [S.make_subject(i, 4, cfg, age=40) for i in range(500)]
    assert _region_mean(old, cfg, 2) > _region_mean(young, cfg, 2)


def test_age_histogram_mode():
    cfg = S.SynthConfig()
    ages = [p.age for p in S.make_cohort(5000, 5, cfg)]
    assert min(ages) >= 7 and max(ages) <= 80
    assert 18 <= np.bincount(ages).argmax() <= 30


def test_subject_validation():
    with pytest.raises(ValueError):
        S.make_cohort(0, 1)
    with pytest.raises(ValueError):
        S.SubjectProfile(0, 90, "male", 170, 70, 0)


# ---------------------------------------------------------------- cohort-level design checks

@pytest.fixture(scope="module")
def uniform_cohort():
    cfg = S.SynthConfig(age_dist="uniform")
    prints = []
    for p in S.make_cohort(1000, 3, cfg):
        prints.append((p.age, I.segment(S.generate_print(p, "left", cfg), cfg.canvas_hw, cfg.threshold).pixels))
    return prints


def test_cohort_trends(uniform_cohort):
    groups = {}
    for age, px in uniform_cohort:
        for c in I.categories_for(age):
            groups.setdefault(c.label, []).append(px)
    curve = I.region_pressure_curve({k: I.superimpose(groups[k]) for k in sorted(groups)}, "left")
    by = {(r.region, r.category): r.mean_pressure for r in curve}
    cats = ["catA", "catB", "catC", "catD", "catE"]
    for region in (2, 4, 6, 7):
        vals = [by[(region, c)] for c in cats[:3]]
        assert vals == sorted(vals)
    for region in (1, 3):
        vals = [by[(region, c)] for c in cats]
        assert max(vals) == by[(region, "catC")]


def test_age_is_linearly_recoverable(uniform_cohort):
    feats = np.array([[s.mean_pressure for s in I.region_stats(px, "left")] for _, px in uniform_cohort])
    ages = np.array([a for a, _ in uniform_cohort], dtype=float)
    design = np.c_[feats, np.ones(len(ages))]
    w, *_ = np.linalg.lstsq(design, ages, rcond=None)
    assert np.abs(design @ w - ages).mean() < 8


# ---------------------------------------------------------------- datasets

@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    man = S.generate_dataset(100, 9, root)
    return root, man


def test_dataset_cardinality_and_manifest(dataset):
    root, man = dataset
    assert len(man) == 200 and len(list((root / "images").glob("*.pgm"))) == 200
    text = (root / "manifest.csv").read_text()
    assert text.splitlines()[0] == ",".join(S.MANIFEST_HEADER)
    back = S.read_manifest(root / "manifest.csv")
    assert back.to_csv() == man.to_csv()
    assert man.unmatched_subjects() == []


def test_dataset_reproducible(dataset, tmp_path):
    root, _ = dataset
    S.generate_dataset(100, 9, tmp_path / "again")
    assert tree_digest(tmp_path / "again") == tree_digest(root)


def test_unwritable_dataset_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        S.generate_dataset(2, 0, blocker / "sub")


def test_split_properties(dataset):
    _, man = dataset
    where = {}
    for r in man.rows:
        where.setdefault(r.subject_id, set()).add(r.split)
    assert all(len(s) == 1 for s in where.values())
    n_val = sum(1 for s in where.values() if s == {"val"})
    n_test = sum(1 for s in where.values() if s == {"test"})
    assert abs(n_val - 10) <= 1 and abs(n_test - 20) <= 1
    with pytest.raises(ValueError):
        S.split(man, 0.5, 0.5)


def test_derived_versions(dataset, tmp_path):
    root, man = dataset
    out = S.derive_versions(man, ["C", "D", "E", "F", "G"], tmp_path, seed=1)
    assert {r.side for r in out["C"].rows} == {"left"} and {r.side for r in out["D"].rows} == {"right"}
    e = out["E"]
    assert {r.side for r in e.rows} == {"pair"} and len(e) == 100
    assert e.image(e.rows[0]).shape == (64, 64)
    f = out["F"]
    assert sum(r.gender == "male" for r in f.rows) == sum(r.gender == "female" for r in f.rows)
    counts = np.bincount([S.decade(r.age) for r in out["G"].rows])[1:]
    present = counts[counts > 0]
    assert present.max() - present.min() <= 1
    for v in ("F", "G"):
        assert all(r.provenance == "original" for r in out[v].rows if r.split == "test")
        assert any(r.provenance == "augmented" for r in out[v].rows)
    with pytest.raises(ValueError):
        S.derive_versions(man, ["Z"], tmp_path)


def test_load_arrays(dataset):
    _, man = dataset
    X, ages, genders = S.load_arrays(man, "test", "left")
    assert X.shape[1:] == (64, 32) and 0 <= X.min() and X.max() <= 1
    assert len(ages) == len(genders) == 20
    assert S.load_arrays(man, "test", "pair")[0].shape[0] == 0
