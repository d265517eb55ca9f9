import numpy as np
import pytest

from gemloc import dataset, geometry, metrics, phantom
from gemloc.errors import ConfigError, DataAccessError, DataError
from gemloc.volume import Volume, load_volume, save_volume


@pytest.fixture(scope="module")
def template():
    t, _ = phantom.build_phantom_template(phantom.PhantomConfig())
    return t


def test_config_contrast_monotonicity_enforced():
    with pytest.raises(ConfigError):
        phantom.PhantomConfig(contrast_z=(0.4, 0.3, 0.5))
    with pytest.raises(ConfigError):
        phantom.PhantomConfig(contrast_o=(0.10, 0.08, 0.12))
    phantom.PhantomConfig(contrast_o=(0.1, 0.1, 0.1))  # weakly increasing is fine


def test_zero_lesions_zero_labels(template):
    cfg = phantom.PhantomConfig(lesion_count_probs=(1.0, 0.0, 0.0, 0.0))
    rec = phantom.generate_case(0, cfg, template=template)
    assert rec.zone_labels == [0] * len(template)
    assert rec.lesions == []


def test_planted_lesion_labels_its_zone(template):
    cfg = phantom.PhantomConfig()
    zone = template.zones[7]
    les = phantom.LesionSpec(center=zone.center, grade=3, sigma=1.2)
    rec = phantom.generate_case(1, cfg, template=template, lesions=[les])
    want = [0] * len(template)
    want[7] = 3
    assert rec.zone_labels == want


def test_same_seed_bit_identical(template):
    cfg = phantom.PhantomConfig()
    a = phantom.generate_case([3, 5], cfg, template=template)
    b = phantom.generate_case([3, 5], cfg, template=template)
    assert np.array_equal(a.x_o.data, b.x_o.data)
    assert np.array_equal(a.x_z.data, b.x_z.data)
    assert a.zone_labels == b.zone_labels


def test_intensities_in_unit_range(template):
    cfg = phantom.PhantomConfig()
    for seed in range(5):
        rec = phantom.generate_case(seed, cfg, template=template)
        for vol in (rec.x_o, rec.x_z):
            assert vol.data.min() >= 0.0
            assert vol.data.max() <= 1.0
            assert np.isfinite(vol.data).all()


def test_labels_reproducible_from_lesion_geometry(template):
    cfg = phantom.PhantomConfig()
    for seed in range(8):
        rec = phantom.generate_case(seed, cfg, template=template)
        redo = phantom.labels_from_lesions(template, rec.lesions, cfg.grid)
        assert redo == rec.zone_labels
        for z in template.zones:
            if rec.zone_labels[z.id] > 0:
                assert rec.lesions  # lesion voxels exist for labeled zones


def test_modality_asymmetry_probe(template):
    """Mean zone intensity separates cancer better on x_z than on x_o."""
    cfg = phantom.PhantomConfig()
    scores_o, scores_z, truths = [], [], []
    for seed in range(100):
        rec = phantom.generate_case([11, seed], cfg, template=template)
        for z in template.zones:
            d0, h0, w0, d1, h1, w1 = z.bbox
            scores_o.append(-float(rec.x_o.data[d0:d1, h0:h1, w0:w1].mean()))
            scores_z.append(float(rec.x_z.data[d0:d1, h0:h1, w0:w1].mean()))
            truths.append(rec.zone_labels[z.id] > 0)
    auc_o = metrics.auc(scores_o, truths)
    auc_z = metrics.auc(scores_z, truths)
    assert auc_z > auc_o
    assert auc_z > 0.75  # the functional modality must carry real signal


def test_pz_tz_cover_all_zones(template):
    regions = {z.region for z in template.zones}
    assert regions <= {geometry.PZ, geometry.TZ}
    assert template.region_ids(geometry.PZ)
    assert template.region_ids(geometry.TZ)


# --- volume file format -----------------------------------------------------


def test_rvol_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    vol = Volume(rng.random((5, 6, 7)).astype(np.float32), spacing=(1.0, 0.5, 2.0))
    path = tmp_path / "x.rvol"
    save_volume(path, vol)
    back = load_volume(path)
    assert np.array_equal(back.data, vol.data)
    assert back.spacing == vol.spacing


def test_rvol_bad_magic(tmp_path):
    path = tmp_path / "bad.rvol"
    path.write_bytes(b"WRONG" + b"\x00" * 24)
    with pytest.raises(DataError):
        load_volume(path)


# --- dataset assembly -------------------------------------------------------


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("phantom_ds")
    manifest = phantom.generate_dataset(100, seed=7, out_root=root)
    return root, manifest


def test_split_counts_70_15_15(small_dataset):
    _, manifest = small_dataset
    splits = manifest["splits"]
    assert len(splits["train"]) == 70
    assert len(splits["val"]) == 15
    assert len(splits["test"]) == 15


def test_splits_disjoint_and_complete(small_dataset):
    _, manifest = small_dataset
    splits = manifest["splits"]
    all_ids = splits["train"] + splits["val"] + splits["test"]
    assert len(all_ids) == len(set(all_ids)) == 100
    assert sorted(all_ids) == [f"case_{i:04d}" for i in range(100)]


def test_strata_proportions_within_one(small_dataset):
    root, manifest = small_dataset
    store = dataset.CaseStore(root)
    grade = {cid: store.labels(cid)["max_grade"] for cid in store.case_ids("all")}
    fracs = manifest["split_fractions"]
    strata = sorted(set(grade.values()))
    for s in strata:
        n_s = sum(1 for g in grade.values() if g == s)
        for frac, split in zip(fracs, ("train", "val", "test")):
            got = sum(1 for cid in manifest["splits"][split] if grade[cid] == s)
            assert abs(got - n_s * frac) <= 1.0 + 1e-9, (s, split)


def test_dataset_reload_matches_generation(small_dataset):
    root, _ = small_dataset
    store = dataset.CaseStore(root)
    cfg = phantom.PhantomConfig()
    template, _ = phantom.build_phantom_template(cfg)
    rec = phantom.generate_case([7, 3], cfg, template=template, case_id="case_0003")
    assert np.array_equal(store.load_volume("case_0003", "anat").data, rec.x_o.data)
    assert np.array_equal(store.load_volume("case_0003", "func").data, rec.x_z.data)
    assert store.zone_labels("case_0003") == rec.zone_labels


def test_t2only_view_lists_train_cases(small_dataset):
    _, manifest = small_dataset
    assert manifest["train_t2only"] == manifest["splits"]["train"]


def test_access_guard_blocks_func(small_dataset):
    root, _ = small_dataset
    store = dataset.CaseStore(root, allowed_modalities=("anat",))
    store.load_volume("case_0000", "anat")
    with pytest.raises(DataAccessError):
        store.load_volume("case_0000", "func")
    assert store.access_log == [("case_0000", "anat")]


def test_stratum_too_small_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(DataError, match="stratum"):
        phantom.stratified_split({0: ["a"] * 30, 3: ["b", "c"]},
                                 (0.7, 0.15, 0.15), rng)


def test_stratified_split_exact_targets_many_shapes():
    rng = np.random.default_rng(3)
    for trial in range(20):
        sizes = rng.integers(3, 40, size=rng.integers(2, 5))
        strata = {i: [f"s{i}_{j}" for j in range(n)] for i, n in enumerate(sizes)}
        total = int(sizes.sum())
        train, val, test = phantom.stratified_split(strata, (0.7, 0.15, 0.15), rng)
        want = phantom._largest_remainder(total, (0.7, 0.15, 0.15))
        assert [len(train), len(val), len(test)] == want
        ids = train + val + test
        assert len(set(ids)) == total
