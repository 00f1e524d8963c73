import json
from collections import Counter

import numpy as np
import pytest

from hbmi.datasets import (
    EEG_CHANNELS,
    EMG_CHANNELS,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    load_model_bundle,
    permute_labels,
    save_model_bundle,
    write_dataset,
)
from hbmi.decoder import GESTURES, HANDS, decode_batch, uniform_prior
from hbmi.errors import DatasetFormatError, ValidationError
from hbmi.pipeline import FeatureCache, fit_hierarchy, window_features
from hbmi.signals import window_array, window_rms

SMALL = dict(n_sessions=2, n_blocks=2, n_trials_per_block=10)


@pytest.fixture(scope="module")
def small_source():
    return generate_synthetic(SynthConfig(seed=3, **SMALL))


@pytest.fixture(scope="module")
def small_dir(tmp_path_factory, small_source):
    return write_dataset(small_source, tmp_path_factory.mktemp("ds") / "data")


def test_layout_and_marginals():
    src = generate_synthetic(SynthConfig(seed=1, n_sessions=1))
    trials = src.manifest.trials
    assert len(trials) == 400
    for block in range(1, 9):
        in_block = [t for t in trials if t.block == block]
        assert {t.label.hand for t in in_block} == {HANDS[(block - 1) % 2]}
        assert Counter(t.label.gesture for t in in_block) == {g: 10 for g in GESTURES}
    assert Counter(t.label for t in trials) == {lab: 40 for lab in Counter(t.label for t in trials)}
    assert len(Counter(t.label for t in trials)) == 10


def test_trial_shapes_and_real_emg(small_source):
    rec = small_source.load_trial(small_source.manifest.trials[0])
    assert rec.eeg.samples.shape == (19, 6000) and rec.eeg.rate == 1200
    assert rec.emg.samples.shape == (6, 6000)
    assert np.isrealobj(rec.emg.samples) and np.any(rec.emg.samples < 0)
    windows, _ = window_array(rec.emg)
    assert np.all(window_rms(windows) >= 0)


def test_generation_deterministic(small_source):
    other = generate_synthetic(SynthConfig(seed=3, **SMALL))
    for info in small_source.manifest.trials[::7]:
        a, b = small_source.load_trial(info), other.load_trial(info)
        assert np.array_equal(a.eeg.samples, b.eeg.samples)
        assert np.array_equal(a.emg.samples, b.emg.samples)
    assert small_source.manifest.to_dict() == other.manifest.to_dict()


def test_seed_changes_data(small_source):
    other = generate_synthetic(SynthConfig(seed=4, **SMALL))
    info = small_source.manifest.trials[0]
    assert not np.array_equal(small_source.load_trial(info).eeg.samples,
                              other.load_trial(info).eeg.samples)


def test_trial_independent_of_session_count():
    a = generate_synthetic(SynthConfig(seed=3, n_sessions=1, n_blocks=2, n_trials_per_block=10))
    b = generate_synthetic(SynthConfig(seed=3, **SMALL))
    info = a.manifest.trials[5]
    assert np.array_equal(a.load_trial(info).emg.samples, b.load_trial(info).emg.samples)


@pytest.mark.parametrize("kwargs", [dict(n_sessions=0), dict(n_blocks=0), dict(n_trials_per_block=7),
                                    dict(separability_eeg=-1.0), dict(noise_floor=0.0),
                                    dict(session_drift=-0.1)])
def test_invalid_config(kwargs):
    with pytest.raises(ValidationError):
        generate_synthetic(SynthConfig(**kwargs))


def test_write_is_byte_identical(tmp_path, small_source):
    a = write_dataset(small_source, tmp_path / "a")
    b = write_dataset(generate_synthetic(SynthConfig(seed=3, **SMALL)), tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert len(files) == 2 * len(small_source.manifest.trials) + 1
    for rel in files:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_load_roundtrip(small_dir, small_source):
    ds = load_dataset(small_dir)
    assert ds.manifest.trials == small_source.manifest.trials
    assert ds.manifest.eeg_channels == EEG_CHANNELS and ds.manifest.emg_channels == EMG_CHANNELS
    info = ds.manifest.trials[3]
    disk, mem = ds.load_trial(info), small_source.load_trial(info)
    np.testing.assert_allclose(disk.eeg.samples, mem.eeg.samples, rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(disk.emg.samples, mem.emg.samples, rtol=1e-5, atol=1e-5)


def test_loading_is_read_only(small_dir):
    before = {p: (p.stat().st_mtime_ns, p.read_bytes()) for p in small_dir.rglob("*") if p.is_file()}
    ds = load_dataset(small_dir)
    ds.validate()
    after = {p: (p.stat().st_mtime_ns, p.read_bytes()) for p in small_dir.rglob("*") if p.is_file()}
    assert before == after


def _copy(src, dst):
    import shutil

    shutil.copytree(src, dst)
    return dst


def test_missing_file_named(tmp_path, small_dir):
    d = _copy(small_dir, tmp_path / "d")
    (d / "trials" / "s2_b1_t3_emg.csv").unlink()
    with pytest.raises(ValidationError, match="s2_b1_t3_emg.csv"):
        load_dataset(d)


def test_truncated_file_shape_error(tmp_path, small_dir):
    d = _copy(small_dir, tmp_path / "d")
    path = d / "trials" / "s1_b2_t4_eeg.csv"
    rows = [",".join(r.split(",")[:5000]) for r in path.read_text().splitlines()]
    path.write_text("\n".join(rows) + "\n")
    ds = load_dataset(d)
    info = next(t for t in ds.manifest.trials if t.key == "s1_b2_t4")
    with pytest.raises(ValidationError, match=r"6000 samples \(5 s at 1200 Hz\)") as exc:
        ds.load_trial(info)
    assert "s1_b2_t4" in str(exc.value)


def test_malformed_trial_file(tmp_path, small_dir):
    d = _copy(small_dir, tmp_path / "d")
    path = d / "trials" / "s1_b1_t0_emg.csv"
    lines = path.read_text().splitlines()
    lines[2] = lines[2].replace(",", ",abc,", 1)
    path.write_text("\n".join(lines) + "\n")
    ds = load_dataset(d)
    with pytest.raises(DatasetFormatError, match="s1_b1_t0_emg.csv"):
        ds.load_trial(ds.manifest.trials[0])


def test_malformed_manifest_line(tmp_path, small_dir):
    d = _copy(small_dir, tmp_path / "d")
    text = (d / "manifest.json").read_text().splitlines()
    text[3] = text[3] + " oops"
    (d / "manifest.json").write_text("\n".join(text))
    with pytest.raises(DatasetFormatError, match=r"manifest.json:4"):
        load_dataset(d)


def test_bad_label_in_manifest(tmp_path, small_dir):
    d = _copy(small_dir, tmp_path / "d")
    data = json.loads((d / "manifest.json").read_text())
    data["sessions"][0]["blocks"][0]["trials"][0]["label"] = "Right-Fist"
    (d / "manifest.json").write_text(json.dumps(data))
    with pytest.raises(DatasetFormatError):
        load_dataset(d)


def test_permute_labels_keeps_marginals(small_source):
    perm = permute_labels(small_source, seed=0)
    for s in small_source.manifest.sessions:
        orig = Counter(t.label for t in small_source.manifest.session_trials(s))
        assert Counter(t.label for t in perm.manifest.session_trials(s)) == orig
    info = perm.manifest.trials[0]
    rec = perm.load_trial(info)
    assert rec.info == info
    assert np.array_equal(rec.eeg.samples, small_source.load_trial(
        small_source.manifest.trials[0]).eeg.samples)


def test_bundle_roundtrip_decodes_identically(tmp_path, small_source):
    cache = FeatureCache(small_source)
    trials = cache.many(small_source.manifest.session_trials(1))
    model = fit_hierarchy(trials)
    path = save_model_bundle(model, tmp_path / "bundle")
    loaded = load_model_bundle(path)
    probe = cache.many(small_source.manifest.session_trials(2))[:7]
    fa, fb = window_features(model, probe), window_features(loaded, probe)
    assert len(fa) >= 100
    for mode in ("hbmi10", "eeg4", "emg5"):
        da, sa = decode_batch(model, uniform_prior(), fa, mode)
        db, sb = decode_batch(loaded, uniform_prior(), fb, mode)
        assert da == db
        assert np.array_equal(sa, sb)
    for prefix, kde in model.emg_kde.items():
        assert np.array_equal(kde.points, loaded.emg_kde[prefix].points)
        assert kde.log_norm == loaded.emg_kde[prefix].log_norm


def test_bundle_missing_component(tmp_path, small_source):
    cache = FeatureCache(small_source)
    model = fit_hierarchy(cache.many(small_source.manifest.session_trials(1)))
    path = save_model_bundle(model, tmp_path / "bundle")
    (path / "nmf_Left.json").unlink()
    with pytest.raises(ValidationError, match="nmf_Left.json"):
        load_model_bundle(path)
