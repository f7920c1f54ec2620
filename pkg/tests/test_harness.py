import math
import struct
import warnings

import numpy as np
import pytest
from PIL import Image
from scipy import stats as sps

from crow.errors import FormatError, IncompatibleFormatError, ShapeError, TruncatedFileError
from crow.flow import FlowConfig, Split, random_model
from crow.harness import io
from crow.harness.experiments import CentroidClassifier, centre_frames, fit_blob_classifier
from crow.harness.frames import write_frames_pgm
from crow.harness.stats import group_analysis, t_two_sided_p
from crow.harness.synth import (blob_columns, regime_covariates, render_blob, synth_moving_blob,
                                synth_regime)
from crow.nets import flatten
from crow.numerics import Rng


# ---------------------------------------------------------------- synth


def test_blob_shapes():
    ds = synth_moving_blob(2000, 6, (12, 12), seed=0)
    assert ds.frames.shape == (2000, 6, 144) and ds.covariates.shape == (2000, 6, 2)
    assert ds.meta["d_x"] == 144 and ds.meta["d_y"] == 2 and ds.meta["T"] == 6
    assert np.all(ds.covariates.sum(axis=2) == 1.0)
    labels = np.array(ds.meta["labels"])
    assert np.all(ds.covariates[np.arange(2000), :, labels] == 1.0)
    assert 0.4 < labels.mean() < 0.6


def test_blob_motion_and_reflection():
    assert blob_columns(7, 4, 12) == [7, 8, 9, 8]
    assert blob_columns(9, 3, 12) == [9, 8, 7]
    assert blob_columns(2, 3, 12) == [2, 3, 4]
    ds = synth_moving_blob(5, 6, (10, 12), seed=4)
    for i in range(5):
        cols = [np.argmax(f.reshape(10, 12).sum(axis=0)) for f in ds.frames[i]]
        steps = np.diff(cols)
        assert np.all(np.abs(steps) == 1)


def test_blob_row_major_render():
    f = render_blob("disk", 3, 5, 8, 9)
    assert f[3, 5] == 1.0 and f.ravel()[3 * 9 + 5] == 1.0
    cross = render_blob("cross", 3, 5, 8, 9)
    assert cross[4, 6] == 0.0 and f[4, 6] > 0.7


def test_blob_errors():
    with pytest.raises(ValueError):
        synth_moving_blob(3, 6, (7, 12))
    with pytest.raises(ValueError):
        synth_moving_blob(3, 1)


def test_synth_byte_identical(tmp_path):
    io.save_dataset(synth_moving_blob(30, 6, seed=5), tmp_path / "a.crow")
    io.save_dataset(synth_moving_blob(30, 6, seed=5), tmp_path / "b.crow")
    assert (tmp_path / "a.crow").read_bytes() == (tmp_path / "b.crow").read_bytes()
    io.save_dataset(synth_moving_blob(30, 6, seed=6), tmp_path / "c.crow")
    assert (tmp_path / "a.crow").read_bytes() != (tmp_path / "c.crow").read_bytes()


def test_regime_covariates_and_drift():
    assert regime_covariates(3, True).ravel().tolist() == [10.0, 20.0, 30.0]
    assert regime_covariates(3, False).ravel().tolist() == [10.0, 10.0, 10.0]
    ds = synth_regime(4000, 3, 82, seed=2)
    drift = ds.meta["drift_coords"]
    assert len(drift) == math.ceil(82 / 8) == 11
    cohort = np.array(ds.meta["cohort"])
    gap = ds.frames[cohort == 1, 2].mean(axis=0) - ds.frames[cohort == 0, 2].mean(axis=0)
    # +delta per step over T - 1 = 2 steps: 1.0 on drift coordinates, 0 elsewhere
    se = 0.1 * math.sqrt(2 / 2000)
    assert np.all(np.abs(gap[drift] - 1.0) < 5 * se)
    others = np.setdiff1d(np.arange(82), drift)
    assert np.all(np.abs(gap[others]) < 5 * se)
    assert np.allclose(ds.frames[cohort == 0].std(axis=0), 0.1, atol=0.02)
    with pytest.raises(ValueError):
        synth_regime(4, 3, 3)


# ---------------------------------------------------------------- io


def small_model(seed=0):
    cfg = FlowConfig(d_x=10, d_y=2, d_z=3, d_total=12, n_blocks=2, hidden=5,
                     split=Split("halves"), seed=seed)
    return random_model(cfg, Rng(seed))


def test_model_round_trip(tmp_path):
    m = small_model()
    io.save(m, tmp_path / "m.crow")
    m2 = io.load(tmp_path / "m.crow")
    assert m2.config == m.config
    assert flatten(m.blocks).tobytes() == flatten(m2.blocks).tobytes()
    cb = FlowConfig(d_x=16, d_y=2, d_z=3, d_total=20, n_blocks=1, hidden=4,
                    split=Split("checkerboard", 4, 4))
    m3 = io.model_from_bytes(io.model_to_bytes(random_model(cb, Rng(1))))
    assert m3.config.split == Split("checkerboard", 4, 4)


def test_dataset_round_trip(tmp_path):
    ds = synth_regime(10, 3, 12, seed=1)
    io.save(ds, tmp_path / "d.crow")
    ds2 = io.load(tmp_path / "d.crow")
    assert ds2.frames.tobytes() == ds.frames.tobytes()
    assert ds2.covariates.tobytes() == ds.covariates.tobytes()
    assert ds2.meta == ds.meta


def test_header_layout():
    data = io.model_to_bytes(small_model())
    assert data[:4] == b"CROW"
    version, kind, meta_len = struct.unpack("<III", data[4:16])
    assert (version, kind) == (1, io.KIND_MODEL)
    (payload_len,) = struct.unpack("<Q", data[16 + meta_len:24 + meta_len])
    assert payload_len == 8 * flatten(small_model().blocks).size
    assert len(data) == 24 + meta_len + payload_len


def test_truncated_reports_byte_counts():
    data = io.model_to_bytes(small_model())
    with pytest.raises(TruncatedFileError) as info:
        io.model_from_bytes(data[:-20])
    err = info.value
    assert err.expected - err.available == 20
    assert f"needs {err.expected} bytes" in str(err) and f"only {err.available}" in str(err)
    with pytest.raises(TruncatedFileError):
        io.model_from_bytes(data[:10])


def test_version_and_magic_rejected(tmp_path):
    data = bytearray(io.model_to_bytes(small_model()))
    bumped = bytes(data[:4]) + struct.pack("<I", 999) + bytes(data[8:])
    with pytest.raises(IncompatibleFormatError, match="999"):
        io.model_from_bytes(bumped)
    with pytest.raises(IncompatibleFormatError, match="magic"):
        io.model_from_bytes(b"NOPE" + bytes(data[4:]))
    with pytest.raises(FormatError, match="expected a dataset"):
        io.dataset_from_bytes(bytes(data))


def test_atomic_write_leaves_no_temp(tmp_path):
    io.save_model(small_model(), tmp_path / "sub" / "m.crow")
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["m.crow"]


def test_conditions_csv(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("t,y_1,y_2\n2,0,1\n1,1,0\n3,0,1\n")
    assert io.read_conditions_csv(p).tolist() == [[1, 0], [0, 1], [0, 1]]
    io.write_conditions_csv(tmp_path / "d.csv", [[10.0], [20.0]])
    assert (tmp_path / "d.csv").read_text() == "t,y_1\n1,10.0\n2,20.0\n"
    (tmp_path / "bad.csv").write_text("x,y_1\n1,2\n")
    with pytest.raises(FormatError):
        io.read_conditions_csv(tmp_path / "bad.csv")


# ---------------------------------------------------------------- frames


def test_pgm_zero_frame_and_count(tmp_path):
    out = write_frames_pgm(np.zeros((6, 12)), (3, 4), tmp_path)
    assert len(out["files"]) == 6 and sorted(p.name for p in tmp_path.iterdir())[0] == "frame_1.pgm"
    data = (tmp_path / "frame_1.pgm").read_bytes()
    header = b"P5\n4 3\n255\n"
    assert data.startswith(header) and data[len(header):] == bytes(12)


def test_pgm_reference_reader(tmp_path, rng):
    frames = rng.uniform((2, 30)) * 1.4 - 0.2
    out = write_frames_pgm(frames, (5, 6), tmp_path)
    for t, f in enumerate(frames, start=1):
        img = np.asarray(Image.open(tmp_path / f"frame_{t}.pgm"), dtype=np.float64) / 255.0
        assert img.shape == (5, 6)
        assert np.max(np.abs(img.ravel() - np.clip(f, 0, 1))) <= 0.5 / 255 + 1e-12
    assert out["clipped_pixels"] == int(np.sum((frames < 0) | (frames > 1)))


def test_pgm_shape_error(tmp_path):
    with pytest.raises(ShapeError):
        write_frames_pgm(np.zeros((2, 10)), (3, 4), tmp_path)


# ---------------------------------------------------------------- stats


def test_identical_groups():
    a = Rng(3).normal((10, 4))
    s = group_analysis(a, a.copy())
    assert np.all(s.t == 0) and np.all(s.p_corrected == 1.0) and not s.significant.any()


def test_separated_groups():
    r = Rng(4)
    s = group_analysis(r.normal((100, 1)), r.normal((100, 1)) + 5.0)
    assert s.significant[0] and s.p_corrected[0] < 1e-30


def test_matches_scipy_welch(rng):
    a, b = rng.normal((30, 6)), 1.5 * rng.normal((45, 6)) + 0.4
    s = group_analysis(a, b, alpha=0.05)
    ref = sps.ttest_ind(a, b, equal_var=False)
    assert np.allclose(s.t, ref.statistic, rtol=1e-12)
    assert np.allclose(s.p_raw, ref.pvalue, rtol=1e-9, atol=1e-300)
    assert np.array_equal(s.p_corrected, np.minimum(1.0, s.p_raw * 6))
    assert np.array_equal(s.significant, s.p_corrected < 0.05)


def test_t_tail_values():
    assert abs(t_two_sided_p(0.0, 10) - 1.0) < 1e-15
    assert abs(t_two_sided_p(2.228138851986, 10) - 0.05) < 1e-9


def test_zero_variance_feature_warns():
    a = np.column_stack([np.ones(5), np.arange(5.0)])
    b = np.column_stack([np.ones(5), np.arange(5.0) + 10])
    with pytest.warns(RuntimeWarning, match="zero variance"):
        s = group_analysis(a, b)
    assert s.p_raw[0] == 1.0 and s.t[0] == 0.0 and s.significant[1]


def test_permutation_invariance(rng):
    a, b = rng.normal((20, 8)), rng.normal((20, 8)) + np.linspace(0, 3, 8)
    perm = rng.permutation(8)
    s1, s2 = group_analysis(a, b), group_analysis(a[:, perm], b[:, perm])
    assert np.array_equal(s1.significant[perm], s2.significant)


def test_group_errors():
    with pytest.raises(ValueError):
        group_analysis(np.zeros((2, 3)), np.ones((5, 3)))
    with pytest.raises(ShapeError):
        group_analysis(np.zeros((4, 3)), np.ones((5, 2)))


# ---------------------------------------------------------------- classifier


def test_centering_and_classifier():
    ds = synth_moving_blob(400, 6, seed=11)
    clf = fit_blob_classifier(ds)
    test = synth_moving_blob(200, 6, seed=12)
    pred = clf.predict(test.frames)
    assert np.mean(pred == np.array(test.meta["labels"])[:, None]) > 0.99
    c = centre_frames(render_blob("disk", 2, 9, 12, 12).ravel()[None], 12, 12)
    assert np.argmax(c[0]) == 6 * 12 + 6


def test_toy_presets_match_experiment_defaults():
    from crow.harness.cli import load_config
    from crow.training import TrainConfig
    from crow.harness.experiments import BLOB_TRAIN, REGIME_TRAIN, blob_config, regime_config

    for name, flow, train_kw, seed in (("blob-toy", blob_config(), BLOB_TRAIN, 1),
                                       ("regime-toy", regime_config(), REGIME_TRAIN, 3)):
        flow_d, train_d = load_config(name)
        assert FlowConfig.from_dict(flow_d).to_dict() == flow.to_dict()
        assert TrainConfig(**train_d) == TrainConfig(seed=seed, **train_kw)
