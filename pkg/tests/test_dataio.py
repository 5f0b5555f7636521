import numpy as np
import pytest

from emofuse import dataio as D
from emofuse.errors import (
    BadMagicError,
    DataError,
    DtypeError,
    MissingClassError,
    ParameterError,
    TruncatedError,
    VersionError,
)


def seq(modality, t, d=None, seed=0):
    d = d or D.MODALITY_DIMS[modality]
    rng = np.random.default_rng(seed)
    return D.FeatureSequence(modality, rng.standard_normal((t, d)).astype(np.float32))


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def test_round_trip_bit_exact(tmp_path):
    original = seq("audio", 7)
    path = tmp_path / "a.mmfe"
    D.write_feature_file(original, path)
    loaded = D.read_feature_file(path)
    assert loaded.modality == "audio"
    assert (loaded.data == original.data).all()

    # write(read(p)) must produce a byte-identical file
    path2 = tmp_path / "b.mmfe"
    D.write_feature_file(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_file_size_arithmetic(tmp_path):
    path = tmp_path / "z.mmfe"
    D.write_feature_file(D.FeatureSequence("visual", np.zeros((1, 512), np.float32)), path)
    # 16-byte header + 8 bytes dims + 1*512*4 payload
    assert path.stat().st_size == 16 + 8 + 2048


def test_truncated_payload_errors(tmp_path):
    path = tmp_path / "t.mmfe"
    D.write_feature_file(seq("visual", 2), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(TruncatedError):
        D.read_feature_file(path)


def test_bad_magic_errors(tmp_path):
    path = tmp_path / "m.mmfe"
    D.write_feature_file(seq("visual", 1), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        D.read_feature_file(path)


def test_version_mismatch_errors(tmp_path):
    path = tmp_path / "v.mmfe"
    D.write_feature_file(seq("visual", 1), path)
    raw = bytearray(path.read_bytes())
    raw[4:6] = (9).to_bytes(2, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        D.read_feature_file(path)


def test_wrong_dtype_errors(tmp_path):
    path = tmp_path / "d.mmfe"
    D.write_feature_file(seq("visual", 1), path)
    raw = bytearray(path.read_bytes())
    raw[6] = 1
    path.write_bytes(bytes(raw))
    with pytest.raises(DtypeError):
        D.read_feature_file(path)


def test_modality_dimension_enforced():
    with pytest.raises(DataError):
        D.FeatureSequence("visual", np.zeros((3, 768), np.float32))
    with pytest.raises(DataError):
        D.FeatureSequence("audio", np.zeros((3, 512), np.float32))
    with pytest.raises(DataError):
        D.FeatureSequence("visual", np.full((2, 512), np.nan, np.float32))


# ---------------------------------------------------------------------------
# window extraction
# ---------------------------------------------------------------------------

def test_exact_tiling():
    vis, aud = seq("visual", 60), seq("audio", 100)
    labels = np.zeros(60, dtype=int)
    windows = D.extract_windows(vis, aud, labels, window=30, stride=30,
                                fps=30.0, audio_rate=50.0)
    assert [w.frame_range for w in windows] == [(0, 30), (30, 60)]


def test_audio_alignment_hand_case():
    # fps=30, audio_rate=50: one second of video maps to 50 audio steps
    vis, aud = seq("visual", 30), seq("audio", 50)
    labels = np.zeros(30, dtype=int)
    (w,) = D.extract_windows(vis, aud, labels, window=30, stride=30,
                             fps=30.0, audio_rate=50.0)
    assert w.audio.T == 50
    assert (w.audio.data == aud.data[0:50]).all()


def test_majority_label_tie_breaks_low():
    vis, aud = seq("visual", 30), seq("audio", 50)
    labels = np.array([5] * 15 + [2] * 15)
    (w,) = D.extract_windows(vis, aud, labels, window=30, stride=30,
                             fps=30.0, audio_rate=50.0)
    assert w.label == 2


def test_window_longer_than_clip_gives_empty():
    vis, aud = seq("visual", 20), seq("audio", 40)
    out = D.extract_windows(vis, aud, np.zeros(20, dtype=int), window=30,
                            stride=30, fps=30.0, audio_rate=50.0)
    assert out == []


def test_zero_stride_rejected():
    vis, aud = seq("visual", 30), seq("audio", 50)
    with pytest.raises(ParameterError):
        D.extract_windows(vis, aud, np.zeros(30, dtype=int), window=10,
                          stride=0, fps=30.0, audio_rate=50.0)


def test_non_overlapping_coverage_when_stride_equals_window():
    vis, aud = seq("visual", 64), seq("audio", 110)
    labels = np.arange(64) % 8
    windows = D.extract_windows(vis, aud, labels, window=15, stride=15,
                                fps=30.0, audio_rate=50.0)
    covered = [f for w in windows for f in range(*w.frame_range)]
    assert covered == list(range(60))  # each retained frame exactly once
    spans = [(int(w.frame_range[0] / 30 * 50), w.audio.T) for w in windows]
    ends = np.cumsum([0] + [t for _, t in spans])
    for (start, _), prev_end in zip(spans[1:], ends[1:]):
        assert start >= prev_end - spans[0][1]  # ordered
    # audio slices of consecutive windows must not overlap
    audio_starts = [int(np.floor(w.frame_range[0] / 30 * 50)) for w in windows]
    audio_ends = [s + w.audio.T for s, w in zip(audio_starts, windows)]
    for nxt, prev in zip(audio_starts[1:], audio_ends[:-1]):
        assert nxt >= prev


# ---------------------------------------------------------------------------
# synthetic data + manifests
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    return D.generate_synthetic(out, n_per_class=6, window=10, t_audio=8,
                                separation=4.0, seed=7)


def test_synthetic_determinism(tmp_path, small_dataset):
    again = D.generate_synthetic(tmp_path, n_per_class=6, window=10, t_audio=8,
                                 separation=4.0, seed=7)
    first = small_dataset.train.samples[3]
    second = again.train.samples[3]
    assert first.sample_id == second.sample_id
    a = (small_dataset.train.root / first.visual_path).read_bytes()
    b = (again.train.root / second.visual_path).read_bytes()
    assert a == b
    assert small_dataset.text_bank_path.read_bytes() == again.text_bank_path.read_bytes()


def test_synthetic_counts_and_manifest_roundtrip(small_dataset):
    assert len(small_dataset.train.samples) == 6 * 8
    loaded = D.load_manifest(small_dataset.train_path)
    assert loaded.split == "train"
    assert len(loaded.samples) == 48
    samples = D.load_window_samples(loaded)
    assert all(s.visual.T == 10 and s.audio.T == 8 for s in samples)


def test_text_bank_separation(small_dataset):
    bank = D.read_feature_file(small_dataset.text_bank_path, "text").data
    assert bank.shape == (8, 512)
    np.testing.assert_allclose(np.linalg.norm(bank, axis=1), 1.0, atol=1e-5)
    cos = bank @ bank.T
    np.fill_diagonal(cos, -1.0)
    assert cos.max() < 0.3


def test_nearest_centroid_oracle_on_separated_classes(small_dataset):
    """Generator oracle: pooled features must be linearly separable at sep=4."""
    train = D.load_window_samples(D.load_manifest(small_dataset.train_path))
    val = D.load_window_samples(D.load_manifest(small_dataset.val_path))
    pooled = lambda ws: np.stack([w.visual.data.mean(axis=0) for w in ws])
    labels = lambda ws: np.array([w.label for w in ws])
    centroids = np.stack([
        pooled(train)[labels(train) == c].mean(axis=0) for c in range(8)])
    dist = ((pooled(val)[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    preds = dist.argmin(axis=1)
    truth = labels(val)

    # independent macro-F1 oracle, straight from the definition
    f1s = []
    for c in range(8):
        tp = int(((preds == c) & (truth == c)).sum())
        fp = int(((preds == c) & (truth != c)).sum())
        fn = int(((preds != c) & (truth == c)).sum())
        f1s.append(0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    assert sum(f1s) / 8 >= 0.99


def test_manifest_detects_header_mismatch(tmp_path, small_dataset):
    import json
    doc = json.loads(small_dataset.train_path.read_text())
    doc["samples"][0]["T_v"] = 99
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    # point at the same feature dir
    import shutil
    shutil.copytree(small_dataset.train.root / "features", tmp_path / "features")
    with pytest.raises(DataError):
        D.load_manifest(bad)


# ---------------------------------------------------------------------------
# class statistics
# ---------------------------------------------------------------------------

def _manifest_with_counts(counts):
    entries = []
    for label, n in enumerate(counts):
        for i in range(n):
            entries.append(D.ManifestEntry(f"s{label}-{i}", label, "v", "a", 10, 8))
    return D.DatasetManifest(D.CLASS_NAMES, entries, "train")


def test_uniform_weights():
    stats = D.compute_class_stats(_manifest_with_counts([10] * 8))
    np.testing.assert_allclose(stats.weights, 1.0)


def test_weight_formula_hand_case():
    stats = D.compute_class_stats(_manifest_with_counts([70, 10, 10, 10, 15, 15, 15, 15]))
    np.testing.assert_allclose(stats.weights[0], 160 / (8 * 70), rtol=1e-12)
    assert (stats.weights > 0).all()
    assert stats.counts.sum() == 160


def test_missing_class_errors():
    with pytest.raises(MissingClassError):
        D.compute_class_stats(_manifest_with_counts([5, 5, 5, 5, 5, 5, 5, 0]))
