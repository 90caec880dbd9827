import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from batcall import datagen as dg
from batcall.dsp import AudioClip, read_wav, stft_spectrogram
from batcall.model import PatchSequence


def manifest_of(counts):
    entries = [dg.ManifestEntry(f"s{s}/{i}.wav", s) for s, n in enumerate(counts) for i in range(n)]
    return dg.DatasetManifest([f"sp{s}" for s in range(len(counts))], entries)


# ---------------------------------------------------------------- manifest / split


def test_split_reference_fractions():
    m = dg.split_dataset(manifest_of([100]), seed=3)
    assert [len(m.split(t)) for t in ("train", "test", "val")] == [60, 25, 15]


def test_split_all_train_and_determinism():
    m = manifest_of([7, 12, 30])
    assert all(e.split == "train" for e in dg.split_dataset(m, (1, 0, 0)).entries)
    a = [e.split for e in dg.split_dataset(m, seed=9).entries]
    b = [e.split for e in dg.split_dataset(m, seed=9).entries]
    c = [e.split for e in dg.split_dataset(m, seed=10).entries]
    assert a == b and a != c


def test_split_stratified_and_small_species_warn():
    m = manifest_of([20, 2])
    with pytest.warns(UserWarning):
        out = dg.split_dataset(m, seed=0)
    assert all(e.split == "train" for e in out.entries if e.species == 1)
    sp0 = [e.split for e in out.entries if e.species == 0]
    assert (sp0.count("train"), sp0.count("test"), sp0.count("val")) == (12, 5, 3)


@given(n=st.integers(3, 300), seed=st.integers(0, 100))
def test_split_counts_property(n, seed):
    m = dg.split_dataset(manifest_of([n]), seed=seed)
    counts = [len(m.split(t)) for t in ("train", "test", "val")]
    assert sum(counts) == n
    for c, f in zip(counts, (0.6, 0.25, 0.15)):
        assert abs(c - f * n) < 1


def test_split_rejects_bad_fractions():
    with pytest.raises(ValueError):
        dg.split_dataset(manifest_of([5]), (0.5, 0.5, 0.1))


def test_manifest_round_trip_and_validation(tmp_path):
    m = dg.split_dataset(manifest_of([5, 4]), seed=1)
    m.save(tmp_path / "manifest.json")
    back = dg.DatasetManifest.load(tmp_path / "manifest.json")
    assert back.to_dict() == m.to_dict()
    assert back.resolve(back.entries[0]) == tmp_path / back.entries[0].path
    raw = json.loads((tmp_path / "manifest.json").read_text())
    assert set(raw) == {"species", "entries"}
    assert set(raw["entries"][0]) == {"path", "species", "split", "time_expansion"}
    with pytest.raises(dg.ManifestError):
        dg.DatasetManifest(["a"], [dg.ManifestEntry("x.wav", 1)])
    with pytest.raises(dg.ManifestError):
        dg.DatasetManifest(["a"], [dg.ManifestEntry("x.wav", 0, "holdout")])
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(dg.ManifestError):
        dg.DatasetManifest.load(tmp_path / "bad.json")


# ---------------------------------------------------------------- sequences


def closed_form_count(p, seq_len=60, overlap=15, min_patches=8):
    if p < min_patches:
        return 0
    if p <= seq_len:
        return 1
    return 1 + math.ceil((p - seq_len) / (seq_len - overlap))


def test_sequence_window_examples():
    assert dg.sequence_windows(105) == [(0, 60), (45, 60)]
    assert dg.sequence_windows(60) == [(0, 60)]
    assert dg.sequence_windows(59) == [(0, 59)]
    assert dg.sequence_windows(7) == []
    assert dg.sequence_windows(0) == []
    # 112 patches: the tail window holds 22 patches and is kept
    assert dg.sequence_windows(112) == [(0, 60), (45, 60), (90, 22)]


def test_sequence_counts_exhaustive():
    for p in range(0, 400):
        assert len(dg.sequence_windows(p)) == closed_form_count(p)


@given(p=st.integers(0, 5000))
def test_sequence_windows_cover_all_patches(p):
    wins = dg.sequence_windows(p)
    assert len(wins) == closed_form_count(p)
    for i, (start, count) in enumerate(wins):
        assert start == 45 * i
        assert count == 60 or (i == len(wins) - 1 and count >= 8)
    if wins:
        assert wins[-1][0] + wins[-1][1] == p or p - wins[-1][0] - wins[-1][1] < 0 or wins[-1][1] == 60


def test_get_sequences_padding():
    frames = 44 + 22 * 58  # 59 patches
    seqs = dg.get_sequences(np.ones((8, frames)))
    assert len(seqs) == 1
    assert seqs[0].num_patches == 60 and seqs[0].mask.sum() == 59
    assert dg.get_sequences(np.ones((8, 43))) == []
    two = dg.get_sequences(np.ones((8, 44 + 22 * 104)))
    assert [s.meta["first_patch"] for s in two] == [0, 45]


def test_feature_config_arithmetic():
    cfg = dg.FeatureConfig()
    assert cfg.patches_in(26460) == 8  # 0.12 s real at 22.05 kHz after time expansion
    assert cfg.frames_for(60) == 1342
    assert cfg.patches_in(cfg.samples_for(60)) == 60
    for p in range(1, 70):
        assert cfg.patches_in(cfg.samples_for(p)) == p
        assert cfg.patches_in(cfg.samples_for(p) - 1) == p - 1


def test_recording_segments_align_with_sequences(rng):
    cfg = dg.FeatureConfig()
    n = cfg.samples_for(130)
    clip = AudioClip(rng.standard_normal(n), 22050)
    segs = dg.recording_segments(clip, cfg)
    assert [(s.first_patch, s.num_patches) for s in segs] == dg.sequence_windows(130)
    for s in segs:
        assert len(s.samples) == cfg.samples_for(s.num_patches)
        assert s.start_sample == s.first_patch * 22 * 128
        seq = dg.sequence_features(s.samples, cfg)
        assert seq.num_patches == s.num_patches
        assert 0 <= seq.patches.min() and seq.patches.max() == pytest.approx(1.0)


# ---------------------------------------------------------------- peaks / individuals


def burst_spec(centres, frames=600, sigma=3.0):
    t = np.arange(frames)
    env = sum(np.exp(-0.5 * ((t - c) / sigma) ** 2) for c in centres)
    return np.tile(env, (16, 1))


def test_detect_peaks_examples():
    assert dg.detect_peaks(np.zeros((16, 300))) == []
    peaks = dg.detect_peaks(burst_spec([150, 350]))
    assert len(peaks) == 2
    assert abs(peaks[0] - 150) <= 2 and abs(peaks[1] - 350) <= 2
    assert len(dg.detect_peaks(burst_spec([200, 205], sigma=1.0), wait=22)) == 1


def test_get_individuals_edges():
    assert dg.get_individuals(np.zeros((16, 2000))) == []
    spec = burst_spec([10], frames=2000)
    patches = dg.get_individuals(spec)
    assert len(patches) == 1
    np.testing.assert_array_equal(patches[0], spec[:, :44])
    right = burst_spec([1995], frames=2000)
    np.testing.assert_array_equal(dg.get_individuals(right)[0], right[:, -44:])


def _call_patch(rng, rate=22050):
    f0 = rng.uniform(3000, 8000)
    sweep = rng.uniform(0.5, 5) * dg.synth_call(f0 + 1500, f0, rng.uniform(0.03, 0.2), rate)
    x = rng.normal(0, 0.01, 44 * 128 + 512)
    at = rng.integers(0, len(x) - len(sweep))
    x[at : at + len(sweep)] += sweep
    return np.log1p(stft_spectrogram(x, 512, 128, rate).values[:, :44])


def _noise_patch(rng):
    x = rng.normal(0, 0.01, 44 * 128 + 512)
    n = rng.integers(1000, len(x))
    at = rng.integers(0, len(x) - n + 1)
    x[at : at + n] += rng.normal(0, rng.uniform(0.05, 1.0), n)
    return np.log1p(stft_spectrogram(x, 512, 128, 22050).values[:, :44])


@pytest.fixture(scope="module")
def call_classifier():
    rng = np.random.default_rng(11)
    calls = [_call_patch(rng) for _ in range(40)]
    noise = [_noise_patch(rng) for _ in range(40)]
    return dg.train_call_classifier(calls, noise, epochs=15, seed=0)


def test_call_classifier_accuracy(call_classifier):
    rng = np.random.default_rng(99)
    calls = np.stack([_call_patch(rng) for _ in range(30)])
    noise = np.stack([_noise_patch(rng) for _ in range(30)])
    p_call = call_classifier.predict_proba(calls)
    p_noise = call_classifier.predict_proba(noise)
    acc = (np.sum(p_call > 0.5) + np.sum(p_noise <= 0.5)) / 60
    assert acc >= 0.95
    both = np.concatenate([p_call, p_noise])
    assert np.all((both > 0) & (both < 1))


def test_classifier_filters_noise_burst(call_classifier):
    rng = np.random.default_rng(5)
    rate = 22050
    x = rng.normal(0, 0.01, rate)
    sweep = 4 * dg.synth_call(6500, 5000, 0.05, rate)
    x[3000 : 3000 + len(sweep)] += sweep
    x[15000:16500] += rng.normal(0, 0.2, 1500)
    spec = np.log1p(stft_spectrogram(x, 512, 128, rate).values)
    assert len(dg.get_individuals(spec)) == 2
    assert len(dg.get_individuals(spec, call_classifier)) == 1


def test_call_classifier_degenerate_inputs(rng):
    clf = dg.train_call_classifier([_call_patch(rng)], [_noise_patch(rng)], epochs=2)
    assert clf.predict_proba(np.stack([_call_patch(rng)])).shape == (1,)
    with pytest.raises(ValueError):
        dg.train_call_classifier([], [_noise_patch(rng)])


# ---------------------------------------------------------------- mixing


def test_mix_examples(rng):
    x = AudioClip(rng.uniform(-1, 1, 500), 22050)
    one_hot = lambda i: np.eye(4, dtype=bool)[i]
    same = dg.mix_samples([x, x], [one_hot(0), one_hot(0)])
    assert same.waveform.samples.tobytes() == x.samples.tobytes()
    single = dg.mix_samples([x], [one_hot(2)])
    assert single.waveform.samples.tobytes() == x.samples.tobytes()
    assert single.label.tolist() == one_hot(2).tolist() and single.k == 1
    y = AudioClip(rng.uniform(-1, 1, 300), 22050)
    three = dg.mix_samples([x, y, y], [one_hot(0), one_hot(1), one_hot(1)])
    assert three.label.tolist() == [True, True, False, False] and three.k == 3
    assert len(three.waveform) == 500
    np.testing.assert_allclose(three.waveform.samples[300:], x.samples[300:] / 3)


def test_mix_errors(rng):
    a, b = AudioClip(np.zeros(10), 22050), AudioClip(np.zeros(10), 44100)
    with pytest.raises(ValueError):
        dg.mix_samples([a, b], [np.ones(2, bool)] * 2)
    with pytest.raises(ValueError):
        dg.mix_samples([a] * 4, [np.ones(2, bool)] * 4)


@given(seed=st.integers(0, 10_000), k=st.integers(1, 3))
def test_mix_amplitude_and_popcount(seed, k):
    rng = np.random.default_rng(seed)
    clips = [AudioClip(rng.uniform(-1, 1, rng.integers(1, 200)) * rng.uniform(0, 2), 22050) for _ in range(k)]
    labels = [np.eye(5, dtype=bool)[rng.integers(0, 5)] for _ in range(k)]
    out = dg.mix_samples(clips, labels)
    assert np.max(np.abs(out.waveform.samples)) <= max(np.max(np.abs(c.samples)) for c in clips)
    assert 1 <= out.label.sum() <= k


def _pool(rng, n=6, classes=4):
    cfg = dg.FeatureConfig()
    length = cfg.samples_for(8)
    waves = [rng.standard_normal(length).astype(np.float32) for _ in range(n)]
    patches = [dg.sequence_features(w, cfg).patches for w in waves]
    labels = np.eye(classes, dtype=bool)[np.arange(n) % classes]
    return dg.SequenceSet(patches, labels, [f"r{i}.wav:0" for i in range(n)], waves)


def _digest(batches):
    return [(hash(p.tobytes()), tuple(map(tuple, l.astype(int)))) for p, _, l in batches]


def test_mixed_stream_determinism(rng):
    pool = _pool(rng)
    a = dg.MixedBatchStream(pool, 4, seed=3, num_samples=8)
    b = dg.MixedBatchStream(pool, 4, seed=3, num_samples=8)
    assert _digest(a.batches(0)) == _digest(b.batches(0))
    assert _digest(a.batches(0)) != _digest(a.batches(1))
    c = dg.MixedBatchStream(pool, 4, seed=4, num_samples=8)
    assert _digest(a.batches(0)) != _digest(c.batches(0))
    fixed = dg.MixedBatchStream(pool, 4, seed=3, num_samples=8, fixed=True)
    assert _digest(fixed.batches(0)) == _digest(fixed.batches(5))


def test_mixed_stream_labels_and_shapes(rng):
    pool = _pool(rng)
    batches = list(dg.mixed_batch_stream(pool, batch_size=5, seed=1, num_samples=12))
    assert [len(b[0]) for b in batches] == [5, 5, 2]
    for patches, mask, labels in batches:
        assert patches.shape[1:] == (8, 257, 44) and mask.all()
        pop = labels.sum(axis=1)
        assert np.all((pop >= 1) & (pop <= 3))
    ks = [s.k for s, _ in dg.MixedBatchStream(pool, seed=2, num_samples=300).samples()]
    assert set(ks) == {1, 2, 3}
    only_one = dg.mixed_batch_stream(pool, 4, k_distribution={1: 1.0}, num_samples=4)
    for _, _, labels in only_one:
        assert np.all(labels.sum(axis=1) == 1)


def test_mixed_stream_rejects_empty():
    with pytest.raises(ValueError):
        dg.MixedBatchStream(dg.SequenceSet.empty(4))


def test_sequence_stream_shuffles_per_epoch(rng):
    pool = _pool(rng, n=10)
    s = dg.SequenceStream(pool, 3, shuffle=True, seed=0)
    assert s.num_batches == 4
    assert _digest(s.batches(0)) == _digest(s.batches(0))
    assert _digest(s.batches(0)) != _digest(s.batches(1))
    plain = dg.SequenceStream(pool, 3)
    first = next(plain.batches(0))
    np.testing.assert_array_equal(first[0][1], pool.patches[1])


# ---------------------------------------------------------------- cache


def test_cache_round_trip(tmp_path, rng):
    pool = _pool(rng)
    dg.write_cache(tmp_path / "a.batd", pool)
    dg.write_cache(tmp_path / "a.wave.batd", pool, waveforms=True)
    back = dg.read_cache(tmp_path / "a.batd", 4, waveforms=tmp_path / "a.wave.batd")
    assert back.source_ids == pool.source_ids
    assert back.labels.tolist() == pool.labels.tolist()
    for a, b in zip(back.patches, pool.patches):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(back.waveforms, pool.waveforms):
        assert a.tobytes() == b.tobytes()
    raw = (tmp_path / "a.batd").read_bytes()
    assert raw[:4] == b"BATD"
    (tmp_path / "t.batd").write_bytes(raw[:-10])
    with pytest.raises(dg.CacheError):
        dg.read_cache(tmp_path / "t.batd", 4)
    (tmp_path / "x.batd").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(dg.CacheError):
        dg.read_cache(tmp_path / "x.batd", 4)


@given(bits=st.lists(st.booleans(), min_size=1, max_size=18))
def test_label_bits_round_trip(bits):
    label = np.array(bits)
    assert dg.bits_to_labels(dg.labels_to_bits(label), len(bits)).tolist() == bits


# ---------------------------------------------------------------- synthetic corpus


def test_species_bands_are_separated():
    table = dg.species_table(18)
    for a, b in zip(table, table[1:]):
        assert b.f_low - a.f_high >= 2e3 - 1e-6
    with pytest.raises(ValueError):
        dg.species_table(19)


def test_synth_clip_is_band_limited():
    for s, sp in enumerate(dg.species_table(4)):
        clip = dg.synth_clip(sp, np.random.default_rng([1, s]))
        power = np.abs(np.fft.rfft(clip.clean)) ** 2
        freqs = np.fft.rfftfreq(len(clip.clean), 1 / 96000) * 10  # back to real time
        inside = (freqs >= sp.f_low - 1e3) & (freqs <= sp.f_high + 1e3)
        assert power[inside].sum() / power.sum() >= 0.95
        assert 10 <= clip.snr_db <= 30
        for t0, t1 in clip.calls:
            assert 0 <= t0 < t1 <= 0.12


def test_synth_corpus_counts_and_reproducibility(tmp_path):
    m = dg.synth_chirp_dataset(tmp_path / "a", num_species=4, clips_per_species=50, seed=2)
    wavs = sorted((tmp_path / "a").rglob("*.wav"))
    assert len(wavs) == 200 and len(m.entries) == 200
    assert (tmp_path / "a" / "manifest.json").exists()
    clip = read_wav(wavs[0])
    assert clip.sample_rate == 96000 and len(clip) == 115200  # 0.12 s real, expanded 10x
    dg.synth_chirp_dataset(tmp_path / "b", num_species=4, clips_per_species=50, seed=2, threads=3)
    for w in wavs:
        assert w.read_bytes() == (tmp_path / "b" / w.relative_to(tmp_path / "a")).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()


def test_recordings_never_cross_splits(tiny_corpus):
    _, manifest = tiny_corpus
    sets, missing = dg.build_sequence_sets(manifest)
    assert missing == []
    recs = {k: v.recordings for k, v in sets.items()}
    assert not (recs["train"] & recs["val"]) and not (recs["train"] & recs["test"]) and not (recs["val"] & recs["test"])
    assert sum(len(v) for v in sets.values()) == 32  # one 8-patch sequence per desk clip
    for split, s in sets.items():
        expected = {e.path for e in manifest.split(split)}
        assert s.recordings == expected


def test_build_reports_missing_files(tiny_corpus, tmp_path):
    root, manifest = tiny_corpus
    entries = list(manifest.entries) + [dg.ManifestEntry("nowhere.wav", 0, "train")]
    sets, missing = dg.build_sequence_sets(dg.DatasetManifest(manifest.species, entries, root), threads=2)
    assert [p for p, _ in missing] == ["nowhere.wav"]
    assert len(sets["train"]) == len(manifest.split("train"))
