import numpy as np
import pytest

from samix.audio import AudioClip, SAMPLE_RATE, read_wav
from samix.errors import ConfigError, FeatureError, InsufficientDataError
from samix.labeler import (
    Codebook,
    FeatureConfig,
    assign_labels,
    fit_codebook,
    frame_count,
    frame_spectral_features,
    load_codebook,
    load_labels,
    save_codebook,
    save_labels,
    silence_labels,
)
from samix.model import ModelConfig


class TestFraming:
    def test_one_second_has_49_frames(self):
        assert frame_count(SAMPLE_RATE, FeatureConfig()) == 49

    def test_exact_window_is_one_frame(self):
        assert frame_count(400, FeatureConfig()) == 1
        assert frame_count(719, FeatureConfig()) == 1
        assert frame_count(720, FeatureConfig()) == 2

    def test_too_short_raises(self):
        with pytest.raises(FeatureError):
            frame_count(399, FeatureConfig())

    def test_frame_rate_matches_encoder(self):
        # 20 ms features and a stride-320 conv stack stay within the +/-2
        # frame alignment tolerance across a broad range of lengths
        cfg = ModelConfig()
        fcfg = FeatureConfig()
        for seconds in (0.5, 1.0, 1.7, 3.0, 10.0):
            n = int(seconds * SAMPLE_RATE)
            assert abs(cfg.encoder_frames(n) - frame_count(n, fcfg)) <= 2


class TestFeatures:
    def test_shape_and_finiteness(self):
        clip = AudioClip(0.2 * np.random.default_rng(0).standard_normal(SAMPLE_RATE))
        feats = frame_spectral_features(clip, FeatureConfig())
        assert feats.shape == (49, 39)
        assert np.all(np.isfinite(feats))

    def test_gain_invariance(self):
        rng = np.random.default_rng(1)
        sig = 0.3 * np.sin(2 * np.pi * 500 * np.arange(SAMPLE_RATE) / SAMPLE_RATE)
        sig += 0.01 * rng.standard_normal(SAMPLE_RATE)
        a = frame_spectral_features(AudioClip(sig), FeatureConfig())
        b = frame_spectral_features(AudioClip(0.37 * sig), FeatureConfig())
        # cepstra without the energy coefficient shift only negligibly with gain
        assert np.max(np.abs(a - b)) < 1e-6

    def test_distinct_tones_are_distinct(self):
        t = np.arange(SAMPLE_RATE) / SAMPLE_RATE
        a = frame_spectral_features(AudioClip(0.3 * np.sin(2 * np.pi * 300 * t)), FeatureConfig())
        b = frame_spectral_features(AudioClip(0.3 * np.sin(2 * np.pi * 900 * t)), FeatureConfig())
        assert np.linalg.norm(a.mean(0) - b.mean(0)) > 1.0

    def test_silence_floor_does_not_blow_up(self):
        feats = frame_spectral_features(AudioClip(np.full(SAMPLE_RATE, 1e-12)), FeatureConfig())
        assert np.all(np.isfinite(feats))


class TestCodebook:
    def test_determinism(self):
        feats = np.random.default_rng(0).standard_normal((200, 10))
        a = fit_codebook(feats, 8, seed=5)
        b = fit_codebook(feats, 8, seed=5)
        assert np.array_equal(a.centroids, b.centroids)

    def test_separated_clusters_recovered(self):
        rng = np.random.default_rng(2)
        centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]])
        feats = np.concatenate(
            [c + 0.1 * rng.standard_normal((50, 2)) for c in centers]
        )
        cb = fit_codebook(feats, 4, seed=0)
        found = cb.centroids[np.lexsort(cb.centroids.T)]
        want = centers[np.lexsort(centers.T)]
        assert np.max(np.abs(found - want)) < 0.1

    def test_insufficient_distinct_frames(self):
        feats = np.tile(np.array([[1.0, 2.0]]), (50, 1))
        with pytest.raises(InsufficientDataError):
            fit_codebook(feats, 4, seed=0)

    def test_vocab_and_silence_id(self):
        cb = Codebook(np.zeros((16, 39)))
        assert cb.k == 16
        assert cb.silence_id == 16
        assert cb.vocab_size == 17

    def test_roundtrip(self, tmp_path, toy_codebook):
        path = str(tmp_path / "cb.bin")
        save_codebook(path, toy_codebook)
        back = load_codebook(path)
        assert np.array_equal(back.centroids, toy_codebook.centroids)
        assert back.feature_cfg == toy_codebook.feature_cfg

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "cb.bin"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 64)
        with pytest.raises(ConfigError, match="magic"):
            load_codebook(str(path))


class TestAssignment:
    def test_tie_breaks_toward_lower_index(self):
        cb = Codebook(np.array([[1.0, 0.0], [-1.0, 0.0]]))
        from samix.labeler import _assign

        # the origin is equidistant from both centroids
        assert _assign(np.array([[0.0, 0.0]]), cb.centroids)[0] == 0

    def test_labels_in_range_and_aligned(self, toy_corpus, toy_codebook):
        entry = toy_corpus.entries[0]
        clip = read_wav(entry.path, entry.speaker_id, entry.utterance_id)
        cfg = ModelConfig(k=16)
        t_enc = cfg.encoder_frames(len(clip.samples))
        seq = assign_labels(clip, toy_codebook, target_frames=t_enc)
        assert len(seq) == t_enc
        assert seq.labels.min() >= 0
        assert seq.labels.max() < toy_codebook.k

    def test_alignment_tolerance_enforced(self, toy_codebook):
        clip = AudioClip(0.1 * np.random.default_rng(3).standard_normal(SAMPLE_RATE))
        with pytest.raises(ConfigError, match="tolerance"):
            assign_labels(clip, toy_codebook, target_frames=60)

    def test_pad_repeats_last_label(self, toy_codebook):
        clip = AudioClip(0.1 * np.random.default_rng(4).standard_normal(SAMPLE_RATE))
        seq49 = assign_labels(clip, toy_codebook)
        seq51 = assign_labels(clip, toy_codebook, target_frames=51)
        assert len(seq51) == 51
        assert np.array_equal(seq51.labels[:49], seq49.labels)
        assert np.all(seq51.labels[49:] == seq49.labels[-1])

    def test_labels_stable_under_gain(self, toy_corpus, toy_codebook):
        entry = toy_corpus.entries[5]
        clip = read_wav(entry.path)
        a = assign_labels(clip, toy_codebook).labels
        b = assign_labels(AudioClip(0.45 * clip.samples), toy_codebook).labels
        assert np.mean(a == b) == 1.0

    def test_silence_labels(self, toy_codebook):
        seq = silence_labels(12, toy_codebook)
        assert len(seq) == 12
        assert np.all(seq.labels == toy_codebook.silence_id)
        with pytest.raises(ConfigError):
            silence_labels(0, toy_codebook)

    def test_label_file_roundtrip(self, tmp_path, toy_codebook):
        clip = AudioClip(0.1 * np.random.default_rng(5).standard_normal(SAMPLE_RATE))
        seq = assign_labels(clip, toy_codebook)
        path = str(tmp_path / "labels.txt")
        save_labels(path, seq)
        assert np.array_equal(load_labels(path).labels, seq.labels)
