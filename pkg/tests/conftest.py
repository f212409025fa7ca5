import os

import numpy as np
import pytest
import torch

from samix.audio import AudioClip, SAMPLE_RATE, read_wav, write_wav
from samix.labeler import FeatureConfig, fit_codebook, frame_spectral_features
from samix.mixsim import load_manifest
from samix.model import ModelConfig

torch.set_num_threads(max(1, os.cpu_count() or 1))


def tone_clip(freq: float, seconds: float, seed: int = 0, amp: float = 0.28) -> np.ndarray:
    """Two-harmonic tone at a multiple of 50 Hz; every 20 ms analysis frame of
    the result is identical, so its pseudo-label sequence is constant."""
    n = int(seconds * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    sig = amp * np.sin(2 * np.pi * freq * t) + 0.18 * np.sin(2 * np.pi * 2 * freq * t + 1.0)
    sig += 1e-4 * np.random.default_rng(seed).standard_normal(n)
    return sig


def write_tone_corpus(root, n_speakers=4, utts_per_speaker=5, with_noise=False):
    """Synthetic corpus: each utterance has a distinct, well-separated spectral
    signature; speakers occupy disjoint frequency bands."""
    lines = []
    for s in range(n_speakers):
        for u in range(utts_per_speaker):
            freq = 300.0 + 150.0 * (s * utts_per_speaker + u)
            dur = 1.6 + 0.1 * u
            utt = f"s{s}_u{u}"
            path = os.path.join(root, f"{utt}.wav")
            sig = tone_clip(freq, dur, seed=s * 10 + u)
            write_wav(path, AudioClip(sig, SAMPLE_RATE, f"spk{s}", utt))
            lines.append(f"{utt}\tspk{s}\t{path}\t{dur}")
    if with_noise:
        rng = np.random.default_rng(99)
        noise = 0.05 * rng.standard_normal(int(2.0 * SAMPLE_RATE))
        path = os.path.join(root, "noise0.wav")
        write_wav(path, AudioClip(noise, SAMPLE_RATE, "NOISE", "noise0"))
        lines.append(f"noise0\tNOISE\t{path}\t2.0")
    manifest_path = os.path.join(root, "manifest.tsv")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest_path


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    manifest_path = write_tone_corpus(str(root), with_noise=True)
    return load_manifest(manifest_path)


@pytest.fixture(scope="session")
def toy_codebook(toy_corpus):
    fcfg = FeatureConfig()
    feats = [
        frame_spectral_features(read_wav(e.path, e.speaker_id, e.utterance_id), fcfg)
        for e in toy_corpus.entries
    ]
    return fit_codebook(np.concatenate(feats), 16, seed=0, feature_cfg=fcfg)


@pytest.fixture(scope="session")
def toy_model_cfg():
    return ModelConfig(k=16)


@pytest.fixture()
def small_cfg():
    return ModelConfig(
        dim=16, embed_dim=8, layer_count=2, satl_layer_index=1,
        attention_heads=2, ffn_dim=32, k=4,
    )
