"""Dynamic mixture simulation: scenario sampling, gain realization, rendering.

Scenarios cover clean speech, noisy single-speaker speech, two-speaker
overlapped speech, and noisy two-speaker overlapped speech. A constrained
rendering mode caps the overlapped portion below 50% of the primary
speaker's duration and marks that primary source.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .audio import AudioClip, read_wav
from .errors import (
    ConfigError,
    DegenerateSignalError,
    EnrollmentError,
    ManifestError,
    SimulationError,
)

TWO_SPEAKER_KINDS = ("overlap", "noisy_overlap")
NOISY_KINDS = ("noisy_single", "noisy_overlap")
SCENARIO_KINDS = ("clean", "noisy_single", "overlap", "noisy_overlap")

# Reserved speaker_id marking noise clips in the manifest.
NOISE_SPEAKER = "NOISE"

CLIP_PEAK = 0.99


@dataclass
class ScenarioSpec:
    kind: str
    overlap_ratio: float = 0.0
    sir_db: float = 0.0
    snr_db: float = 0.0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ConfigError(f"unknown scenario kind: {self.kind}")
        if not (0.0 <= self.overlap_ratio <= 1.0):
            raise ConfigError(f"overlap_ratio out of [0,1]: {self.overlap_ratio}")
        if not (np.isfinite(self.sir_db) and np.isfinite(self.snr_db)):
            raise ConfigError("sir_db/snr_db must be finite")

    @property
    def two_speaker(self) -> bool:
        return self.kind in TWO_SPEAKER_KINDS

    @property
    def noisy(self) -> bool:
        return self.kind in NOISY_KINDS


@dataclass
class SimConfig:
    """Scenario priors and continuous parameter ranges."""

    scenario_probs: dict = field(
        default_factory=lambda: {k: 0.25 for k in SCENARIO_KINDS}
    )
    overlap_range: tuple = (0.0, 1.0)
    sir_range: tuple = (-5.0, 5.0)
    snr_range: tuple = (-5.0, 20.0)

    def __post_init__(self):
        total = sum(self.scenario_probs.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"scenario probabilities sum to {total}, expected 1")
        for k in self.scenario_probs:
            if k not in SCENARIO_KINDS:
                raise ConfigError(f"unknown scenario kind in probs: {k}")


@dataclass
class PlacedSource:
    clip: AudioClip
    gain: float
    onset: int  # sample offset of the clip inside the mixture


@dataclass
class MixtureSample:
    mixture: AudioClip
    sources: list  # list[PlacedSource], 1 or 2 entries
    noise: Optional[PlacedSource]
    scenario: ScenarioSpec
    primary_index: Optional[int] = None

    def reconstruct(self) -> np.ndarray:
        """Sum of placed, gain-scaled sources plus scaled noise."""
        out = np.zeros(len(self.mixture.samples))
        for src in self.sources:
            n = len(src.clip.samples)
            out[src.onset : src.onset + n] += src.gain * src.clip.samples
        if self.noise is not None:
            n = len(self.noise.clip.samples)
            out[self.noise.onset : self.noise.onset + n] += (
                self.noise.gain * self.noise.clip.samples
            )
        return out

    def source_track(self, index: int) -> np.ndarray:
        """The scaled source placed on the full mixture timeline."""
        src = self.sources[index]
        out = np.zeros(len(self.mixture.samples))
        n = len(src.clip.samples)
        out[src.onset : src.onset + n] = src.gain * src.clip.samples
        return out


@dataclass
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    path: str
    duration: float


@dataclass
class CorpusManifest:
    entries: list
    noise_entries: list

    def speakers(self) -> list:
        seen = {}
        for e in self.entries:
            seen.setdefault(e.speaker_id, []).append(e)
        return sorted(seen)

    def by_speaker(self, speaker_id: str) -> list:
        return [e for e in self.entries if e.speaker_id == speaker_id]

    def by_utterance(self, utterance_id: str) -> ManifestEntry:
        for e in self.entries + self.noise_entries:
            if e.utterance_id == utterance_id:
                return e
        raise ManifestError(f"unknown utterance_id: {utterance_id}")


def load_manifest(path: str, require_enrollment: bool = True) -> CorpusManifest:
    """Parse a tab-separated manifest (utterance_id, speaker_id, path, duration).

    Lines starting with '#' are ignored. Noise clips use the reserved
    speaker_id "NOISE" and are exempt from the two-utterance rule.
    """
    if not os.path.exists(path):
        raise ManifestError(f"manifest not found: {path}")
    entries, noise_entries = [], []
    seen_ids = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ManifestError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}"
                )
            utt, spk, clip_path, dur_s = parts
            try:
                dur = float(dur_s)
            except ValueError:
                raise ManifestError(
                    f"{path}:{lineno}: duration not a number: {dur_s!r}"
                ) from None
            if utt in seen_ids:
                raise ManifestError(f"{path}:{lineno}: duplicate utterance_id {utt!r}")
            seen_ids.add(utt)
            entry = ManifestEntry(utt, spk, clip_path, dur)
            (noise_entries if spk == NOISE_SPEAKER else entries).append(entry)
    manifest = CorpusManifest(entries, noise_entries)
    if require_enrollment:
        for spk in manifest.speakers():
            if len(manifest.by_speaker(spk)) < 2:
                raise ManifestError(
                    f"speaker {spk!r} has fewer than 2 utterances; enrollment "
                    "requires a clip disjoint from the mixture source"
                )
    return manifest


def sample_scenario(rng: np.random.Generator, cfg: SimConfig) -> ScenarioSpec:
    """Draw a scenario kind per cfg priors and its continuous parameters."""
    kinds = sorted(cfg.scenario_probs)
    probs = np.array([cfg.scenario_probs[k] for k in kinds])
    kind = kinds[int(rng.choice(len(kinds), p=probs / probs.sum()))]
    spec = ScenarioSpec(kind=kind)
    if spec.two_speaker:
        spec.overlap_ratio = float(rng.uniform(*cfg.overlap_range))
        spec.sir_db = float(rng.uniform(*cfg.sir_range))
    if spec.noisy:
        spec.snr_db = float(rng.uniform(*cfg.snr_range))
    return spec


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.asarray(x, dtype=np.float64) ** 2)))


def gain_for_ratio(reference: np.ndarray, other: np.ndarray, target_db: float) -> float:
    """Gain g such that 20*log10(rms(reference) / (g*rms(other))) == target_db.

    Both arrays should already be restricted to the mutually overlapped region.
    """
    rms_ref, rms_other = _rms(reference), _rms(other)
    if rms_other <= 0.0:
        raise DegenerateSignalError("gain target has zero RMS")
    if rms_ref <= 0.0:
        raise DegenerateSignalError("gain reference has zero RMS")
    return (rms_ref / rms_other) * 10.0 ** (-target_db / 20.0)


def _load_entry(entry: ManifestEntry) -> AudioClip:
    return read_wav(entry.path, speaker_id=entry.speaker_id, utterance_id=entry.utterance_id)


def _pick_two_speakers(corpus: CorpusManifest, rng: np.random.Generator):
    speakers = corpus.speakers()
    if len(speakers) < 2:
        raise SimulationError("two-speaker scenario needs >= 2 speakers in corpus")
    idx = rng.choice(len(speakers), size=2, replace=False)
    return speakers[int(idx[0])], speakers[int(idx[1])]


def _pick_utterance(corpus: CorpusManifest, speaker: str, rng: np.random.Generator):
    utts = corpus.by_speaker(speaker)
    return utts[int(rng.integers(len(utts)))]


def _fit_noise(noise: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    """Random crop when long enough, tile otherwise."""
    if len(noise) >= length:
        start = int(rng.integers(len(noise) - length + 1))
        return noise[start : start + length]
    reps = int(np.ceil(length / len(noise)))
    return np.tile(noise, reps)[:length]


def _place_interferer(
    target: AudioClip,
    interferer: AudioClip,
    overlap_ratio: float,
    sir_db: float,
    rng: np.random.Generator,
):
    """Crop the interferer to the requested overlap and place it at a random onset.

    The mixture timeline equals the target clip; the overlapped region is
    overlap_ratio of the target's duration.
    """
    len_t = len(target.samples)
    ov_len = int(round(overlap_ratio * len_t))
    if ov_len > len(interferer.samples):
        raise SimulationError(
            f"requested overlap of {ov_len} samples exceeds interferer length "
            f"{len(interferer.samples)}"
        )
    if ov_len == 0:
        return None  # interferer degenerates to nothing
    crop_start = int(rng.integers(len(interferer.samples) - ov_len + 1))
    seg = interferer.samples[crop_start : crop_start + ov_len]
    onset = int(rng.integers(len_t - ov_len + 1))
    target_seg = target.samples[onset : onset + ov_len]
    gain = gain_for_ratio(target_seg, seg, sir_db)
    clip = AudioClip(
        seg, speaker_id=interferer.speaker_id, utterance_id=interferer.utterance_id
    )
    return PlacedSource(clip, gain, onset)


def _assemble(
    target: AudioClip,
    interferer_placed: Optional[PlacedSource],
    spec: ScenarioSpec,
    corpus: CorpusManifest,
    rng: np.random.Generator,
    primary_index: Optional[int] = None,
) -> MixtureSample:
    sources = [PlacedSource(target, 1.0, 0)]
    if interferer_placed is not None:
        sources.append(interferer_placed)

    noise_placed = None
    if spec.noisy:
        if not corpus.noise_entries:
            raise SimulationError("noisy scenario but manifest has no noise entries")
        entry = corpus.noise_entries[int(rng.integers(len(corpus.noise_entries)))]
        noise_clip = _load_entry(entry)
        fitted = _fit_noise(noise_clip.samples, len(target.samples), rng)
        noise_gain = gain_for_ratio(target.samples, fitted, spec.snr_db)
        noise_placed = PlacedSource(
            AudioClip(fitted, speaker_id=NOISE_SPEAKER, utterance_id=entry.utterance_id),
            noise_gain,
            0,
        )

    mix = np.zeros(len(target.samples))
    for src in sources:
        mix[src.onset : src.onset + len(src.clip.samples)] += src.gain * src.clip.samples
    if noise_placed is not None:
        mix += noise_placed.gain * noise_placed.clip.samples

    peak = float(np.max(np.abs(mix)))
    if peak > CLIP_PEAK:
        scale = CLIP_PEAK / peak
        mix *= scale
        for src in sources:
            src.gain *= scale
        if noise_placed is not None:
            noise_placed.gain *= scale

    mixture = AudioClip(mix, speaker_id="", utterance_id="")
    return MixtureSample(mixture, sources, noise_placed, spec, primary_index)


def render_mixture(
    spec: ScenarioSpec, corpus: CorpusManifest, rng: np.random.Generator
) -> MixtureSample:
    """Render one mixture for the given scenario from the corpus."""
    if spec.two_speaker:
        spk_a, spk_b = _pick_two_speakers(corpus, rng)
        target = _load_entry(_pick_utterance(corpus, spk_a, rng))
        interferer = _load_entry(_pick_utterance(corpus, spk_b, rng))
        placed = _place_interferer(target, interferer, spec.overlap_ratio, spec.sir_db, rng)
    else:
        speakers = corpus.speakers()
        if not speakers:
            raise SimulationError("empty corpus")
        spk = speakers[int(rng.integers(len(speakers)))]
        target = _load_entry(_pick_utterance(corpus, spk, rng))
        placed = None
    return _assemble(target, placed, spec, corpus, rng)


def render_constrained_mixture(
    corpus: CorpusManifest,
    rng: np.random.Generator,
    sir_range: tuple = (-5.0, 5.0),
) -> MixtureSample:
    """Two-speaker mixture with interferer overlap strictly below 50%.

    The longer in-mixture source is marked as primary (index 0 by
    construction: the target spans the full mixture).
    """
    spk_a, spk_b = _pick_two_speakers(corpus, rng)
    target = _load_entry(_pick_utterance(corpus, spk_a, rng))
    interferer = _load_entry(_pick_utterance(corpus, spk_b, rng))

    len_t = len(target.samples)
    # Strict <50% of the primary duration, in samples.
    max_ov = (len_t + 1) // 2 - 1
    max_ov = min(max_ov, len(interferer.samples))
    if max_ov < 1:
        raise SimulationError("clips too short for constrained mixing")
    ov_len = int(rng.integers(1, max_ov + 1))
    ratio = ov_len / len_t
    sir_db = float(rng.uniform(*sir_range))
    spec = ScenarioSpec(kind="overlap", overlap_ratio=ratio, sir_db=sir_db)
    placed = _place_interferer(target, interferer, ratio, sir_db, rng)
    return _assemble(target, placed, spec, corpus, rng, primary_index=0)


def select_enrollment(
    corpus: CorpusManifest,
    speaker_id: str,
    exclude_utterance_id: str,
    rng: np.random.Generator,
) -> AudioClip:
    """A clip of speaker_id different from the mixture-source utterance."""
    candidates = [
        e for e in corpus.by_speaker(speaker_id) if e.utterance_id != exclude_utterance_id
    ]
    if not candidates:
        raise EnrollmentError(
            f"no enrollment clip for speaker {speaker_id!r} excluding "
            f"{exclude_utterance_id!r}"
        )
    return _load_entry(candidates[int(rng.integers(len(candidates)))])


def measured_ratio_db(sample: MixtureSample) -> Optional[float]:
    """Recompute the SIR over the overlapped region of a two-speaker mixture."""
    if len(sample.sources) < 2:
        return None
    tgt, itf = sample.sources[0], sample.sources[1]
    a, b = itf.onset, itf.onset + len(itf.clip.samples)
    ref = tgt.gain * tgt.clip.samples[a:b]
    other = itf.gain * itf.clip.samples
    return 20.0 * np.log10(_rms(ref) / _rms(other))
