"""Audio clip container and WAV I/O (mono, 16 kHz, PCM16 or float32)."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import AudioFormatError

SAMPLE_RATE = 16000


@dataclass
class AudioClip:
    """A mono waveform with samples in [-1, 1] at 16 kHz."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    speaker_id: str = ""
    utterance_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise AudioFormatError(
                f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}"
            )
        if self.samples.ndim != 1 or len(self.samples) == 0:
            raise AudioFormatError("clip must be non-empty and mono")
        if not np.all(np.isfinite(self.samples)):
            raise AudioFormatError("clip contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.samples**2)))


def read_wav(path: str, speaker_id: str = "", utterance_id: str = "") -> AudioClip:
    """Load a WAV file, rejecting anything but mono 16 kHz PCM16/float32."""
    if not os.path.exists(path):
        raise AudioFormatError(f"no such file: {path}")
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioFormatError(f"{path}: not a readable WAV file: {exc}") from None
    if rate != SAMPLE_RATE:
        raise AudioFormatError(f"{path}: sample rate {rate}, expected {SAMPLE_RATE}")
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: {data.shape[1]} channels, expected mono")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample format {data.dtype}")
    return AudioClip(samples, rate, speaker_id=speaker_id, utterance_id=utterance_id)


def write_wav(path: str, clip: AudioClip) -> None:
    """Write a clip as 32-bit float WAV."""
    wavfile.write(path, clip.sample_rate, clip.samples.astype(np.float32))
