"""Audio frontend: framing, log-Mel features, mean normalization, speech gating.

The feature pipeline is fixed at 16 kHz mono input, 25 ms Hann windows
with a 10 ms shift, 512-point magnitude FFT, and a 40-band triangular
Mel filterbank spanning 20 Hz to Nyquist, followed by a natural log with
floor 1e-10.  Mean normalization is either whole-utterance (batch) or
cumulative (causal, the streaming default).

Speech activity detection is energy based: per-frame log energy is
compared against a running low-percentile noise floor, clamped so that
frames above an absolute speech reference level always count as speech.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from .errors import AudioFormatError, BadInputError

SAMPLE_RATE = 16_000
N_MELS = 40
FRAME_SHIFT_S = 0.010
WINDOW_S = 0.025
PREEMPHASIS = 0.97
FFT_SIZE = 512
MEL_FMIN_HZ = 20.0
LOG_FLOOR = 1e-10

FEATURE_MAGIC = b"LIDF"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class AudioBuffer:
    """Mono PCM samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", s)
        if self.sample_rate <= 0:
            raise BadInputError("sample_rate must be positive")
        if not np.all(np.isfinite(s)):
            raise BadInputError("audio contains non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class FeatureSequence:
    """T x 40 feature matrix with its frame shift and clock origin.

    ``origin_time`` is the offset in seconds of frame 0 relative to the
    speech-activity onset; feature sequences built directly from feature
    blobs or the simulator use origin 0.
    """

    frames: np.ndarray
    frame_shift: float = FRAME_SHIFT_S
    origin_time: float = 0.0

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 2:
            raise BadInputError(f"feature frames must be 2-D, got shape {f.shape}")
        if f.shape[0] > 0 and not np.all(np.isfinite(f)):
            raise BadInputError("feature frames contain non-finite values")
        object.__setattr__(self, "frames", f)

    @property
    def n_frames(self) -> int:
        return int(self.frames.shape[0])

    @property
    def n_dims(self) -> int:
        return int(self.frames.shape[1])

    def prefix(self, seconds: float) -> "FeatureSequence":
        """First ``seconds`` worth of frames (no lookahead)."""
        n = min(self.n_frames, int(round(seconds / self.frame_shift)))
        return FeatureSequence(self.frames[:n], self.frame_shift, self.origin_time)


@dataclass(frozen=True)
class SpeechGate:
    """Result of speech activity detection."""

    triggered: bool
    onset: float | None
    speech_dur: float


@dataclass(frozen=True)
class SADConfig:
    # short disjoint analysis frames keep the onset estimate within one hop
    window: float = 0.010
    hop: float = 0.010
    percentile: float = 10.0
    # margin above the noise floor, in natural-log energy units (~8.7 dB)
    margin: float = 2.0
    # frames above this log energy (-40 dBFS) are speech regardless of the floor
    speech_ref_log_energy: float = float(np.log(1e-4))
    hangover: float = 0.12
    min_speech_dur: float = 0.3


def frame_signal(
    audio: AudioBuffer, window: float = WINDOW_S, hop: float = FRAME_SHIFT_S
) -> np.ndarray:
    """Slice audio into Hann-windowed frames.

    Returns an (n_frames, window_samples) matrix with
    n_frames = floor((N - W) / H) + 1; audio shorter than one window
    yields an empty (0, W) matrix.
    """
    w = int(round(window * audio.sample_rate))
    h = int(round(hop * audio.sample_rate))
    if w <= 0 or h <= 0:
        raise BadInputError("window and hop must be positive")
    n = len(audio.samples)
    if n < w:
        return np.zeros((0, w))
    n_frames = (n - w) // h + 1
    idx = np.arange(w)[None, :] + h * np.arange(n_frames)[:, None]
    return audio.samples[idx] * np.hanning(w)[None, :]


def mel_filterbank(
    sample_rate: int = SAMPLE_RATE,
    n_fft: int = FFT_SIZE,
    n_mels: int = N_MELS,
    fmin: float = MEL_FMIN_HZ,
) -> np.ndarray:
    """Triangular filters on the Mel scale, (n_mels, n_fft // 2 + 1)."""

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    fmax = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    fb = np.zeros((n_mels, len(bin_freqs)))
    for m in range(n_mels):
        lo, center, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (bin_freqs - lo) / (center - lo)
        down = (hi - bin_freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_band_centers_hz(
    sample_rate: int = SAMPLE_RATE, n_mels: int = N_MELS, fmin: float = MEL_FMIN_HZ
) -> np.ndarray:
    """Center frequency of each Mel band, in Hz."""
    mel = 2595.0 * np.log10(1.0 + np.array([fmin, sample_rate / 2.0]) / 700.0)
    points = np.linspace(mel[0], mel[1], n_mels + 2)
    return 700.0 * (10.0 ** (points[1:-1] / 2595.0) - 1.0)


def logmel(
    framed: np.ndarray, sample_rate: int = SAMPLE_RATE, n_mels: int = N_MELS
) -> FeatureSequence:
    """Log-Mel coefficients per frame.

    Per frame: pre-emphasis 0.97, 512-point magnitude FFT, triangular Mel
    filterbank, natural log with floor 1e-10.  Silence therefore maps to
    log(1e-10) in every band.
    """
    framed = np.asarray(framed, dtype=np.float64)
    if framed.shape[0] == 0:
        raise BadInputError("logmel requires at least one frame")
    emphasized = framed.copy()
    emphasized[:, 1:] -= PREEMPHASIS * framed[:, :-1]
    spectrum = np.abs(np.fft.rfft(emphasized, n=FFT_SIZE, axis=1))
    fb = mel_filterbank(sample_rate, FFT_SIZE, n_mels)
    energies = spectrum @ fb.T
    return FeatureSequence(np.log(np.maximum(energies, LOG_FLOOR)))


def mean_normalize(features: FeatureSequence, mode: str = "cumulative") -> FeatureSequence:
    """Subtract per-dimension means.

    "whole_utterance" removes the mean over all frames (column means of
    the result are exactly zero up to rounding); "cumulative" subtracts
    from frame t the mean of frames 0..t, which is causal and matches
    what a streaming frontend can compute.
    """
    x = features.frames
    if x.shape[0] < 1:
        raise BadInputError("mean_normalize requires at least one frame")
    if mode == "whole_utterance":
        out = x - x.mean(axis=0, keepdims=True)
    elif mode == "cumulative":
        counts = np.arange(1, x.shape[0] + 1, dtype=np.float64)[:, None]
        out = x - np.cumsum(x, axis=0) / counts
    else:
        raise BadInputError(f"unknown normalization mode {mode!r}")
    return FeatureSequence(out, features.frame_shift, features.origin_time)


def detect_speech(audio: AudioBuffer, cfg: SADConfig = SADConfig()) -> SpeechGate:
    """Energy-based speech activity detection.

    A frame is speech when its log energy exceeds
    min(running noise floor, speech reference level) + margin, where the
    noise floor is the configured percentile of the log energies seen so
    far.  Speech runs are extended by a hangover to bridge short dips;
    the gate triggers on the first run lasting at least min_speech_dur.
    """
    w = int(round(cfg.window * audio.sample_rate))
    h = int(round(cfg.hop * audio.sample_rate))
    n = len(audio.samples)
    if n < w:
        return SpeechGate(triggered=False, onset=None, speech_dur=0.0)
    n_frames = (n - w) // h + 1
    idx = np.arange(w)[None, :] + h * np.arange(n_frames)[:, None]
    log_energy = np.log(np.mean(audio.samples[idx] ** 2, axis=1) + 1e-12)

    active = np.zeros(n_frames, dtype=bool)
    for t in range(n_frames):
        floor = np.percentile(log_energy[: t + 1], cfg.percentile)
        threshold = min(floor, cfg.speech_ref_log_energy - cfg.margin) + cfg.margin
        active[t] = log_energy[t] > threshold

    hang = int(round(cfg.hangover / cfg.hop))
    if hang > 0 and active.any():
        smoothed = active.copy()
        last_active = -(hang + 1)
        for t in range(n_frames):
            if active[t]:
                last_active = t
            elif t - last_active <= hang:
                smoothed[t] = True
        active = smoothed

    speech_dur = float(active.sum()) * cfg.hop
    min_frames = max(1, int(round(cfg.min_speech_dur / cfg.hop)))
    run_start, run_len = None, 0
    for t in range(n_frames):
        if active[t]:
            if run_len == 0:
                run_start = t
            run_len += 1
            if run_len >= min_frames:
                return SpeechGate(True, float(run_start) * cfg.hop, speech_dur)
        else:
            run_len = 0
    return SpeechGate(False, None, speech_dur)


def extract_features(
    audio: AudioBuffer, normalization: str = "cumulative"
) -> FeatureSequence:
    """Full frontend: frame, log-Mel, mean-normalize."""
    framed = frame_signal(audio, WINDOW_S, FRAME_SHIFT_S)
    if framed.shape[0] == 0:
        return FeatureSequence(np.zeros((0, N_MELS)))
    return mean_normalize(logmel(framed, audio.sample_rate), normalization)


def read_wav(path) -> AudioBuffer:
    """Read PCM16 mono 16 kHz audio; anything else is rejected."""
    with wave.open(str(path), "rb") as wf:
        if wf.getnchannels() != 1:
            raise AudioFormatError(f"{path}: expected mono audio")
        if wf.getsampwidth() != 2:
            raise AudioFormatError(f"{path}: expected 16-bit PCM")
        if wf.getframerate() != SAMPLE_RATE:
            raise AudioFormatError(
                f"{path}: expected {SAMPLE_RATE} Hz, got {wf.getframerate()}"
            )
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioBuffer(samples, SAMPLE_RATE)


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = np.clip(np.round(audio.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(audio.sample_rate)
        wf.writeframes(pcm.tobytes())


def write_features(fh_or_path, features: FeatureSequence) -> None:
    """Feature blob: magic, version u16, n_frames u32, n_dims u32, f32 LE rows."""
    frames = np.ascontiguousarray(features.frames, dtype="<f4")
    header = FEATURE_MAGIC + struct.pack(
        "<HII", FEATURE_VERSION, frames.shape[0], frames.shape[1]
    )
    if hasattr(fh_or_path, "write"):
        fh: BinaryIO = fh_or_path
        fh.write(header)
        fh.write(frames.tobytes())
    else:
        with open(fh_or_path, "wb") as fh:
            fh.write(header)
            fh.write(frames.tobytes())


def read_features(fh_or_path) -> FeatureSequence:
    if hasattr(fh_or_path, "read"):
        data = fh_or_path.read()
    else:
        with open(fh_or_path, "rb") as fh:
            data = fh.read()
    if data[:4] != FEATURE_MAGIC:
        raise BadInputError("not a feature blob (bad magic)")
    version, n_frames, n_dims = struct.unpack("<HII", data[4:14])
    if version != FEATURE_VERSION:
        raise BadInputError(f"unsupported feature blob version {version}")
    body = np.frombuffer(data[14:], dtype="<f4")
    if body.size != n_frames * n_dims:
        raise BadInputError("feature blob truncated")
    return FeatureSequence(body.reshape(n_frames, n_dims).astype(np.float64))
