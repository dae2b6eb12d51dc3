"""WAV ingestion, log-mel spectrograms and a synthetic tone/chirp/noise task."""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .seeding import derive_seed, make_rng
from .tensorcore import save_tensors


class WavParseError(ValueError):
    pass


@dataclass
class PcmSignal:
    sample_rate: int
    samples: np.ndarray

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


def parse_wav(data):
    """Decode a RIFF/WAVE PCM16 byte string; stereo is averaged to mono."""
    data = bytes(data)
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavParseError("offset 0: missing RIFF/WAVE magic")
    pos = 12
    fmt = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = pos + 8
        if body + size > len(data):
            raise WavParseError(f"offset {pos}: chunk {cid!r} declares {size} bytes, "
                                f"only {len(data) - body} available")
        if cid == b"fmt ":
            if size < 16:
                raise WavParseError(f"offset {pos}: fmt chunk too short ({size} bytes)")
            code, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", data, body)
            if code != 1:
                raise WavParseError(f"offset {body}: unsupported format code {code} (PCM is 1)")
            if bits != 16:
                raise WavParseError(f"offset {body + 14}: unsupported sample width {bits} bits")
            if channels not in (1, 2) or rate == 0:
                raise WavParseError(f"offset {body}: unsupported layout ({channels} channels, {rate} Hz)")
            fmt = (channels, rate)
        elif cid == b"data":
            if fmt is None:
                raise WavParseError(f"offset {pos}: data chunk before fmt chunk")
            channels, rate = fmt
            frames = size // (2 * channels)
            pcm = np.frombuffer(data, dtype="<i2", count=frames * channels, offset=body)
            x = pcm.astype(np.float64).reshape(frames, channels) / 32768.0
            return PcmSignal(int(rate), x.mean(axis=1) if channels == 2 else x[:, 0])
        pos = body + size + (size & 1)
    raise WavParseError(f"offset {pos}: no data chunk found")


def encode_wav(signal, extra_chunks=()):
    """PCM16 mono bytes; ``extra_chunks`` are (id, payload) pairs placed before data."""
    pcm = np.clip(np.rint(np.asarray(signal.samples) * 32768.0), -32768, 32767).astype("<i2").tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, signal.sample_rate, 2 * signal.sample_rate, 2, 16)
    chunks = [b"fmt " + struct.pack("<I", len(fmt)) + fmt]
    for cid, payload in extra_chunks:
        chunks.append(cid + struct.pack("<I", len(payload)) + payload + b"\0" * (len(payload) & 1))
    chunks.append(b"data" + struct.pack("<I", len(pcm)) + pcm)
    body = b"WAVE" + b"".join(chunks)
    return b"RIFF" + struct.pack("<I", len(body)) + body


def read_wav(path):
    with open(path, "rb") as fh:
        return parse_wav(fh.read())


# ---------------------------------------------------------------------------
# spectrograms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MelParams:
    n_fft: int = 512
    win_length: int = 400
    hop_length: int = 160
    n_mels: int = 64
    fmin: float = 50.0
    fmax: float = 8000.0
    eps: float = 1e-10
    window: str = "hann"

    def validate(self, sample_rate=None):
        if self.n_fft < 1 or self.n_fft & (self.n_fft - 1):
            raise ValueError(f"FFT size must be a power of two, got {self.n_fft}")
        if not 1 <= self.win_length <= self.n_fft:
            raise ValueError(f"window length {self.win_length} must lie in [1, {self.n_fft}]")
        if self.hop_length < 1:
            raise ValueError("hop length must be >= 1")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"unknown window {self.window!r}")
        if sample_rate is not None and not 0 <= self.fmin < self.fmax <= sample_rate / 2:
            raise ValueError(f"need 0 <= fmin < fmax <= {sample_rate / 2}, got [{self.fmin}, {self.fmax}]")


def hann_periodic(n):
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_count(n_samples, params):
    return 1 + (n_samples - params.win_length) // params.hop_length


def stft(signal, params=MelParams()):
    """Complex spectrogram, shape (frames, n_fft // 2 + 1)."""
    params.validate()
    x = np.asarray(signal.samples if isinstance(signal, PcmSignal) else signal, dtype=np.float64)
    if x.size < params.win_length:
        raise ValueError(f"signal of {x.size} samples is shorter than the {params.win_length}-sample window")
    n_frames = frame_count(x.size, params)
    idx = np.arange(params.win_length)[None, :] + params.hop_length * np.arange(n_frames)[:, None]
    win = hann_periodic(params.win_length) if params.window == "hann" else np.ones(params.win_length)
    frames = np.zeros((n_frames, params.n_fft))
    frames[:, :params.win_length] = x[idx] * win
    return kernels.fft_radix2(frames)[:, :params.n_fft // 2 + 1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(params=MelParams(), sample_rate=16000):
    """(n_mels, n_fft // 2 + 1) triangles, each rescaled so its largest weight is exactly 1."""
    params.validate(sample_rate)
    centers = mel_to_hz(np.linspace(hz_to_mel(params.fmin), hz_to_mel(params.fmax), params.n_mels + 2))
    if np.any(np.diff(centers) <= 0):
        raise ValueError(f"{params.n_mels} mel bins do not fit in [{params.fmin}, {params.fmax}] Hz")
    freqs = np.arange(params.n_fft // 2 + 1) * sample_rate / params.n_fft
    lo, mid, hi = centers[:-2, None], centers[1:-1, None], centers[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    peaks = fb.max(axis=1)
    if np.any(peaks <= 0):
        raise ValueError(f"{params.n_mels} mel bins are too many for FFT size {params.n_fft}: "
                         "some filters contain no FFT bin")
    return fb / peaks[:, None]


def log_mel_raw(signal, params=MelParams()):
    """log(mel @ |stft|^2 + eps), shape (n_mels, frames), before normalization."""
    spec = stft(signal, params)
    fb = mel_filterbank(params, signal.sample_rate)
    power = spec.real ** 2 + spec.imag ** 2
    return np.log(fb @ power.T + params.eps)


def fit_frames(logmel, frames):
    """Crop or pad (with the clip's minimum) along time to exactly ``frames`` columns."""
    if logmel.shape[1] >= frames:
        return logmel[:, :frames]
    pad = np.full((logmel.shape[0], frames - logmel.shape[1]), logmel.min())
    return np.concatenate([logmel, pad], axis=1)


def normalize01(x):
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def log_mel(signal, params=MelParams(), frames=None):
    """1 x n_mels x frames image in [0, 1] (per-sample min-max)."""
    lm = log_mel_raw(signal, params)
    if frames is not None:
        lm = fit_frames(lm, frames)
    return normalize01(lm)[None]


# ---------------------------------------------------------------------------
# synthetic downstream task
# ---------------------------------------------------------------------------

TONE_CLASSES = ("tone", "chirp", "noise")


def synth_clip(label, rng, sample_rate=16000, duration=1.0):
    n = int(round(sample_rate * duration))
    t = np.arange(n) / sample_rate
    amp = rng.uniform(0.3, 0.9)
    if label == 0:
        f = rng.uniform(200.0, 2000.0)
        x = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    elif label == 1:
        f0 = rng.uniform(200.0, 1500.0)
        f1 = rng.uniform(f0 + 500.0, 4000.0)
        x = np.sin(2 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t * t / duration))
    else:
        x = rng.uniform(-1.0, 1.0, n)
    return PcmSignal(sample_rate, amp * x)


def make_tone_task(out_dir, seed, n_train, n_test, params=MelParams(), frames=64):
    """Write a 3-class WAV corpus, its log-mel tensors and ``task.json``; returns the task path."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    for sub in ("wav", "logmel"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    doc = {"classes": list(TONE_CLASSES), "label_kind": "single", "train": [], "test": []}
    for split, count, split_id in (("train", n_train, 0), ("test", n_test, 1)):
        for i in range(count):
            label = i % 3
            rng = make_rng(derive_seed(derive_seed(seed, split_id), i))
            name = f"{split}_{i:05d}"
            wav_path = os.path.join(out_dir, "wav", name + ".wav")
            with open(wav_path, "wb") as fh:
                fh.write(encode_wav(synth_clip(label, rng)))
            img = log_mel(read_wav(wav_path), params, frames)
            rel = os.path.join("logmel", name + ".spma")
            save_tensors(os.path.join(out_dir, rel), {"logmel": img.astype(np.float32)})
            doc[split].append({"path": rel, "label": label})
    path = os.path.join(out_dir, "task.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return path


def mean_mel_energy(img):
    """Average over time of each mel row, used by the linear separability check."""
    return np.asarray(img)[0].mean(axis=1)

