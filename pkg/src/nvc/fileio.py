"""On-disk formats: 16-bit PCM WAV, MEL1 spectrograms, EMB1 embeddings, ALN1 alignments.

All binary formats are little-endian with float32 payloads.
"""

from __future__ import annotations

import os
import struct
import wave

import numpy as np

from .dsp import SAMPLE_RATE


class FormatError(ValueError):
    pass


def read_wav(path, expected_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a mono 16-bit PCM WAV as float64 samples in [-1, 1)."""
    try:
        with wave.open(os.fspath(path), "rb") as f:
            if f.getnchannels() != 1:
                raise FormatError(f"{path}: expected mono, got {f.getnchannels()} channels")
            if f.getsampwidth() != 2:
                raise FormatError(f"{path}: expected 16-bit PCM")
            if expected_rate is not None and f.getframerate() != expected_rate:
                raise FormatError(
                    f"{path}: sample rate {f.getframerate()} != {expected_rate} (no resampling)"
                )
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as e:
        raise FormatError(f"{path}: {e}") from e
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE):
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(os.fspath(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(sample_rate)
        f.writeframes(pcm.tobytes())


def wav_num_samples(path) -> int:
    with wave.open(os.fspath(path), "rb") as f:
        return f.getnframes()


def _write_matrix(path, magic: bytes, m: np.ndarray):
    m = np.asarray(m)
    if m.ndim != 2:
        raise FormatError(f"expected a 2-D matrix, got shape {m.shape}")
    with open(path, "wb") as f:
        f.write(magic + struct.pack("<II", *m.shape))
        f.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def _read_matrix(path, magic: bytes) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file")
    rows, cols = struct.unpack_from("<II", data, 4)
    body = data[12:]
    if len(body) != 4 * rows * cols:
        raise FormatError(f"{path}: truncated payload ({len(body)} bytes for {rows}x{cols})")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)


def write_mel(path, mel: np.ndarray):
    _write_matrix(path, b"MEL1", mel)


def read_mel(path) -> np.ndarray:
    return _read_matrix(path, b"MEL1")


def read_mel_header(path) -> tuple[int, int]:
    with open(path, "rb") as f:
        head = f.read(12)
    if len(head) < 12 or head[:4] != b"MEL1":
        raise FormatError(f"{path}: not a MEL1 file")
    return struct.unpack_from("<II", head, 4)


def write_alignment(path, a: np.ndarray):
    _write_matrix(path, b"ALN1", a)


def read_alignment(path) -> np.ndarray:
    return _read_matrix(path, b"ALN1")


def write_embedding(path, e: np.ndarray):
    e = np.asarray(e).ravel()
    with open(path, "wb") as f:
        f.write(b"EMB1" + struct.pack("<I", e.size))
        f.write(e.astype("<f4").tobytes())


def read_embedding(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:4] != b"EMB1":
        raise FormatError(f"{path}: not an EMB1 file")
    (dim,) = struct.unpack_from("<I", data, 4)
    if len(data) - 8 != 4 * dim:
        raise FormatError(f"{path}: truncated embedding")
    return np.frombuffer(data[8:], dtype="<f4").astype(np.float64)
