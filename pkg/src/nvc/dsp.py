"""Signal-processing kernel: STFT/ISTFT, mel filterbanks, log-mel features, Griffin-Lim.

Spectrograms are stored frames-major: ``(n_frames, n_fft // 2 + 1)``.
No center padding is applied, so a signal of ``n`` samples yields
``1 + (n - win_length) // hop`` frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-5
DB_RANGE = 100.0


class DspError(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = 800
    hop: int = 200
    win_length: int = 800
    window: str = "hann"
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not (0 < self.hop <= self.win_length <= self.n_fft):
            raise DspError(
                f"need 0 < hop <= win_length <= n_fft, got hop={self.hop} "
                f"win_length={self.win_length} n_fft={self.n_fft}"
            )
        if self.n_fft % 2:
            raise DspError(f"n_fft must be even, got {self.n_fft}")
        if self.window != "hann":
            raise DspError(f"unsupported window {self.window!r}")
        if self.sample_rate <= 0:
            raise DspError("sample_rate must be positive")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_bins)
    fmin: float
    fmax: float
    sample_rate: int
    n_fft: int

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window (satisfies constant overlap-add at hop = n/4)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _padded_window(cfg: StftConfig) -> np.ndarray:
    w = np.zeros(cfg.n_fft)
    start = (cfg.n_fft - cfg.win_length) // 2
    w[start:start + cfg.win_length] = hann_window(cfg.win_length)
    return w


def num_frames(n_samples: int, cfg: StftConfig) -> int:
    if n_samples < cfg.win_length:
        raise DspError(f"input too short: {n_samples} samples < win_length {cfg.win_length}")
    return 1 + (n_samples - cfg.win_length) // cfg.hop


def stft(x: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Complex STFT of a mono signal, shape ``(frames, n_fft//2 + 1)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DspError("stft expects a 1-D signal")
    n_frames = num_frames(len(x), cfg)
    # frames are n_fft wide; the window is zero outside its centered win_length span
    span = cfg.n_fft
    offset = (cfg.n_fft - cfg.win_length) // 2
    padded = np.zeros(max(len(x) + span, (n_frames - 1) * cfg.hop + span))
    padded[offset:offset + len(x)] = x
    idx = np.arange(n_frames)[:, None] * cfg.hop + np.arange(span)[None, :]
    frames = padded[idx] * _padded_window(cfg)[None, :]
    return np.fft.rfft(frames, axis=1)


def istft(spec: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Least-squares inverse STFT (windowed overlap-add divided by summed window**2).

    Output length is ``win_length + hop * (frames - 1)``.
    """
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != cfg.n_bins:
        raise DspError(
            f"spectrogram geometry {spec.shape} does not match n_fft={cfg.n_fft} "
            f"({cfg.n_bins} bins)"
        )
    n_frames = spec.shape[0]
    w = _padded_window(cfg)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1) * w[None, :]
    total = (n_frames - 1) * cfg.hop + cfg.n_fft
    out = np.zeros(total)
    norm = np.zeros(total)
    w2 = w * w
    for t in range(n_frames):
        s = t * cfg.hop
        out[s:s + cfg.n_fft] += frames[t]
        norm[s:s + cfg.n_fft] += w2
    nz = norm > 1e-12
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    offset = (cfg.n_fft - cfg.win_length) // 2
    return out[offset:offset + cfg.win_length + cfg.hop * (n_frames - 1)]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft: int = 800, n_mels: int = 80, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> MelFilterbank:
    """Triangular HTK-mel filters, each scaled by ``2 / (upper_edge - lower_edge)``."""
    if fmax is None:
        fmax = sample_rate / 2
    if not (0 <= fmin < fmax <= sample_rate / 2):
        raise DspError(f"invalid frequency range fmin={fmin} fmax={fmax} for sr={sample_rate}")
    if n_mels < 2:
        raise DspError("n_mels must be >= 2")
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lo) / (ctr - lo)
    falling = (hi - freqs[None, :]) / (hi - ctr)
    tri = np.maximum(0.0, np.minimum(rising, falling))
    weights = tri * (2.0 / (hi - lo))
    return MelFilterbank(weights, float(fmin), float(fmax), sample_rate, n_fft)


def mel_centers(fb: MelFilterbank) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(fb.fmin), hz_to_mel(fb.fmax), fb.n_mels + 2))
    return edges[1:-1]


def amplitude_spectrogram(x: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """|STFT| scaled by 2/sum(window) so a unit sine peaks near 1."""
    return np.abs(stft(x, cfg)) * (2.0 / hann_window(cfg.win_length).sum())


def log_mel(x: np.ndarray, cfg: StftConfig, fb: MelFilterbank) -> np.ndarray:
    """Un-normalized log-mel in dB (floor at 20*log10(LOG_FLOOR) = -100 dB)."""
    _check_fb(cfg, fb)
    mel = amplitude_spectrogram(x, cfg) @ fb.weights.T
    return 20.0 * np.log10(np.maximum(mel, LOG_FLOOR))


def normalize_db(db: np.ndarray) -> np.ndarray:
    return np.clip((db + DB_RANGE) / DB_RANGE, 0.0, 1.0)


def denormalize_db(norm: np.ndarray) -> np.ndarray:
    return np.asarray(norm, dtype=np.float64) * DB_RANGE - DB_RANGE


def mel_spectrogram(x: np.ndarray, cfg: StftConfig, fb: MelFilterbank) -> np.ndarray:
    """Normalized log-mel spectrogram in [0, 1], shape ``(frames, n_mels)``.

    -100 dB (the magnitude floor) maps to 0 and 0 dB maps to 1.
    """
    return normalize_db(log_mel(x, cfg, fb))


def _check_fb(cfg: StftConfig, fb: MelFilterbank):
    if fb.n_fft != cfg.n_fft or fb.sample_rate != cfg.sample_rate:
        raise DspError(
            f"filterbank built for n_fft={fb.n_fft}/sr={fb.sample_rate}, "
            f"config has n_fft={cfg.n_fft}/sr={cfg.sample_rate}"
        )


def mel_to_linear(mel: np.ndarray, fb: MelFilterbank, iterations: int = 50) -> np.ndarray:
    """Invert a normalized log-mel to an amplitude spectrogram.

    Solves ``min ||A s - m||^2, s >= 0`` per frame by projected gradient,
    starting from the clamped pseudo-inverse solution.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != fb.n_mels:
        raise DspError(f"mel has shape {mel.shape}, filterbank has {fb.n_mels} bands")
    target = 10.0 ** (denormalize_db(mel) / 20.0)
    # the floor is indistinguishable from silence
    target[mel <= 0.0] = 0.0
    A = fb.weights
    step = 1.0 / np.linalg.norm(A, 2) ** 2
    s = np.maximum(0.0, target @ np.linalg.pinv(A).T)
    for _ in range(iterations):
        resid = s @ A.T - target
        s = np.maximum(0.0, s - step * (resid @ A))
    return s


def _amp_to_stft_scale(cfg: StftConfig) -> float:
    return hann_window(cfg.win_length).sum() / 2.0


def spectral_convergence(x: np.ndarray, target: np.ndarray, cfg: StftConfig) -> float:
    mag = np.abs(stft(x, cfg))
    return float(np.linalg.norm(mag - target) / max(np.linalg.norm(target), 1e-300))


def griffin_lim(target: np.ndarray, iterations: int = 60, seed: int = 0,
                cfg: StftConfig = StftConfig(), history: list | None = None) -> np.ndarray:
    """Reconstruct a waveform whose |STFT| approximates ``target``.

    ``target`` is a raw |STFT| magnitude (same scale as ``np.abs(stft(x))``).
    If ``history`` is given, the objective ``|| |STFT(x_n)| - target ||^2`` is
    appended after every iteration.
    """
    if iterations < 1:
        raise DspError("iterations must be >= 1")
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 2 or target.shape[1] != cfg.n_bins:
        raise DspError(f"target geometry {target.shape} does not match n_fft={cfg.n_fft}")
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(target.shape))
    x = None
    for _ in range(iterations):
        x = istft(target * phase, cfg)
        spec = stft(x, cfg)
        mag = np.abs(spec)
        if history is not None:
            history.append(float(np.sum((mag - target) ** 2)))
        phase = np.where(mag > 0, spec / np.where(mag > 0, mag, 1.0), 1.0)
    return x


def amplitude_to_stft_magnitude(amp: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    return np.asarray(amp) * _amp_to_stft_scale(cfg)


def dominant_frequency(x: np.ndarray, sample_rate: int = SAMPLE_RATE) -> float:
    spec = np.abs(np.fft.rfft(x * hann_window(len(x))))
    return float(np.argmax(spec) * sample_rate / len(x))
