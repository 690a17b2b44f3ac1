"""Corpus scanning, three-stage preprocessing and the synthetic toy corpus.

Corpus layout::

    root/transcripts.tsv          utt_id<TAB>speaker_id<TAB>text
    root/<speaker_id>/<utt_id>.wav
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp, fileio
from .text import TextError, normalize_text

log = logging.getLogger(__name__)

ENCODER_MELS = 40
SYNTH_MELS = 80

# 20-grapheme toy charset; each grapheme gets a formant centre and loudness
TOY_GRAPHEMES = list("कखगघचजटडतदनपबमयरलवसह")
_SYLLABLE_SEC = (0.12, 0.18)
_SPACE_SEC = 0.06


class CorpusError(Exception):
    pass


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    wav_path: Path
    transcript: str
    duration: float


@dataclass
class CorpusManifest:
    records: list[UtteranceRecord]
    skipped: dict[str, str] = field(default_factory=dict)

    @property
    def by_speaker(self) -> dict[str, list[UtteranceRecord]]:
        out: dict[str, list[UtteranceRecord]] = {}
        for r in self.records:
            out.setdefault(r.speaker_id, []).append(r)
        return out

    @property
    def totals(self) -> tuple[int, int, float]:
        """(speakers, utterances, hours)."""
        return (len(self.by_speaker), len(self.records),
                sum(r.duration for r in self.records) / 3600.0)


def scan_corpus(root) -> CorpusManifest:
    root = Path(root)
    tsv = root / "transcripts.tsv"
    if not tsv.exists():
        raise CorpusError(f"{tsv} not found")
    rows: dict[str, tuple[str, str]] = {}
    for lineno, line in enumerate(tsv.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusError(f"{tsv}:{lineno}: expected 3 tab-separated fields")
        utt, spk, text = parts
        if utt in rows:
            raise CorpusError(f"duplicate utt_id {utt!r} in {tsv}")
        rows[utt] = (spk, text)

    records, skipped = [], {}
    on_disk = {p.stem: p for p in sorted(root.glob("*/*.wav"))}
    for utt in sorted(rows):
        spk, text = rows[utt]
        wav = root / spk / f"{utt}.wav"
        if not wav.exists():
            skipped[utt] = "missing wav"
            continue
        try:
            n = len(fileio.read_wav(wav))
        except fileio.FormatError as e:
            skipped[utt] = f"unreadable wav: {e}"
            continue
        records.append(UtteranceRecord(utt, spk, wav, text, n / dsp.SAMPLE_RATE))
    for stem in sorted(set(on_disk) - set(rows)):
        skipped[stem] = "no transcript"
    if skipped:
        log.info("scan_corpus: skipped %d files", len(skipped))
    return CorpusManifest(records, skipped)


# -- preprocessing ------------------------------------------------------------------

def encoder_features(wav: np.ndarray) -> np.ndarray:
    cfg = dsp.StftConfig()
    return dsp.mel_spectrogram(wav, cfg, dsp.mel_filterbank(cfg.n_fft, ENCODER_MELS))


def synth_features(wav: np.ndarray) -> np.ndarray:
    cfg = dsp.StftConfig()
    return dsp.mel_spectrogram(wav, cfg, dsp.mel_filterbank(cfg.n_fft, SYNTH_MELS))


@dataclass
class PreprocessReport:
    written: int = 0
    errors: dict[str, str] = field(default_factory=dict)


def preprocess_encoder(manifest: CorpusManifest, out_dir) -> PreprocessReport:
    """40-band mels to ``out/<speaker>/<utt>.mel`` plus ``out/index.tsv``."""
    out_dir = Path(out_dir)
    report = PreprocessReport()
    index = []
    for r in sorted(manifest.records, key=lambda r: r.utt_id):
        try:
            mel = encoder_features(fileio.read_wav(r.wav_path))
        except (dsp.DspError, fileio.FormatError) as e:
            report.errors[r.utt_id] = str(e)
            continue
        (out_dir / r.speaker_id).mkdir(parents=True, exist_ok=True)
        path = out_dir / r.speaker_id / f"{r.utt_id}.mel"
        fileio.write_mel(path, mel)
        index.append(f"{r.utt_id}\t{r.speaker_id}\t{path.relative_to(out_dir)}\t{mel.shape[0]}")
        report.written += 1
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "index.tsv").write_text("".join(line + "\n" for line in index), encoding="utf-8")
    return report


def load_encoder_index(out_dir) -> dict[str, list[tuple[str, np.ndarray]]]:
    """speaker -> [(utt_id, mel)] sorted by utt_id."""
    out_dir = Path(out_dir)
    by_spk: dict[str, list] = {}
    for line in (out_dir / "index.tsv").read_text(encoding="utf-8").splitlines():
        utt, spk, rel, _ = line.split("\t")
        by_spk.setdefault(spk, []).append((utt, fileio.read_mel(out_dir / rel)))
    return by_spk


@dataclass
class TrainManifestRow:
    audio: str
    mel: str
    embed: str
    n_samples: int
    n_frames: int
    text: str

    def line(self) -> str:
        return f"{self.audio}|{self.mel}|{self.embed}|{self.n_samples}|{self.n_frames}|{self.text}"

    @classmethod
    def parse(cls, line: str) -> "TrainManifestRow":
        parts = line.rstrip("\n").split("|")
        if len(parts) != 6:
            raise CorpusError(f"train.txt row has {len(parts)} fields, expected 6: {line!r}")
        return cls(parts[0], parts[1], parts[2], int(parts[3]), int(parts[4]), parts[5])


def preprocess_synthesizer(manifest: CorpusManifest, encoder, out_dir) -> PreprocessReport:
    """80-band mels, EMB1 utterance embeddings and ``train.txt``."""
    from .encoder import encode_utterance

    out_dir = Path(out_dir)
    (out_dir / "mels").mkdir(parents=True, exist_ok=True)
    (out_dir / "embeds").mkdir(parents=True, exist_ok=True)
    report = PreprocessReport()
    rows = []
    for r in sorted(manifest.records, key=lambda r: r.utt_id):
        try:
            seq = normalize_text(r.transcript)
            wav = fileio.read_wav(r.wav_path)
            mel = synth_features(wav)
            emb = encode_utterance(encoder, encoder_features(wav))
        except (TextError, dsp.DspError, fileio.FormatError) as e:
            report.errors[r.utt_id] = str(e)
            continue
        mel_path = (out_dir / "mels" / f"{r.utt_id}.mel").resolve()
        emb_path = (out_dir / "embeds" / f"{r.utt_id}.emb").resolve()
        fileio.write_mel(mel_path, mel)
        fileio.write_embedding(emb_path, emb)
        rows.append(TrainManifestRow(str(Path(r.wav_path).resolve()), str(mel_path), str(emb_path),
                                     len(wav), mel.shape[0], seq.text))
        report.written += 1
    write_train_manifest(out_dir / "train.txt", rows)
    return report


def write_train_manifest(path, rows):
    Path(path).write_text("".join(r.line() + "\n" for r in rows), encoding="utf-8")


def read_train_manifest(path) -> list[TrainManifestRow]:
    rows = [TrainManifestRow.parse(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l]
    missing = [p for r in rows for p in (r.audio, r.mel, r.embed) if not os.path.exists(p)]
    if missing:
        raise CorpusError("missing files referenced by manifest: " + ", ".join(missing))
    return rows


# -- synthetic toy corpus ---------------------------------------------------------

@dataclass
class ToySpeaker:
    speaker_id: str
    f0: float
    profile_centers: np.ndarray
    profile_gains: np.ndarray
    tilt: float

    def harmonic_gains(self, freqs: np.ndarray) -> np.ndarray:
        bumps = self.profile_gains[None, :] * np.exp(
            -0.5 * ((freqs[:, None] - self.profile_centers[None, :]) / 400.0) ** 2)
        return (freqs / self.f0) ** (-self.tilt) * (0.15 + bumps.sum(axis=1))


def _grapheme_traits():
    # fixed, seed-independent: formant centre and loudness per grapheme
    rng = np.random.default_rng(20240101)
    centers = np.linspace(350.0, 3800.0, len(TOY_GRAPHEMES))
    rng.shuffle(centers)
    loud = rng.uniform(0.45, 1.0, len(TOY_GRAPHEMES))
    return centers, loud


def make_toy_speakers(rng: np.random.Generator, n_speakers: int) -> list[ToySpeaker]:
    f0s: list[float] = []
    while len(f0s) < n_speakers:
        f = float(rng.uniform(90.0, 300.0))
        if all(abs(f - g) >= 10.0 for g in f0s):
            f0s.append(f)
    speakers = []
    for i, f0 in enumerate(f0s):
        speakers.append(ToySpeaker(
            speaker_id=f"spk{i:02d}",
            f0=f0,
            profile_centers=rng.uniform(200.0, 5000.0, 3),
            profile_gains=rng.uniform(0.3, 1.5, 3),
            tilt=float(rng.uniform(0.4, 1.1)),
        ))
    return speakers


def toy_transcript(rng: np.random.Generator, duration: float) -> str:
    """Space-separated 2-4 grapheme words of nominal length ``duration`` seconds.

    Word count is bounded so the rendered audio lies in [1, 3] s whatever
    syllable lengths are drawn later.
    """
    lo, hi = _SYLLABLE_SEC
    words: list[str] = []
    n_chars = 0

    def spans(extra):
        n, gaps = n_chars + extra, len(words)  # gaps counted after adding the word
        return n * lo + gaps * _SPACE_SEC, n * np.mean(_SYLLABLE_SEC) + gaps * _SPACE_SEC, n * hi + gaps * _SPACE_SEC

    while True:
        n = int(rng.integers(2, 5))
        shortest, nominal, longest = spans(n)
        if longest > 3.0:
            if spans(0)[0] >= 1.0:
                break
            continue
        words.append("".join(TOY_GRAPHEMES[int(k)] for k in rng.integers(0, len(TOY_GRAPHEMES), n)))
        n_chars += n
        if nominal >= duration and shortest >= 1.0:
            break
    return " ".join(words)


def render_utterance(speaker: ToySpeaker, transcript: str, rng: np.random.Generator,
                     sample_rate: int = dsp.SAMPLE_RATE) -> np.ndarray:
    """Additive harmonic synthesis: one shaped syllable per grapheme, short gaps at spaces."""
    centers, loud = _grapheme_traits()
    segs = []
    for ch in transcript:
        if ch == " ":
            segs.append((None, _SPACE_SEC))
        else:
            segs.append((TOY_GRAPHEMES.index(ch), float(rng.uniform(*_SYLLABLE_SEC))))
    harmonics = speaker.f0 * np.arange(1, int(7000.0 // speaker.f0) + 1)
    base = speaker.harmonic_gains(harmonics)
    base = base / np.sqrt(np.sum(base ** 2))
    phases = rng.uniform(0, 2 * np.pi, len(harmonics))
    parts = []
    t0 = 0
    for g, dur in segs:
        n = int(round(dur * sample_rate))
        if g is None:
            parts.append(np.zeros(n))
        else:
            t = (t0 + np.arange(n)) / sample_rate
            formant = 1.0 + 3.0 * np.exp(-0.5 * ((harmonics - centers[g]) / 250.0) ** 2)
            amp = base * formant
            amp = amp / np.sqrt(np.sum(amp ** 2))
            env = np.sin(np.pi * np.arange(n) / n) ** 0.5 * loud[g] * float(rng.uniform(0.85, 1.15))
            wave = np.sin(2 * np.pi * harmonics[None, :] * t[:, None] + phases[None, :]) @ amp
            parts.append(env * wave)
        t0 += n
    x = np.concatenate(parts)
    x = 0.5 * x / max(np.max(np.abs(x)), 1e-9)
    return x + 0.002 * rng.standard_normal(len(x))


def synth_toy_corpus(seed: int, n_speakers: int, utts_per_speaker: int, out_dir) -> list[ToySpeaker]:
    """Write a deterministic synthetic corpus in the standard layout."""
    if n_speakers < 2:
        raise CorpusError("need at least 2 speakers")
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    speakers = make_toy_speakers(rng, n_speakers)
    lines = []
    for spk in speakers:
        (out_dir / spk.speaker_id).mkdir(parents=True, exist_ok=True)
        for u in range(utts_per_speaker):
            utt = f"{spk.speaker_id}_u{u:03d}"
            urng = np.random.default_rng([seed, int(spk.speaker_id[3:]), u])
            text = toy_transcript(urng, float(urng.uniform(0.85, 2.6)))
            wav = render_utterance(spk, text, urng)
            fileio.write_wav(out_dir / spk.speaker_id / f"{utt}.wav", wav)
            lines.append(f"{utt}\t{spk.speaker_id}\t{text}")
    (out_dir / "transcripts.tsv").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return speakers
