"""Reference audio + text -> cloned waveform."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dsp
from .corpus import SYNTH_MELS, encoder_features
from .encoder import EncoderModel, encode_utterance
from .synthesizer import SynthModel
from .text import normalize_text
from .vocoder import VocoderModel, generate, griffin_lim_vocode

VOCODERS = ("griffinlim", "neural")


@dataclass
class CloneResult:
    wav: np.ndarray
    mel: np.ndarray
    alignment: np.ndarray
    embedding: np.ndarray
    stopped: bool


def speaker_embedding(encoder: EncoderModel, wav: np.ndarray) -> np.ndarray:
    return encode_utterance(encoder, encoder_features(wav))


def vocode(mel: np.ndarray, method: str = "griffinlim", model: VocoderModel | None = None,
           iterations: int = 60, seed: int = 0) -> np.ndarray:
    if method == "griffinlim":
        fb = dsp.mel_filterbank(dsp.StftConfig().n_fft, mel.shape[1])
        return griffin_lim_vocode(mel, fb, iterations, seed)
    if method == "neural":
        if model is None:
            raise ValueError("neural vocoding needs a vocoder model")
        return generate(model, mel, seed=seed)
    raise ValueError(f"unknown vocoder {method!r}; choose from {', '.join(VOCODERS)}")


def clone(encoder: EncoderModel, synth: SynthModel, text: str, ref_wav: np.ndarray,
          method: str = "griffinlim", vocoder: VocoderModel | None = None, max_frames: int = 400,
          stop_threshold: float = 0.7, iterations: int = 60, seed: int = 0) -> CloneResult:
    """Embed the reference speaker, synthesize a mel for ``text`` and vocode it."""
    if synth.config["n_mels"] != SYNTH_MELS:
        raise ValueError(f"synthesizer produces {synth.config['n_mels']} bands, expected {SYNTH_MELS}")
    seq = normalize_text(text)
    emb = speaker_embedding(encoder, ref_wav)
    if emb.shape[0] != synth.config["spk_dim"]:
        raise ValueError(f"encoder embedding size {emb.shape[0]} does not match synthesizer "
                         f"speaker size {synth.config['spk_dim']}")
    mel, align = synth.infer(np.array(seq.ids), emb, max_frames, stop_threshold=stop_threshold)
    mel = np.clip(mel, 0.0, 1.0)
    wav = np.clip(vocode(mel, method, vocoder, iterations, seed), -1.0, 1.0)
    return CloneResult(wav, mel, align, emb, stopped=len(mel) < max_frames)
