"""Mel -> waveform: a Griffin-Lim path and a small autoregressive dilated-conv model.

The neural path predicts a 256-way mu-law class per sample from the previous
sample's class and the mel frame covering it::

    x_0 = embed(class[t-1])
    x_{l+1} = x_l + W_res(tanh(f_l) * sigmoid(g_l)),   [f_l, g_l] = dilconv(x_l) + W_c mel
    logits = W_out relu(W_hid x_L)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dsp
from .nn import AdamState, Model, adam_step, clip_gradients, register_model
from .nn.core import add_conv, add_dense
from .nn.layers import (
    causal_conv1d_forward,
    dense_forward,
    embedding_forward,
    log_softmax_rows,
    sigmoid,
    softmax_rows,
)

MU = 255
N_CLASSES = 256
_LOG_MU1 = np.log1p(MU)


class VocoderError(ValueError):
    pass


# -- mu-law -------------------------------------------------------------------------

def mu_law_encode(x):
    """Samples in [-1, 1] (clamped) -> integer codes in [0, 255]."""
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    y = np.sign(x) * np.log1p(MU * np.abs(x)) / _LOG_MU1
    code = np.floor((y + 1.0) / 2.0 * N_CLASSES)
    return np.clip(code, 0, N_CLASSES - 1).astype(np.int64)


def mu_law_decode(code):
    """Codes -> samples at the companded bin centres."""
    y = (np.asarray(code, dtype=np.float64) + 0.5) / (N_CLASSES / 2) - 1.0
    return np.sign(y) * np.expm1(np.abs(y) * _LOG_MU1) / MU


# -- model -----------------------------------------------------------------------------

DEFAULT_VOCODER_CONFIG = {
    "n_mels": 80,
    "hop": 200,
    "channels": 32,
    "dilations": [1, 2, 4, 8, 16, 32],
    "kernel": 2,
    "hidden": 64,
    "seed": 0,
}


@register_model
class VocoderModel(Model):
    kind = "vocoder"

    def __init__(self, config: dict | None = None):
        cfg = dict(DEFAULT_VOCODER_CONFIG)
        cfg.update(config or {})
        cfg["dilations"] = list(cfg["dilations"])
        super().__init__(cfg)
        rng = np.random.default_rng(cfg["seed"])
        C = cfg["channels"]
        self.add("input.table", rng.normal(0.0, 0.1, (N_CLASSES, C)))
        for i, _ in enumerate(cfg["dilations"]):
            add_conv(self, rng, f"layer{i}.conv", cfg["kernel"], C, 2 * C)
            add_dense(self, rng, f"layer{i}.cond", cfg["n_mels"], 2 * C)
            add_dense(self, rng, f"layer{i}.res", C, C)
        add_dense(self, rng, "out.hidden", C, cfg["hidden"])
        add_dense(self, rng, "out.logits", cfg["hidden"], N_CLASSES, zero=True)

    @property
    def receptive_field(self) -> int:
        return 1 + sum(d * (self.config["kernel"] - 1) for d in self.config["dilations"])

    def upsample(self, mel: np.ndarray, n_samples: int) -> np.ndarray:
        """Repeat each frame ``hop`` times and trim to n_samples."""
        hop = self.config["hop"]
        if n_samples > mel.shape[0] * hop:
            raise VocoderError(f"{n_samples} samples exceed {mel.shape[0]} frames x hop {hop}")
        if mel.shape[1] != self.config["n_mels"]:
            raise VocoderError(f"mel has {mel.shape[1]} bands, model expects {self.config['n_mels']}")
        return np.repeat(mel, hop, axis=0)[:n_samples]

    def forward(self, prev_codes: np.ndarray, cond: np.ndarray):
        """prev_codes [B, T] (class of sample t-1), cond [B, T, n_mels] -> logits [B, T, 256]."""
        C = self.config["channels"]
        x, emb_back = embedding_forward(prev_codes, self["input.table"])
        backs = []
        for i, d in enumerate(self.config["dilations"]):
            p = f"layer{i}."
            fg, conv_back = causal_conv1d_forward(x, self[p + "conv.W"], self[p + "conv.b"], d)
            c, cond_back = dense_forward(cond, self[p + "cond.W"], self[p + "cond.b"])
            pre = fg + c
            tf = np.tanh(pre[..., :C])
            sg = sigmoid(pre[..., C:])
            z = tf * sg
            r, res_back = dense_forward(z, self[p + "res.W"], self[p + "res.b"])
            backs.append((conv_back, cond_back, res_back, tf, sg))
            x = x + r
        hpre, hid_back = dense_forward(x, self["out.hidden.W"], self["out.hidden.b"])
        h = np.maximum(hpre, 0.0)
        logits, log_back = dense_forward(h, self["out.logits.W"], self["out.logits.b"])

        def backward(dlogits):
            dh, g = log_back(dlogits)
            self.accumulate("out.logits.", g)
            dx, g = hid_back(dh * (hpre > 0))
            self.accumulate("out.hidden.", g)
            for i in range(len(backs) - 1, -1, -1):
                p = f"layer{i}."
                conv_back, cond_back, res_back, tf, sg = backs[i]
                dz, g = res_back(dx)
                self.accumulate(p + "res.", g)
                dpre = np.concatenate([dz * sg * (1.0 - tf * tf), dz * tf * sg * (1.0 - sg)], axis=-1)
                _, g = cond_back(dpre)
                self.accumulate(p + "cond.", g)
                dxi, g = conv_back(dpre)
                self.accumulate(p + "conv.", g)
                dx = dx + dxi
            _, g = emb_back(dx)
            self.accumulate("input.", g)

        return logits, backward


def shift_codes(codes: np.ndarray) -> np.ndarray:
    """Previous-sample classes; the sample before t=0 is silence (code 128)."""
    codes = np.asarray(codes, dtype=np.int64)
    prev = np.empty_like(codes)
    prev[..., 0] = mu_law_encode(0.0)
    prev[..., 1:] = codes[..., :-1]
    return prev


def vocoder_forward(model: VocoderModel, mel: np.ndarray, waveform: np.ndarray) -> np.ndarray:
    """Teacher-forced logits [samples, 256] for one clip."""
    waveform = np.asarray(waveform, dtype=np.float64)
    cond = model.upsample(np.asarray(mel, dtype=np.float64), len(waveform))
    logits, _ = model.forward(shift_codes(mu_law_encode(waveform))[None], cond[None])
    return logits[0]


def nll_forward(model: VocoderModel, prev_codes, cond, targets, weight=None):
    """Mean NLL of target classes; returns (loss, backward)."""
    logits, back = model.forward(prev_codes, cond)
    lp = log_softmax_rows(logits)
    w = np.ones(targets.shape) if weight is None else weight
    n = float(w.sum())
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    loss = float(-np.sum(picked * w) / n)

    def backward():
        d = softmax_rows(logits)
        np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], -1) - 1.0, -1)
        back(d * (w / n)[..., None])

    return loss, backward


def clip_nll(model: VocoderModel, mel, waveform) -> float:
    codes = mu_law_encode(waveform)
    logits = vocoder_forward(model, mel, waveform)
    return float(-np.mean(log_softmax_rows(logits)[np.arange(len(codes)), codes]))


# -- training ----------------------------------------------------------------------------

@dataclass
class GtaPair:
    mel: np.ndarray
    wav: np.ndarray
    utt_id: str = ""

    def trimmed(self, hop: int) -> "GtaPair":
        n = min(len(self.wav), self.mel.shape[0] * hop)
        return GtaPair(self.mel, self.wav[:n], self.utt_id)


@dataclass
class VocoderTrainConfig:
    steps: int = 3000
    segment: int = 8000
    lr: float = 2e-3
    clip: float = 5.0
    seed: int = 0


@dataclass
class VocoderTrainResult:
    model: VocoderModel
    adam: AdamState
    history: list = field(default_factory=list)
    step: int = 0


def train_vocoder(pairs, hp: VocoderTrainConfig = VocoderTrainConfig(), model: VocoderModel | None = None,
                  adam: AdamState | None = None, start_step: int = 0, config: dict | None = None,
                  callback=None) -> VocoderTrainResult:
    """Minimize per-sample NLL on random segments (seeded by (seed, step)).

    Each segment carries receptive-field context on its left that feeds the
    convolutions but is excluded from the loss.
    """
    if not pairs:
        raise VocoderError("empty vocoder dataset")
    if model is None:
        cfg = {"seed": hp.seed, "n_mels": pairs[0].mel.shape[1]}
        cfg.update(config or {})
        model = VocoderModel(cfg)
    adam = adam if adam is not None else AdamState(lr=hp.lr)
    hop = model.config["hop"]
    data = []
    for p in pairs:
        p = p.trimmed(hop)
        codes = mu_law_encode(p.wav)
        data.append((shift_codes(codes), model.upsample(p.mel, len(codes)), codes))
    ctx = model.receptive_field - 1
    history = []
    for step in range(start_step, start_step + hp.steps):
        rng = np.random.default_rng([hp.seed, step])
        prev, cond, codes = data[int(rng.integers(len(data)))]
        n = len(codes)
        seg = min(hp.segment, n)
        start = int(rng.integers(0, n - seg + 1))
        lo = max(0, start - ctx)
        sl = slice(lo, start + seg)
        weight = np.zeros(start + seg - lo)
        weight[start - lo:] = 1.0
        model.zero_grad()
        loss, back = nll_forward(model, prev[None, sl], cond[None, sl], codes[None, sl], weight[None])
        back()
        clip_gradients(model.params, hp.clip)
        adam_step(model.params, adam)
        history.append(loss)
        if callback is not None:
            callback(step, loss)
    return VocoderTrainResult(model, adam, history, start_step + hp.steps)


# -- generation --------------------------------------------------------------------------

def generate(model: VocoderModel, mel: np.ndarray, seed: int = 0, sampling: str = "argmax",
             return_codes: bool = False):
    """Sample-by-sample synthesis of ``frames * hop`` samples."""
    if sampling not in ("argmax", "categorical"):
        raise VocoderError(f"unknown sampling mode {sampling!r}")
    cfg = model.config
    C, dil = cfg["channels"], cfg["dilations"]
    if cfg["kernel"] != 2:
        raise VocoderError("incremental generation supports kernel 2 only")
    n = mel.shape[0] * cfg["hop"]
    cond = model.upsample(np.asarray(mel, dtype=np.float64), n)
    # conditioning terms for every layer and sample, computed up front
    conds = [cond @ model[f"layer{i}.cond.W"] + model[f"layer{i}.cond.b"] + model[f"layer{i}.conv.b"]
             for i in range(len(dil))]
    taps = [(model[f"layer{i}.conv.W"][0], model[f"layer{i}.conv.W"][1]) for i in range(len(dil))]
    res = [(model[f"layer{i}.res.W"], model[f"layer{i}.res.b"]) for i in range(len(dil))]
    table = model["input.table"]
    hW, hb = model["out.hidden.W"], model["out.hidden.b"]
    oW, ob = model["out.logits.W"], model["out.logits.b"]
    hist = [np.zeros((n, C)) for _ in dil]
    rng = np.random.default_rng(seed)
    codes = np.empty(n, dtype=np.int64)
    prev = int(mu_law_encode(0.0))
    for t in range(n):
        x = table[prev]
        for i, d in enumerate(dil):
            hist[i][t] = x
            pre = x @ taps[i][1] + conds[i][t]
            if t >= d:
                pre = pre + hist[i][t - d] @ taps[i][0]
            z = np.tanh(pre[:C]) * (1.0 / (1.0 + np.exp(-pre[C:])))
            x = x + z @ res[i][0] + res[i][1]
        logits = np.maximum(x @ hW + hb, 0.0) @ oW + ob
        if sampling == "argmax":
            c = int(np.argmax(logits))
        else:
            p = np.exp(logits - logits.max())
            c = int(rng.choice(N_CLASSES, p=p / p.sum()))
        codes[t] = c
        prev = c
    wav = mu_law_decode(codes)
    return (wav, codes) if return_codes else wav


def griffin_lim_vocode(mel: np.ndarray, fb: dsp.MelFilterbank, iterations: int = 60, seed: int = 0,
                       cfg: dsp.StftConfig = dsp.StftConfig()) -> np.ndarray:
    """Normalized log-mel -> amplitude spectrogram (NNLS) -> Griffin-Lim waveform."""
    amp = dsp.mel_to_linear(mel, fb)
    return dsp.griffin_lim(dsp.amplitude_to_stft_magnitude(amp, cfg), iterations, seed, cfg)
