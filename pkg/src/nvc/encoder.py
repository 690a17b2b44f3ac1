"""Speaker encoder: mel frames -> unit-norm embedding, trained with the GE2E objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import AdamState, Model, adam_step, clip_gradients, register_model
from .nn.core import add_conv, add_dense, add_gru
from .nn.layers import (
    ShapeError,
    causal_conv1d_forward,
    dense_forward,
    gru_sequence_forward,
    log_softmax_rows,
    softmax_rows,
)

W_MIN = 1e-4


class EncoderError(ValueError):
    pass


DEFAULT_ENCODER_CONFIG = {
    "n_mels": 40,
    "hidden": 128,
    "layers": 2,
    "embed_dim": 64,
    "conv_frontend": False,
    "conv_channels": 64,
    "partial_frames": 160,
    "seed": 0,
}


@register_model
class EncoderModel(Model):
    kind = "encoder"

    def __init__(self, config: dict | None = None):
        cfg = dict(DEFAULT_ENCODER_CONFIG)
        cfg.update(config or {})
        super().__init__(cfg)
        rng = np.random.default_rng(cfg["seed"])
        n_in = cfg["n_mels"]
        if cfg["conv_frontend"]:
            add_conv(self, rng, "conv", 3, n_in, cfg["conv_channels"])
            n_in = cfg["conv_channels"]
        for i in range(cfg["layers"]):
            add_gru(self, rng, f"gru{i}", n_in if i == 0 else cfg["hidden"], cfg["hidden"])
        add_dense(self, rng, "proj", cfg["hidden"], cfg["embed_dim"])
        self.add("ge2e.w", np.array([10.0]))
        self.add("ge2e.b", np.array([-5.0]))

    def forward(self, mels: np.ndarray):
        """Batch forward: mels [B, T, n_mels] -> unit embeddings [B, D] and a backward fn."""
        cfg = self.config
        if mels.ndim != 3 or mels.shape[2] != cfg["n_mels"]:
            raise EncoderError(f"expected [B, T, {cfg['n_mels']}] mels, got {mels.shape}")
        if mels.shape[1] < 1:
            raise EncoderError("mel has no frames")
        B = mels.shape[0]
        H = cfg["hidden"]
        x = mels
        conv_back = None
        if cfg["conv_frontend"]:
            pre, conv_back = causal_conv1d_forward(x, self["conv.W"], self["conv.b"])
            x = np.maximum(pre, 0.0)
        backs = []
        for i in range(cfg["layers"]):
            p = f"gru{i}."
            x, back = gru_sequence_forward(x, np.zeros((B, H)), self[p + "Wx"], self[p + "Wh"],
                                           self[p + "bx"], self[p + "bh"])
            backs.append(back)
        last = x[:, -1]
        raw, proj_back = dense_forward(last, self["proj.W"], self["proj.b"])
        norm = np.linalg.norm(raw, axis=1, keepdims=True)
        emb = raw / norm

        def backward(demb):
            draw = (demb - emb * np.sum(emb * demb, axis=1, keepdims=True)) / norm
            dlast, g = proj_back(draw)
            self.accumulate("proj.", g)
            dx = np.zeros_like(x)
            dx[:, -1] = dlast
            for i in range(cfg["layers"] - 1, -1, -1):
                (dx, _), g = backs[i](dx)
                self.accumulate(f"gru{i}.", g)
            if conv_back is not None:
                dx, g = conv_back(dx * (pre > 0))
                self.accumulate("conv.", g)

        return emb, backward


def pad_or_crop(mel: np.ndarray, frames: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Left-pad short mels with zeros; crop long ones (randomly if rng given, else centered)."""
    T = mel.shape[0]
    if T < frames:
        return np.concatenate([np.zeros((frames - T, mel.shape[1])), mel], axis=0)
    start = int(rng.integers(0, T - frames + 1)) if rng is not None else (T - frames) // 2
    return mel[start:start + frames]


def encode_utterance(model: EncoderModel, mel: np.ndarray) -> np.ndarray:
    """Unit-norm speaker embedding of one utterance.

    The full utterance is consumed; utterances shorter than ``partial_frames``
    are left-padded with silence exactly as in training.
    """
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != model.config["n_mels"]:
        raise EncoderError(f"band mismatch: mel has shape {mel.shape}, model expects "
                           f"{model.config['n_mels']} bands")
    if mel.shape[0] < 1:
        raise EncoderError("mel has no frames")
    if mel.shape[0] < model.config["partial_frames"]:
        mel = pad_or_crop(mel, model.config["partial_frames"])
    return model.forward(mel[None])[0][0]


def embed_many(model: EncoderModel, mels) -> np.ndarray:
    return np.stack([encode_utterance(model, m) for m in mels])


# -- GE2E -----------------------------------------------------------------------------

def speaker_centroid(embeddings) -> np.ndarray:
    """Arithmetic mean of one speaker's utterance embeddings (not re-normalized)."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 1:
        raise EncoderError("speaker_centroid needs at least one embedding")
    return e.sum(axis=0) / e.shape[0]


def exclusive_centroid(embeddings, exclude: int) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2:
        raise EncoderError("exclusive_centroid needs M >= 2")
    keep = np.delete(e, exclude, axis=0)
    return keep.sum(axis=0) / keep.shape[0]


def _cosine(a, c):
    """Row-wise cosine over the last axis with its partial derivatives."""
    na = np.linalg.norm(a, axis=-1)
    nc = np.linalg.norm(c, axis=-1)
    dot = np.sum(a * c, axis=-1)
    cos = dot / (na * nc)
    return cos, na, nc


def similarity_forward(E: np.ndarray, w: float, b: float):
    """Scaled-cosine similarity matrix for a GE2E batch.

    E is [N, M, D]. Returns S of shape [N*M, N] with
    ``S[(i, j), k] = w * cos(e_ij, c_k) + b``, where c_k is the inclusive
    centroid for k != i and the centroid excluding e_ij for k == i.
    """
    if w <= 0:
        raise EncoderError(f"similarity scale w must be positive, got {w}")
    N, M, D = E.shape
    if N < 2 or M < 2:
        raise EncoderError(f"GE2E batch needs N >= 2 and M >= 2, got N={N}, M={M}")
    C = E.mean(axis=1)                              # [N, D]
    Cex = (M * C[:, None, :] - E) / (M - 1)         # [N, M, D]
    nE = np.linalg.norm(E, axis=-1)                 # [N, M]
    nC = np.linalg.norm(C, axis=-1)                 # [N]
    nX = np.linalg.norm(Cex, axis=-1)               # [N, M]
    cos = np.einsum("ijd,kd->ijk", E, C) / (nE[:, :, None] * nC[None, None, :])
    own = np.sum(E * Cex, axis=-1) / (nE * nX)
    ii = np.arange(N)
    cos[ii, :, ii] = own
    S = w * cos + b

    def backward(dS):
        dS = dS.reshape(N, M, N)
        dcos = w * dS
        dw = float(np.sum(dS * cos))
        db = float(np.sum(dS))
        dcos_own = dcos[ii, :, ii].copy()           # [N, M]
        dcos_all = dcos.copy()
        dcos_all[ii, :, ii] = 0.0
        # d cos(a,c)/da = c/(|a||c|) - cos a/|a|^2, symmetric in c
        g = dcos_all / (nE[:, :, None] * nC[None, None, :])
        dE = np.einsum("ijk,kd->ijd", g, C) - np.sum(dcos_all * cos, axis=2)[:, :, None] * E / nE[:, :, None] ** 2
        dC = np.einsum("ijk,ijd->kd", g, E) - np.sum(dcos_all * cos, axis=(0, 1))[:, None] * C / nC[:, None] ** 2
        go = dcos_own / (nE * nX)
        dE += go[:, :, None] * Cex - (dcos_own * own)[:, :, None] * E / nE[:, :, None] ** 2
        dX = go[:, :, None] * E - (dcos_own * own)[:, :, None] * Cex / nX[:, :, None] ** 2
        # Cex = (M C - E)/(M-1), C = mean(E)
        dC += np.sum(dX, axis=1) * M / (M - 1)
        dE -= dX / (M - 1)
        dE += dC[:, None, :] / M
        return dE, dw, db

    return S.reshape(N * M, N), backward


def similarity_matrix(E, w: float, b: float) -> np.ndarray:
    return similarity_forward(np.asarray(E, dtype=np.float64), w, b)[0]


def ge2e_loss_forward(S: np.ndarray, M: int | None = None):
    """Softmax GE2E loss over rows of S [N*M, N]; row (i, j) has target column i."""
    NM, N = S.shape
    M = M if M is not None else NM // N
    labels = np.repeat(np.arange(N), M)
    lp = log_softmax_rows(S)
    loss = float(-np.mean(lp[np.arange(NM), labels]))

    def backward():
        d = softmax_rows(S)
        d[np.arange(NM), labels] -= 1.0
        return d / NM

    return loss, backward


def ge2e_loss(S: np.ndarray) -> float:
    return ge2e_loss_forward(np.asarray(S, dtype=np.float64))[0]


def ge2e_batch_loss(model: EncoderModel, batch: np.ndarray, grad: bool = True) -> float:
    """Forward + backward on a [N, M, T, n_mels] batch; gradients accumulate in model."""
    N, M, T, F = batch.shape
    emb, back = model.forward(batch.reshape(N * M, T, F))
    S, sim_back = similarity_forward(emb.reshape(N, M, -1), float(model["ge2e.w"][0]), float(model["ge2e.b"][0]))
    loss, loss_back = ge2e_loss_forward(S, M)
    if grad:
        dE, dw, db = sim_back(loss_back())
        model.params["ge2e.w"].grad += dw
        model.params["ge2e.b"].grad += db
        back(dE.reshape(N * M, -1))
    return loss


# -- EER ------------------------------------------------------------------------------

def equal_error_rate(genuine, impostor) -> tuple[float, float]:
    """EER and its threshold.

    Candidate thresholds are the distinct scores plus +inf. Acceptance is
    ``score >= t``: FAR(t) is the impostor fraction accepted and FRR(t) the
    genuine fraction rejected. Where FAR - FRR changes sign between adjacent
    candidates, both rates are linearly interpolated to the crossing.
    """
    g = np.sort(np.asarray(genuine, dtype=np.float64))
    im = np.sort(np.asarray(impostor, dtype=np.float64))
    if g.size == 0 or im.size == 0:
        raise EncoderError("equal_error_rate needs non-empty genuine and impostor scores")
    thr = np.append(np.unique(np.concatenate([g, im])), np.inf)
    far = 1.0 - np.searchsorted(im, thr, side="left") / im.size
    frr = np.searchsorted(g, thr, side="left") / g.size
    diff = far - frr
    zero = np.flatnonzero(diff == 0)
    if zero.size:
        k = zero[0]
        return float(far[k]), float(thr[k])
    k = int(np.flatnonzero(diff < 0)[0])  # diff[0] > 0 and diff[-1] = -1
    alpha = diff[k - 1] / (diff[k - 1] - diff[k])
    eer = far[k - 1] + alpha * (far[k] - far[k - 1])
    t_hi = thr[k] if np.isfinite(thr[k]) else thr[k - 1]
    return float(eer), float(thr[k - 1] + alpha * (t_hi - thr[k - 1]))


def verification_scores(model: EncoderModel, enroll: dict, trials: dict):
    """Cosine scores of trial utterances against enrollment centroids.

    ``enroll`` and ``trials`` map speaker -> list of mels. Returns
    (genuine, impostor) score arrays.
    """
    cents = {s: speaker_centroid(embed_many(model, m)) for s, m in enroll.items()}
    genuine, impostor = [], []
    for s, mels in trials.items():
        for e in embed_many(model, mels):
            for k, c in cents.items():
                score = float(e @ c / (np.linalg.norm(e) * np.linalg.norm(c)))
                (genuine if k == s else impostor).append(score)
    return np.array(genuine), np.array(impostor)


# -- training -------------------------------------------------------------------------

@dataclass
class EncoderTrainConfig:
    n_speakers: int = 4
    n_utterances: int = 5
    steps: int = 2000
    lr: float = 1e-3
    clip: float = 5.0
    seed: int = 0


@dataclass
class TrainResult:
    model: Model
    adam: AdamState
    history: list = field(default_factory=list)
    step: int = 0


def sample_ge2e_batch(mels_by_speaker: dict, n: int, m: int, frames: int,
                      rng: np.random.Generator) -> np.ndarray:
    speakers = sorted(mels_by_speaker)
    picks = rng.choice(len(speakers), size=n, replace=False)
    out = []
    for si in picks:
        utts = mels_by_speaker[speakers[si]]
        idx = rng.choice(len(utts), size=m, replace=False)
        out.append([pad_or_crop(utts[i], frames, rng) for i in idx])
    return np.array(out)


def train_encoder(mels_by_speaker: dict, hp: EncoderTrainConfig = EncoderTrainConfig(),
                  model: EncoderModel | None = None, adam: AdamState | None = None,
                  start_step: int = 0, callback=None) -> TrainResult:
    """GE2E training. Batch sampling at step k is seeded by ``(seed, k)`` so a run
    resumed from a checkpoint at step k continues exactly like an unbroken one."""
    eligible = {s: v for s, v in mels_by_speaker.items() if len(v) >= hp.n_utterances}
    if len(eligible) < hp.n_speakers:
        raise EncoderError(
            f"corpus too small: {len(eligible)} speakers with >= {hp.n_utterances} utterances, "
            f"need {hp.n_speakers}")
    model = model if model is not None else EncoderModel({"seed": hp.seed})
    adam = adam if adam is not None else AdamState(lr=hp.lr)
    frames = model.config["partial_frames"]
    history = []
    for step in range(start_step, start_step + hp.steps):
        rng = np.random.default_rng([hp.seed, step])
        batch = sample_ge2e_batch(eligible, hp.n_speakers, hp.n_utterances, frames, rng)
        model.zero_grad()
        loss = ge2e_batch_loss(model, batch)
        clip_gradients(model.params, hp.clip)
        adam_step(model.params, adam)
        w = model.params["ge2e.w"].value
        w[...] = np.maximum(w, W_MIN)
        history.append(loss)
        if callback is not None:
            callback(step, loss)
    return TrainResult(model, adam, history, start_step + hp.steps)
