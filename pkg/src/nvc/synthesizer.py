"""Attention seq2seq synthesizer: grapheme ids + speaker embedding -> normalized mel frames.

Per decoder step (``r`` frames per step)::

    prenet(prev frame) ++ prev context  --GRU-->  attention state q
    energies = v . tanh(W_q q + W_m memory + W_l conv(prev alignment))
    context  = softmax(energies) . memory
    q ++ context  --GRU-->  decoder state d
    d ++ context  --dense-->  r mel frames

``memory`` is the BiGRU text encoding with the speaker embedding
concatenated to every position. Training minimizes MAE + MSE.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .corpus import read_train_manifest
from .nn import AdamState, Model, adam_step, clip_gradients, register_model
from .nn.core import add_conv, add_dense, add_gru
from .nn.layers import (
    causal_conv1d_forward,
    dense_forward,
    embedding_forward,
    gru_cell_forward,
    gru_sequence_forward,
    softmax_rows,
)
from .text import CHARSET, TextSequence, normalize_text


class SynthError(ValueError):
    pass


DEFAULT_SYNTH_CONFIG = {
    "n_symbols": len(CHARSET),
    "embed_dim": 64,
    "enc_hidden": 128,
    "spk_dim": 64,
    "attn_dim": 128,
    "loc_filters": 8,
    "loc_kernel": 15,
    "prenet": 128,
    "prenet_dropout": 0.5,
    "att_rnn": 256,
    "dec_rnn": 256,
    "n_mels": 80,
    "reduction": 1,
    "seed": 0,
}


@dataclass
class SynthLossReport:
    mae: float
    mse: float
    total: float
    guide: float = 0.0


def synth_loss(pred, target, mask=None) -> SynthLossReport:
    """MAE, MSE and their sum, averaged over every (unmasked) element."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise SynthError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    return _loss_and_grad(pred, target, mask)[0]


def _loss_and_grad(pred, target, mask=None):
    diff = pred - target
    if mask is None:
        mask = np.ones_like(diff)
    else:
        mask = np.broadcast_to(mask, diff.shape)
    n = float(mask.sum())
    mae = float(np.sum(np.abs(diff) * mask) / n)
    mse = float(np.sum(diff * diff * mask) / n)
    grad = (np.sign(diff) + 2.0 * diff) * mask / n
    return SynthLossReport(mae, mse, mae + mse), grad


@register_model
class SynthModel(Model):
    kind = "synthesizer"

    def __init__(self, config: dict | None = None):
        cfg = dict(DEFAULT_SYNTH_CONFIG)
        cfg.update(config or {})
        if cfg["loc_kernel"] % 2 == 0:
            raise SynthError("loc_kernel must be odd")
        super().__init__(cfg)
        rng = np.random.default_rng(cfg["seed"])
        E, He, A = cfg["embed_dim"], cfg["enc_hidden"], cfg["attn_dim"]
        Md = 2 * He + cfg["spk_dim"]
        self.add("text.embed.table", rng.normal(0.0, 0.1, (cfg["n_symbols"], E)))
        add_gru(self, rng, "text.gru_f", E, He)
        add_gru(self, rng, "text.gru_b", E, He)
        add_dense(self, rng, "attn.mem", Md, A)
        add_dense(self, rng, "attn.query", cfg["att_rnn"], A)
        add_conv(self, rng, "attn.loc_conv", cfg["loc_kernel"], 1, cfg["loc_filters"])
        add_dense(self, rng, "attn.loc_proj", cfg["loc_filters"], A)
        add_dense(self, rng, "attn.v", A, 1)
        add_dense(self, rng, "prenet.0", cfg["n_mels"], cfg["prenet"])
        add_dense(self, rng, "prenet.1", cfg["prenet"], cfg["prenet"])
        add_gru(self, rng, "decoder.att_rnn", cfg["prenet"] + Md, cfg["att_rnn"])
        add_gru(self, rng, "decoder.rnn", cfg["att_rnn"] + Md, cfg["dec_rnn"])
        add_dense(self, rng, "decoder.proj", cfg["dec_rnn"] + Md, cfg["reduction"] * cfg["n_mels"])

    @property
    def memory_dim(self) -> int:
        return 2 * self.config["enc_hidden"] + self.config["spk_dim"]

    def _gru(self, prefix):
        return tuple(self[f"{prefix}.{k}"] for k in ("Wx", "Wh", "bx", "bh"))

    # -- text encoder -------------------------------------------------------------

    def encode_text(self, ids: np.ndarray, lengths: np.ndarray, spk: np.ndarray):
        """ids [B, L] (right-padded), spk [B, D] -> memory [B, L, Md], processed memory [B, L, A]."""
        B, L = ids.shape
        He = self.config["enc_hidden"]
        if spk.shape != (B, self.config["spk_dim"]):
            raise SynthError(f"speaker embedding shape {spk.shape} != ({B}, {self.config['spk_dim']})")
        emb, emb_back = embedding_forward(ids, self["text.embed.table"])
        # reverse each sequence within its own length so padding stays at the end
        rev = np.tile(np.arange(L), (B, 1))
        for b, n in enumerate(lengths):
            rev[b, :n] = np.arange(n)[::-1]
        rows = np.arange(B)[:, None]
        zeros = np.zeros((B, He))
        hf, back_f = gru_sequence_forward(emb, zeros, *self._gru("text.gru_f"))
        hb_r, back_b = gru_sequence_forward(emb[rows, rev], zeros, *self._gru("text.gru_b"))
        hb = hb_r[rows, rev]
        memory = np.concatenate([hf, hb, np.broadcast_to(spk[:, None, :], (B, L, spk.shape[1]))], axis=2)
        pm, pm_back = dense_forward(memory, self["attn.mem.W"], self["attn.mem.b"])

        def backward(dmemory, dpm):
            dm, g = pm_back(dpm)
            self.accumulate("attn.mem.", g)
            dm = dm + dmemory
            (demb_f, _), g = back_f(dm[:, :, :He])
            self.accumulate("text.gru_f.", g)
            (demb_r, _), g = back_b(dm[:, :, He:2 * He][rows, rev])
            self.accumulate("text.gru_b.", g)
            _, g = emb_back(demb_f + demb_r[rows, rev])
            self.accumulate("text.embed.", g)

        return memory, pm, backward

    # -- attention --------------------------------------------------------------------

    def attend(self, q_state, memory, pm, prev_a, mask):
        """Location-sensitive attention. Returns (context, weights, backward)."""
        B, L, _ = memory.shape
        if prev_a.shape != (B, L) or mask.shape != (B, L):
            raise SynthError(f"attention length mismatch: memory {memory.shape}, "
                             f"weights {prev_a.shape}, mask {mask.shape}")
        half = self.config["loc_kernel"] // 2
        q, q_back = dense_forward(q_state, self["attn.query.W"], self["attn.query.b"])
        loc_in = np.concatenate([prev_a, np.zeros((B, half))], axis=1)[:, :, None]
        locc, locc_back = causal_conv1d_forward(loc_in, self["attn.loc_conv.W"], self["attn.loc_conv.b"])
        locp, locp_back = dense_forward(locc[:, half:], self["attn.loc_proj.W"], self["attn.loc_proj.b"])
        th = np.tanh(q[:, None, :] + pm + locp)
        e, e_back = dense_forward(th, self["attn.v.W"], self["attn.v.b"])
        e = np.where(mask, e[:, :, 0], -np.inf)
        a = softmax_rows(e)
        ctx = np.einsum("bl,blm->bm", a, memory)

        def backward(dctx, da_extra):
            """Returns (d q_state, d memory, d pm, d prev_a)."""
            da = np.einsum("bm,blm->bl", dctx, memory)
            if da_extra is not None:
                da = da + da_extra
            dmemory = a[:, :, None] * dctx[:, None, :]
            de = a * (da - np.sum(a * da, axis=1, keepdims=True))
            dth, g = e_back(de[:, :, None])
            self.accumulate("attn.v.", g)
            dpre = dth * (1.0 - th * th)
            dloc, g = locp_back(dpre)
            self.accumulate("attn.loc_proj.", g)
            dlocc = np.concatenate([np.zeros((B, half, dloc.shape[2])), dloc], axis=1)
            dloc_in, g = locc_back(dlocc)
            self.accumulate("attn.loc_conv.", g)
            dq_state, g = q_back(dpre.sum(axis=1))
            self.accumulate("attn.query.", g)
            return dq_state, dmemory, dpre, dloc_in[:, :L, 0]

        return ctx, a, backward

    # -- decoder ------------------------------------------------------------------------

    def decoder_step(self, prev_frame, h_att, h_dec, ctx, prev_a, memory, pm, mask, drop=None):
        """One decoder step; ``drop`` is an optional pair of prenet dropout masks."""
        m1, m2 = drop if drop is not None else (1.0, 1.0)
        p1, b1 = dense_forward(prev_frame, self["prenet.0.W"], self["prenet.0.b"])
        r1 = np.maximum(p1, 0.0) * m1
        p2, b2 = dense_forward(r1, self["prenet.1.W"], self["prenet.1.b"])
        r2 = np.maximum(p2, 0.0) * m2
        P = r2.shape[1]
        h_att_new, att_back = gru_cell_forward(np.concatenate([r2, ctx], axis=1), h_att,
                                               *self._gru("decoder.att_rnn"))
        new_ctx, a, attn_back = self.attend(h_att_new, memory, pm, prev_a, mask)
        R = h_att_new.shape[1]
        h_dec_new, dec_back = gru_cell_forward(np.concatenate([h_att_new, new_ctx], axis=1), h_dec,
                                               *self._gru("decoder.rnn"))
        R2 = h_dec_new.shape[1]
        out, out_back = dense_forward(np.concatenate([h_dec_new, new_ctx], axis=1),
                                      self["decoder.proj.W"], self["decoder.proj.b"])

        def backward(dout, dh_att_next, dh_dec_next, dctx_next, da_next):
            """Returns (dh_att, dh_dec, dctx, dprev_a, dmemory, dpm)."""
            dcat, g = out_back(dout)
            self.accumulate("decoder.proj.", g)
            dh_dec_new = dcat[:, :R2] + dh_dec_next
            dnew_ctx = dcat[:, R2:] + dctx_next
            (dx_dec, dh_dec), g = dec_back(dh_dec_new)
            self.accumulate("decoder.rnn.", g)
            dh_att_new = dx_dec[:, :R] + dh_att_next
            dnew_ctx += dx_dec[:, R:]
            dq, dmemory, dpm, dprev_a = attn_back(dnew_ctx, da_next)
            dh_att_new = dh_att_new + dq
            (dx_att, dh_att), g = att_back(dh_att_new)
            self.accumulate("decoder.att_rnn.", g)
            dp2 = dx_att[:, :P] * (p2 > 0) * m2
            dctx = dx_att[:, P:]
            dr1, g = b2(dp2)
            self.accumulate("prenet.1.", g)
            _, g = b1(dr1 * (p1 > 0) * m1)
            self.accumulate("prenet.0.", g)
            return dh_att, dh_dec, dctx, dprev_a, dmemory, dpm

        return out, h_att_new, h_dec_new, new_ctx, a, backward

    def _initial_state(self, B, lengths, L):
        mask = np.arange(L)[None, :] < np.asarray(lengths)[:, None]
        prev_a = mask / mask.sum(axis=1, keepdims=True)
        return (np.zeros((B, self.config["att_rnn"])), np.zeros((B, self.config["dec_rnn"])),
                np.zeros((B, self.memory_dim)), prev_a, mask)

    def _dropout_masks(self, rng, B):
        p = self.config["prenet_dropout"]
        if rng is None or p <= 0:
            return None
        P = self.config["prenet"]
        return tuple((rng.random((B, P)) >= p) / (1.0 - p) for _ in range(2))

    def teacher_forced(self, ids, lengths, spk, target, rng=None):
        """Teacher-forced pass over a padded batch.

        target [B, T, n_mels] with T a multiple of the reduction factor.
        Prenet dropout is applied only when ``rng`` is given (training).
        Returns (pred [B, T, n_mels], alignments [B, T / r, L], backward(dpred)).
        """
        cfg = self.config
        r, F = cfg["reduction"], cfg["n_mels"]
        B, T, Ft = target.shape
        if Ft != F:
            raise SynthError(f"target has {Ft} mel bands, model expects {F}")
        if T == 0 or T % r:
            raise SynthError(f"target frames {T} must be a positive multiple of reduction {r}")
        memory, pm, enc_back = self.encode_text(ids, lengths, spk)
        h_att, h_dec, ctx, prev_a, mask = self._initial_state(B, lengths, ids.shape[1])
        S = T // r
        preds = np.empty((B, T, F))
        aligns = np.empty((B, S, ids.shape[1]))
        backs = []
        for s in range(S):
            prev = target[:, s * r - 1] if s > 0 else np.zeros((B, F))
            out, h_att, h_dec, ctx, prev_a, back = self.decoder_step(prev, h_att, h_dec, ctx, prev_a,
                                                                     memory, pm, mask,
                                                                     self._dropout_masks(rng, B))
            preds[:, s * r:(s + 1) * r] = out.reshape(B, r, F)
            aligns[:, s] = prev_a
            backs.append(back)

        def backward(dpred, dalign=None):
            """``dalign`` is an optional gradient on the returned alignments."""
            dmem = np.zeros_like(memory)
            dpm = np.zeros_like(pm)
            dh_att = np.zeros((B, cfg["att_rnn"]))
            dh_dec = np.zeros((B, cfg["dec_rnn"]))
            dctx = np.zeros((B, self.memory_dim))
            da = None
            for s in range(S - 1, -1, -1):
                dout = dpred[:, s * r:(s + 1) * r].reshape(B, r * F)
                if dalign is not None:
                    da = dalign[:, s] if da is None else da + dalign[:, s]
                dh_att, dh_dec, dctx, da, dm, dp = backs[s](dout, dh_att, dh_dec, dctx, da)
                dmem += dm
                dpm += dp
            enc_back(dmem, dpm)

        return preds, aligns, backward

    def infer(self, ids, spk, max_frames: int, stop_threshold: float = 0.7, stop_patience: int = 3):
        """Free-running synthesis of a single utterance.

        Stops after ``max_frames`` frames, or once the final text position holds
        more than ``stop_threshold`` attention mass for ``stop_patience``
        consecutive decoder steps.
        """
        if max_frames < 1:
            raise SynthError("max_frames must be >= 1")
        ids = np.asarray(ids, dtype=np.int64)[None, :]
        L = ids.shape[1]
        r, F = self.config["reduction"], self.config["n_mels"]
        memory, pm, _ = self.encode_text(ids, [L], np.asarray(spk, dtype=np.float64)[None, :])
        h_att, h_dec, ctx, prev_a, mask = self._initial_state(1, [L], L)
        frames, aligns = [], []
        prev = np.zeros((1, F))
        streak = 0
        while len(frames) < max_frames:
            out, h_att, h_dec, ctx, prev_a, _ = self.decoder_step(prev, h_att, h_dec, ctx, prev_a,
                                                                  memory, pm, mask)
            group = out.reshape(r, F)
            frames.extend(group[:max_frames - len(frames)])
            aligns.append(prev_a[0])
            prev = group[-1:]
            streak = streak + 1 if prev_a[0, -1] > stop_threshold else 0
            if streak >= stop_patience:
                break
        return np.array(frames), np.array(aligns)


# -- batching ----------------------------------------------------------------------------

@dataclass
class SynthExample:
    ids: np.ndarray
    mel: np.ndarray
    spk: np.ndarray
    utt_id: str = ""


def make_batch(examples, reduction: int):
    B = len(examples)
    L = max(len(e.ids) for e in examples)
    T = max(e.mel.shape[0] for e in examples)
    T = -(-T // reduction) * reduction
    F = examples[0].mel.shape[1]
    ids = np.zeros((B, L), dtype=np.int64)
    target = np.zeros((B, T, F))
    mask = np.zeros((B, T, 1))
    for b, e in enumerate(examples):
        ids[b, :len(e.ids)] = e.ids
        target[b, :e.mel.shape[0]] = e.mel
        mask[b, :e.mel.shape[0]] = 1.0
    lengths = np.array([len(e.ids) for e in examples])
    spk = np.stack([e.spk for e in examples])
    return ids, lengths, spk, target, mask


def forward_teacher_forced(model: SynthModel, text: TextSequence | np.ndarray, target: np.ndarray,
                           spk: np.ndarray):
    """Single-utterance teacher-forced prediction: (pred [T, n_mels], alignment [T/r, L])."""
    ids = np.asarray(text.ids if isinstance(text, TextSequence) else text, dtype=np.int64)
    target = np.asarray(target, dtype=np.float64)
    if target.ndim != 2 or target.shape[0] < 1:
        raise SynthError("target must be a non-empty [frames, n_mels] matrix")
    ex = SynthExample(ids, target, np.asarray(spk, dtype=np.float64))
    b_ids, lengths, b_spk, b_target, _ = make_batch([ex], model.config["reduction"])
    pred, al, _ = model.teacher_forced(b_ids, lengths, b_spk, b_target)
    return pred[0, :target.shape[0]], al[0]


def guided_attention_penalty(aligns, lengths, steps, sigma: float = 0.2):
    """Attention mass weighted by distance from the diagonal, averaged over steps and batch.

    Weight at (step s, position l) of an utterance with S steps and L symbols is
    ``1 - exp(-(l/L - s/S)^2 / (2 sigma^2))``. Returns (penalty, gradient wrt aligns).
    """
    B, S, L = aligns.shape
    s = np.arange(S)[None, :, None]
    pos = np.arange(L)[None, None, :]
    Sb = np.asarray(steps, dtype=np.float64)[:, None, None]
    Lb = np.asarray(lengths, dtype=np.float64)[:, None, None]
    w = 1.0 - np.exp(-((pos / Lb - s / Sb) ** 2) / (2.0 * sigma ** 2))
    w = w * ((s < Sb) & (pos < Lb)) / (Sb * B)
    return float(np.sum(aligns * w)), w


def batch_loss(model: SynthModel, examples, grad: bool = True, rng=None,
               guide_weight: float = 0.0, guide_sigma: float = 0.2) -> SynthLossReport:
    """MAE + MSE over a padded batch; backpropagates into the model when ``grad``.

    A positive ``guide_weight`` adds the guided-attention penalty to the
    optimized objective (not to the reported total); it is stored in
    ``report.guide``.
    """
    r = model.config["reduction"]
    ids, lengths, spk, target, mask = make_batch(examples, r)
    pred, aligns, back = model.teacher_forced(ids, lengths, spk, target, rng)
    report, dpred = _loss_and_grad(pred, target, mask)
    dalign = None
    if guide_weight > 0:
        steps = -(-mask[:, :, 0].sum(axis=1).astype(int) // r)
        pen, dpen = guided_attention_penalty(aligns, lengths, steps, guide_sigma)
        report.guide = guide_weight * pen
        dalign = guide_weight * dpen
    if grad:
        back(dpred, dalign)
    return report


def alignment_diagonality(A: np.ndarray) -> float:
    """Mean attention mass inside a band around the ideal diagonal.

    For step t of S over L text positions the band is centred on
    ``round(t * L / S)`` with half-width ``max(2, 0.1 * L)``; the centre is
    clamped so the band stays inside the sequence, keeping its size fixed.
    """
    A = np.asarray(A, dtype=np.float64)
    S, L = A.shape
    hw = max(2.0, 0.1 * L)
    lo_c, hi_c = np.floor(hw), L - 1 - np.floor(hw)
    pos = np.arange(L)
    total = 0.0
    for t in range(S):
        c = float(np.round(t * L / S))
        if lo_c <= hi_c:
            c = min(max(c, lo_c), hi_c)
        total += A[t, np.abs(pos - c) <= hw].sum()
    return float(min(1.0, max(0.0, total / S)))


# -- training -------------------------------------------------------------------------

@dataclass
class SynthTrainConfig:
    steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-3
    clip: float = 5.0
    seed: int = 0
    guide_weight: float = 0.0
    guide_sigma: float = 0.2


@dataclass
class SynthTrainResult:
    model: SynthModel
    adam: AdamState
    history: list = field(default_factory=list)
    step: int = 0


def load_examples(manifest_path) -> list[SynthExample]:
    rows = read_train_manifest(manifest_path)
    out = []
    for row in rows:
        seq = normalize_text(row.text)
        out.append(SynthExample(np.array(seq.ids), fileio.read_mel(row.mel),
                                fileio.read_embedding(row.embed), Path(row.audio).stem))
    return out


def train_synthesizer(examples, hp: SynthTrainConfig = SynthTrainConfig(),
                      model: SynthModel | None = None, adam: AdamState | None = None,
                      start_step: int = 0, config: dict | None = None, callback=None) -> SynthTrainResult:
    """Adam on MAE + MSE with teacher forcing; per-step batches seeded by (seed, step)."""
    if not examples:
        raise SynthError("no training examples")
    if model is None:
        cfg = {"seed": hp.seed, "spk_dim": len(examples[0].spk), "n_mels": examples[0].mel.shape[1]}
        cfg.update(config or {})
        model = SynthModel(cfg)
    adam = adam if adam is not None else AdamState(lr=hp.lr)
    history = []
    for step in range(start_step, start_step + hp.steps):
        rng = np.random.default_rng([hp.seed, step])
        if hp.batch_size >= len(examples):
            batch = examples
        else:
            batch = [examples[i] for i in sorted(rng.choice(len(examples), hp.batch_size, replace=False))]
        model.zero_grad()
        rep = batch_loss(model, batch, rng=rng, guide_weight=hp.guide_weight, guide_sigma=hp.guide_sigma)
        clip_gradients(model.params, hp.clip)
        adam_step(model.params, adam)
        history.append((rep.mae, rep.mse, rep.total))
        if callback is not None:
            callback(step, rep)
    return SynthTrainResult(model, adam, history, start_step + hp.steps)


def gta_mels(model: SynthModel, examples, out_dir, wav_paths: dict | None = None) -> Path:
    """Write teacher-forced (ground-truth aligned) mels and a vocoder manifest.

    Manifest lines are ``utt_id|gta_mel_path|wav_path``.
    """
    out_dir = Path(out_dir)
    (out_dir / "gta").mkdir(parents=True, exist_ok=True)
    lines = []
    for ex in examples:
        pred, _ = forward_teacher_forced(model, ex.ids, ex.mel, ex.spk)
        path = (out_dir / "gta" / f"{ex.utt_id}.mel").resolve()
        fileio.write_mel(path, pred)
        wav = (wav_paths or {}).get(ex.utt_id, "")
        lines.append(f"{ex.utt_id}|{path}|{wav}")
    manifest = out_dir / "vocoder.txt"
    manifest.write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return manifest
