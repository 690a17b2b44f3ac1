"""Finite-difference gradient checks for every trainable component, on tiny shapes."""

from __future__ import annotations

import numpy as np

from .nn import Model, finite_difference_check
from .nn.core import add_conv, add_dense, add_gru
from .nn.layers import causal_conv1d_forward, dense_forward, gru_cell_forward, gru_sequence_forward

TOLERANCE = 1e-4


class _Scratch(Model):
    kind = "scratch"


def _probe(y, rng):
    c = rng.standard_normal(y.shape)
    return float(np.sum(c * y)), c


def _check(model, forward, samples, epsilon):
    def loss_and_grad():
        model.zero_grad()
        return forward()
    return finite_difference_check(loss_and_grad, model.params, samples=samples, epsilon=epsilon)


def check_dense(seed=0, samples=30, epsilon=1e-5):
    rng = np.random.default_rng(seed)
    m = _Scratch({})
    add_dense(m, rng, "d", 5, 4)
    x = rng.standard_normal((3, 5))

    def fwd():
        y, back = dense_forward(x, m["d.W"], m["d.b"])
        loss, c = _probe(np.tanh(y), np.random.default_rng(seed + 1))
        _, g = back(c * (1 - np.tanh(y) ** 2))
        m.accumulate("d.", g)
        return loss
    return _check(m, fwd, samples, epsilon)


def check_gru_cell(seed=0, samples=40, epsilon=1e-5):
    rng = np.random.default_rng(seed)
    m = _Scratch({})
    add_gru(m, rng, "g", 4, 5)
    x = rng.standard_normal((2, 4))
    h = rng.standard_normal((2, 5))

    def fwd():
        y, back = gru_cell_forward(x, h, *(m[f"g.{k}"] for k in ("Wx", "Wh", "bx", "bh")))
        loss, c = _probe(y, np.random.default_rng(seed + 1))
        _, g = back(c)
        m.accumulate("g.", g)
        return loss
    return _check(m, fwd, samples, epsilon)


def check_gru_sequence(seed=0, samples=40, epsilon=1e-5):
    rng = np.random.default_rng(seed)
    m = _Scratch({})
    add_gru(m, rng, "g", 3, 4)
    x = rng.standard_normal((2, 6, 3))
    h0 = rng.standard_normal((2, 4))
    worst = 0.0
    for reverse in (False, True):
        def fwd():
            hs, back = gru_sequence_forward(x, h0, *(m[f"g.{k}"] for k in ("Wx", "Wh", "bx", "bh")),
                                            reverse=reverse)
            loss, c = _probe(hs, np.random.default_rng(seed + 1))
            _, g = back(c)
            m.accumulate("g.", g)
            return loss
        worst = max(worst, _check(m, fwd, samples, epsilon))
    return worst


def check_causal_conv(seed=0, samples=40, epsilon=1e-5):
    rng = np.random.default_rng(seed)
    m = _Scratch({})
    add_conv(m, rng, "c", 3, 2, 4)
    x = rng.standard_normal((2, 10, 2))
    worst = 0.0
    for dilation in (1, 2, 4):
        def fwd():
            y, back = causal_conv1d_forward(x, m["c.W"], m["c.b"], dilation)
            loss, c = _probe(np.tanh(y), np.random.default_rng(seed + 1))
            _, g = back(c * (1 - np.tanh(y) ** 2))
            m.accumulate("c.", g)
            return loss
        worst = max(worst, _check(m, fwd, samples, epsilon))
    return worst


def check_ge2e(seed=0, samples=40, epsilon=1e-5):
    from .encoder import EncoderModel, ge2e_batch_loss
    m = EncoderModel({"n_mels": 6, "hidden": 5, "layers": 2, "embed_dim": 4, "partial_frames": 5,
                      "seed": seed})
    batch = np.random.default_rng(seed + 1).random((3, 3, 5, 6))
    return _check(m, lambda: ge2e_batch_loss(m, batch), samples, epsilon)


def check_synthesizer(seed=0, samples=60, epsilon=1e-5):
    from .synthesizer import SynthExample, SynthModel, batch_loss
    worst = 0.0
    for r in (1, 2):
        m = SynthModel({"n_symbols": 9, "embed_dim": 4, "enc_hidden": 3, "spk_dim": 3, "attn_dim": 4,
                        "loc_filters": 2, "loc_kernel": 3, "prenet": 4, "att_rnn": 5, "dec_rnn": 5,
                        "n_mels": 3, "reduction": r, "seed": seed})
        rng = np.random.default_rng(seed + 1)
        # zero biases meet the all-zero first decoder input exactly at the relu kink
        for p in m.params.values():
            p.value += 0.1 * rng.standard_normal(p.value.shape)
        exs = [SynthExample(rng.integers(1, 9, n), rng.random((t, 3)), rng.standard_normal(3))
               for n, t in ((5, 6), (3, 4))]
        worst = max(worst, _check(m, lambda: batch_loss(m, exs).total, samples, epsilon))
    return worst


def check_vocoder(seed=0, samples=60, epsilon=1e-5):
    from .vocoder import VocoderModel, mu_law_encode, nll_forward, shift_codes
    m = VocoderModel({"n_mels": 3, "hop": 4, "channels": 3, "hidden": 4, "dilations": [1, 2, 4],
                      "seed": seed})
    rng = np.random.default_rng(seed + 1)
    # the output layer starts at zero; perturb everything so all paths carry gradient
    for p in m.params.values():
        p.value += 0.2 * rng.standard_normal(p.value.shape)
    wav = 0.5 * np.sin(np.arange(24) / 2.0)
    codes = mu_law_encode(wav)
    cond = m.upsample(rng.random((6, 3)), 24)

    def fwd():
        loss, back = nll_forward(m, shift_codes(codes)[None], cond[None], codes[None])
        back()
        return loss
    return _check(m, fwd, samples, epsilon)


CHECKS = {
    "dense": check_dense,
    "gru_cell": check_gru_cell,
    "gru_sequence": check_gru_sequence,
    "causal_conv1d": check_causal_conv,
    "ge2e_loss": check_ge2e,
    "synthesizer_loss": check_synthesizer,
    "vocoder_nll": check_vocoder,
}


def run_gradchecks(seed: int = 0, epsilon: float = 1e-5) -> dict:
    """Worst relative error per component."""
    return {name: float(fn(seed=seed, epsilon=epsilon)) for name, fn in CHECKS.items()}
