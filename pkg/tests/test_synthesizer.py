import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nvc import synthesizer as sy
from nvc.checks import check_synthesizer
from nvc.nn import finite_difference_check
from nvc.text import normalize_text

TINY = {"n_symbols": 12, "embed_dim": 4, "enc_hidden": 3, "spk_dim": 3, "attn_dim": 4, "loc_filters": 2,
        "loc_kernel": 3, "prenet": 4, "att_rnn": 5, "dec_rnn": 5, "n_mels": 3}


def tiny(**kw):
    cfg = dict(TINY)
    cfg.update(kw)
    return sy.SynthModel(cfg)


def _unit(x):
    return x / np.linalg.norm(x)


# -- loss -----------------------------------------------------------------------------

def test_loss_examples():
    assert sy.synth_loss(np.ones((2, 2)), np.ones((2, 2))) == sy.SynthLossReport(0.0, 0.0, 0.0)
    rep = sy.synth_loss(np.array([0.0, 0.0]), np.array([1.0, 0.0]))
    assert (rep.mae, rep.mse, rep.total) == (0.5, 0.5, 1.0)
    rep = sy.synth_loss(np.array([0.0]), np.array([2.0]))
    assert (rep.mae, rep.mse, rep.total) == (2.0, 4.0, 6.0)


def test_loss_shape_mismatch():
    with pytest.raises(sy.SynthError):
        sy.synth_loss(np.zeros(3), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3))
def test_loss_algebra(seed, c):
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((4, 6))
    d = rng.standard_normal((4, 6))
    base = sy.synth_loss(y + d, y)
    scaled = sy.synth_loss(y + c * d, y)
    assert base.total == base.mae + base.mse
    assert base.mae >= 0 and base.mse >= 0
    assert scaled.mae == pytest.approx(abs(c) * base.mae, rel=1e-12, abs=1e-12)
    assert scaled.mse == pytest.approx(c * c * base.mse, rel=1e-12, abs=1e-12)


# -- attention ---------------------------------------------------------------------------

def _attend_inputs(m, B=2, L=6, seed=0):
    rng = np.random.default_rng(seed)
    memory = rng.standard_normal((B, L, m.memory_dim))
    pm = rng.standard_normal((B, L, m.config["attn_dim"]))
    q = rng.standard_normal((B, m.config["att_rnn"]))
    prev = rng.random((B, L))
    prev /= prev.sum(1, keepdims=True)
    return q, memory, pm, prev, np.ones((B, L), bool)


def test_equal_energies_give_uniform_weights():
    m = tiny()
    for name in ("attn.v.W", "attn.v.b"):
        m.params[name].value[...] = 0.0
    q, memory, pm, prev, mask = _attend_inputs(m)
    ctx, a, _ = m.attend(q, memory, pm, prev, mask)
    np.testing.assert_allclose(a, 1 / 6, atol=1e-15)
    np.testing.assert_allclose(ctx, memory.mean(axis=1), atol=1e-12)


def test_dominant_energy_saturates():
    m = tiny()
    q, memory, pm, prev, mask = _attend_inputs(m, B=1)
    # push position 2's energy up by ~100 through the content term
    m.params["attn.v.W"].value[...] = 1.0
    m.params["attn.v.b"].value[...] = 0.0
    pm = np.full_like(pm, -50.0)
    pm[0, 2] = 50.0
    ctx, a, _ = m.attend(q, memory, pm, prev, mask)
    assert a[0, 2] > 0.99
    np.testing.assert_allclose(ctx[0], memory[0, 2], atol=1e-2 * np.abs(memory).max())


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_attention_rows_sum_to_one(seed):
    m = tiny(seed=seed % 100)
    q, memory, pm, prev, mask = _attend_inputs(m, seed=seed)
    mask[1, 4:] = False
    _, a, _ = m.attend(q * 5, memory, pm, prev, mask)
    assert np.all(np.abs(a.sum(1) - 1) < 1e-6)
    assert np.all(a[1, 4:] == 0)


def test_attention_length_mismatch():
    m = tiny()
    q, memory, pm, prev, mask = _attend_inputs(m)
    with pytest.raises(sy.SynthError):
        m.attend(q, memory, pm, prev[:, :4], mask)


# -- teacher forcing -----------------------------------------------------------------------

def test_prediction_shape_matches_target():
    for r in (1, 2):
        m = tiny(reduction=r)
        pred, al = sy.forward_teacher_forced(m, np.array([3, 4, 5]), np.random.rand(5, 3), _unit(np.ones(3)))
        assert pred.shape == (5, 3)
        assert al.shape == (-(-5 // r), 3)
        np.testing.assert_allclose(al.sum(1), 1.0, atol=1e-12)


def test_zero_model_outputs_bias_constant():
    m = tiny()
    for p in m.params.values():
        p.value[...] = 0.0
    bias = np.array([0.1, -0.2, 0.3])
    m.params["decoder.proj.b"].value[...] = bias
    pred, _ = sy.forward_teacher_forced(m, np.array([3, 4, 5]), np.random.rand(5, 3), _unit(np.ones(3)))
    np.testing.assert_allclose(pred, np.tile(bias, (5, 1)), atol=1e-15)


def test_text_sequence_input_and_errors():
    m = sy.SynthModel({"embed_dim": 4, "enc_hidden": 3, "spk_dim": 3, "attn_dim": 4, "prenet": 4,
                       "att_rnn": 5, "dec_rnn": 5, "n_mels": 3})
    seq = normalize_text("नमस्ते")
    pred, al = sy.forward_teacher_forced(m, seq, np.random.rand(4, 3), _unit(np.ones(3)))
    assert pred.shape == (4, 3) and al.shape == (4, len(seq))
    with pytest.raises(sy.SynthError):
        sy.forward_teacher_forced(m, seq, np.random.rand(4, 5), _unit(np.ones(3)))
    with pytest.raises(sy.SynthError):
        sy.forward_teacher_forced(m, seq, np.zeros((0, 3)), _unit(np.ones(3)))


def test_speaker_embedding_changes_prediction():
    m = tiny()
    rng = np.random.default_rng(0)
    for p in m.params.values():
        p.value += 0.3 * rng.standard_normal(p.value.shape)
    tgt = rng.random((5, 3))
    a, _ = sy.forward_teacher_forced(m, np.array([3, 4, 5]), tgt, _unit(np.array([1.0, 0, 0])))
    b, _ = sy.forward_teacher_forced(m, np.array([3, 4, 5]), tgt, _unit(np.array([0, 1.0, 0])))
    assert np.abs(a - b).max() > 1e-6


def test_padding_does_not_leak_between_batch_items():
    m = tiny()
    rng = np.random.default_rng(1)
    for p in m.params.values():
        p.value += 0.3 * rng.standard_normal(p.value.shape)
    a = sy.SynthExample(np.array([3, 4]), rng.random((3, 3)), _unit(rng.standard_normal(3)))
    b = sy.SynthExample(np.array([5, 6, 7, 8, 9]), rng.random((6, 3)), _unit(rng.standard_normal(3)))
    alone, _ = sy.forward_teacher_forced(m, a.ids, a.mel, a.spk)
    ids, lengths, spk, target, _ = sy.make_batch([a, b], 1)
    pred, al, _ = m.teacher_forced(ids, lengths, spk, target)
    np.testing.assert_allclose(pred[0, :3], alone, atol=1e-12)
    assert np.all(al[0, :, 2:] == 0)


def test_gradient_check_three_chars_five_frames():
    for r in (1, 2):
        m = tiny(reduction=r)
        rng = np.random.default_rng(3)
        for p in m.params.values():
            p.value += 0.1 * rng.standard_normal(p.value.shape)
        ex = [sy.SynthExample(np.array([3, 7, 2]), rng.random((5, 3)), _unit(rng.standard_normal(3)))]

        def lg():
            m.zero_grad()
            return sy.batch_loss(m, ex).total
        assert finite_difference_check(lg, m.params, samples=80) < 1e-4


def test_gradient_check_with_dropout_and_guide():
    m = tiny(reduction=2)
    rng = np.random.default_rng(4)
    for p in m.params.values():
        p.value += 0.1 * rng.standard_normal(p.value.shape)
    exs = [sy.SynthExample(rng.integers(1, 12, n), rng.random((t, 3)), _unit(rng.standard_normal(3)))
           for n, t in ((4, 7), (6, 5))]

    def lg():
        m.zero_grad()
        rep = sy.batch_loss(m, exs, rng=np.random.default_rng(9), guide_weight=1.5)
        return rep.total + rep.guide
    assert finite_difference_check(lg, m.params, samples=80) < 1e-4


def test_builtin_check_passes():
    assert check_synthesizer() < 1e-4


def test_guided_penalty_zero_on_diagonal():
    S = L = 6
    A = np.eye(L)[None]
    pen, _ = sy.guided_attention_penalty(A, [L], [S])
    assert pen == pytest.approx(0.0, abs=1e-15)
    uniform = np.full((1, S, L), 1 / L)
    assert sy.guided_attention_penalty(uniform, [L], [S])[0] > 0.1


# -- diagonality ------------------------------------------------------------------------------

def test_diagonality_examples():
    assert sy.alignment_diagonality(np.eye(10)) == 1.0
    assert sy.alignment_diagonality(np.full((30, 20), 1 / 20)) == pytest.approx(0.25, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_diagonality_bounded(S, L, seed):
    A = np.random.default_rng(seed).random((S, L))
    A /= A.sum(1, keepdims=True)
    assert 0.0 <= sy.alignment_diagonality(A) <= 1.0


# -- inference ---------------------------------------------------------------------------------

def test_infer_caps_and_rows():
    m = tiny(reduction=2)
    frames, al = m.infer(np.array([3, 4, 5]), _unit(np.ones(3)), max_frames=1)
    assert frames.shape == (1, 3)
    frames, al = m.infer(np.array([3, 4, 5]), _unit(np.ones(3)), max_frames=9)
    assert len(frames) <= 9
    np.testing.assert_allclose(al.sum(1), 1.0, atol=1e-6)
    with pytest.raises(sy.SynthError):
        m.infer(np.array([3]), _unit(np.ones(3)), max_frames=0)


# -- training ---------------------------------------------------------------------------------

def _examples(n=3, seed=0):
    rng = np.random.default_rng(seed)
    return [sy.SynthExample(rng.integers(1, 12, 4), rng.random((6, 3)), _unit(rng.standard_normal(3)), f"u{i}")
            for i in range(n)]


def test_training_deterministic_and_zero_steps():
    exs = _examples()
    hp = sy.SynthTrainConfig(steps=6, batch_size=2)
    a = sy.train_synthesizer(exs, hp, config=TINY)
    b = sy.train_synthesizer(exs, hp, config=TINY)
    assert a.history == b.history and len(a.history) == 6
    z = sy.train_synthesizer(exs, sy.SynthTrainConfig(steps=0), config=TINY)
    for k, v in sy.SynthModel(dict(TINY, spk_dim=3, n_mels=3)).state_copy().items():
        np.testing.assert_array_equal(z.model[k], v)


def test_training_reduces_loss():
    exs = _examples(2)
    res = sy.train_synthesizer(exs, sy.SynthTrainConfig(steps=60, lr=1e-2), config=dict(TINY, prenet_dropout=0.0))
    assert res.history[-1][2] < res.history[0][2]


def test_no_examples():
    with pytest.raises(sy.SynthError):
        sy.train_synthesizer([], sy.SynthTrainConfig(steps=1))


def test_gta_mels_shapes(tmp_path):
    from nvc import fileio
    exs = _examples(2)
    m = sy.SynthModel(dict(TINY, reduction=2))
    manifest = sy.gta_mels(m, exs, tmp_path, {"u0": "/x/u0.wav"})
    lines = manifest.read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2
    utt, mel_path, wav = lines[0].split("|")
    assert utt == "u0" and wav == "/x/u0.wav"
    assert fileio.read_mel(mel_path).shape == exs[0].mel.shape
