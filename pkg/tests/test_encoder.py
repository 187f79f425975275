import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fd import TOLERANCE, gradcheck
from valtiming.audio import MfccConfig, num_frames
from valtiming.encoder import (
    DEFAULT_CONV_STACK,
    Encoder,
    EncoderConfig,
    UtteranceTooShort,
    feature_length,
    min_raw_length,
    pad_batch,
)
from valtiming.checkpoint import CheckpointError

SMALL = EncoderConfig(conv_stack=((10, 5), (4, 2)), conv_dim=8, d_model=8, n_layers=1, n_heads=2, ffn_dim=16)


def by_hand(n, stack):
    out = []
    for k, s in stack:
        n = (n - k) // s + 1
        out.append(n)
    return out


def test_default_stack_one_second():
    assert by_hand(16000, DEFAULT_CONV_STACK) == [3199, 798, 198, 98]
    assert feature_length(16000) == 98
    assert EncoderConfig().total_stride == 160


def test_single_window():
    assert feature_length(10, [(10, 5)]) == 1


def test_matches_mfcc_frame_count():
    cfg = MfccConfig()
    assert feature_length(16000) == num_frames(16000, cfg.frame_length, cfg.hop) == 98


def test_min_raw_length():
    assert min_raw_length() == 425


def test_too_short():
    with pytest.raises(UtteranceTooShort, match="too short"):
        feature_length(9, [(10, 5)])
    with pytest.raises(UtteranceTooShort):
        feature_length(min_raw_length() - 1)
    assert feature_length(min_raw_length()) == 1


@settings(max_examples=100, deadline=None)
@given(n=st.integers(425, 40000))
def test_feature_length_monotone(n):
    assert feature_length(n) <= feature_length(n + 1)
    assert feature_length(n) == by_hand(n, DEFAULT_CONV_STACK)[-1]


def test_config_invariants():
    with pytest.raises(ValueError):
        EncoderConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        EncoderConfig(conv_stack=((10, 0),))


def test_output_shape_single_utterance():
    torch.manual_seed(0)
    enc = Encoder().eval()
    wave = torch.randn(1, 5000)
    out = enc(wave, [5000])
    assert out.states.shape == (1, feature_length(5000), 64)
    assert out.valid.all()
    assert out.lengths == [feature_length(5000)]


def test_padding_invariance():
    # 64-bit so that float32 matmul blocking noise (~2e-6) is not mistaken for leakage
    torch.manual_seed(1)
    enc = Encoder().double().eval()
    x = np.random.default_rng(0).standard_normal(6000) * 0.1
    alone = enc(*pad_batch([x], torch.float64))
    longer = np.random.default_rng(1).standard_normal(9000)
    batch = enc(*pad_batch([x, longer], torch.float64))
    T = alone.lengths[0]
    assert batch.lengths[0] == T
    assert batch.valid[0, :T].all() and not batch.valid[0, T:].any()
    torch.testing.assert_close(batch.states[0, :T], alone.states[0], atol=1e-6, rtol=0)
    assert (batch.states[0, T:] == 0).all()


def test_padding_content_never_leaks():
    torch.manual_seed(2)
    enc = Encoder().eval()
    waves, lengths = pad_batch([np.ones(4000, np.float32) * 0.1, np.ones(8000, np.float32)])
    ref = enc(waves, lengths).states[0]
    waves[0, 4000:] = torch.randn(4000) * 5
    torch.testing.assert_close(enc(waves, lengths).states[0], ref, atol=1e-6, rtol=0)


def test_gradcheck_end_to_end():
    torch.manual_seed(3)
    enc = Encoder(SMALL).double().eval()
    rng = np.random.default_rng(3)
    waves = torch.tensor(rng.standard_normal((2, 60)), requires_grad=True)
    lengths = [60, 45]
    readout = torch.tensor(rng.standard_normal(8))

    def f():
        return (enc(waves, lengths).states @ readout).sum()

    params = [enc.conv[0].conv.weight, enc.blocks[0].attn.q_proj.weight, enc.feature_proj.bias]
    assert gradcheck(f, [waves, *params], rng, max_coords=10) < TOLERANCE


def test_mask_replaces_frames():
    torch.manual_seed(4)
    enc = Encoder(SMALL).eval()
    waves = torch.randn(1, 200)
    x, valid, _ = enc.frontend(waves, [200])
    mask = torch.zeros_like(valid)
    mask[0, 2] = True
    emb = torch.full((8,), 7.0)
    out = enc(waves, [200], mask, emb)
    x[0, 2] = emb
    torch.testing.assert_close(out.states, enc.transform(x, valid))
    with pytest.raises(ValueError):
        enc(waves, [200], mask)


def test_instances_do_not_share_parameters():
    a, b = Encoder(), Encoder()
    pa = {id(p) for p in a.parameters()}
    assert not pa & {id(p) for p in b.parameters()}


def test_eval_is_deterministic_and_train_uses_dropout():
    torch.manual_seed(5)
    enc = Encoder()
    w = torch.randn(1, 3000)
    enc.eval()
    assert torch.equal(enc(w, [3000]).states, enc(w, [3000]).states)
    enc.train()
    torch.manual_seed(0)
    a = enc(w, [3000]).states
    torch.manual_seed(0)
    assert torch.equal(a, enc(w, [3000]).states)
    torch.manual_seed(1)
    assert not torch.equal(a, enc(w, [3000]).states)


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(6)
    enc = Encoder(SMALL)
    enc.save(tmp_path / "e.ckpt")
    back = Encoder.load(tmp_path / "e.ckpt")
    assert back.cfg == enc.cfg
    for (na, pa), (nb, pb) in zip(enc.state_dict().items(), back.state_dict().items()):
        assert na == nb
        assert pa.numpy().tobytes() == pb.numpy().tobytes()


def test_checkpoint_rejects_mismatch(tmp_path):
    Encoder(SMALL).save(tmp_path / "e.ckpt")
    (tmp_path / "bad.ckpt").write_bytes(b"nope" + (tmp_path / "e.ckpt").read_bytes()[4:])
    with pytest.raises(CheckpointError):
        Encoder.load(tmp_path / "bad.ckpt")


def test_pad_batch():
    waves, lengths = pad_batch([np.ones(3), np.ones(5)])
    assert lengths == [3, 5]
    assert waves.shape == (2, 5)
    assert waves[0].tolist() == [1, 1, 1, 0, 0]
