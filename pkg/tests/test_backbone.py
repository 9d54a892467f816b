import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference
from solidrec.backbone import (
    BackboneConfig,
    ParameterBundle,
    Recommender,
    SequenceEncoder,
    bundle_of,
    embed_sequence,
    forward,
)


@pytest.fixture(autouse=True)
def float64():
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(torch.float32)


def small_cfg(kind="self_attention", specs=((8, 4),)):
    return BackboneConfig(encoder_kind=kind, embed_dim=6, mlp_layers=2, mlp_hidden=10, dynamic_layer_specs=specs, seq_len=4)


def test_embed_sequence_lookup_and_mask():
    table = torch.arange(20.0).reshape(5, 4)
    E, mask = embed_sequence(torch.tensor([[0, 0, 3]]), table)
    assert torch.equal(E[0], table[[0, 0, 3]])
    assert mask.tolist() == [[False, False, True]]
    E, _ = embed_sequence(torch.tensor([[2]]), torch.eye(4))
    assert E[0, 0].tolist() == [0, 0, 1, 0]
    with pytest.raises(IndexError):
        embed_sequence(torch.tensor([[5]]), table)


def test_embed_sequence_matches_index_loop():
    g = torch.Generator().manual_seed(0)
    table = torch.randn(9, 3, generator=g)
    seq = torch.randint(0, 9, (20, 5), generator=g)
    E, _ = embed_sequence(seq, table)
    for i in range(20):
        for j in range(5):
            assert torch.equal(E[i, j], table[seq[i, j]])


@pytest.mark.parametrize("kind", ["target_attention", "recurrent", "self_attention"])
def test_all_pad_sequence_gives_flagged_zero(kind):
    enc = SequenceEncoder(kind, 4, 3)
    E = torch.randn(2, 3, 4)
    mask = torch.tensor([[False] * 3, [False, True, True]])
    e, valid = enc(E, mask, torch.randn(2, 4))
    assert valid.tolist() == [False, True]
    assert torch.equal(e[0], torch.zeros(4))


def test_target_attention_single_position_returns_that_value():
    enc = SequenceEncoder("target_attention", 4, 3)
    E = torch.randn(1, 3, 4)
    e, _ = enc(E, torch.tensor([[False, False, True]]), torch.randn(1, 4))
    assert torch.allclose(e[0], E[0, 2])


def test_recurrent_matches_hand_unrolled_steps():
    enc = SequenceEncoder("recurrent", 3, 3)
    E = torch.randn(2, 3, 3)
    mask = torch.tensor([[True, True, True], [False, True, True]])
    e, _ = enc(E, mask)
    W_ih, W_hh, b_ih, b_hh = enc.cell.weight_ih, enc.cell.weight_hh, enc.cell.bias_ih, enc.cell.bias_hh

    def gru(x, h):
        gi = W_ih @ x + b_ih
        gh = W_hh @ h + b_hh
        r = torch.sigmoid(gi[:3] + gh[:3])
        z = torch.sigmoid(gi[3:6] + gh[3:6])
        n = torch.tanh(gi[6:] + r * gh[6:])
        return (1 - z) * n + z * h

    for b in range(2):
        h = torch.zeros(3)
        for t in range(3):
            if mask[b, t]:
                h = gru(E[b, t], h)
        assert torch.allclose(e[b], h, atol=1e-12)


@pytest.mark.parametrize("kind", ["target_attention", "recurrent", "self_attention"])
def test_pad_row_has_no_influence(kind):
    torch.manual_seed(0)
    m = Recommender(small_cfg(kind), 3, 7)
    seq = torch.tensor([[0, 0, 2, 5], [0, 1, 3, 4]])
    K = [torch.randn(2, 8, 4)]
    before = m(torch.tensor([0, 1]), torch.tensor([1, 2]), seq, K)
    with torch.no_grad():
        m.item_emb.weight[0] += 5.0
    after = m(torch.tensor([0, 1]), torch.tensor([1, 2]), seq, K)
    assert torch.equal(before, after)


def _straight_line(m: Recommender, u, v, seq, Ks):
    # independent recomputation for the self-attention backbone
    d = m.config.embed_dim
    E = m.item_emb.weight[seq]
    mask = seq != 0
    enc = m.encoder
    x = E + enc.pos[-seq.shape[1]:]
    last = x[:, -1]
    q = last @ enc.q.weight.T
    k = x @ enc.k.weight.T
    logits = torch.einsum("bd,bld->bl", q, k) / math.sqrt(d)
    logits = logits.masked_fill(~mask, -1e300)
    w = torch.softmax(logits, -1) * mask
    ctx = torch.einsum("bl,bld->bd", w, x @ enc.v.weight.T)
    h = last + ctx @ enc.out.weight.T + enc.out.bias
    mu = h.mean(-1, keepdim=True)
    var = ((h - mu) ** 2).mean(-1, keepdim=True)
    feat = (h - mu) / torch.sqrt(var + enc.norm.eps) * enc.norm.weight + enc.norm.bias
    z = torch.cat([m.user_emb.weight[u], m.item_emb.weight[v], feat], -1)
    for layer in m.mlp:
        z = torch.relu(z @ layer.weight.T + layer.bias)
    for i, K in enumerate(Ks):
        z = torch.einsum("bi,bio->bo", z, K)
        if i < len(Ks) - 1:
            z = torch.relu(z)
    return torch.sigmoid(z @ m.head.weight.T + m.head.bias).squeeze(-1)


def test_forward_matches_straight_line_oracle():
    torch.manual_seed(1)
    m = Recommender(small_cfg(specs=((8, 5), (5, 3))), 4, 9)
    u, v = torch.tensor([0, 3, 2]), torch.tensor([1, 9, 4])
    seq = torch.tensor([[0, 2, 3, 4], [5, 6, 7, 8], [0, 0, 0, 9]])
    Ks = [torch.randn(3, 8, 5), torch.randn(3, 5, 3)]
    got = forward(u, v, seq, bundle_of(m, Ks), m)
    assert torch.allclose(got, _straight_line(m, u, v, seq, Ks), atol=1e-6)


def test_zero_dynamic_layer_with_zero_head_bias_is_one_half():
    m = Recommender(small_cfg(), 2, 5)
    with torch.no_grad():
        m.head.bias.zero_()
    p = forward(torch.tensor([0]), torch.tensor([1]), torch.tensor([[0, 1, 2, 3]]), bundle_of(m, [torch.zeros(1, 8, 4)]), m)
    assert p.item() == 0.5


def test_identity_dynamic_layer_passes_features_through():
    m = Recommender(small_cfg(specs=((8, 8),)), 2, 5)
    u, v, s = torch.tensor([1]), torch.tensor([2]), torch.tensor([[0, 0, 1, 3]])
    x = m.features(u, v, s)
    assert torch.equal(m.apply_dynamic(x, [torch.eye(8).unsqueeze(0)]), x)


def test_shape_mismatch_names_the_layer():
    m = Recommender(small_cfg(specs=((8, 5), (5, 3))), 2, 5)
    with pytest.raises(ValueError, match="dynamic layer 1"):
        m(torch.tensor([0]), torch.tensor([1]), torch.tensor([[0, 0, 1, 2]]), [torch.randn(1, 8, 5), torch.randn(1, 4, 3)])
    with pytest.raises(ValueError, match="layer 0"):
        ParameterBundle({}, [torch.randn(1, 7, 5), torch.randn(1, 5, 3)]).validate(m.specs)


def test_bundle_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        ParameterBundle({"w": torch.tensor([float("nan")])}, [torch.zeros(1, 2, 2)]).validate([(2, 2)])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_forward_is_pure_and_in_unit_interval(seed):
    torch.manual_seed(seed)
    m = Recommender(small_cfg(), 3, 6)
    u, v = torch.randint(0, 3, (5,)), torch.randint(1, 7, (5,))
    seq = torch.randint(0, 7, (5, 4))
    K = [torch.randn(5, 8, 4)]
    a = forward(u, v, seq, bundle_of(m, K), m)
    b = forward(u, v, seq, bundle_of(m, K), m)
    assert torch.equal(a, b)
    assert ((a > 0) & (a < 1)).all()


@pytest.mark.parametrize("kind", ["target_attention", "recurrent", "self_attention"])
def test_gradients_match_finite_differences(kind):
    torch.manual_seed(2)
    m = Recommender(small_cfg(kind, specs=((8, 5), (5, 3))), 3, 6)
    u, v = torch.tensor([0, 1, 2]), torch.tensor([1, 2, 6])
    seq = torch.tensor([[0, 1, 2, 3], [4, 5, 6, 1], [0, 0, 0, 2]])
    y = torch.tensor([1.0, 0.0, 1.0])
    Ks = [torch.randn(3, 8, 5, requires_grad=True), torch.randn(3, 5, 3, requires_grad=True)]

    def loss():
        p = forward(u, v, seq, bundle_of(m, Ks), m)
        return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()

    tensors = list(m.parameters()) + Ks
    grads = torch.autograd.grad(loss(), tensors)
    with torch.no_grad():
        for t, g in zip(tensors, grads):
            num = central_difference(loss, t, eps=1e-5)
            err = (g - num).norm() / max(num.norm().item(), g.norm().item(), 1e-12)
            assert err < 1e-4
