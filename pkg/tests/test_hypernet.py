import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from solidrec.hypernet import (
    GeneratorConfig,
    ParamGenerator,
    clip_params,
    extract_metacode,
    flat_length,
    fuse_params,
    unflatten,
)

SPECS = ((8, 5), (5, 3))


def test_flat_length_full_and_low_rank():
    assert flat_length(SPECS) == 8 * 5 + 5 * 3
    assert flat_length(SPECS, "low_rank", 2) == 2 * (8 + 5) + 2 * (5 + 3)


def test_unflatten_is_row_major():
    flat = torch.arange(55.0).unsqueeze(0)
    K0, K1 = unflatten(flat, SPECS)
    assert K0[0, 0].tolist() == [0, 1, 2, 3, 4]
    assert K0[0, 1, 0] == 5
    assert K1[0, 0, 0] == 40
    with pytest.raises(ValueError, match="emitted 54"):
        unflatten(flat[:, :54], SPECS)


def test_low_rank_is_product_of_factors():
    flat = torch.randn(2, flat_length(((4, 3),), "low_rank", 2))
    (K,) = unflatten(flat, ((4, 3),), "low_rank", 2)
    U = flat[:, :8].reshape(2, 4, 2)
    V = flat[:, 8:].reshape(2, 2, 3)
    assert torch.allclose(K, torch.einsum("bir,bro->bio", U, V))


def test_fuse_trivial_cases():
    trunk = [torch.randn(2, 3, 3)]
    assert torch.equal(fuse_params(trunk, [torch.zeros(2, 3, 3)], 0.01)[0], trunk[0])
    small = torch.rand(2, 3, 3) * 0.02 - 0.01
    assert torch.equal(fuse_params([torch.zeros(2, 3, 3)], [small], 0.01)[0], small)


def test_fuse_shape_errors():
    with pytest.raises(ValueError, match="layer 0"):
        fuse_params([torch.zeros(1, 2, 2)], [torch.zeros(1, 2, 3)], 0.1)
    with pytest.raises(ValueError):
        fuse_params([torch.zeros(1, 2, 2)], [], 0.1)
    with pytest.raises(ValueError):
        clip_params([torch.zeros(1)], -1.0)


finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite), st.floats(0, 1))
def test_clip_bound_and_identity(trunk, branch, T):
    t, b = torch.from_numpy(trunk), torch.from_numpy(branch)
    c = clip_params([b], T)[0]
    assert (c.abs() <= T).all()
    inside = b.abs() <= T
    assert torch.equal(c[inside], b[inside])
    fused = fuse_params([t], [b], T)[0]
    assert ((fused - t).abs() <= T).all()
    plain = t + c
    ok = (plain - t).abs() <= T
    assert torch.equal(fused[ok], plain[ok])
    ulps = (fused - plain).abs() / torch.finfo(t.dtype).eps / plain.abs().clamp(min=1e-300)
    assert (ulps <= 8).all()


@pytest.mark.parametrize("kind", ["target_attention", "recurrent", "self_attention"])
@pytest.mark.parametrize("style", ["full_matrix", "low_rank"])
def test_generator_shapes(kind, style):
    gen = ParamGenerator(GeneratorConfig(style=style, rank=2, encoder_kind=kind, z_dim=6, hidden_dim=7), 9, SPECS, 4)
    Ks = gen(torch.tensor([[0, 1, 2, 3], [9, 8, 7, 6]]))
    assert [tuple(K.shape) for K in Ks] == [(2, 8, 5), (2, 5, 3)]


def test_generators_share_architecture_not_weights():
    cfg = GeneratorConfig(z_dim=6, hidden_dim=7)
    a, b = ParamGenerator(cfg, 5, SPECS, 4), ParamGenerator(cfg, 5, SPECS, 4)
    assert [n for n, _ in a.named_parameters()] == [n for n, _ in b.named_parameters()]
    assert all(p.data_ptr() != q.data_ptr() for p, q in zip(a.parameters(), b.parameters()))


def test_metacode_is_table_without_pad_row():
    gen = ParamGenerator(GeneratorConfig(z_dim=4, hidden_dim=5), 3, SPECS, 4)
    m = extract_metacode(gen)
    assert m.shape == (3, 4)
    assert torch.equal(m, gen.embedding.weight[1:])
    assert m.data_ptr() != gen.embedding.weight.data_ptr()
    with pytest.raises(ValueError):
        extract_metacode(None)


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(style="diagonal")
    with pytest.raises(ValueError):
        GeneratorConfig(style="low_rank", rank=0)
    with pytest.raises(ValueError):
        GeneratorConfig(encoder_kind="cnn")
