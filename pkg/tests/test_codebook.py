import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_nearest
from solidrec.codebook import (
    SemanticCodebook,
    codebook_usage,
    commitment_loss,
    init_from_metacode,
    load_codebook,
    nearest_codes,
    quantize,
    save_codebook,
    tensor_checksum,
)


def test_codebook_rows_map_to_themselves():
    D = torch.randn(5, 3)
    _, idx = quantize(D.unsqueeze(0), D, torch.ones(1, 5, dtype=torch.bool))
    assert idx[0].tolist() == [0, 1, 2, 3, 4]


def test_equidistant_query_takes_lowest_index():
    D = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    E = torch.zeros(1, 1, 2)
    _, idx = quantize(E, D, torch.ones(1, 1, dtype=torch.bool))
    assert idx.item() == 0


def test_pad_positions_pass_through():
    D = torch.randn(3, 2)
    E = torch.randn(1, 3, 2)
    mask = torch.tensor([[False, True, True]])
    out, idx = quantize(E, D, mask)
    assert idx[0, 0] == -1
    assert torch.equal(out[0, 0], E[0, 0])
    assert torch.equal(out[0, 1], D[idx[0, 1]])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(1, 4), st.booleans())
def test_nearest_matches_exhaustive_scan(seed, n_codes, dim, tie):
    rng = np.random.default_rng(seed)
    D = rng.integers(-2, 3, size=(n_codes, dim)).astype(np.float64)
    if tie and n_codes > 1:
        D[n_codes - 1] = D[0]
    E = rng.integers(-2, 3, size=(2, 3, dim)).astype(np.float64)
    got = nearest_codes(torch.from_numpy(E), torch.from_numpy(D)).numpy()
    assert (got == brute_nearest(E, D)).all()


def test_straight_through_forward_and_gradients():
    D = torch.randn(4, 3, requires_grad=True)
    E = torch.randn(2, 5, 3, requires_grad=True)
    mask = torch.ones(2, 5, dtype=torch.bool)
    out, idx = quantize(E, D, mask, straight_through=True)
    assert torch.equal(out, D.detach()[idx])
    w = torch.randn_like(out)
    (out * w).sum().backward()
    assert torch.equal(E.grad, w)
    assert D.grad is None or torch.equal(D.grad, torch.zeros_like(D))


def test_exact_path_sends_gradient_to_codes():
    D = torch.randn(4, 3, requires_grad=True)
    E = torch.randn(1, 2, 3, requires_grad=True)
    out, idx = quantize(E, D, torch.ones(1, 2, dtype=torch.bool), straight_through=False)
    out.sum().backward()
    expect = torch.zeros_like(D)
    for j in idx.view(-1):
        expect[j] += 1
    assert torch.equal(D.grad, expect)
    assert E.grad is None or torch.equal(E.grad, torch.zeros_like(E))


def test_commitment_loss_masked_mean():
    E = torch.tensor([[[1.0, 1.0], [3.0, 0.0]]])
    Eq = torch.zeros_like(E)
    mask = torch.tensor([[False, True]])
    assert commitment_loss(E, Eq, mask).item() == pytest.approx(9 / 2)
    with pytest.warns(UserWarning):
        assert commitment_loss(E, Eq, torch.zeros_like(mask)).item() == 0.0


def test_init_from_metacode_copies_independently():
    meta = torch.randn(3, 4)
    cb = init_from_metacode(meta, 3, 4)
    assert torch.equal(cb.D.detach(), meta)
    with torch.no_grad():
        cb.D.add_(1.0)
    assert not torch.equal(cb.D.detach(), meta)
    with pytest.raises(ValueError):
        init_from_metacode(meta, 4)


def test_codebook_validates_input():
    with pytest.raises(ValueError):
        SemanticCodebook(torch.zeros(0, 3))
    with pytest.raises(ValueError):
        SemanticCodebook(torch.tensor([[float("inf")]]))


def test_usage_histogram_and_dead_codes():
    hist, dead = codebook_usage(torch.tensor([[0, 0, -1], [2, 0, -1]]), 4)
    assert hist.tolist() == [3, 0, 1, 0]
    assert dead == [1, 3]


def test_save_load_round_trip(tmp_path):
    cb = SemanticCodebook(torch.randn(3, 2, dtype=torch.float64))
    src = torch.randn(3, 2)
    save_codebook(tmp_path, cb, src)
    back = load_codebook(tmp_path, dtype=torch.float64)
    assert torch.equal(back.D, cb.D)
    meta = __import__("json").loads((tmp_path / "codebook.json").read_text())
    assert meta["source_encoder_sha256"] == tensor_checksum(src)
