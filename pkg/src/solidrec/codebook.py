"""Semantic codebook: nearest-code quantization of item representations."""

from __future__ import annotations

import hashlib
import json
import warnings
from pathlib import Path

import numpy as np
import torch
from torch import nn


class SemanticCodebook(nn.Module):
    def __init__(self, D: torch.Tensor):
        super().__init__()
        if D.dim() != 2 or D.shape[0] < 1:
            raise ValueError(f"codebook must be a non-empty matrix, got shape {tuple(D.shape)}")
        if not torch.isfinite(D).all():
            raise ValueError("codebook has non-finite entries")
        self.D = nn.Parameter(D)

    @property
    def n_codes(self) -> int:
        return self.D.shape[0]

    @property
    def dim(self) -> int:
        return self.D.shape[1]

    def forward(self, E, mask, straight_through: bool = True):
        return quantize(E, self.D, mask, straight_through)


def init_from_metacode(metacode: torch.Tensor, n_codes: int | None = None, dim: int | None = None) -> SemanticCodebook:
    """Codebook whose rows start as an independent copy of ``metacode``."""
    if n_codes is not None and metacode.shape[0] != n_codes:
        raise ValueError(f"metacode has {metacode.shape[0]} rows, expected {n_codes}")
    if dim is not None and metacode.shape[1] != dim:
        raise ValueError(f"metacode width {metacode.shape[1]} != {dim}")
    return SemanticCodebook(metacode.detach().clone())


class _StraightThrough(torch.autograd.Function):
    # forward emits the codes, backward hands the gradient to the inputs
    @staticmethod
    def forward(ctx, E, Eq):
        return Eq.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def nearest_codes(E: torch.Tensor, D: torch.Tensor) -> torch.Tensor:
    d2 = ((E.unsqueeze(-2) - D) ** 2).sum(-1)
    return d2.argmin(-1)  # first minimum on ties


def quantize(E: torch.Tensor, D: torch.Tensor, mask: torch.Tensor, straight_through: bool = True):
    """Replace each non-pad row of ``E`` (B, L, d) by its nearest code.

    Returns ``(E_q, indices)``; pad positions keep their input row and get
    index -1. With ``straight_through`` the gradient w.r.t. ``E_q`` flows to
    ``E`` and none reaches ``D``; otherwise it flows to the selected rows of ``D``.
    """
    with torch.no_grad():
        idx = nearest_codes(E, D)
    Eq = D[idx]
    if straight_through:
        Eq = _StraightThrough.apply(E, Eq)
    m = mask.unsqueeze(-1)
    out = torch.where(m, Eq, E)
    return out, torch.where(mask, idx, torch.full_like(idx, -1))


def commitment_loss(E: torch.Tensor, Eq: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over non-pad positions (and all L_r coordinates)."""
    m = mask.unsqueeze(-1).to(E.dtype)
    n = mask.sum()
    if int(n) == 0:
        warnings.warn("commitment_loss on an all-pad batch; returning 0", stacklevel=2)
        return (E * 0).sum()
    return (((E - Eq) ** 2) * m).sum() / (n * E.shape[-1])


def codebook_usage(indices, n_codes: int) -> tuple[np.ndarray, list[int]]:
    """Per-code hit counts (pad entries, index -1, ignored) and the codes never hit."""
    idx = np.asarray(indices.cpu() if isinstance(indices, torch.Tensor) else indices).reshape(-1)
    idx = idx[idx >= 0]
    hist = np.bincount(idx, minlength=n_codes)[:n_codes]
    return hist, [int(c) for c in np.flatnonzero(hist == 0)]


def tensor_checksum(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def save_codebook(directory, codebook: SemanticCodebook, source_encoder: torch.Tensor | None = None) -> None:
    from .semantics import write_matrix

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix(d / "codebook.txt", codebook.D.detach().cpu().double().numpy(), "codebook")
    meta = {
        "n_codes": codebook.n_codes,
        "dim": codebook.dim,
        "source_encoder_sha256": tensor_checksum(source_encoder) if source_encoder is not None else None,
    }
    (d / "codebook.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_codebook(directory, dtype=torch.float32) -> SemanticCodebook:
    from .semantics import read_matrix

    d = Path(directory)
    m, _ = read_matrix(d / "codebook.txt")
    meta = json.loads((d / "codebook.json").read_text())
    if m.shape != (meta["n_codes"], meta["dim"]):
        raise ValueError("codebook matrix does not match its manifest")
    return SemanticCodebook(torch.as_tensor(m, dtype=dtype))
