"""Parameter generators for the dynamic layers, clipping and trunk/branch fusion."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import ENCODER_KINDS, SequenceEncoder, as_specs, embed_sequence


@dataclass
class GeneratorConfig:
    style: str = "full_matrix"
    rank: int = 4
    encoder_kind: str = "self_attention"
    z_dim: int = 32
    hidden_dim: int = 64

    def __post_init__(self):
        if self.style not in ("full_matrix", "low_rank"):
            raise ValueError(f"unknown generator style {self.style!r}")
        if self.encoder_kind not in ENCODER_KINDS:
            raise ValueError(f"encoder_kind must be one of {ENCODER_KINDS}")
        if self.style == "low_rank" and self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.z_dim < 1 or self.hidden_dim < 1:
            raise ValueError("z_dim and hidden_dim must be positive")


def flat_length(specs, style: str = "full_matrix", rank: int | None = None) -> int:
    specs = as_specs(specs)
    if style == "full_matrix":
        return sum(s.n_in * s.n_out for s in specs)
    return sum(rank * (s.n_in + s.n_out) for s in specs)


def unflatten(flat: torch.Tensor, specs, style: str = "full_matrix", rank: int | None = None) -> list[torch.Tensor]:
    """Split a (B, P) generator output into per-layer (B, N_in, N_out) matrices, row-major."""
    specs = as_specs(specs)
    need = flat_length(specs, style, rank)
    if flat.shape[-1] != need:
        raise ValueError(f"generator emitted {flat.shape[-1]} values, specs need {need}")
    out, at = [], 0
    for s in specs:
        if style == "full_matrix":
            out.append(flat[:, at:at + s.size].reshape(-1, s.n_in, s.n_out))
            at += s.size
        else:
            U = flat[:, at:at + s.n_in * rank].reshape(-1, s.n_in, rank)
            at += s.n_in * rank
            V = flat[:, at:at + rank * s.n_out].reshape(-1, rank, s.n_out)
            at += rank * s.n_out
            out.append(U @ V)
    return out


def generate_from_sequence(e: torch.Tensor, mlp: nn.Module, specs, style: str = "full_matrix", rank: int | None = None):
    """Map sequence features (B, L_r) to dynamic-layer matrices through ``mlp``."""
    return unflatten(mlp(e), specs, style, rank)


def clip_params(theta, T: float) -> list[torch.Tensor]:
    if T < 0:
        raise ValueError("clip threshold must be >= 0")
    return [k.clamp(-T, T) for k in theta]


def fuse_params(trunk, branch, T: float) -> list[torch.Tensor]:
    """trunk + clip(branch, T), layer by layer."""
    if len(trunk) != len(branch):
        raise ValueError(f"trunk has {len(trunk)} layers, branch {len(branch)}")
    for i, (a, b) in enumerate(zip(trunk, branch)):
        if a.shape != b.shape:
            raise ValueError(f"layer {i}: trunk {tuple(a.shape)} vs branch {tuple(b.shape)}")
    return [_bounded_sum(a, b, T) for a, b in zip(trunk, clip_params(branch, T))]


def _bounded_sum(a: torch.Tensor, c: torch.Tensor, T: float) -> torch.Tensor:
    """a + c with |result - a| <= T holding exactly in floating point.

    Rounding of the sum can land an ulp past the bound; such entries are stepped
    back toward ``a``. The correction is detached, so gradients are those of a + c.
    """
    out = a + c
    base = fixed = out.detach()
    ref = a.detach()
    for _ in range(8):
        over = (fixed - ref).abs() > T
        if not bool(over.any()):
            break
        fixed = torch.where(over, torch.nextafter(fixed, ref), fixed)
    if fixed is base:
        return out
    return out + (fixed - base)


class ParamGenerator(nn.Module):
    """Encoder (own embedding table + sequence encoder) followed by a two-layer MLP.

    For the target-attention encoder there is no target in the generator's
    input, so a learned query vector stands in for it.
    """

    def __init__(self, config: GeneratorConfig, vocab_size: int, specs, seq_len: int):
        super().__init__()
        self.config = config
        self.specs = as_specs(specs)
        self.embedding = nn.Embedding(vocab_size + 1, config.z_dim)
        nn.init.normal_(self.embedding.weight, std=0.1)
        self.encoder = SequenceEncoder(config.encoder_kind, config.z_dim, seq_len)
        if config.encoder_kind == "target_attention":
            self.query = nn.Parameter(torch.randn(config.z_dim) * 0.1)
        rank = config.rank if config.style == "low_rank" else None
        self.mlp = nn.Sequential(
            nn.Linear(config.z_dim, config.hidden_dim),
            nn.ReLU(),
            nn.Linear(config.hidden_dim, flat_length(self.specs, config.style, rank)),
        )

    def zero_output_(self) -> "ParamGenerator":
        """Start from an all-zero output, e.g. for a clipped branch whose clamp would otherwise saturate."""
        with torch.no_grad():
            self.mlp[-1].weight.zero_()
            self.mlp[-1].bias.zero_()
        return self

    def embed(self, seq):
        return embed_sequence(seq, self.embedding.weight)

    def encode(self, E, mask):
        target = self.query.expand(E.shape[0], -1) if self.config.encoder_kind == "target_attention" else None
        e, _ = self.encoder(E, mask, target)
        return e

    def generate(self, e):
        rank = self.config.rank if self.config.style == "low_rank" else None
        return generate_from_sequence(e, self.mlp, self.specs, self.config.style, rank)

    def forward(self, seq):
        E, mask = self.embed(seq)
        return self.generate(self.encode(E, mask))


def extract_metacode(semantic_generator: ParamGenerator | None) -> torch.Tensor:
    """The semantic encoder's embedding table without its padding row (N_c x L_r)."""
    if semantic_generator is None or not hasattr(semantic_generator, "embedding"):
        raise ValueError("no semantic encoder to extract a metacode from")
    return semantic_generator.embedding.weight.detach()[1:].clone()
