"""Pre-LN transformer relation encoder over the assembled relation tokens."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .backbone.synth import ConfigError
from .nn import LayerNorm, Linear, Module, Parameter, linear_param_count
from .tensor import (DimensionError, Tensor, add, broadcast_to, concat, gelu, index, matmul, mul, reshape, scale,
                     softmax, transpose)


@dataclass
class EncoderConfig:
    layers: int = 6
    heads: int = 6
    embed_dim: int = 576
    mlp_hidden: int | None = None  # defaults to 4 * embed_dim
    attention_dropout: float = 0.0

    def __post_init__(self):
        if self.mlp_hidden is None:
            self.mlp_hidden = 4 * self.embed_dim

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def validate(self) -> None:
        if self.layers < 1:
            raise ConfigError(f"encoder needs at least one layer, got {self.layers}")
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide embed_dim {self.embed_dim}")
        if self.mlp_hidden < 1:
            raise ConfigError("mlp_hidden must be >= 1")
        if not 0.0 <= self.attention_dropout < 1.0:
            raise ConfigError("attention_dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class MultiHeadSelfAttention(Module):
    """Heads are contiguous column blocks of the shared Q/K/V maps."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.0):
        if dim % heads:
            raise ConfigError(f"{heads} heads do not divide dim {dim}")
        self._heads = heads
        self._dropout = dropout
        self.query = Linear(dim, dim, rng)
        self.key = Linear(dim, dim, rng)
        self.value = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self.last_attention: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        *lead, t, dim = x.shape
        n = len(lead)
        x = reshape(x, (*lead, t, self._heads, dim // self._heads))
        return transpose(x, (*range(n), n + 1, n, n + 2))

    def __call__(self, z: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        *lead, t, dim = z.shape
        n = len(lead)
        q, k, v = self._split(self.query(z)), self._split(self.key(z)), self._split(self.value(z))
        kt = transpose(k, (*range(n + 1), n + 2, n + 1))
        scores = scale(matmul(q, kt), 1.0 / math.sqrt(dim // self._heads))
        attn = softmax(scores, axis=-1)
        self.last_attention = attn.data
        if rng is not None and self._dropout > 0.0:
            keep = (rng.random(attn.shape) >= self._dropout) / (1.0 - self._dropout)
            attn = mul(attn, Tensor(keep))
        heads = transpose(matmul(attn, v), (*range(n), n + 1, n, n + 2))
        return self.out(reshape(heads, (*lead, t, dim)))


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class EncoderLayer(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.ln1 = LayerNorm(cfg.embed_dim)
        self.attn = MultiHeadSelfAttention(cfg.embed_dim, cfg.heads, rng, cfg.attention_dropout)
        self.ln2 = LayerNorm(cfg.embed_dim)
        self.mlp = MLP(cfg.embed_dim, cfg.mlp_hidden, rng)

    def __call__(self, z: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        z = add(self.attn(self.ln1(z), rng), z)
        return add(self.mlp(self.ln2(z)), z)


class RelationEncoder(Module):
    """Class token + patch/cue tokens + learned positions, ``L`` pre-LN layers, LN of the class row."""

    def __init__(self, cfg: EncoderConfig, num_tokens: int, rng: np.random.Generator):
        cfg.validate()
        self._cfg = cfg
        self._num_tokens = num_tokens
        self.class_token = Parameter(rng.normal(0.0, 0.02, size=cfg.embed_dim))
        self.position = Parameter(rng.normal(0.0, 0.02, size=(num_tokens, cfg.embed_dim)))
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.layers)]
        self.final_ln = LayerNorm(cfg.embed_dim)

    def assemble_tokens(self, patch_tokens: Tensor, location: Tensor, semantic: Tensor) -> Tensor:
        """``[cls; patches; location; semantic] + position``, shape ``[..., T, embed_dim]``."""
        dim = self._cfg.embed_dim
        if patch_tokens.shape[-1] != dim or location.shape[-1] != dim or semantic.shape[-1] != dim:
            raise DimensionError(
                f"token dims {patch_tokens.shape[-1]}, {location.shape[-1]}, {semantic.shape[-1]} != embed_dim {dim}")
        lead = patch_tokens.shape[:-2]
        if patch_tokens.shape[-2] + 3 != self._num_tokens:
            raise DimensionError(f"{patch_tokens.shape[-2]} patch tokens + 3 != {self._num_tokens} positions")
        cls = broadcast_to(self.class_token, (*lead, 1, dim))
        loc = reshape(location, (*lead, 1, dim))
        sem = reshape(semantic, (*lead, 1, dim))
        return add(concat([cls, patch_tokens, loc, sem], axis=-2), self.position)

    def __call__(self, z0: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        z = z0
        for layer in self.layers:
            z = layer(z, rng)
        return self.final_ln(index(z, (Ellipsis, 0, slice(None))))


def encoder_param_count(cfg: EncoderConfig, num_tokens: int) -> int:
    d = cfg.embed_dim
    per_layer = 4 * linear_param_count(d, d) + linear_param_count(d, cfg.mlp_hidden) \
        + linear_param_count(cfg.mlp_hidden, d) + 4 * d
    return cfg.layers * per_layer + d + num_tokens * d + 2 * d
