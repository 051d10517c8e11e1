"""Local-level entity patches: cross-relation generation, cross-modality fusion, cue tokens.

Also holds the conventional global-projection head, kept for parameter
comparison and as a training baseline.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .backbone.synth import ConfigError
from .nn import Embedding, Linear, Module, linear_param_count
from .tensor import DimensionError, Tensor, add, avg_pool, concat, relu, reshape, scale, transpose


@dataclass
class PatchConfig:
    pooled: int = 8  # p, blocks per side after pooling
    patch: int = 2  # k, patch side in blocks
    visual_dim: int = 288  # p_v
    depth_dim: int = 288  # p_d

    def validate(self) -> None:
        if self.pooled < 1 or self.patch < 1 or self.pooled % self.patch:
            raise ConfigError(f"patch size {self.patch} must divide pooled resolution {self.pooled}")
        if self.visual_dim < 1 or self.depth_dim < 1:
            raise ConfigError("projected patch dims must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.pooled // self.patch) ** 2

    @property
    def token_dim(self) -> int:
        return self.visual_dim + self.depth_dim

    @property
    def num_tokens(self) -> int:
        """Class token + patches + location + semantic."""
        return self.num_patches + 3

    def to_dict(self) -> dict:
        return asdict(self)


def patchify(x: Tensor, k: int) -> Tensor:
    """``[..., C, p, p]`` to ``[..., (p/k)^2, C*k*k]``, patches row-major over the grid."""
    *lead, c, ph, pw = x.shape
    if ph % k or pw % k:
        raise DimensionError(f"patch size {k} does not divide pooled grid {ph}x{pw}")
    gh, gw = ph // k, pw // k
    n = len(lead)
    x = reshape(x, (*lead, c, gh, k, gw, k))
    # -> [..., gh, gw, C, k, k]
    x = transpose(x, (*range(n), n + 1, n + 3, n, n + 2, n + 4))
    return reshape(x, (*lead, gh * gw, c * k * k))


def crpg(subject_visual: Tensor, object_visual: Tensor, subject_depth: Tensor, object_depth: Tensor,
         cfg: PatchConfig) -> tuple[Tensor, Tensor]:
    """Pool both entities to ``p x p``, concatenate channels (subject first), split into ``k x k`` patches.

    Inputs are ``[..., c, h, w]``; returns visual patches ``[..., (p/k)^2, 2*c_v*k^2]``
    and depth patches ``[..., (p/k)^2, 2*c_d*k^2]``.
    """
    if subject_visual.shape != object_visual.shape or subject_depth.shape != object_depth.shape:
        raise DimensionError(
            f"subject/object feature maps differ: visual {subject_visual.shape} vs {object_visual.shape}, "
            f"depth {subject_depth.shape} vs {object_depth.shape}")
    if subject_visual.shape[-2:] != subject_depth.shape[-2:]:
        raise DimensionError(f"visual extent {subject_visual.shape[-2:]} != depth extent {subject_depth.shape[-2:]}")
    axis = subject_visual.data.ndim - 3
    v = concat([avg_pool(subject_visual, cfg.pooled), avg_pool(object_visual, cfg.pooled)], axis=axis)
    d = concat([avg_pool(subject_depth, cfg.pooled), avg_pool(object_depth, cfg.pooled)], axis=axis)
    return patchify(v, cfg.patch), patchify(d, cfg.patch)


class PatchFusion(Module):
    """Shared per-patch projections ``f_v``, ``f_d`` followed by per-patch concatenation."""

    def __init__(self, visual_channels: int, depth_channels: int, cfg: PatchConfig, rng: np.random.Generator):
        kk = cfg.patch * cfg.patch
        self.f_v = Linear(2 * visual_channels * kk, cfg.visual_dim, rng)
        self.f_d = Linear(2 * depth_channels * kk, cfg.depth_dim, rng)

    def __call__(self, visual_patches: Tensor, depth_patches: Tensor) -> Tensor:
        if visual_patches.shape[:-1] != depth_patches.shape[:-1]:
            raise DimensionError(
                f"visual patches {visual_patches.shape} and depth patches {depth_patches.shape} do not pair up")
        return concat([self.f_v(visual_patches), self.f_d(depth_patches)], axis=-1)


def cmpf_param_count(visual_channels: int, depth_channels: int, cfg: PatchConfig) -> int:
    kk = cfg.patch * cfg.patch
    return (linear_param_count(2 * visual_channels * kk, cfg.visual_dim)
            + linear_param_count(2 * depth_channels * kk, cfg.depth_dim))


def box_descriptor(box, image_size) -> np.ndarray:
    """``[x1/W, y1/H, x2/W, y2/H, cx/W, cy/H, bw/W, bh/H]``."""
    x1, y1, x2, y2 = box
    W, H = image_size
    return np.array([x1 / W, y1 / H, x2 / W, y2 / H,
                     (x1 + x2) / 2 / W, (y1 + y2) / 2 / H, (x2 - x1) / W, (y2 - y1) / H])


class CueTokens(Module):
    """Location and semantic tokens from the subject/object boxes and classes."""

    def __init__(self, num_entity_classes: int, word_dim: int, token_dim: int, rng: np.random.Generator):
        self.f_l = Linear(16, token_dim, rng)
        self.word_embedding = Embedding(num_entity_classes, word_dim, rng)
        self.f_w = Linear(2 * word_dim, token_dim, rng)

    def __call__(self, subject_box: Tensor, object_box: Tensor, subject_class, object_class) -> tuple[Tensor, Tensor]:
        location = relu(self.f_l(concat([subject_box, object_box], axis=-1)))
        words = concat([self.word_embedding(subject_class), self.word_embedding(object_class)], axis=-1)
        return location, relu(self.f_w(words))


def union_features(subject_visual: Tensor, object_visual: Tensor, pooled: int) -> Tensor:
    """Stand-in union-region feature: pooled mean of the two entity grids, flattened."""
    u = avg_pool(scale(add(subject_visual, object_visual), 0.5), pooled)
    return reshape(u, (*u.shape[:-3], -1))


class BaselineGlobalHead(Module):
    """Dense global projection ``h = f_h2(f_h1(r))``, ``q = f_q(h, l, w)``
    and logits ``f_u(u) + f_p(q_s, q_o)``."""

    def __init__(self, visual_channels: int, height: int, width: int, num_entity_classes: int,
                 num_predicates: int, rng: np.random.Generator, hidden1: int = 4096, hidden2: int = 512,
                 q_dim: int = 512, word_dim: int = 200, union_pooled: int = 8):
        self._union_pooled = union_pooled
        self.f_h1 = Linear(visual_channels * height * width, hidden1, rng)
        self.f_h2 = Linear(hidden1, hidden2, rng)
        self.word_embedding = Embedding(num_entity_classes, word_dim, rng)
        self.f_q = Linear(hidden2 + 8 + word_dim, q_dim, rng)
        self.f_u = Linear(visual_channels * union_pooled * union_pooled, num_predicates, rng)
        self.f_p = Linear(2 * q_dim, num_predicates, rng)

    def entity(self, visual: Tensor, box: Tensor, class_id) -> Tensor:
        flat = reshape(visual, (*visual.shape[:-3], -1))
        h = relu(self.f_h2(relu(self.f_h1(flat))))
        return relu(self.f_q(concat([h, box, self.word_embedding(class_id)], axis=-1)))

    def __call__(self, subject_visual: Tensor, object_visual: Tensor, subject_box: Tensor, object_box: Tensor,
                 subject_class, object_class) -> Tensor:
        qs = self.entity(subject_visual, subject_box, subject_class)
        qo = self.entity(object_visual, object_box, object_class)
        u = union_features(subject_visual, object_visual, self._union_pooled)
        return add(self.f_u(u), self.f_p(concat([qs, qo], axis=-1)))


def baseline_param_counts(visual_channels: int, height: int, width: int, num_entity_classes: int,
                          num_predicates: int, hidden1: int = 4096, hidden2: int = 512, q_dim: int = 512,
                          word_dim: int = 200, union_pooled: int = 8) -> dict[str, int]:
    counts = {
        "f_h1": linear_param_count(visual_channels * height * width, hidden1),
        "f_h2": linear_param_count(hidden1, hidden2),
        "word_embedding": num_entity_classes * word_dim,
        "f_q": linear_param_count(hidden2 + 8 + word_dim, q_dim),
        "f_u": linear_param_count(visual_channels * union_pooled ** 2, num_predicates),
        "f_p": linear_param_count(2 * q_dim, num_predicates),
    }
    counts["projection"] = counts["f_h1"] + counts["f_h2"]
    counts["total"] = sum(v for k, v in counts.items() if k != "projection")
    return counts
