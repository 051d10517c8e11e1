"""Relation models: the local-patch transformer with single or expert heads, and the global baseline."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .backbone.geometry import GeometricFeatureExtractor
from .config import RunConfig
from .data import PairBatch
from .encoder import RelationEncoder, encoder_param_count
from .gradcheck import GradientReport, check_gradients
from .meet import (PredicateGroups, build_groups, even_boundaries, expert_rngs, multi_expert_loss, retained_probabilities,
                   sample_expert_batches)
from .nn import Linear, Module, linear_param_count
from .patch import BaselineGlobalHead, CueTokens, PatchFusion, baseline_param_counts, cmpf_param_count, crpg
from .tensor import Tensor, cross_entropy, index


def init_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1])


def reweight_factors(freq: Sequence[float]) -> np.ndarray:
    """Inverse-frequency class weights ``N / (M * Freq(p))``; the expected weight of a training sample is 1."""
    freq = np.asarray(freq, dtype=np.float64)
    w = np.zeros_like(freq)
    seen = freq > 0
    w[seen] = freq.sum() / (freq.size * freq[seen])
    return w


class VetoNetwork(Module):
    """Geometric extractor, cross-relation patches, cross-modality fusion, cue tokens and encoder."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        s, m = cfg.synth, cfg.model
        self._patch = cfg.patch
        self.extractor = GeometricFeatureExtractor(s.depth_channels, m.geometric_channels, rng)
        self.fusion = PatchFusion(s.visual_channels, m.geometric_channels, cfg.patch, rng)
        self.cues = CueTokens(s.num_entity_classes, m.word_dim, cfg.patch.token_dim, rng)
        self.encoder = RelationEncoder(cfg.encoder, cfg.patch.num_tokens, rng)

    def tokens(self, b: PairBatch) -> Tensor:
        gs = self.extractor(Tensor(b.subject_depth))
        go = self.extractor(Tensor(b.object_depth))
        vp, dp = crpg(Tensor(b.subject_visual), Tensor(b.object_visual), gs, go, self._patch)
        patches = self.fusion(vp, dp)
        loc, sem = self.cues(Tensor(b.subject_box), Tensor(b.object_box), b.subject_class, b.object_class)
        return self.encoder.assemble_tokens(patches, loc, sem)

    def __call__(self, b: PairBatch, rng: np.random.Generator | None = None) -> Tensor:
        return self.encoder(self.tokens(b), rng)


class RelationModel(Module):
    """Top-level model selected by ``cfg.model.mode``.

    ``single`` and ``rwt`` use one M-way head (``rwt`` reweights the loss by
    inverse class frequency), ``meet`` uses one head per predicate group with
    an extra OOD slot, ``baseline`` is the dense global-projection head.
    """

    def __init__(self, cfg: RunConfig, freq: Sequence[float]):
        cfg.validate()
        self._cfg = cfg
        self._freq = [float(f) for f in freq]
        self._mode = cfg.model.mode
        s, m = cfg.synth, cfg.model
        M = s.num_predicates
        if len(self._freq) != M:
            raise ValueError(f"frequency table has {len(self._freq)} entries for {M} predicates")
        rng = init_rng(cfg.seed)
        self._groups: PredicateGroups | None = None
        self._class_weights = reweight_factors(self._freq) if self._mode == "rwt" else None
        if self._mode == "baseline":
            self.baseline = BaselineGlobalHead(
                s.visual_channels, s.height, s.width, s.num_entity_classes, M, rng,
                hidden1=m.baseline_hidden1, hidden2=m.baseline_hidden2, q_dim=m.baseline_q_dim,
                word_dim=m.baseline_word_dim, union_pooled=cfg.patch.pooled)
            return
        self.veto = VetoNetwork(cfg, rng)
        dim = cfg.encoder.embed_dim
        if self._mode == "meet":
            self._groups = build_groups(self._freq, cfg.meet.groups, cfg.meet.boundaries)
            self.experts = [Linear(dim, self._groups.size(g) + 1, rng) for g in range(self._groups.num_groups)]
        else:
            self.classifier = Linear(dim, M, rng)

    @property
    def config(self) -> RunConfig:
        return self._cfg

    @property
    def groups(self) -> PredicateGroups | None:
        return self._groups

    @property
    def mode(self) -> str:
        return self._mode

    def logits(self, b: PairBatch, rng: np.random.Generator | None = None):
        """M-way logits, or a list of per-expert logits under MEET."""
        if self._mode == "baseline":
            return self.baseline(Tensor(b.subject_visual), Tensor(b.object_visual), Tensor(b.subject_box),
                                 Tensor(b.object_box), b.subject_class, b.object_class)
        y = self.veto(b, rng)
        if self._mode == "meet":
            return [head(y) for head in self.experts]
        return self.classifier(y)

    def _dropout_rng(self, step: int) -> np.random.Generator | None:
        if self._cfg.encoder.attention_dropout > 0.0:
            return np.random.default_rng([self._cfg.seed, 5, step])
        return None

    def loss(self, b: PairBatch, step: int = 0) -> Tensor:
        labels = np.asarray(b.labels, dtype=np.int64)
        rng = self._dropout_rng(step)
        if self._mode != "meet":
            w = None if self._class_weights is None else self._class_weights[labels]
            return cross_entropy(self.logits(b, rng), labels, w)
        y = self.veto(b, rng)
        subsets = sample_expert_batches(labels, self._groups, expert_rngs(self._cfg.seed, step, self._groups.num_groups))
        logits = [self.experts[g](index(y, sub.indices)) if sub.indices.size else None
                  for g, sub in enumerate(subsets)]
        return multi_expert_loss(logits, [sub.labels for sub in subsets])

    def predict_scores(self, b: PairBatch) -> np.ndarray:
        """``[B, M]`` confidences by global predicate id (MEET: retained in-group probabilities)."""
        out = self.logits(b)
        if self._mode == "meet":
            return retained_probabilities([t.data for t in out], self._groups)
        z = out.data - out.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def veto_param_counts(cfg: RunConfig) -> dict[str, int]:
    """Analytic trainable-parameter counts of the local-patch network at ``cfg``."""
    s, m, p, e = cfg.synth, cfg.model, cfg.patch, cfg.encoder
    cd = m.geometric_channels
    counts = {
        "extractor": cd * s.depth_channels + cd + cd * cd * 9 + cd,
        "cmpf": cmpf_param_count(s.visual_channels, cd, p),
        "cues": linear_param_count(16, p.token_dim) + s.num_entity_classes * m.word_dim
        + linear_param_count(2 * m.word_dim, p.token_dim),
        "encoder": encoder_param_count(e, p.num_tokens),
    }
    if m.mode == "meet":
        G = cfg.meet.groups
        bounds = cfg.meet.boundaries or even_boundaries(s.num_predicates, G)
        counts["heads"] = sum(linear_param_count(e.embed_dim, int(size) + 1) for size in np.diff(bounds))
    else:
        counts["heads"] = linear_param_count(e.embed_dim, s.num_predicates)
    counts["total"] = sum(counts.values())
    return counts


def parameter_report(cfg: RunConfig) -> dict:
    s, m = cfg.synth, cfg.model
    veto = veto_param_counts(cfg)
    base = baseline_param_counts(s.visual_channels, s.height, s.width, s.num_entity_classes, s.num_predicates,
                                 m.baseline_hidden1, m.baseline_hidden2, m.baseline_q_dim, m.baseline_word_dim,
                                 cfg.patch.pooled)
    return {
        "veto": veto,
        "baseline": base,
        "projection_ratio": base["projection"] / veto["cmpf"],
        "total_ratio": float(base["total"] / veto["total"]),
    }


def gradient_check(cfg: RunConfig, seed: int = 0, batch_size: int = 4, tolerance: float = 1e-4,
                   max_entries: int = 16, raise_on_failure: bool = False) -> GradientReport:
    """End-to-end finite-difference check of every trainable parameter on a small synthetic batch."""
    from .backbone.synth import generate_split, make_signatures
    from .data import SceneTable

    small = RunConfig.from_dict(cfg.to_dict())
    small.synth.train_scenes = max(2, batch_size)
    scenes = generate_split(small.synth, seed, "train", make_signatures(small.synth, seed))
    table = SceneTable(scenes)
    # keep every predicate nonzero so all expert heads exist whatever the sample
    freq = [1.0 + i for i in range(small.synth.num_predicates)][::-1]
    model = RelationModel(small, freq)
    batch = table.gt_batch(np.arange(min(batch_size, table.num_gt)))
    return check_gradients(lambda: model.loss(batch, step=0), model.trainable_parameters(), tolerance=tolerance,
                           max_entries=max_entries, rng=np.random.default_rng([seed, 11]), floor=1e-6,
                           raise_on_failure=raise_on_failure)
