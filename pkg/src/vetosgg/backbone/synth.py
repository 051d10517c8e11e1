"""Synthetic long-tail scene generator standing in for a detector and depth estimator.

Predicate counts follow a Zipf law over predicate ids (id 0 is the most
frequent). Each predicate owns a spatial region of the entity grid and a
random channel pattern for the subject and for the object; a relation
``(s, p, o)`` adds that pattern to the subject's and object's grids inside
that region, on both the visual and the depth channels. Pooling at the
patch resolution therefore exposes the signature as a local cue.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .scene import EntityDetection, SceneFormatError, SceneInstance, dumps_scene, load_scene

SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    """A configuration value is out of its valid range."""


@dataclass
class SynthConfig:
    num_predicates: int = 12
    num_entity_classes: int = 10
    zipf_s: float = 1.0
    train_scenes: int = 600
    val_scenes: int = 150
    test_scenes: int = 150
    entities_per_scene: int = 4
    relations_per_scene: int = 2
    visual_channels: int = 64
    depth_channels: int = 1
    height: int = 16
    width: int = 16
    signature_grid: int = 4
    signature_strength: float = 0.5
    class_strength: float = 0.5
    noise_std: float = 1.0
    image_size: tuple[float, float] = (640.0, 480.0)
    decimals: int = 6

    def validate(self) -> None:
        if self.num_predicates < 4:
            raise ConfigError(f"num_predicates must be >= 4, got {self.num_predicates}")
        if self.num_entity_classes < 1:
            raise ConfigError("num_entity_classes must be >= 1")
        if not self.zipf_s > 0:
            raise ConfigError(f"zipf_s must be > 0, got {self.zipf_s}")
        if self.train_scenes < 1 or self.val_scenes < 0 or self.test_scenes < 0:
            raise ConfigError("scene counts must be non-negative with at least one training scene")
        if self.entities_per_scene < 2:
            raise ConfigError("entities_per_scene must be >= 2")
        if not 1 <= self.relations_per_scene <= self.entities_per_scene // 2:
            raise ConfigError(
                f"relations_per_scene must lie in [1, entities_per_scene // 2], got {self.relations_per_scene}")
        if min(self.visual_channels, self.depth_channels) < 1:
            raise ConfigError("channel counts must be >= 1")
        if not 1 <= self.signature_grid <= min(self.height, self.width):
            raise ConfigError("signature_grid must lie in [1, min(height, width)]")
        if self.noise_std < 0 or self.signature_strength < 0 or self.class_strength < 0:
            raise ConfigError("strengths and noise must be non-negative")
        if len(self.image_size) != 2 or min(self.image_size) <= 0:
            raise ConfigError("image_size must be two positive numbers")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown synth config fields: {sorted(unknown)}")
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(float(v) for v in d["image_size"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        return d


@dataclass
class Signatures:
    """Per-predicate planted patterns."""

    region: np.ndarray  # [M] region index in the signature grid
    subject_visual: np.ndarray  # [M, c_v]
    object_visual: np.ndarray  # [M, c_v]
    subject_depth: np.ndarray  # [M, c_depth]
    object_depth: np.ndarray  # [M, c_depth]
    class_prototypes: np.ndarray  # [C_e, c_v]


def make_signatures(cfg: SynthConfig, seed: int) -> Signatures:
    rng = np.random.default_rng([seed, 0])
    M, cv, cd = cfg.num_predicates, cfg.visual_channels, cfg.depth_channels
    n_regions = cfg.signature_grid ** 2
    # a stride coprime to the grid size spreads consecutive ids; regions repeat once M exceeds the grid
    stride = next(s for s in range(n_regions // 2 + 1, 0, -1) if math.gcd(s, n_regions) == 1)
    region = (np.arange(M) * stride) % n_regions

    def sign(*shape):
        return rng.choice([-1.0, 1.0], size=shape)

    return Signatures(
        region=region,
        subject_visual=sign(M, cv),
        object_visual=sign(M, cv),
        subject_depth=sign(M, cd),
        object_depth=sign(M, cd),
        class_prototypes=rng.normal(size=(cfg.num_entity_classes, cv)),
    )


def region_slices(cfg: SynthConfig, region: int) -> tuple[slice, slice]:
    R = cfg.signature_grid
    ry, rx = divmod(int(region), R)
    return (slice(ry * cfg.height // R, (ry + 1) * cfg.height // R),
            slice(rx * cfg.width // R, (rx + 1) * cfg.width // R))


def zipf_counts(total: int, M: int, s: float) -> np.ndarray:
    """Largest-remainder rounding of ``total * rank^-s / H`` so counts sum to ``total``."""
    w = np.arange(1, M + 1, dtype=np.float64) ** -s
    quota = total * w / w.sum()
    counts = np.floor(quota).astype(np.int64)
    short = total - int(counts.sum())
    order = sorted(range(M), key=lambda i: (-(quota[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return counts


def _random_box(rng: np.random.Generator, W: float, H: float) -> tuple[float, float, float, float]:
    bw = rng.uniform(0.1, 0.6) * W
    bh = rng.uniform(0.1, 0.6) * H
    x1 = rng.uniform(0.0, W - bw)
    y1 = rng.uniform(0.0, H - bh)
    return (x1, y1, x1 + bw, y1 + bh)


def generate_split(cfg: SynthConfig, seed: int, split: str, sig: Signatures | None = None) -> list[SceneInstance]:
    """Generate one split in memory. Identical to what :func:`synthesize_dataset` writes."""
    cfg.validate()
    sig = sig if sig is not None else make_signatures(cfg, seed)
    n_scenes = {"train": cfg.train_scenes, "val": cfg.val_scenes, "test": cfg.test_scenes}[split]
    rng = np.random.default_rng([seed, 1 + SPLITS.index(split)])
    n_rel = n_scenes * cfg.relations_per_scene
    preds = np.repeat(np.arange(cfg.num_predicates), zipf_counts(n_rel, cfg.num_predicates, cfg.zipf_s))
    preds = rng.permutation(preds)

    W, H = cfg.image_size
    n = cfg.entities_per_scene
    scenes = []
    for s_idx in range(n_scenes):
        classes = rng.integers(0, cfg.num_entity_classes, size=n)
        visual = rng.normal(0.0, cfg.noise_std, size=(n, cfg.visual_channels, cfg.height, cfg.width))
        visual += cfg.class_strength * sig.class_prototypes[classes][:, :, None, None]
        depth = rng.normal(0.0, cfg.noise_std, size=(n, cfg.depth_channels, cfg.height, cfg.width))
        depth += rng.uniform(-1.0, 1.0, size=(n, 1, 1, 1))
        boxes = [_random_box(rng, W, H) for _ in range(n)]
        scores = rng.uniform(0.5, 1.0, size=n)
        order = rng.permutation(n)
        triplets = []
        for r in range(cfg.relations_per_scene):
            subj, obj = int(order[2 * r]), int(order[2 * r + 1])
            p = int(preds[s_idx * cfg.relations_per_scene + r])
            ys, xs = region_slices(cfg, sig.region[p])
            a = cfg.signature_strength
            visual[subj, :, ys, xs] += a * sig.subject_visual[p][:, None, None]
            visual[obj, :, ys, xs] += a * sig.object_visual[p][:, None, None]
            depth[subj, :, ys, xs] += a * sig.subject_depth[p][:, None, None]
            depth[obj, :, ys, xs] += a * sig.object_depth[p][:, None, None]
            triplets.append((subj, p, obj))
        visual = np.round(visual, cfg.decimals)
        depth = np.round(depth, cfg.decimals)
        entities = [
            EntityDetection(
                box=tuple(round(float(v), cfg.decimals) for v in boxes[i]),
                class_id=int(classes[i]),
                score=round(float(scores[i]), cfg.decimals),
                visual=visual[i],
                geometric=depth[i],
            )
            for i in range(n)
        ]
        scenes.append(SceneInstance(image_size=(float(W), float(H)), entities=entities, gt_triplets=triplets))
    return scenes


def count_predicates(scenes: list[SceneInstance], M: int) -> list[int]:
    counts = [0] * M
    for scene in scenes:
        for _, p, _ in scene.gt_triplets:
            counts[p] += 1
    return counts


@dataclass
class DatasetManifest:
    predicate_names: list[str]
    entity_class_names: list[str]
    splits: dict[str, list[str]]
    frequency: list[int]
    root: Path | None = None
    synth: dict = field(default_factory=dict)
    seed: int | None = None

    @property
    def num_predicates(self) -> int:
        return len(self.predicate_names)

    @property
    def num_entity_classes(self) -> int:
        return len(self.entity_class_names)

    def to_dict(self) -> dict:
        return {
            "predicate_names": self.predicate_names,
            "entity_class_names": self.entity_class_names,
            "splits": self.splits,
            "frequency": self.frequency,
            "synth": self.synth,
            "seed": self.seed,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise SceneFormatError(f"{path}: parse error at line {err.lineno}, column {err.colno}: {err.msg}") from None
        for key in ("predicate_names", "entity_class_names", "splits", "frequency"):
            if key not in d:
                raise SceneFormatError(f"{path}: missing field {key!r}")
        if len(d["frequency"]) != len(d["predicate_names"]) or any(f < 0 for f in d["frequency"]):
            raise SceneFormatError(f"{path}: frequency table must hold one non-negative count per predicate")
        return cls(d["predicate_names"], d["entity_class_names"], d["splits"], list(d["frequency"]),
                   root=path.parent, synth=d.get("synth", {}), seed=d.get("seed"))

    def load_split(self, split: str) -> list[SceneInstance]:
        if split not in self.splits:
            raise SceneFormatError(f"manifest has no split {split!r}")
        root = self.root or Path(".")
        return [load_scene(root / rel, self.num_entity_classes, self.num_predicates) for rel in self.splits[split]]


def synthesize_dataset(cfg: SynthConfig, seed: int, out_dir: str | Path) -> DatasetManifest:
    """Write ``manifest.json`` and ``scenes/<split>/NNNNN.json`` under ``out_dir``."""
    cfg.validate()
    out_dir = Path(out_dir)
    sig = make_signatures(cfg, seed)
    manifest = DatasetManifest(
        predicate_names=[f"predicate_{i:02d}" for i in range(cfg.num_predicates)],
        entity_class_names=[f"class_{i:02d}" for i in range(cfg.num_entity_classes)],
        splits={},
        frequency=[],
        root=out_dir,
        synth=cfg.to_dict(),
        seed=seed,
    )
    for split in SPLITS:
        scenes = generate_split(cfg, seed, split, sig)
        split_dir = out_dir / "scenes" / split
        split_dir.mkdir(parents=True, exist_ok=True)
        rels = []
        for i, scene in enumerate(scenes):
            rel = f"scenes/{split}/{i:05d}.json"
            (out_dir / rel).write_text(dumps_scene(scene))
            rels.append(rel)
        manifest.splits[split] = rels
        if split == "train":
            manifest.frequency = count_predicates(scenes, cfg.num_predicates)
    manifest.save(out_dir / "manifest.json")
    return manifest


def oracle_predict(scene: SceneInstance, pairs: list[tuple[int, int]], cfg: SynthConfig, sig: Signatures) -> list[int]:
    """Matched-filter decision rule that reads the planted signatures directly.

    Each entity grid is centred by its spatial mean (removing the class
    prototype) and every predicate is scored by correlating its region with
    its subject and object patterns.
    """
    slices = [region_slices(cfg, sig.region[p]) for p in range(cfg.num_predicates)]
    out = []
    for s, o in pairs:
        es, eo = scene.entities[s], scene.entities[o]
        vs = es.visual - es.visual.mean(axis=(1, 2), keepdims=True)
        vo = eo.visual - eo.visual.mean(axis=(1, 2), keepdims=True)
        ds = es.geometric - es.geometric.mean(axis=(1, 2), keepdims=True)
        do = eo.geometric - eo.geometric.mean(axis=(1, 2), keepdims=True)
        scores = []
        for p, (ys, xs) in enumerate(slices):
            scores.append(
                vs[:, ys, xs].sum(axis=(1, 2)) @ sig.subject_visual[p]
                + vo[:, ys, xs].sum(axis=(1, 2)) @ sig.object_visual[p]
                + ds[:, ys, xs].sum(axis=(1, 2)) @ sig.subject_depth[p]
                + do[:, ys, xs].sum(axis=(1, 2)) @ sig.object_depth[p]
            )
        out.append(int(np.argmax(scores)))
    return out
