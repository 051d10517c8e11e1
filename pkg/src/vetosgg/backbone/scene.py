"""Scene records and their JSON file format.

A scene file holds ``image_size``, a list of ``entities`` (``box``, ``class_id``,
``score``, ``visual[c][y][x]``, ``geometric[c][y][x]``) and ``gt_triplets`` as
``[subject, predicate, object]``. Loading validates every invariant and
rejects bad files instead of repairing them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class SceneFormatError(ValueError):
    """A scene or manifest file is malformed or violates an invariant."""


@dataclass(eq=False)
class EntityDetection:
    box: tuple[float, float, float, float]
    class_id: int
    visual: np.ndarray  # [c_v, h, w]
    geometric: np.ndarray  # [c_depth, h, w], the depth stand-in fed to the geometric extractor
    score: float = 1.0

    def __eq__(self, other) -> bool:
        if not isinstance(other, EntityDetection):
            return NotImplemented
        return (
            tuple(self.box) == tuple(other.box)
            and self.class_id == other.class_id
            and self.score == other.score
            and np.array_equal(self.visual, other.visual)
            and np.array_equal(self.geometric, other.geometric)
        )


@dataclass
class SceneInstance:
    image_size: tuple[float, float]
    entities: list[EntityDetection]
    gt_triplets: list[tuple[int, int, int]] = field(default_factory=list)

    def ordered_pairs(self) -> list[tuple[int, int]]:
        n = len(self.entities)
        return [(i, j) for i in range(n) for j in range(n) if i != j]


def validate_scene(scene: SceneInstance, num_entity_classes: int | None = None,
                   num_predicates: int | None = None, where: str = "scene") -> None:
    W, H = scene.image_size
    if not (W > 0 and H > 0):
        raise SceneFormatError(f"{where}: image_size must be positive, got {scene.image_size}")
    extent = None
    for i, e in enumerate(scene.entities):
        x1, y1, x2, y2 = e.box
        if not (x1 < x2 and y1 < y2):
            raise SceneFormatError(f"{where}: entity {i} box {list(e.box)} needs x1 < x2 and y1 < y2")
        if e.class_id < 0 or (num_entity_classes is not None and e.class_id >= num_entity_classes):
            raise SceneFormatError(f"{where}: entity {i} class_id {e.class_id} out of range")
        if not 0.0 <= e.score <= 1.0:
            raise SceneFormatError(f"{where}: entity {i} score {e.score} outside [0, 1]")
        if e.visual.ndim != 3 or e.geometric.ndim != 3:
            raise SceneFormatError(f"{where}: entity {i} feature maps must be [c][y][x]")
        if e.visual.shape[1:] != e.geometric.shape[1:]:
            raise SceneFormatError(
                f"{where}: entity {i} visual extent {e.visual.shape[1:]} != geometric extent {e.geometric.shape[1:]}")
        if extent is None:
            extent = (e.visual.shape, e.geometric.shape)
        elif extent != (e.visual.shape, e.geometric.shape):
            raise SceneFormatError(f"{where}: entity {i} feature shapes differ from entity 0")
        if not (np.all(np.isfinite(e.visual)) and np.all(np.isfinite(e.geometric))):
            raise SceneFormatError(f"{where}: entity {i} has non-finite features")
    n = len(scene.entities)
    for t in scene.gt_triplets:
        s, p, o = t
        if not (0 <= s < n and 0 <= o < n):
            raise SceneFormatError(f"{where}: triplet {list(t)} references an entity outside [0, {n})")
        if s == o:
            raise SceneFormatError(f"{where}: triplet {list(t)} has subject == object")
        if p < 0 or (num_predicates is not None and p >= num_predicates):
            raise SceneFormatError(f"{where}: triplet {list(t)} predicate out of range")


def scene_to_dict(scene: SceneInstance) -> dict:
    return {
        "image_size": [float(v) for v in scene.image_size],
        "entities": [
            {
                "box": [float(v) for v in e.box],
                "class_id": int(e.class_id),
                "score": float(e.score),
                "visual": e.visual.tolist(),
                "geometric": e.geometric.tolist(),
            }
            for e in scene.entities
        ],
        "gt_triplets": [[int(s), int(p), int(o)] for s, p, o in scene.gt_triplets],
    }


def _require(obj: dict, key: str, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SceneFormatError(f"{where}: missing field {key!r}")
    return obj[key]


def _grid(value, where: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise SceneFormatError(f"{where}: feature map is not a rectangular numeric array") from None
    if arr.ndim != 3:
        raise SceneFormatError(f"{where}: feature map must be [c][y][x], got {arr.ndim} axes")
    return arr


def scene_from_dict(obj: dict, where: str = "scene", num_entity_classes: int | None = None,
                    num_predicates: int | None = None) -> SceneInstance:
    size = _require(obj, "image_size", where)
    if not (isinstance(size, list) and len(size) == 2):
        raise SceneFormatError(f"{where}: field 'image_size' must be [W, H]")
    entities = []
    for i, raw in enumerate(_require(obj, "entities", where)):
        ew = f"{where}: entities[{i}]"
        box = _require(raw, "box", ew)
        if not (isinstance(box, list) and len(box) == 4):
            raise SceneFormatError(f"{ew}: field 'box' must have 4 numbers")
        class_id = _require(raw, "class_id", ew)
        if not isinstance(class_id, int) or isinstance(class_id, bool):
            raise SceneFormatError(f"{ew}: field 'class_id' must be an integer")
        entities.append(EntityDetection(
            box=tuple(float(v) for v in box),
            class_id=class_id,
            score=float(raw.get("score", 1.0)),
            visual=_grid(_require(raw, "visual", ew), ew + ".visual"),
            geometric=_grid(_require(raw, "geometric", ew), ew + ".geometric"),
        ))
    triplets = []
    for k, t in enumerate(_require(obj, "gt_triplets", where)):
        if not (isinstance(t, list) and len(t) == 3 and all(isinstance(v, int) for v in t)):
            raise SceneFormatError(f"{where}: gt_triplets[{k}] must be [s, p, o] integers")
        triplets.append((t[0], t[1], t[2]))
    scene = SceneInstance(image_size=(float(size[0]), float(size[1])), entities=entities, gt_triplets=triplets)
    validate_scene(scene, num_entity_classes, num_predicates, where)
    return scene


def dumps_scene(scene: SceneInstance) -> str:
    return json.dumps(scene_to_dict(scene), separators=(",", ":"))


def save_scene(scene: SceneInstance, path: str | Path) -> None:
    validate_scene(scene)
    Path(path).write_text(dumps_scene(scene))


def load_scene(path: str | Path, num_entity_classes: int | None = None,
               num_predicates: int | None = None) -> SceneInstance:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise SceneFormatError(f"{path}: parse error at line {err.lineno}, column {err.colno}: {err.msg}") from None
    return scene_from_dict(obj, str(path), num_entity_classes, num_predicates)
