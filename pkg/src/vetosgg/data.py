"""Flattened entity/pair tables built once per split for batched training and evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone.scene import SceneInstance
from .patch import box_descriptor


@dataclass
class PairBatch:
    subject_visual: np.ndarray  # [B, c_v, h, w]
    object_visual: np.ndarray
    subject_depth: np.ndarray  # [B, c_depth, h, w]
    object_depth: np.ndarray
    subject_box: np.ndarray  # [B, 8]
    object_box: np.ndarray
    subject_class: np.ndarray  # [B]
    object_class: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.subject_class.shape[0]


class SceneTable:
    """All entities of a split stacked into arrays, plus index lists of GT pairs and of all ordered pairs."""

    def __init__(self, scenes: list[SceneInstance]):
        if not scenes:
            raise ValueError("empty split")
        self.scenes = scenes
        visual, depth, boxes, classes, offsets = [], [], [], [], [0]
        for scene in scenes:
            for e in scene.entities:
                visual.append(e.visual)
                depth.append(e.geometric)
                boxes.append(box_descriptor(e.box, scene.image_size))
                classes.append(e.class_id)
            offsets.append(offsets[-1] + len(scene.entities))
        self.visual = np.stack(visual)
        self.depth = np.stack(depth)
        self.boxes = np.stack(boxes)
        self.classes = np.asarray(classes, dtype=np.int64)
        self.offsets = np.asarray(offsets, dtype=np.int64)

        gs, go, gp = [], [], []
        ps, po, pscene = [], [], []
        for i, scene in enumerate(scenes):
            base = self.offsets[i]
            for s, p, o in scene.gt_triplets:
                gs.append(base + s)
                go.append(base + o)
                gp.append(p)
            for s, o in scene.ordered_pairs():
                ps.append(base + s)
                po.append(base + o)
                pscene.append(i)
        self.gt_subject = np.asarray(gs, dtype=np.int64)
        self.gt_object = np.asarray(go, dtype=np.int64)
        self.gt_predicate = np.asarray(gp, dtype=np.int64)
        self.pair_subject = np.asarray(ps, dtype=np.int64)
        self.pair_object = np.asarray(po, dtype=np.int64)
        self.pair_scene = np.asarray(pscene, dtype=np.int64)

    @property
    def num_gt(self) -> int:
        return int(self.gt_predicate.size)

    def batch(self, subject: np.ndarray, obj: np.ndarray, labels: np.ndarray | None = None) -> PairBatch:
        return PairBatch(
            self.visual[subject], self.visual[obj], self.depth[subject], self.depth[obj],
            self.boxes[subject], self.boxes[obj], self.classes[subject], self.classes[obj], labels,
        )

    def gt_batch(self, rows: np.ndarray) -> PairBatch:
        return self.batch(self.gt_subject[rows], self.gt_object[rows], self.gt_predicate[rows])
