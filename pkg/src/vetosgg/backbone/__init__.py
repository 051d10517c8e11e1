"""Synthetic stand-in for the frozen detector and depth estimator."""
from .geometry import GeometricFeatureExtractor
from .scene import (EntityDetection, SceneFormatError, SceneInstance, load_scene, save_scene,
                    scene_from_dict, scene_to_dict, validate_scene)
from .synth import (SPLITS, ConfigError, DatasetManifest, Signatures, SynthConfig, count_predicates,
                    generate_split, make_signatures, oracle_predict, synthesize_dataset, zipf_counts)

__all__ = [
    "GeometricFeatureExtractor", "EntityDetection", "SceneFormatError", "SceneInstance", "load_scene",
    "save_scene", "scene_from_dict", "scene_to_dict", "validate_scene", "SPLITS", "ConfigError",
    "DatasetManifest", "Signatures", "SynthConfig", "count_predicates", "generate_split",
    "make_signatures", "oracle_predict", "synthesize_dataset", "zipf_counts",
]
