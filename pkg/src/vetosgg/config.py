"""Run configuration: every module's settings validated together and embedded in artifacts."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .backbone.synth import ConfigError, SynthConfig
from .encoder import EncoderConfig
from .patch import PatchConfig

MODES = ("single", "rwt", "meet", "baseline")


@dataclass
class ModelConfig:
    mode: str = "meet"
    geometric_channels: int = 32  # c_d produced by the geometric extractor
    word_dim: int = 32
    baseline_hidden1: int = 4096
    baseline_hidden2: int = 512
    baseline_q_dim: int = 512
    baseline_word_dim: int = 200


@dataclass
class MeetConfig:
    groups: int = 3
    boundaries: list[int] | None = None


@dataclass
class OptimConfig:
    lr: float = 1.2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 12
    steps: int = 5000
    warmup: int = 200
    eval_every: int = 500
    decay_factor: float = 0.1
    patience: int = 2
    max_decays: int = 3
    monitor: str = "A@20"


@dataclass
class EvalConfig:
    ks: list[int] = field(default_factory=lambda: [20, 50, 100])
    graph_constraint: bool = True
    batch_size: int = 256


@dataclass
class RunConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    meet: MeetConfig = field(default_factory=MeetConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.synth.validate()
        self.patch.validate()
        self.encoder.validate()
        m, s = self.model, self.synth
        if m.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {m.mode!r}")
        if self.patch.token_dim != self.encoder.embed_dim:
            raise ConfigError(
                f"p_v + p_d = {self.patch.token_dim} must equal encoder embed_dim {self.encoder.embed_dim}")
        if self.patch.pooled > min(s.height, s.width):
            raise ConfigError(f"pooled resolution {self.patch.pooled} exceeds feature extent {s.height}x{s.width}")
        if min(m.geometric_channels, m.word_dim, m.baseline_hidden1, m.baseline_hidden2,
               m.baseline_q_dim, m.baseline_word_dim) < 1:
            raise ConfigError("model widths must be >= 1")
        if not 1 <= self.meet.groups <= s.num_predicates:
            raise ConfigError(f"MEET groups must lie in [1, {s.num_predicates}], got {self.meet.groups}")
        if self.meet.boundaries is not None and len(self.meet.boundaries) != self.meet.groups + 1:
            raise ConfigError("MEET boundaries need groups + 1 entries")
        o = self.optim
        if o.lr <= 0 or o.batch_size < 1 or o.steps < 0 or o.warmup < 0 or o.eval_every < 1:
            raise ConfigError("optimizer settings out of range")
        if not (0 < o.decay_factor < 1) or o.patience < 1 or o.max_decays < 0:
            raise ConfigError("decay settings out of range")
        if o.monitor.split("@")[0] not in ("R", "mR", "A") or int(o.monitor.split("@")[1]) not in self.eval.ks:
            raise ConfigError(f"monitor {o.monitor!r} must be R@k, mR@k or A@k with k in eval.ks")
        if not self.eval.ks or min(self.eval.ks) < 1:
            raise ConfigError("eval.ks must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"] = self.synth.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        sections = {"patch": PatchConfig, "encoder": EncoderConfig, "model": ModelConfig,
                    "meet": MeetConfig, "optim": OptimConfig, "eval": EvalConfig}
        kwargs = {}
        if "seed" in d:
            kwargs["seed"] = int(d["seed"])
        if "synth" in d:
            kwargs["synth"] = SynthConfig.from_dict(d["synth"])
        for name, klass in sections.items():
            if name in d:
                sub = d[name]
                bad = set(sub) - {f.name for f in fields(klass)}
                if bad:
                    raise ConfigError(f"unknown fields in {name}: {sorted(bad)}")
                kwargs[name] = klass(**sub)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: parse error at line {err.lineno}, column {err.colno}: {err.msg}") from None
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        return cls.from_dict(d)


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


# Full-size architecture. Feature extents are assumptions (c_v = 256, 14x14 grids).
FULL_PRESET = {
    "synth": {"num_predicates": 50, "num_entity_classes": 150, "visual_channels": 256,
              "height": 14, "width": 14, "signature_grid": 4},
    "patch": {"pooled": 8, "patch": 2, "visual_dim": 288, "depth_dim": 288},
    "encoder": {"layers": 6, "heads": 6, "embed_dim": 576, "mlp_hidden": 2304},
    "model": {"geometric_channels": 256, "word_dim": 200},
    "optim": {"batch_size": 12, "lr": 1.2e-3, "steps": 125_000, "warmup": 3000},
}

# Small CPU model: 12 Zipf predicates, 3 experts, encoder narrow enough to train in minutes.
TOY_PRESET = {
    "synth": {"num_predicates": 12, "zipf_s": 1.0, "train_scenes": 3000, "val_scenes": 200, "test_scenes": 200,
              "visual_channels": 16, "height": 8, "width": 8, "signature_grid": 4,
              "entities_per_scene": 4, "relations_per_scene": 2},
    "patch": {"pooled": 8, "patch": 2, "visual_dim": 12, "depth_dim": 12},
    "encoder": {"layers": 2, "heads": 2, "embed_dim": 24, "mlp_hidden": 96},
    "model": {"geometric_channels": 4, "word_dim": 8, "baseline_hidden1": 64, "baseline_hidden2": 32,
              "baseline_q_dim": 32, "baseline_word_dim": 8},
    "meet": {"groups": 3},
    "optim": {"batch_size": 32, "steps": 3000, "warmup": 100, "eval_every": 500},
}

# Long-tail benchmark on the toy model: weaker signatures make rare predicates ambiguous, so a
# frequency-biased classifier loses them; a larger test split keeps per-class recall stable.
LONGTAIL_PRESET = merge(TOY_PRESET, {
    "synth": {"signature_strength": 0.35, "test_scenes": 1000},
    "optim": {"steps": 4000, "lr": 2e-3},
})

PRESETS = {"desk": {}, "full": FULL_PRESET, "toy": TOY_PRESET, "longtail": LONGTAIL_PRESET}


def preset(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig.from_dict(merge(merge(RunConfig().to_dict(), PRESETS[name]), overrides)).validate()
