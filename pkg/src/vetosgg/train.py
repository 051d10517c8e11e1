"""Training loop, optimizer, learning-rate schedule and split evaluation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .checkpoint import load_model_state, read_checkpoint, save_checkpoint
from .config import RunConfig
from .data import SceneTable
from .metrics import MetricReport, PredictedGraph, evaluate_graphs, fingerprint
from .model import RelationModel
from .nn import Parameter
from .tensor import Tape


class NumericError(RuntimeError):
    pass


class Adam:
    def __init__(self, params: list[Parameter], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in params}
        self.v = {p.name: np.zeros_like(p.data) for p in params}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            m, v = self.m[p.name], self.v[p.name]
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad ** 2
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load(self, state: dict) -> None:
        if set(state["m"]) != set(self.m):
            raise ValueError("optimizer state does not match the model parameters")
        self.t = state["t"]
        self.m = {k: v.copy() for k, v in state["m"].items()}
        self.v = {k: v.copy() for k, v in state["v"].items()}


@dataclass
class Schedule:
    """Linear warmup, then step decay when the monitored metric stops improving."""

    base_lr: float
    warmup: int
    decay_factor: float = 0.1
    patience: int = 2
    max_decays: int = 3
    scale: float = 1.0
    decays: int = 0
    best: float = -math.inf
    bad_evals: int = 0

    def lr(self, step: int) -> float:
        ramp = 1.0 if self.warmup == 0 else min(1.0, step / self.warmup)
        return self.base_lr * self.scale * ramp

    def observe(self, value: float) -> bool:
        """Record an evaluation; returns True when the rate was decayed."""
        if value > self.best:
            self.best = value
            self.bad_evals = 0
            return False
        self.bad_evals += 1
        if self.bad_evals >= self.patience and self.decays < self.max_decays:
            self.scale *= self.decay_factor
            self.decays += 1
            self.bad_evals = 0
            return True
        return False

    def state(self) -> dict:
        d = asdict(self)
        d["best"] = None if self.best == -math.inf else self.best
        return d

    @classmethod
    def from_state(cls, d: dict) -> "Schedule":
        d = dict(d)
        d["best"] = -math.inf if d["best"] is None else d["best"]
        return cls(**d)


def batch_rows(num_rows: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Rows for ``step``: walk a fresh seeded permutation each epoch, so any step is reproducible on its own."""
    batch_size = min(batch_size, num_rows)
    per_epoch = num_rows // batch_size
    epoch, slot = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, 3, epoch]).permutation(num_rows)
    return perm[slot * batch_size:(slot + 1) * batch_size]


def predict_split(model: RelationModel, table: SceneTable, batch_size: int = 256) -> list[PredictedGraph]:
    n = table.pair_subject.size
    scores = np.empty((n, model.config.synth.num_predicates))
    for lo in range(0, n, batch_size):
        hi = min(n, lo + batch_size)
        scores[lo:hi] = model.predict_scores(table.batch(table.pair_subject[lo:hi], table.pair_object[lo:hi]))
    graphs = []
    start = 0
    for scene in table.scenes:
        pairs = scene.ordered_pairs()
        graphs.append(PredictedGraph(pairs, scores[start:start + len(pairs)]))
        start += len(pairs)
    return graphs


def evaluate(model: RelationModel, table: SceneTable, freq, cfg: RunConfig | None = None) -> MetricReport:
    cfg = cfg or model.config
    graphs = predict_split(model, table, cfg.eval.batch_size)
    return evaluate_graphs(graphs, table.scenes, freq, cfg.eval.ks, cfg.eval.graph_constraint,
                           fingerprint(cfg.to_dict()))


def monitored(report: MetricReport, monitor: str) -> float:
    name, k = monitor.split("@")
    k = int(k)
    return {"R": report.recall, "mR": report.mean_recall, "A": report.average}[name][k]


def _resume_key(cfg: RunConfig) -> dict:
    """Everything except the step budget must match to continue a run."""
    d = cfg.to_dict()
    d["optim"] = {k: v for k, v in d["optim"].items() if k != "steps"}
    return d


@dataclass
class TrainResult:
    model: RelationModel
    step: int
    history: list[dict]
    best_metric: float | None


def train(cfg: RunConfig, train_table: SceneTable, freq, val_table: SceneTable | None = None,
          out_dir: str | Path | None = None, resume: str | Path | None = None,
          log: Callable[[dict], None] | None = None) -> TrainResult:
    """Train from scratch (or resume) for ``cfg.optim.steps`` steps.

    With ``out_dir`` set, writes ``last.json`` at every evaluation, ``best.json``
    when the monitored validation metric improves and ``train_log.jsonl``.
    A non-finite loss raises ``NumericError`` before any state is overwritten.
    """
    cfg.validate()
    o = cfg.optim
    model = RelationModel(cfg, freq)
    params = model.trainable_parameters()
    opt = Adam(params, o.beta1, o.beta2, o.eps)
    sched = Schedule(o.lr, o.warmup, o.decay_factor, o.patience, o.max_decays)
    step = 0
    if resume is not None:
        doc = read_checkpoint(resume)
        if _resume_key(RunConfig.from_dict(doc["config"])) != _resume_key(cfg):
            raise ValueError(f"checkpoint {resume} was written with a different configuration")
        load_model_state(model, doc["parameters"])
        if doc["optimizer"]:
            opt.load(doc["optimizer"])
        if doc["schedule"]:
            sched = Schedule.from_state(doc["schedule"])
        step = doc["step"]

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "a" if resume is not None else "w")
    history: list[dict] = []

    def emit(rec: dict) -> None:
        history.append(rec)
        if log_file is not None:
            log_file.write(json.dumps(rec, sort_keys=True) + "\n")
            log_file.flush()
        if log is not None:
            log(rec)

    def snapshot(name: str) -> None:
        if out is not None:
            save_checkpoint(out / name, model, cfg.to_dict(), list(freq), step, opt.state(), sched.state())

    try:
        running = []
        while step < o.steps:
            rows = batch_rows(train_table.num_gt, o.batch_size, cfg.seed, step)
            batch = train_table.gt_batch(rows)
            lr = sched.lr(step)
            model.zero_grad()
            with Tape() as tape:
                loss = model.loss(batch, step)
                value = float(loss.data)
                if not math.isfinite(value):
                    emit({"event": "abort", "step": step, "loss": str(value)})
                    raise NumericError(f"non-finite loss {value} at step {step}")
                tape.backward(loss)
            opt.step(lr)
            step += 1
            running.append(value)
            if step % o.eval_every == 0 or step == o.steps:
                rec = {"event": "train", "step": step, "lr": lr, "loss": float(np.mean(running))}
                running = []
                if val_table is not None:
                    report = evaluate(model, val_table, freq, cfg)
                    metric = monitored(report, o.monitor)
                    improved = metric > sched.best
                    rec["val"] = {o.monitor: metric}
                    rec["decayed"] = sched.observe(metric)
                    if improved:
                        snapshot("best.json")
                emit(rec)
                snapshot("last.json")
    finally:
        if log_file is not None:
            log_file.close()
    best = None if sched.best == -math.inf else sched.best
    return TrainResult(model, step, history, best)


def load_model(path: str | Path) -> tuple[RelationModel, RunConfig, list[float]]:
    doc = read_checkpoint(path)
    cfg = RunConfig.from_dict(doc["config"]).validate()
    model = RelationModel(cfg, doc["frequency"])
    load_model_state(model, doc["parameters"])
    return model, cfg, doc["frequency"]
