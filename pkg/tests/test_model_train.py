import copy
import json
import math

import numpy as np
import pytest

from vetosgg.backbone import ConfigError, count_predicates, generate_split, make_signatures
from vetosgg.checkpoint import CheckpointError, read_checkpoint, save_checkpoint
from vetosgg.config import RunConfig, preset
from vetosgg.data import SceneTable
from vetosgg.model import RelationModel, gradient_check, parameter_report, reweight_factors, veto_param_counts
from vetosgg.nn import Parameter
from vetosgg.train import Adam, NumericError, Schedule, batch_rows, evaluate, load_model, train

MODES = ["single", "rwt", "meet", "baseline"]


def tiny(mode="meet", **over):
    over = {"synth": {"train_scenes": 30, "val_scenes": 8, "test_scenes": 8},
            "optim": {"steps": 12, "warmup": 4, "eval_every": 6, "batch_size": 8}, **over}
    cfg = preset("toy", **over)
    cfg.model.mode = mode
    return cfg


@pytest.fixture(scope="module")
def tables():
    cfg = tiny()
    sig = make_signatures(cfg.synth, cfg.seed)
    splits = {s: generate_split(cfg.synth, cfg.seed, s, sig) for s in ("train", "val")}
    freq = count_predicates(splits["train"], cfg.synth.num_predicates)
    return SceneTable(splits["train"]), SceneTable(splits["val"]), freq


@pytest.mark.parametrize("mode", ["single", "meet"])
def test_instantiated_count_matches_analytic(mode, tables):
    cfg = tiny(mode)
    model = RelationModel(cfg, tables[2])
    assert model.num_parameters() == veto_param_counts(cfg)["total"]


def test_token_count_at_toy_dims(tables):
    model = RelationModel(tiny(), tables[2])
    z0 = model.veto.tokens(tables[0].gt_batch(np.arange(3)))
    assert z0.shape == (3, 19, 24)


@pytest.mark.parametrize("mode", MODES)
def test_end_to_end_gradients(mode):
    report = gradient_check(tiny(mode), max_entries=6)
    assert report.passed, report.worst


def test_scores_are_probabilities(tables):
    batch = tables[0].gt_batch(np.arange(5))
    single = RelationModel(tiny("single"), tables[2]).predict_scores(batch)
    assert np.allclose(single.sum(axis=1), 1.0)
    meet = RelationModel(tiny("meet"), tables[2]).predict_scores(batch)
    assert meet.shape == (5, 12) and np.all((meet >= 0) & (meet <= 1))


def test_reweight_expected_weight_is_one():
    freq = np.array([50.0, 30.0, 20.0, 0.0])
    w = reweight_factors(freq)
    # N / (M * f_p) summed against f_p / N gives (#seen classes) / M
    assert np.dot(w, freq) / freq.sum() == pytest.approx(3 / 4)
    assert w[3] == 0.0


def test_frequency_length_checked(tables):
    with pytest.raises(ValueError, match="frequency table"):
        RelationModel(tiny(), tables[2][:5])


def test_params_report_ratio():
    rep = parameter_report(RunConfig().validate())
    assert rep["projection_ratio"] >= 5
    assert 10e6 <= parameter_report(preset("full"))["veto"]["total"] <= 40e6


def test_config_validation():
    with pytest.raises(ConfigError, match="embed_dim"):
        preset("toy", encoder={"embed_dim": 30, "heads": 2})
    with pytest.raises(ConfigError, match="mlp_hidden"):
        preset("toy", encoder={"mlp_hidden": 0})
    with pytest.raises(ConfigError, match="monitor"):
        preset("toy", optim={"monitor": "A@7"})
    with pytest.raises(ConfigError, match="unknown"):
        RunConfig.from_dict({"optimizer": {}})
    cfg = preset("toy")
    assert RunConfig.from_dict(json.loads(cfg.to_json())).to_dict() == cfg.to_dict()


def test_adam_matches_closed_form():
    p = Parameter(np.array([1.0, -2.0]), name="w")
    opt = Adam([p])
    p.grad = np.array([0.5, -0.25])
    opt.step(0.1)
    # first bias-corrected step moves each entry by lr * sign(g)
    assert np.allclose(p.data, [0.9, -1.9], atol=1e-7)


def test_schedule_warmup_and_decay():
    s = Schedule(base_lr=1.0, warmup=10, decay_factor=0.1, patience=2, max_decays=1)
    assert s.lr(0) == 0.0 and s.lr(5) == 0.5 and s.lr(20) == 1.0
    assert not s.observe(0.5)
    assert not s.observe(0.4)
    assert s.observe(0.4) and s.lr(20) == pytest.approx(0.1)
    assert not s.observe(0.3) and not s.observe(0.3)  # decay budget spent
    assert Schedule.from_state(json.loads(json.dumps(s.state()))) == s


def test_batch_rows_cover_epoch():
    rows = np.concatenate([batch_rows(10, 3, 0, step) for step in range(3)])
    assert len(set(rows.tolist())) == 9
    assert np.array_equal(batch_rows(10, 3, 0, 4), batch_rows(10, 3, 0, 4))


def test_checkpoint_round_trip_and_shape_guard(tmp_path, tables):
    cfg = tiny("single")
    model = RelationModel(cfg, tables[2])
    save_checkpoint(tmp_path / "c.json", model, cfg.to_dict(), tables[2], 3)
    loaded, cfg2, freq = load_model(tmp_path / "c.json")
    batch = tables[0].gt_batch(np.arange(4))
    assert np.array_equal(loaded.predict_scores(batch), model.predict_scores(batch))
    doc = json.loads((tmp_path / "c.json").read_text())
    doc["parameters"]["classifier.bias"] = {"shape": [5], "data": [0.0] * 5}
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(CheckpointError, match="shape"):
        load_model(tmp_path / "bad.json")
    (tmp_path / "junk.json").write_text("{}")
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        read_checkpoint(tmp_path / "junk.json")


def test_train_writes_log_and_checkpoints(tmp_path, tables):
    res = train(tiny(), tables[0], tables[2], tables[1], tmp_path)
    assert res.step == 12
    lines = [json.loads(x) for x in (tmp_path / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in lines] == [6, 12] and "A@20" in lines[0]["val"]
    assert (tmp_path / "last.json").exists() and (tmp_path / "best.json").exists()
    assert read_checkpoint(tmp_path / "last.json")["step"] == 12


def test_resume_reproduces_uninterrupted_run(tmp_path, tables):
    train_tab, val_tab, freq = tables
    full = train(tiny(), train_tab, freq, val_tab, tmp_path / "full")
    half = tiny(optim={"steps": 6, "warmup": 4, "eval_every": 6, "batch_size": 8})
    train(half, train_tab, freq, val_tab, tmp_path / "half")
    cfg = tiny()
    resumed = train(cfg, train_tab, freq, val_tab, tmp_path / "resumed", resume=tmp_path / "half" / "last.json")
    assert resumed.history[-1]["loss"] == full.history[-1]["loss"]
    a = read_checkpoint(tmp_path / "full" / "last.json")["parameters"]
    b = read_checkpoint(tmp_path / "resumed" / "last.json")["parameters"]
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_resume_refuses_other_config(tmp_path, tables):
    train(tiny(), tables[0], tables[2], None, tmp_path)
    with pytest.raises(ValueError, match="different configuration"):
        train(tiny("single"), tables[0], tables[2], None, tmp_path / "x", resume=tmp_path / "last.json")


def test_non_finite_loss_keeps_last_good(tmp_path, tables):
    train(tiny(), tables[0], tables[2], None, tmp_path)
    before = (tmp_path / "last.json").read_bytes()
    poisoned = copy.copy(tables[0])
    poisoned.visual = np.full_like(tables[0].visual, np.nan)
    longer = tiny(optim={"steps": 24, "warmup": 4, "eval_every": 6, "batch_size": 8})
    with pytest.raises(NumericError, match="step 12"):
        train(longer, poisoned, tables[2], None, tmp_path, resume=tmp_path / "last.json")
    assert (tmp_path / "last.json").read_bytes() == before
    last = json.loads((tmp_path / "train_log.jsonl").read_text().splitlines()[-1])
    assert last["event"] == "abort"


def test_training_is_byte_deterministic(tmp_path, tables):
    for name in ("a", "b"):
        train(tiny(), tables[0], tables[2], tables[1], tmp_path / name)
    assert (tmp_path / "a" / "last.json").read_bytes() == (tmp_path / "b" / "last.json").read_bytes()
    assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == (tmp_path / "b" / "train_log.jsonl").read_bytes()


def test_evaluate_is_repeatable(tables):
    model = RelationModel(tiny(), tables[2])
    a, b = evaluate(model, tables[1], tables[2]), evaluate(model, tables[1], tables[2])
    assert a.to_json() == b.to_json()
    assert not math.isnan(a.average[20])


@pytest.mark.slow
def test_toy_run_learns_and_head_dominates_train_recall():
    cfg = preset("toy")
    sig = make_signatures(cfg.synth, cfg.seed)
    train_tab = SceneTable(generate_split(cfg.synth, cfg.seed, "train", sig))
    val_tab = SceneTable(generate_split(cfg.synth, cfg.seed, "val", sig))
    freq = count_predicates(train_tab.scenes, cfg.synth.num_predicates)
    res = train(cfg, train_tab, freq, val_tab)
    assert evaluate(res.model, val_tab, freq).mean_recall[20] >= 0.90
    on_train = evaluate(res.model, train_tab, freq)
    assert on_train.recall[20] >= on_train.mean_recall[20]
