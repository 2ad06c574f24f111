import json
import shutil

import numpy as np
import pytest

import memact.dcpo as dcpo
from memact.cli import CHECKPOINT, METRICS, cmd_generate, cmd_replay, cmd_train, main
from memact.config import ExperimentSpec, load_spec
from memact.policy import PolicyParams

TINY = {
    "seed": 3,
    "world": {"n_entities": 40, "n_relations": 6},
    "train_tasks": {"count": 6},
    "eval_tasks": {"count": 4, "objective_counts": [1, 2]},
    "policy": {"n_features": 4096},
    "warm_start": {"demos": 4, "epochs": 1},
    "train": {"max_updates": 4, "batch_prompts": 2, "n_traj": 2, "n_seg": 2},
    "checkpoint_every": 1,
}


def _spec_file(tmp_path, name="run", **over):
    data = json.loads(json.dumps(TINY))
    data.update(over)
    data["output_dir"] = str(tmp_path / name)
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(data))
    return path


def _params(out):
    return PolicyParams.load(out / CHECKPOINT)[0]


def _pipeline(cfg):
    assert main(["generate", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["eval", "--config", str(cfg)]) == 0


def test_generate_is_byte_identical(tmp_path):
    a, b = cmd_generate(load_spec(_spec_file(tmp_path, "a"))), cmd_generate(load_spec(_spec_file(tmp_path, "b")))
    for pa, pb in zip(a, b):
        assert pa.read_bytes() == pb.read_bytes()


def test_generate_refuses_overwrite(tmp_path, capsys):
    cfg = _spec_file(tmp_path)
    assert main(["generate", "--config", str(cfg)]) == 0
    assert main(["generate", "--config", str(cfg)]) == 2
    assert "refusing to overwrite" in capsys.readouterr().err
    assert main(["generate", "--config", str(cfg), "--force"]) == 0


def test_train_refuses_existing_run(tmp_path):
    cfg = _spec_file(tmp_path, train={**TINY["train"], "max_updates": 1})
    assert main(["generate", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 2


def test_pipeline_writes_outputs_and_reruns_byte_identically(tmp_path):
    cfg = _spec_file(tmp_path)
    out = tmp_path / "run"
    _pipeline(cfg)
    metrics = (out / METRICS).read_text()
    lines = [ln for ln in metrics.splitlines() if not ln.startswith("#")]
    assert len(lines) == 1 + 4
    assert metrics.startswith("# config_hash=" + load_spec(cfg).config_hash())
    for name in ("training.png", "eval_memact_greedy.csv", "eval_memact_greedy.png", "warm_start.json"):
        assert (out / name).exists()
    eval_csv = (out / "eval_memact_greedy.csv").read_text()
    assert "objectives=2" in eval_csv
    first = {p.name: p.read_bytes() for p in out.glob("*.csv")}
    shutil.rmtree(out)
    _pipeline(cfg)
    assert {p.name: p.read_bytes() for p in out.glob("*.csv")} == first


def test_resume_after_crash_matches_uninterrupted(tmp_path, monkeypatch):
    full, crashed = _spec_file(tmp_path, "full"), _spec_file(tmp_path, "crash")
    # the config hash covers output_dir, so compare everything but the header line
    main(["generate", "--config", str(full)])
    main(["train", "--config", str(full)])
    main(["generate", "--config", str(crashed)])

    real = dcpo.train_iteration

    def dies_at_update_3(params, env, tasks, config, iteration, optimizer):
        if iteration == 2:
            raise KeyboardInterrupt
        return real(params, env, tasks, config, iteration, optimizer)

    monkeypatch.setattr(dcpo, "train_iteration", dies_at_update_3)
    with pytest.raises(KeyboardInterrupt):
        cmd_train(load_spec(crashed))
    monkeypatch.setattr(dcpo, "train_iteration", real)
    assert main(["train", "--config", str(crashed), "--resume"]) == 0

    def body(path):
        return [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]

    assert body(tmp_path / "crash" / METRICS) == body(tmp_path / "full" / METRICS)
    a, b = _params(tmp_path / "full"), _params(tmp_path / "crash")
    assert np.array_equal(a.weights, b.weights) and np.array_equal(a.tied, b.tied)


def test_resume_with_momentum_restores_velocity(tmp_path, monkeypatch):
    train = {**TINY["train"], "momentum": 0.5, "max_updates": 3}
    full, crashed = _spec_file(tmp_path, "full", train=train), _spec_file(tmp_path, "crash", train=train)
    for c in (full, crashed):
        main(["generate", "--config", str(c)])
    main(["train", "--config", str(full)])
    real = dcpo.train_iteration

    def dies(params, env, tasks, config, iteration, optimizer):
        if iteration == 2:
            raise KeyboardInterrupt
        return real(params, env, tasks, config, iteration, optimizer)

    monkeypatch.setattr(dcpo, "train_iteration", dies)
    with pytest.raises(KeyboardInterrupt):
        cmd_train(load_spec(crashed))
    monkeypatch.setattr(dcpo, "train_iteration", real)
    cmd_train(load_spec(crashed), resume=True)
    assert np.array_equal(_params(tmp_path / "full").weights, _params(tmp_path / "crash").weights)


def test_resume_refuses_changed_config(tmp_path):
    cfg = _spec_file(tmp_path, train={**TINY["train"], "max_updates": 1})
    main(["generate", "--config", str(cfg)])
    main(["train", "--config", str(cfg)])
    data = json.loads(cfg.read_text())
    data["train"]["learning_rate"] = 9.0
    cfg.write_text(json.dumps(data))
    assert main(["train", "--config", str(cfg), "--resume"]) == 2


@pytest.mark.parametrize("bad", [
    {"agent": "oracle"},
    {"train": {"n_traj": 1}},
    {"mystery": 1},
    {"world": {"noise_range": [5, 1]}},
    {"train_tasks": {"objective_counts": [9]}},
])
def test_bad_config_exits_nonzero(tmp_path, bad, capsys):
    cfg = _spec_file(tmp_path, **bad)
    assert main(["generate", "--config", str(cfg)]) == 2
    assert "error" in capsys.readouterr().err


def test_malformed_json_exits_nonzero(tmp_path):
    p = tmp_path / "x.json"
    p.write_text("{not json")
    assert main(["generate", "--config", str(p)]) == 2


def test_eval_without_checkpoint_exits_nonzero(tmp_path):
    cfg = _spec_file(tmp_path)
    main(["generate", "--config", str(cfg)])
    assert main(["eval", "--config", str(cfg)]) == 2


def test_checkpoint_feature_dim_mismatch(tmp_path):
    cfg = _spec_file(tmp_path, train={**TINY["train"], "max_updates": 1})
    main(["generate", "--config", str(cfg)])
    main(["train", "--config", str(cfg)])
    data = json.loads(cfg.read_text())
    data["policy"]["n_features"] = 2048
    cfg.write_text(json.dumps(data))
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "run" / CHECKPOINT)]) == 2


def test_replay_prints_fractures_and_verifies(tmp_path, capsys):
    cfg = _spec_file(tmp_path, train={**TINY["train"], "max_updates": 1})
    _pipeline(cfg)
    out = tmp_path / "run"
    log = out / "eval_memact_greedy_trajectories.jsonl"
    assert main(["replay", str(log), "--index", "1", "--checkpoint", str(out / CHECKPOINT)]) == 0
    text = capsys.readouterr().out
    assert "trajectory" in text and "replay check: ok" in text
    assert "trajectory eval:" in cmd_replay(log, traj_id="eval:eval00000")
    assert main(["replay", str(log), "--index", "99"]) == 2


def test_no_memory_and_baseline_agents(tmp_path):
    for agent in ("no_memory", "sliding_window", "sliding_window_summary"):
        cfg = _spec_file(tmp_path, agent, agent=agent, train={**TINY["train"], "max_updates": 1})
        _pipeline(cfg)
        assert (tmp_path / agent / f"eval_{agent}_greedy.csv").exists()


def test_spec_roundtrip_and_defaults():
    spec = ExperimentSpec()
    assert ExperimentSpec.from_dict(spec.to_dict()) == spec
    assert spec.train.n_traj == 4 and spec.train.n_seg == 8 and spec.train.batch_prompts == 8
    assert spec.world.context_budget == 2000 and spec.world.turn_cap == 35
