import csv
import json

import numpy as np
import pytest

from arsp import cli
from arsp.agent import ARSPAgent
from arsp.envs import EnvConfig
from arsp.harness import (
    ExperimentConfig,
    StepRecord,
    _evaluate,
    confidence_interval,
    default_config,
    dump_trajectories,
    emit_plot_data,
    measure_cooperation,
    play_greedy,
    read_metrics,
    run_adaptation_study,
    run_experiment,
    run_training,
)
from arsp.network import init_params, save_params


def tiny(game="ISH", episodes=30, variant="arsp", **agent):
    agent.setdefault("warmup", 40)
    agent.setdefault("hidden", 16)
    agent.setdefault("n_quantiles", 8)
    cfg = default_config(game, variant, **agent)
    cfg.total_episodes = episodes
    cfg.eval_period = 10
    cfg.eval_episodes = 3
    return cfg


def step(a0, a1, mutual=None):
    if mutual is None:
        mutual = a0 == 0 and a1 == 0
    return StepRecord([np.zeros(5), np.zeros(5)], (a0, a1), (0.0, 0.0), mutual)


# config

def test_protocol_defaults():
    cfg = ExperimentConfig()
    assert (cfg.eval_period, cfg.eval_episodes, cfg.seeds) == (50, 30, [0, 1, 2, 3, 4])
    assert default_config("ISH").total_episodes == 5000
    grid = default_config("Escalation")
    assert grid.total_episodes == 20_000 and grid.agents[0].learn_every == 4


def test_config_json_round_trip_and_hash():
    cfg = default_config("MonsterHunt", "no-tv")
    back = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()
    other = default_config("MonsterHunt", "no-tv")
    other.seeds = [9]
    other.output_dir = "elsewhere"
    assert other.config_hash() == cfg.config_hash()
    other.agents[0].lr = 1e-3
    assert other.config_hash() != cfg.config_hash()


def test_config_rejects_unknown_schema_version():
    d = ExperimentConfig().to_dict()
    d["schema_version"] = 99
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(d)


def test_config_needs_two_agents():
    with pytest.raises(ValueError):
        ExperimentConfig(agents=[])


# cooperation statistics

def test_all_mutual_cooperation_is_one():
    assert measure_cooperation([[step(0, 0)] * 10], "ISH") == 1.0


def test_alternating_cooperation_is_half():
    assert measure_cooperation([[step(0, 0), step(1, 1)] * 5], "IPD") == 0.5


def test_escalation_counts_mutual_steps():
    streak = [True] * 7 + [False] + [True] * 3 + [False] * 19
    ep = [step(4, 4, m) for m in streak]
    assert measure_cooperation([ep], "Escalation") == 10.0
    assert measure_cooperation([ep, [step(4, 4, False)] * 30], "MonsterHunt") == 5.0


# training

def test_zero_episodes_only_initial_evaluation(tmp_path):
    res = run_training(tiny(episodes=0), 0, tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert len(rows) == 1 and rows[0]["episode"] == 0 and rows[0]["env_steps"] == 0
    assert res.error is None


def test_metrics_rows_and_files(tmp_path):
    res = run_training(tiny(episodes=30), 2, tmp_path)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [r["episode"] for r in rows] == [0, 10, 20, 30]
    assert [r["env_steps"] for r in rows] == [0, 100, 200, 300]
    assert all(r["global_return"] == pytest.approx(r["return_0"] + r["return_1"]) for r in rows)
    assert (tmp_path / "agent0.npz").exists() and (tmp_path / "agent1.npz").exists()
    assert ExperimentConfig.load(tmp_path / "config.json") == tiny(episodes=30)
    assert len(res.rows) == 4


def test_rerun_gives_bit_identical_metrics(tmp_path):
    for d in ("a", "b"):
        run_training(tiny("MonsterHunt", episodes=6, warmup=30), 1, tmp_path / d)
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_evaluation_does_not_touch_learners():
    cfg = tiny()
    agents = [ARSPAgent(c, 5, 2, (2,), seed=i) for i, c in enumerate(cfg.agents)]
    obs = np.zeros(5)
    for ag in agents:
        for k in range(60):
            ag.act(obs)
            ag.observe(obs, k % 2, 1.0, obs, [0], False)

    def snapshot(ag):
        return (ag.params.flat.copy(), ag.target.flat.copy(), ag.opt.m.copy(), ag.opt.step,
                ag.buffer.obs.copy(), ag.buffer.size, ag.t, ag.rng.bit_generator.state,
                ag.buffer.rng.bit_generator.state)

    before = [snapshot(a) for a in agents]
    _evaluate(agents, cfg, 0, 10)
    for b, ag in zip(before, agents):
        after = snapshot(ag)
        for x, y in zip(b, after):
            if isinstance(x, np.ndarray):
                np.testing.assert_array_equal(x, y)
            else:
                assert x == y


def test_checkpoints_written_on_period(tmp_path):
    cfg = tiny(episodes=20)
    cfg.checkpoint_period = 10
    run_training(cfg, 0, tmp_path)
    assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == [
        "ep10_agent0.npz", "ep10_agent1.npz", "ep20_agent0.npz", "ep20_agent1.npz"]


def test_non_finite_loss_aborts_seed_with_diagnostic(tmp_path, monkeypatch):
    calls = {"n": 0}
    original = ARSPAgent.observe

    def flaky(self, *args):
        calls["n"] += 1
        if calls["n"] > 150:
            raise FloatingPointError("non-finite loss at learner step 7")
        return original(self, *args)

    monkeypatch.setattr(ARSPAgent, "observe", flaky)
    res = run_training(tiny(episodes=30), 0, tmp_path)
    assert "non-finite" in res.error
    diag = json.loads((tmp_path / "diagnostic.json").read_text())
    assert diag["seed"] == 0 and diag["env_steps"] == 75
    assert read_metrics(tmp_path / "metrics.csv")[-1]["episode"] == 0


def test_experiment_reuses_completed_runs(tmp_path):
    cfg = tiny(episodes=10)
    cfg.output_dir = str(tmp_path)
    cfg.seeds = [0]
    first = run_experiment(cfg)
    stamp = (first[0].run_dir / "metrics.csv").stat().st_mtime_ns
    again = run_experiment(cfg, reuse=True)
    assert (again[0].run_dir / "metrics.csv").stat().st_mtime_ns == stamp
    assert repr(again[0].rows) == repr(first[0].rows)  # loss columns are nan before learning


# trajectories

def test_trajectory_dump_columns(tmp_path):
    p = init_params(5, 2, 1, 2, 8, seed=0, hidden=8)
    trajs = play_greedy([p, p], EnvConfig("ISH", horizon=3), 2)
    dump_trajectories(tmp_path / "t.csv", trajs)
    with open(tmp_path / "t.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["episode", "step", "agent"] + [f"obs_{k}" for k in range(5)] + ["action", "reward"]
    assert len(rows) == 1 + 2 * 3 * 2
    assert rows[1][3:8] == ["0.0", "0.0", "0.0", "0.0", "1.0"]


# plot data

def write_run(path, values):
    path.mkdir(parents=True)
    with open(path / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "episode", "env_steps", "return_0", "return_1", "global_return",
                    "cooperation", "quantile_loss", "aux_loss", "c_t1", "c_t2"])
        for k, v in enumerate(values):
            w.writerow([0, 50 * k, 500 * k, v / 2, v / 2, v, 0.5, 0, 0, 0, 0])


def test_confidence_interval_oracle():
    mean, half = confidence_interval([1, 2, 3, 4, 5])
    assert mean == 3.0
    assert half == pytest.approx(1.963, abs=1e-3)


def test_identical_seeds_give_zero_width(tmp_path):
    for s in range(5):
        write_run(tmp_path / f"seed{s}", [1.0, 2.0])
    rows = emit_plot_data(str(tmp_path / "seed*"), tmp_path / "plot.csv")
    assert rows[1]["global_return_ci_low"] == rows[1]["global_return_ci_high"] == 2.0


def test_known_constants_aggregate(tmp_path):
    for s in range(5):
        write_run(tmp_path / f"seed{s}", [float(s + 1)])
    row = emit_plot_data(sorted(tmp_path.glob("seed*")), tmp_path / "plot.csv")[0]
    assert row["global_return_mean"] == 3.0
    assert row["global_return_ci_high"] - 3.0 == pytest.approx(1.963, abs=1e-3)
    assert row["n_seeds"] == 5


def test_single_seed_warns_and_omits_interval(tmp_path):
    write_run(tmp_path / "seed0", [4.0])
    with pytest.warns(UserWarning, match="fewer than 2 seeds"):
        row = emit_plot_data([tmp_path / "seed0"], tmp_path / "plot.csv")[0]
    assert row["global_return_mean"] == 4.0 and row["global_return_ci_low"] == ""


# adaptation study

def cooperator_run(path):
    path.mkdir(parents=True)
    p = init_params(5, 2, 1, 2, 8, seed=0, hidden=8)
    p.arrays["dec_w"][...] = 0.0
    p.arrays["dec_b"][...] = np.r_[np.ones(8), np.zeros(8)]
    save_params(path / "agent0.npz", p)
    save_params(path / "agent1.npz", p)
    return path


def test_adaptation_study_table(tmp_path):
    runs = [cooperator_run(tmp_path / "r0")]
    rows = run_adaptation_study(runs, runs, "ISH", tmp_path / "t4.csv", episodes=5)
    by_key = {(r["opponent_type"], r["aom_enabled"]): r for r in rows}
    assert by_key[("CC", False)]["mean_return"] == 20.0
    assert by_key[("CD", False)]["mean_return"] == -100.0
    with open(tmp_path / "t4.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["env", "opponent_type", "aom_enabled", "mean_return", "std", "episodes"]


def test_adaptation_study_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_adaptation_study([tmp_path / "nope"], [tmp_path / "nope"], "ISH", episodes=1)


def test_grid_adaptation_needs_selfish_defector(tmp_path):
    with pytest.raises(ValueError):
        run_adaptation_study([tmp_path], [tmp_path], "Escalation", episodes=1)


# command line

def test_parse_seeds():
    assert cli.parse_seeds("0..4") == [0, 1, 2, 3, 4]
    assert cli.parse_seeds("1,3") == [1, 3]
    assert cli.parse_seeds("7") == [7]


def test_cli_theory(capsys):
    code = cli.main(["theory", "--payoff", "3,2.5,1,2", "--trials", "2000"])
    out = capsys.readouterr().out.splitlines()
    assert code == 0
    assert out[0] == "a,b,c,d,epsilon,closed_form,flow_basin,mc_estimate,stderr,trials,unconverged"
    assert out[1].startswith("3.0,2.5,1.0,2.0,0.5,0.1111111111111111,")


def test_cli_train_eval_plots(tmp_path, capsys):
    cfg = tiny(episodes=10)
    cfg.output_dir = str(tmp_path / "runs")
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert cli.main(["train", "--config", str(tmp_path / "c.json"), "--seeds", "0..1"]) == 0
    run = tmp_path / "runs" / "ISH-arsp" / "seed1"
    assert (run / "metrics.csv").exists()
    assert cli.main(["eval", "--checkpoint", str(run), "--opponent", "AlwaysDefect",
                     "--adapt", "on", "--episodes", "2"]) == 0
    capsys.readouterr()
    assert cli.main(["plots", "--runs", str(tmp_path / "runs" / "ISH-arsp" / "seed*"),
                     "--out", str(tmp_path / "p.csv")]) == 0
    assert "wrote 2 rows" in capsys.readouterr().out


def test_cli_rejects_unknown_command():
    with pytest.raises(SystemExit):
        cli.main(["fly"])


def test_cli_ablate_runs_every_variant(tmp_path, capsys):
    assert cli.main(["ablate", "--suite", "ish", "--seeds", "0", "--episodes", "0",
                     "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["ISH-arsp", "ISH-no-aom", "ISH-qrdqn"]
    assert capsys.readouterr().out.count("final global returns") == 3


def test_cli_adapt_writes_table(tmp_path):
    run = cooperator_run(tmp_path / "r0")
    out = tmp_path / "table.csv"
    assert cli.main(["adapt", "--game", "ISH", "--arsp", str(run), "--no-aom", str(run),
                     "--episodes", "3", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["opponent_type"], r["aom_enabled"]) for r in rows] == [
        ("CC", "False"), ("CD", "False"), ("CC", "True"), ("CD", "True")]
