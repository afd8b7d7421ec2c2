import dataclasses
import json
import subprocess
import sys

import numpy as np
import pytest

from rsm_mappo import cli, harness, nnet
from rsm_mappo.env import RingRoadEnv, RoadConfig
from rsm_mappo.errors import ConfigError, NumericalError
from rsm_mappo.ledger import MODES


def tiny(**kw):
    base = dict(E=60, T=20, epochs=4, test_every=2, test_episodes=2, hidden=(8, 8), M=20, K=10,
                lr_actor=1e-2, lr_critic=2e-2, out="unused")
    base.update(kw)
    return harness.ExperimentConfig(**base)


def test_table2_defaults():
    cfg = harness.preset("table2")
    assert (cfg.E, cfg.T, cfg.U, cfg.K, cfg.M, cfg.tau, cfg.P, cfg.kappa) == (1500, 250, 3, 50, 200, 1, 4, 2)
    assert (cfg.lr_actor, cfg.lr_critic, cfg.gamma, cfg.beta) == (2.5e-5, 5e-5, 0.9, 0.01)
    assert cfg.env.epoch_steps == 1500 and cfg.env.n_cav == 9 and cfg.topology == "complete"


def test_desk_preset_shape():
    cfg = harness.preset("desk")
    assert (cfg.E, cfg.epochs, cfg.n_agents, cfg.env.n_human) == (500, 300, 9, 5)
    with pytest.raises(ConfigError):
        harness.preset("laptop")


def test_empty_config_file_gives_table2(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# nothing set\n\n")
    assert harness.load_config(p) == harness.ExperimentConfig()


def test_config_parsing_and_overrides(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("preset = desk\nmode = average  # baseline\nseeds = 1, 2\n"
                 "env.ring_length = 300\nidm.v0 = 12\nnormalize_advantages = no\n")
    cfg = harness.load_config(p)
    assert cfg.E == 500 and cfg.mode == "average" and cfg.seeds == (1, 2)
    assert cfg.env.ring_length == 300.0 and cfg.env.idm.v0 == 12.0 and not cfg.normalize_advantages
    for bad in ("nokey", "bogus = 1", "P = four", "env.lanes = 2", "shared_init = maybe"):
        p.write_text(bad + "\n")
        with pytest.raises(ConfigError):
            harness.load_config(p)


def test_config_dump_round_trip(tmp_path):
    cfg = harness.apply_overrides(harness.preset("desk"), {"env.jitter": "0.05", "seeds": "3,4"})
    p = tmp_path / "dump.txt"
    p.write_text(harness.dump_config(cfg))
    assert harness.load_config(p) == cfg


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny(mode="federated")
    with pytest.raises(ConfigError):
        tiny(gamma=1.0)
    with pytest.raises(ConfigError):
        tiny(seeds=())
    with pytest.raises(ConfigError):
        harness.Trainer(tiny(P=9), 0)


def test_rng_streams_are_independent_of_agent_count():
    a = harness.stream(3, harness.ACT, 2).standard_normal(4)
    b = harness.stream(3, harness.ACT, 2).standard_normal(4)
    c = harness.stream(3, harness.ACT, 3).standard_normal(4)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_mode_none_has_empty_ledger():
    res = harness.run_seed(tiny(mode="none"), 0)
    s = res.summary
    assert s["rho_total"] == s["rho_ef"] == 0 and s["psi_upsilon_units"] == 0
    assert s["final_ledger"]["values_transferred"] == 0


@pytest.mark.parametrize("mode", MODES)
def test_every_mode_runs_and_keeps_ledger_identity(mode):
    res = harness.run_seed(tiny(mode=mode), 1)
    lg = res.summary["final_ledger"]
    assert len(res.summary["test_rewards"]) == 2
    for r in res.summary["test_rewards"]:
        assert 0.0 <= r <= 60
    if mode in ("rsm", "rsm-best", "average"):
        assert lg["values_transferred"] == lg["rho_total"] * lg["upsilon"]
        assert lg["rho_total"] == 18 * lg["rounds"]
    if mode == "average":
        assert lg["rho_ef"] == lg["rho_total"]
    if mode == "central":
        assert lg["values_transferred"] == 18 * lg["upsilon"] * lg["rounds"]


def test_rounds_only_at_batch_boundaries(monkeypatch):
    cfg = tiny(mode="central", tau=2)
    tr = harness.Trainer(cfg, 0)
    seen = []
    orig = tr.communicate

    def spy(epoch, buffers):
        seen.append([a.k for a in tr.agents])
        return orig(epoch, buffers)

    monkeypatch.setattr(tr, "communicate", spy)
    for ep in range(3):
        tr.run_epoch(ep)
    assert seen and all(len(set(ks)) == 1 and ks[0] % (cfg.tau * cfg.U) == 0 for ks in seen)
    n_batches = tr.agents[0].k // cfg.U
    assert len(seen) == n_batches // 2


def test_evaluate_zero_policy_matches_env_oracle():
    road = RoadConfig(epoch_steps=150)
    cfg = nnet.policy_config(6)
    zero = nnet.zeros(cfg)
    got = harness.evaluate([zero] * 9, cfg, road, episodes=2, seed=4)
    totals = []
    for ep in range(2):
        env = RingRoadEnv(road)
        env.reset(harness.stream_seed(4, harness.EVAL, ep))
        total, done = 0.0, False
        while not done:
            _, r, done, _ = env.step(np.zeros(9))
            total += r
        totals.append(total)
    assert got == pytest.approx(np.mean(totals), rel=1e-12)
    assert got == harness.evaluate([zero] * 9, cfg, road, episodes=2, seed=4)
    assert got <= 150
    with pytest.raises(ValueError):
        harness.evaluate([zero] * 9, cfg, road, episodes=0)


def test_epochs_zero_writes_header_only(tmp_path):
    cfg = tiny(epochs=0)
    harness.run_experiment(cfg, tmp_path)
    assert (tmp_path / "metrics.csv").read_text() == ",".join(harness.CSV_COLUMNS) + "\n"


def test_outputs_and_csv_round_trip(tmp_path):
    cfg = tiny(mode="rsm", seeds=(0, 1), event_log=True, dump_trajectories=True)
    results = harness.run_experiment(cfg, tmp_path)
    rows = harness.read_csv(tmp_path / "metrics.csv")
    assert len(rows) == 4 and list(rows[0]) == list(harness.CSV_COLUMNS)
    expect = [r for res in results for r in harness.csv_rows(res, cfg)]
    assert rows == [{k: str(v) for k, v in r.items()} for r in expect]
    for r in rows:
        assert float(r["psi_upsilon"]) == float(r["rho_total"])
        assert r["wall_s"] == ""
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["schema_version"] == harness.SCHEMA_VERSION and len(summary["runs"]) == 2
    for key in ("mode", "N", "P", "kappa", "tau", "convergence_epoch", "rho_total", "rho_ef",
                "rho_r", "psi_upsilon_units", "final_reward"):
        assert key in summary["runs"][0]
    events = (tmp_path / "events_seed0.jsonl").read_text().splitlines()
    assert events and {"advantage_estimate", "alpha_bound", "alpha_used", "accepted",
                       "provenance"} <= set(json.loads(events[0]))
    traj = (tmp_path / "trajectories_seed1.csv").read_text().splitlines()
    assert traj[0] == "step,vehicle_id,kind,position,speed,action,reward" and len(traj) > 14
    epochs = (tmp_path / "epochs_seed0.jsonl").read_text().splitlines()
    assert len(epochs) == 4 and "ledger" in json.loads(epochs[0])


def test_reruns_are_byte_identical(tmp_path):
    cfg = tiny(mode="rsm", epochs=4)
    harness.run_experiment(cfg, tmp_path / "a")
    harness.run_experiment(cfg, tmp_path / "b")
    for name in ("metrics.csv", "summary.json", "epochs_seed0.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_wall_time_opt_in():
    res = harness.run_seed(tiny(epochs=2, record_wall_time=True), 0)
    rows = harness.csv_rows(res, tiny())
    assert rows[0]["wall_s"] != ""


# --- command line -------------------------------------------------------------

def test_cli_success(tmp_path, capsys):
    cfgfile = tmp_path / "c.txt"
    cfgfile.write_text(harness.dump_config(tiny()))
    rc = cli.main(["--config", str(cfgfile), "--mode", "rsm", "--seed-list", "0,1", "--epochs", "2",
                   "--segments", "3", "--replicas", "1", "--tau", "2", "--out", str(tmp_path / "o"),
                   "--dump-trajectories"])
    assert rc == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    run = summary["runs"][0]
    assert (run["P"], run["kappa"], run["tau"]) == (3, 1, 2) and len(summary["runs"]) == 2
    assert (tmp_path / "o" / "trajectories_seed0.csv").exists()


def test_cli_config_error_exit_code(tmp_path, capsys):
    assert cli.main(["--preset", "desk", "--segments", "20", "--epochs", "1",
                     "--out", str(tmp_path)]) == 2
    missing = tmp_path / "nope.txt"
    assert cli.main(["--config", str(missing), "--out", str(tmp_path)]) != 0
    assert cli.main(["--preset", "desk", "--set", "bogus=1"]) == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["--mode", "federated"])
    assert exc.value.code == 2


def test_cli_numerical_abort_exit_code(tmp_path, monkeypatch):
    def boom(cfg, out_dir=None, write=True):
        raise NumericalError("non-finite loss")
    monkeypatch.setattr(harness, "run_experiment", boom)
    assert cli.main(["--preset", "desk", "--out", str(tmp_path)]) == 3


def test_module_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "rsm_mappo", "--help"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and "--seed-list" in out.stdout
