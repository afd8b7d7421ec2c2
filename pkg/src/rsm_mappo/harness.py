"""Experiment orchestration: training loop, evaluation and artifacts."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gossip, nnet, ppo
from .env import OBS_DIM, IdmParams, RingRoadEnv, RoadConfig
from .errors import ConfigError
from .ledger import MODES, CommLedger, convergence_epoch, ledger_metrics
from .mixture import MixBuffer

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = ("mode", "seed", "epoch", "test_avg_reward", "rho_total", "rho_ef",
               "rho_r", "psi_upsilon", "wall_s")

# spawn-key purposes for independent RNG streams
INIT, ACT, GOSSIP, MIX, ENV, EVAL = range(6)


@dataclass
class ExperimentConfig:
    E: int = 1500
    T: int = 250
    U: int = 3
    tau: int = 1
    P: int = 4
    kappa: int = 2
    M: int = 200
    K: int = 50
    lr_actor: float = 2.5e-5
    lr_critic: float = 5e-5
    gamma: float = 0.9
    beta: float = 0.01
    clip_eps: float = 0.2
    normalize_advantages: bool = False
    mode: str = "rsm"
    epochs: int = 300
    test_every: int = 10
    test_episodes: int = 5
    seeds: tuple = (0,)
    env: RoadConfig = field(default_factory=RoadConfig)
    topology: str = "complete"
    topology_radius: float = 0.5
    topology_hops: int = 2
    hidden: tuple = (64, 64)
    alpha_fraction: float = 0.9
    mix_sequential: bool = True
    buffer_batches: int = 4
    shared_init: bool = True
    out: str = "runs/default"
    record_wall_time: bool = False
    event_log: bool = False
    dump_trajectories: bool = False

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.env.epoch_steps != self.E:
            self.env = dataclasses.replace(self.env, epoch_steps=self.E)
        self.validate()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("E", "T", "tau", "P", "M", "K", "test_every", "test_episodes",
                     "buffer_batches"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        for name in ("U", "kappa", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.lr_actor < 0 or self.lr_critic < 0:
            raise ConfigError("learning rates must be non-negative")
        if not 0.0 < self.alpha_fraction <= 1.0:
            raise ConfigError("alpha_fraction must lie in (0, 1]")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.env.n_cav < 2 and self.mode != "none":
            raise ConfigError("communication modes need at least two CAVs")

    @property
    def n_agents(self) -> int:
        return self.env.n_cav

    def build_topology(self, seed=0) -> gossip.Topology:
        topo = gossip.Topology.build(self.topology, self.n_agents, self.topology_radius,
                                     self.topology_hops, seed)
        if self.mode in ("rsm", "rsm-best", "average"):
            topo.require_degree(self.P)
        return topo


def preset(name: str) -> ExperimentConfig:
    """``table2`` mirrors the reference hyperparameters; ``desk`` is sized for a laptop."""
    if name == "table2":
        return ExperimentConfig()
    if name == "desk":
        return ExperimentConfig(E=500, epochs=300, lr_actor=1e-2, lr_critic=2e-2,
                                normalize_advantages=True, out="runs/desk")
    raise ConfigError(f"unknown preset {name!r}")


# --- key=value config files --------------------------------------------------

def _coerce(value: str, kind):
    kind = kind if isinstance(kind, type) else {"int": int, "float": float, "bool": bool,
                                               "str": str, "tuple": tuple}.get(str(kind), str)
    if kind is bool:
        low = value.strip().lower()
        if low not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ConfigError(f"not a boolean: {value!r}")
        return low in ("1", "true", "yes", "on")
    if kind is tuple:
        return tuple(int(v) for v in value.replace(",", " ").split())
    try:
        return kind(value.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {value!r} as {kind.__name__}") from exc


def _field_types(cls) -> dict:
    hints = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}
    return {f.name: hints.get(str(f.type).split("[")[0], str) for f in dataclasses.fields(cls)}


def apply_overrides(config: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Apply string-valued overrides; ``env.`` and ``idm.`` prefixes reach nested configs."""
    top, env_kw, idm_kw = {}, {}, {}
    top_types, env_types, idm_types = (_field_types(ExperimentConfig), _field_types(RoadConfig),
                                       _field_types(IdmParams))
    for key, raw in overrides.items():
        if key.startswith("env."):
            name = key[4:]
            if name not in env_types or name == "idm":
                raise ConfigError(f"unknown road setting {name!r}")
            env_kw[name] = _coerce(raw, env_types[name])
        elif key.startswith("idm."):
            name = key[4:]
            if name not in idm_types:
                raise ConfigError(f"unknown IDM setting {name!r}")
            idm_kw[name] = _coerce(raw, idm_types[name])
        elif key in ("seeds", "seed_list"):
            top["seeds"] = _coerce(raw, tuple)
        elif key in top_types and key != "env":
            top[key] = _coerce(raw, top_types[key])
        else:
            raise ConfigError(f"unknown setting {key!r}")
    env = config.env
    if idm_kw:
        env = dataclasses.replace(env, idm=dataclasses.replace(env.idm, **idm_kw))
    if env_kw:
        env = dataclasses.replace(env, **env_kw)
    if "E" in top:
        env = dataclasses.replace(env, epoch_steps=top["E"])
    elif "epoch_steps" in env_kw:
        top["E"] = env_kw["epoch_steps"]
    return dataclasses.replace(config, env=env, **top)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    text = Path(path).read_text()
    overrides = parse_config_text(text)
    if base is None:
        base = preset(overrides.pop("preset", "table2"))
    else:
        overrides.pop("preset", None)
    return apply_overrides(base, overrides)


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if f.name == "env":
            for g in dataclasses.fields(v):
                if g.name == "idm":
                    for h in dataclasses.fields(v.idm):
                        lines.append(f"idm.{h.name} = {getattr(v.idm, h.name)!r}")
                else:
                    lines.append(f"env.{g.name} = {getattr(v, g.name)!r}")
        elif isinstance(v, tuple):
            lines.append(f"{f.name} = {','.join(str(x) for x in v)}")
        elif isinstance(v, str):
            lines.append(f"{f.name} = {v}")
        else:
            lines.append(f"{f.name} = {v!r}")
    return "\n".join(lines) + "\n"


# --- RNG streams -------------------------------------------------------------

def stream(seed: int, purpose: int, *index) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(purpose, *index)))


def stream_seed(seed: int, purpose: int, *index) -> np.random.SeedSequence:
    return np.random.SeedSequence(seed, spawn_key=(purpose, *index))


# --- evaluation ----------------------------------------------------------------

def evaluate(policies, policy_cfg, road: RoadConfig, episodes: int = 1, seed: int = 0,
             trajectory: list | None = None) -> float:
    """Mean accumulated reward of deterministic (mean-action) episodes."""
    if episodes < 1:
        raise ValueError("need at least one evaluation episode")
    env = RingRoadEnv(road)
    stack = nnet.stack_policies(policies, policy_cfg)
    totals = []
    for ep in range(episodes):
        obs = env.reset(stream_seed(seed, EVAL, ep))
        env.trajectory = trajectory if (trajectory is not None and ep == 0) else None
        total, done = 0.0, False
        while not done:
            mu = nnet.stacked_policy_mean(stack, obs)
            obs, r, done, _ = env.step(mu[:, 0])
            total += r
        totals.append(total)
    env.trajectory = None
    return float(np.mean(totals))


# --- training ------------------------------------------------------------------

@dataclass
class RunResult:
    seed: int
    records: list
    summary: dict
    events: list
    trajectory: list | None = None


def _mix_buffer(batches, omega, value_cfg, gamma) -> MixBuffer:
    batch = ppo.MiniBatch.concat(batches) if len(batches) > 1 else batches[0]
    deltas = ppo.compute_deltas(batch, omega, value_cfg, gamma)
    return MixBuffer(batch.states, batch.actions, batch.logp_old, deltas)


def _trim(batches, cap):
    while len(batches) > 1 and sum(len(b) for b in batches) - len(batches[0]) >= cap:
        batches.pop(0)
    total = sum(len(b) for b in batches)
    if total > cap:
        b = batches[0]
        k = total - cap
        batches[0] = ppo.MiniBatch(b.states[k:], b.actions[k:], b.rewards[k:],
                                   b.next_states[k:], b.logp_old[k:], b.dones[k:])


class Trainer:
    """One seed of decentralized training."""

    def __init__(self, config: ExperimentConfig, seed: int):
        self.cfg = config
        self.seed = seed
        self.road = config.env
        self.policy_cfg = nnet.policy_config(OBS_DIM, 1, config.hidden)
        self.value_cfg = nnet.value_config(OBS_DIM, config.hidden)
        self.policy = nnet.GaussianPolicy(self.policy_cfg)
        self.upsilon = self.policy_cfg.n_params
        N = config.n_agents
        self.topology = config.build_topology(stream_seed(seed, GOSSIP, 10**6)) \
            if config.mode != "none" else None
        self.agents = []
        for i in range(N):
            key = 0 if config.shared_init else i
            theta = nnet.init_network(self.policy_cfg, stream_seed(seed, INIT, key, 0))
            omega = nnet.init_network(self.value_cfg, stream_seed(seed, INIT, key, 1))
            self.agents.append(ppo.AgentState(theta, theta.copy(), omega))
        self.act_rngs = [stream(seed, ACT, i) for i in range(N)]
        self.gossip_rngs = [stream(seed, GOSSIP, i) for i in range(N)]
        self.mix_rngs = [stream(seed, MIX, i) for i in range(N)]
        self.hp = ppo.PPOParams(config.U, config.lr_actor, config.lr_critic, config.gamma,
                                config.clip_eps, config.beta, config.normalize_advantages)
        self.settings = gossip.MixSettings(
            P=config.P, kappa=config.kappa, M=config.M, K=config.K, gamma=config.gamma,
            alpha_fraction=config.alpha_fraction,
            mix_mode="best-only" if config.mode == "rsm-best" else "all-positive",
            sequential=config.mix_sequential)
        self.ledger = CommLedger(self.upsilon)
        self.env = RingRoadEnv(self.road)
        self.events: list = []
        self.round_index = 0

    # -- phases --
    def collect(self, obs):
        """Roll the behaviour policies for up to T steps."""
        T, N = self.cfg.T, len(self.agents)
        stack = nnet.stack_policies([a.theta_old for a in self.agents], self.policy_cfg)
        log_std = stack[2]               # (N, 1)
        sigma = np.exp(log_std)
        noise = np.stack([rng.standard_normal(T) for rng in self.act_rngs], axis=1)[:, :, None]
        S = np.empty((T, N, OBS_DIM))
        S2 = np.empty((T, N, OBS_DIM))
        A = np.empty((T, N, 1))
        R = np.empty(T)
        collided = done = False
        t = 0
        while t < T and not done:
            mu = nnet.stacked_policy_mean(stack, obs)
            a = mu + sigma * noise[t]
            S[t] = obs
            A[t] = a
            obs, R[t], done, info = self.env.step(a[:, 0])
            S2[t] = obs
            collided = info["collision"]
            t += 1
        S, S2, A, R = S[:t], S2[:t], A[:t], R[:t]
        dones = np.zeros(t, dtype=bool)
        dones[-1] = collided
        batches = []
        for i in range(N):
            lp = nnet.log_prob(self.agents[i].theta_old, self.policy_cfg, S[:, i], A[:, i])
            batches.append(ppo.MiniBatch(S[:, i], A[:, i], R, S2[:, i], lp, dones))
        return obs, batches, float(R.sum()), done, collided

    def communicate(self, epoch, buffers):
        mode = self.cfg.mode
        reports = None
        if mode in ("rsm", "rsm-best"):
            mix_buffers = [_mix_buffer(buffers[i], a.omega, self.value_cfg, self.cfg.gamma)
                           for i, a in enumerate(self.agents)]
            reports = gossip.round_rsm(self.agents, mix_buffers, self.topology, self.policy,
                                       self.settings, self.gossip_rngs, self.mix_rngs,
                                       self.ledger)
        elif mode == "average":
            gossip.round_average_mixture(self.agents, self.topology, self.settings,
                                         self.gossip_rngs, self.ledger)
        elif mode == "drl-ave":
            gossip.round_average(self.agents, self.topology, self.ledger)
        elif mode == "central":
            gossip.round_central(self.agents, self.ledger)
        if reports is not None and self.cfg.event_log:
            for i, agent_reports in enumerate(reports):
                for rep in agent_reports:
                    self.events.append({"epoch": epoch, "round": self.round_index,
                                        "agent": i, **rep.to_dict()})
        self.round_index += 1
        return reports

    def run_epoch(self, epoch):
        cfg = self.cfg
        obs = self.env.reset(stream_seed(self.seed, ENV, epoch))
        buffers = [[] for _ in self.agents]
        total, done, collided, accepted = 0.0, False, False, 0
        gate = cfg.tau * cfg.U
        while not done:
            obs, batches, r, done, collided = self.collect(obs)
            total += r
            for i, agent in enumerate(self.agents):
                self.agents[i] = ppo.local_update(agent, batches[i], self.policy_cfg,
                                                  self.value_cfg, self.hp)
                buffers[i].append(batches[i])
                _trim(buffers[i], cfg.buffer_batches * cfg.T)
            if cfg.mode != "none" and gate > 0 and self.agents[0].k % gate == 0:
                reports = self.communicate(epoch, buffers)
                if reports:
                    accepted += sum(r.accepted for rs in reports for r in rs)
        return {"train_reward": total, "steps": self.env.state.steps,
                "collided": collided, "accepted": accepted}

    def evaluate(self, trajectory=None) -> float:
        return evaluate([a.theta for a in self.agents], self.policy_cfg, self.road,
                        self.cfg.test_episodes, self.seed, trajectory)


def run_seed(config: ExperimentConfig, seed: int) -> RunResult:
    tr = Trainer(config, seed)
    records, tests, snaps = [], [], []
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        rec = {"epoch": epoch + 1, **tr.run_epoch(epoch)}
        rec["train_reward_per_agent"] = [rec["train_reward"]] * config.n_agents
        if (epoch + 1) % config.test_every == 0:
            rec["test_avg_reward"] = tr.evaluate()
            snap = tr.ledger.snapshot()
            tests.append(rec["test_avg_reward"])
            snaps.append((epoch + 1, snap))
        rec["ledger"] = tr.ledger.snapshot()
        if config.record_wall_time:
            rec["wall_s"] = time.perf_counter() - t0
        records.append(rec)
    trajectory = [] if config.dump_trajectories else None
    if trajectory is not None:
        tr.evaluate(trajectory)
    summary = summarize(config, seed, tests, snaps, tr.ledger, tr.upsilon)
    return RunResult(seed, records, summary, tr.events, trajectory)


def summarize(config, seed, tests, snaps, ledger, upsilon) -> dict:
    if len(tests) >= 5:
        idx, converged = convergence_epoch(tests)
    else:
        idx, converged = max(len(tests) - 1, 0), False
    conv_epoch, snap = snaps[idx] if snaps else (0, ledger.snapshot())
    m = ledger_metrics(snap, upsilon)
    tail = tests[-max(1, math.ceil(0.2 * len(tests))):] if tests else []
    return {
        "schema_version": SCHEMA_VERSION,
        "mode": config.mode,
        "seed": seed,
        "N": config.n_agents,
        "P": config.P,
        "kappa": config.kappa,
        "tau": config.tau,
        "upsilon": upsilon,
        "convergence_epoch": conv_epoch,
        "converged": bool(converged),
        "rho_total": m.rho_total,
        "rho_ef": m.rho_ef,
        "rho_r": m.rho_r,
        "psi_upsilon_units": m.psi_upsilon_units,
        "final_reward": tests[-1] if tests else None,
        "plateau_reward": float(np.mean(tail)) if tail else None,
        "test_epochs": [e for e, _ in snaps],
        "test_rewards": tests,
        "final_ledger": ledger.snapshot(),
    }


# --- outputs ---------------------------------------------------------------------

def _num(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 2**53 else repr(x)


def csv_rows(result: RunResult, config: ExperimentConfig, upsilon: int | None = None):
    rows = []
    for rec in result.records:
        if "test_avg_reward" not in rec:
            continue
        m = ledger_metrics(rec["ledger"])
        rows.append({
            "mode": config.mode, "seed": result.seed, "epoch": rec["epoch"],
            "test_avg_reward": _num(rec["test_avg_reward"]),
            "rho_total": m.rho_total, "rho_ef": m.rho_ef, "rho_r": _num(m.rho_r),
            "psi_upsilon": _num(m.psi_upsilon_units),
            "wall_s": _num(rec["wall_s"]) if "wall_s" in rec else "",
        })
    return rows


def write_csv(path, rows) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_outputs(results, config: ExperimentConfig, out_dir=None) -> Path:
    out = Path(out_dir or config.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [row for res in results for row in csv_rows(res, config)]
    write_csv(out / "metrics.csv", rows)
    (out / "config.txt").write_text(dump_config(config))
    for res in results:
        (out / f"summary_seed{res.seed}.json").write_text(
            json.dumps(res.summary, indent=2, sort_keys=True) + "\n")
        with open(out / f"epochs_seed{res.seed}.jsonl", "w") as fh:
            for rec in res.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if config.event_log:
            with open(out / f"events_seed{res.seed}.jsonl", "w") as fh:
                for ev in res.events:
                    fh.write(json.dumps(ev, sort_keys=True) + "\n")
        if res.trajectory is not None:
            with open(out / f"trajectories_seed{res.seed}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("step", "vehicle_id", "kind", "position", "speed", "action", "reward"))
                w.writerows(res.trajectory)
    summary = {"schema_version": SCHEMA_VERSION, "mode": config.mode,
               "runs": [res.summary for res in results]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return out


def run_experiment(config: ExperimentConfig, out_dir=None, write: bool = True):
    results = []
    for seed in config.seeds:
        log.info("mode=%s seed=%d epochs=%d", config.mode, seed, config.epochs)
        results.append(run_seed(config, seed))
    if write:
        write_outputs(results, config, out_dir)
    return results
