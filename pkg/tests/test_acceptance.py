"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

The learning-trend criteria (6-8) train the desk preset for five seeds in
several modes; the runs are shared through a session fixture and take a
few minutes on one core.
"""
import dataclasses
import time

import numpy as np
import pytest

from rsm_mappo import gossip, harness, ledger, mixture, nnet, ppo
from rsm_mappo.ledger import CommLedger
from rsm_mappo.mixture import Replica

from bandit import SoftmaxBandit, exact_buffer
from conftest import central_difference, record_acceptance
from test_ppo import gradient_fixture

SEEDS = (0, 1, 2, 3, 4)
TREND_RUNS = [("none", 2), ("central", 2), ("rsm", 2), ("average", 2), ("rsm", 1), ("rsm", 4)]


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        pcfg, vcfg, theta, omega, batch, adv, targ = gradient_fixture(100 + seed)
        _, g = ppo.actor_loss_grad(theta, pcfg, batch, adv, 0.2, 0.01)
        fd = central_difference(lambda t: ppo.actor_loss(t, pcfg, batch, adv, 0.2, 0.01), theta)
        _, gc = ppo.critic_loss_grad(omega, vcfg, batch, targ)
        fdc = central_difference(lambda w: ppo.critic_loss(w, vcfg, batch, targ), omega)
        for a, b in ((g, fd), (gc, fdc)):
            rel = np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
            worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30
    record_acceptance(1, ok, f"max rel err {worst:.2e} over 20 fixtures, {elapsed:.1f}s")
    assert ok


def test_criterion_2_fim():
    rng = np.random.default_rng(2)
    cfg = nnet.policy_config(6)
    lowest = np.inf
    for seed in range(10):
        theta = nnet.init_network(cfg, seed) + rng.normal(scale=0.1, size=cfg.n_params)
        S, A = rng.normal(size=(50, 6)), rng.normal(size=(50, 1))
        q = mixture.fim_quadratic_form(nnet.policy_score(theta, cfg, S, A))
        lowest = min(lowest, min(q(rng.normal(size=cfg.n_params)) for _ in range(100)))
    tiny = nnet.policy_config(3, 1, hidden=(4, 3))
    assert tiny.n_params <= 50
    worst = 0.0
    for seed in range(10):
        theta = nnet.init_network(tiny, seed)
        scores = nnet.policy_score(theta, tiny, rng.normal(size=(20, 3)), rng.normal(size=(20, 1)))
        q, dense = mixture.fim_quadratic_form(scores), mixture.fim_dense(scores)
        for _ in range(20):
            d = rng.normal(size=tiny.n_params)
            worst = max(worst, abs(q(d) - float(d @ dense @ d)))
    ok = lowest >= -1e-9 and worst <= 1e-10
    record_acceptance(2, ok, f"min q {lowest:.3e}, dense mismatch {worst:.1e} (upsilon={tiny.n_params})")
    assert ok


def test_criterion_3_gate():
    t0 = time.perf_counter()
    bandit = SoftmaxBandit([0.0, 1.0])
    rng = np.random.default_rng(3)
    neg_mixed = pos_bad = grid_fail = checked = 0
    for _ in range(40):
        theta = rng.normal(size=2)
        d = rng.normal(size=2)
        buf = exact_buffer(bandit, theta)
        kw = dict(M=len(buf), K=len(buf), gamma=0.9, rng=np.random.default_rng(0))
        # replica pushed toward the worse / better arm forces the sign of the estimate
        worse = Replica(theta + np.array([abs(d[0]), -abs(d[1])]))
        better = Replica(theta + np.array([-abs(d[0]), abs(d[1])]))
        out, (r,) = mixture.regulated_mix_round(theta, [worse], buf, bandit, **kw)
        neg_mixed += int(r.advantage_estimate >= 0 or r.accepted or not np.array_equal(out, theta))
        out, (r,) = mixture.regulated_mix_round(theta, [better], buf, bandit, **kw)
        pos_bad += int(not (r.advantage_estimate > 0 and r.accepted
                            and 0 < r.alpha_used < r.alpha_bound))
        if r.accepted:
            checked += 1
            j0 = bandit.expected_reward(theta)
            for a in np.linspace(0.0, r.alpha_bound, 102)[1:-1]:
                grid_fail += int(bandit.expected_reward(mixture.mix(theta, better.theta, a)) <= j0)
    elapsed = time.perf_counter() - t0
    ok = neg_mixed == 0 and pos_bad == 0 and grid_fail == 0 and checked > 0 and elapsed < 60
    record_acceptance(3, ok, f"negative mixed {neg_mixed}, positive violations {pos_bad}, "
                             f"grid failures {grid_fail}/{100 * checked}, {elapsed:.1f}s")
    assert ok


def test_criterion_4_accounting():
    failures = []
    for mode in ("rsm", "rsm-best", "average"):
        cfg = harness.ExperimentConfig(E=80, T=20, epochs=3, test_every=1, test_episodes=1,
                                       M=20, K=10, lr_actor=1e-2, lr_critic=2e-2, mode=mode)
        res = harness.run_seed(cfg, 0)
        lg = res.summary["final_ledger"]
        if lg["values_transferred"] != lg["rho_total"] * lg["upsilon"]:
            failures.append(mode)
        for rec in res.records:
            snap = rec["ledger"]
            if ledger.ledger_metrics(snap).psi != snap["rho_total"] * snap["upsilon"]:
                failures.append(f"{mode}@{rec['epoch']}")
    u = nnet.policy_config(6).n_params
    one_round = CommLedger(u)
    thetas = [nnet.init_network(nnet.policy_config(6), i) for i in range(9)]
    ex = gossip.SegmentExchange(thetas, gossip.Topology.complete(9), one_round)
    for i in range(9):
        gossip.build_replicas(i, 2, 4, ex, np.random.default_rng(i))
    per_round = one_round.values_transferred
    ok = (not failures and per_round == 18 * u == ledger.per_round_cost("rsm", 9, 2, u)
          and ledger.per_round_cost("full-exchange", 9, 2, u) == 72 * u)
    record_acceptance(4, ok, f"psi identity failures {failures}, one round moved {per_round} "
                             f"= 18*{u}, full exchange {ledger.per_round_cost('full-exchange', 9, 2, u)}")
    assert ok


def test_criterion_5_partition():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(200):
        theta = rng.normal(size=int(rng.integers(10, 5000)))
        for P in range(1, 8):
            segs = mixture.partition(theta, P)
            order = rng.permutation(P)
            bad += mixture.reconstruct([segs[k] for k in order]).theta.tobytes() != theta.tobytes()
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 5
    record_acceptance(5, ok, f"{bad} mismatches over 200 vectors x P=1..7, {elapsed:.2f}s")
    assert ok


# --- learning trends ------------------------------------------------------------

@pytest.fixture(scope="session")
def trend_runs():
    out = {}
    for mode, kappa in TREND_RUNS:
        cfg = dataclasses.replace(harness.preset("desk"), mode=mode, kappa=kappa)
        for seed in SEEDS:
            t0 = time.perf_counter()
            res = harness.run_seed(cfg, seed)
            out[(mode, kappa, seed)] = (res.summary, time.perf_counter() - t0)
    return out


def _plateau(runs, mode, kappa=2):
    return float(np.mean([runs[(mode, kappa, s)][0]["plateau_reward"] for s in SEEDS]))


def epochs_to_fraction(epochs, rewards, plateau, frac=0.8):
    """First test epoch whose centred moving average reaches ``frac * plateau``."""
    ma = ledger.centered_moving_average(rewards, 5)
    hit = np.flatnonzero(ma >= frac * plateau)
    return epochs[int(hit[0])] if len(hit) else epochs[-1]


@pytest.mark.slow
def test_criterion_6_learning_trend(trend_runs):
    irl, central, rsm = (_plateau(trend_runs, m) for m in ("none", "central", "rsm"))
    slowest = max(t for _, t in trend_runs.values())
    over_irl = rsm >= 1.15 * irl
    near_central = abs(rsm - central) <= 0.10 * central
    ok = over_irl and near_central and slowest <= 600
    record_acceptance(6, ok, f"plateaus rsm {rsm:.1f}, irl {irl:.1f} (x{rsm / irl:.2f}, need 1.15), "
                             f"central {central:.1f} (gap {100 * (central - rsm) / central:.1f}%, "
                             f"need <= 10%), slowest run {slowest:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_7_mixture_quality(trend_runs):
    rsm, avg = _plateau(trend_runs, "rsm"), _plateau(trend_runs, "average")
    rho_rsm = [trend_runs[("rsm", 2, s)][0]["rho_r"] for s in SEEDS]
    rho_avg = [trend_runs[("average", 2, s)][0]["rho_r"] for s in SEEDS]
    ok = (rsm >= 0.95 * avg and all(0 < r < 1 for r in rho_rsm)
          and all(r == 1.0 for r in rho_avg))
    record_acceptance(7, ok, f"plateaus rsm {rsm:.1f} vs average {avg:.1f} (need >= {0.95 * avg:.1f}); "
                             f"rho_r rsm {np.round(rho_rsm, 3).tolist()}, average {rho_avg}")
    assert ok


@pytest.mark.slow
def test_criterion_8_replica_count(trend_runs):
    reach, plateaus = [], []
    for kappa in (1, 2, 4):
        per_seed = []
        for s in SEEDS:
            summ = trend_runs[("rsm", kappa, s)][0]
            per_seed.append(epochs_to_fraction(summ["test_epochs"], summ["test_rewards"],
                                               summ["plateau_reward"]))
        reach.append(float(np.mean(per_seed)))
        plateaus.append(_plateau(trend_runs, "rsm", kappa))
    inversions = sum(b > a for a, b in zip(reach, reach[1:]))
    spread = (max(plateaus) - min(plateaus)) / max(plateaus)
    ok = inversions <= 1 and spread <= 0.10
    record_acceptance(8, ok, f"epochs to 80% for kappa 1/2/4: {np.round(reach, 1).tolist()} "
                             f"({inversions} inversions); plateaus {np.round(plateaus, 1).tolist()} "
                             f"(spread {100 * spread:.1f}%, need <= 10%)")
    assert ok


def test_criterion_9_determinism(tmp_path):
    cfg = dataclasses.replace(harness.preset("desk"), mode="rsm", epochs=20, seeds=(0,))
    harness.run_experiment(cfg, tmp_path / "a")
    harness.run_experiment(cfg, tmp_path / "b")
    names = ("metrics.csv", "summary.json", "summary_seed0.json", "epochs_seed0.jsonl")
    same = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names)
    record_acceptance(9, same, f"two desk runs (rsm, seed 0, 20 epochs): {'identical' if same else 'different'} bytes")
    assert same
