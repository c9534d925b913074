"""Acceptance suite: one test per criterion, each run at its stated tolerance.

The summary hook in ``conftest.py`` prints one ``ACCEPTANCE <n> PASS|FAIL`` line per criterion,
followed by the measured quantities each test records with ``record_property``.
"""
import csv
import shutil
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from quadbal import cli
from quadbal import env as E
from quadbal import evalbench as EB
from quadbal import nets as N
from quadbal import simcore as sc
from quadbal import trajgen as tg
from quadbal.learn import Trainer, TrainConfig, compute_gae, ppo_loss, roa_losses, train

import physics_cases as PC
import test_learn as TL
import test_nets as TN
from reward_cases import oracle_cases, random_states

import quadbal.learn.train  # noqa: F401

train_mod = sys.modules["quadbal.learn.train"]

K = E.DEFAULT_K
SMOKE_ENVS, SMOKE_ITERATIONS = 64, 500


def fmt(x, digits=4):
    return f"{x:.{digits}g}"


# ---------------------------------------------------------------- shared training run


@pytest.fixture(scope="session")
def smoke_run(tmp_path_factory):
    """The training smoke run: default configuration, 64 environments, 500 iterations."""
    out = tmp_path_factory.mktemp("smoke")
    cfg = TrainConfig()
    cfg = replace(cfg, run=replace(cfg.run, n_envs=SMOKE_ENVS, iterations=SMOKE_ITERATIONS, checkpoint_every=100))
    t0 = time.perf_counter()
    trainer = train(cfg, out)
    elapsed = time.perf_counter() - t0
    with open(out / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {"trainer": trainer, "agent": trainer.agent, "rows": rows, "seconds": elapsed, "out": out}


@pytest.fixture(scope="session")
def shard100():
    return EB.build_benchmark(100, seed=2024)


# ---------------------------------------------------------------- 1. benchmark statistics


def test_criterion_01_benchmark_statistics(record_property):
    t0 = time.perf_counter()
    bench = EB.build_benchmark(10_000, seed=0, write_trajectories=False)
    elapsed = time.perf_counter() - t0
    length, speed = bench.column("path_length").mean(), bench.column("mean_speed").mean()
    record_property("mean_length_m", fmt(length))
    record_property("mean_speed_mps", fmt(speed))
    record_property("seconds", fmt(elapsed, 3))
    assert elapsed < 300
    assert length == pytest.approx(7.12, rel=0.2)
    assert speed == pytest.approx(0.69, rel=0.2)


# ---------------------------------------------------------------- 2. difficulty trend


def test_criterion_02_difficulty_grows_with_waypoint_count(record_property):
    t0 = time.perf_counter()
    counts = list(range(5, 16))
    stats = EB.stats_by_waypoint_count(counts, 500, seed=0)
    elapsed = time.perf_counter() - t0
    length = np.array([stats[n][0].mean() for n in counts])
    speed = np.array([stats[n][1].mean() for n in counts])
    record_property("length_5_to_15", f"{fmt(length[0])}..{fmt(length[-1])}")
    record_property("speed_5_to_15", f"{fmt(speed[0])}..{fmt(speed[-1])}")
    record_property("seconds", fmt(elapsed, 3))
    assert elapsed < 120
    assert np.all(np.diff(length) > 0), length
    assert np.all(np.diff(speed) > 0), speed


# ---------------------------------------------------------------- 3. spline correctness


def test_criterion_03_spline_correctness(record_property):
    rng = np.random.default_rng(3)
    cfg = tg.TrajGenConfig.testing()
    h = 1e-4
    worst_knot = worst_d1 = worst_d2 = worst_end = 0.0
    for _ in range(1000):
        n = int(rng.choice(cfg.waypoint_counts))
        t, wps = tg.sample_waypoints(cfg, n, rng)
        traj = tg.fit_interpolating_spline(t, wps)
        worst_knot = max(worst_knot, float(np.abs(traj.evaluate(t) - wps).max()))
        # probe points at least 2h away from every knot so each difference stays on one cubic piece
        ts = rng.uniform(t[0] + 2 * h, t[-1] - 2 * h, 40)
        gap = np.abs(ts[:, None] - t[None, :]).min(1)
        ts = ts[gap > 2 * h]
        d1 = traj.evaluate(ts, 1)
        fd1 = (traj.evaluate(ts + h) - traj.evaluate(ts - h)) / (2 * h)
        worst_d1 = max(worst_d1, float(np.abs(fd1 - d1).max() / max(np.abs(d1).max(), 1e-12)))
        d2 = traj.evaluate(ts, 2)
        fd2 = (traj.evaluate(ts + h, 1) - traj.evaluate(ts - h, 1)) / (2 * h)
        worst_d2 = max(worst_d2, float(np.abs(fd2 - d2).max() / max(np.abs(d2).max(), 1e-12)))
        scale = max(np.abs(traj.evaluate(ts, 2)).max(), 1.0)
        worst_end = max(worst_end, float(np.abs(traj.evaluate(np.array([t[0], t[-1]]), 2)).max() / scale))
    record_property("knot_err", fmt(worst_knot, 3))
    record_property("d1_rel", fmt(worst_d1, 3))
    record_property("d2_rel", fmt(worst_d2, 3))
    record_property("end_d2", fmt(worst_end, 3))
    assert worst_knot <= 1e-9
    assert worst_d1 < 1e-5 and worst_d2 < 1e-5
    assert worst_end <= 1e-9


# ---------------------------------------------------------------- 4. reward suite


def test_criterion_04_reward_bounds_and_oracles(record_property):
    args = random_states(100_000, np.random.default_rng(4))
    *inputs, model = args
    r = E.compute_reward(*inputs, E.RewardCoeffs(), model)
    terms = r.stack()
    assert np.all(np.isfinite(terms))
    np.testing.assert_allclose(r.total, terms.sum(-1), rtol=1e-12, atol=1e-12)
    assert set(np.unique(r.task_0)) <= {-K[0], 0.0}
    for name, hi in (("task_1", K[1]), ("task_2", K[3]), ("task_3", K[5]), ("task_4", K[7])):
        v = getattr(r, name)
        assert np.all((v > 0) & (v <= hi)), name
    for name in ("reg_0", "reg_1", "reg_2", "reg_3", "reg_6"):
        assert np.all(getattr(r, name) <= 0), name
    worst = 0.0
    cases = oracle_cases()
    for name, term, case, want in cases:
        *inp, mdl = case
        got = getattr(E.compute_reward(*inp, E.RewardCoeffs(), mdl), term)[0]
        worst = max(worst, abs(got - want))
        assert got == pytest.approx(want, rel=1e-12, abs=1e-12), name
    frozen = E.compute_reward(*oracle_cases()[0][2][:-1], E.RewardCoeffs(), model)
    assert frozen.task_1[0] == K[1] == 3.0
    record_property("states", len(terms))
    record_property("oracle_cases", len(cases))
    record_property("worst_oracle_err", fmt(worst, 3))


# ---------------------------------------------------------------- 5. autodiff


def _flat_fd(store, names, loss_of, rng, n_dir=20):
    """Relative error (``TN.rel_err``) between reverse-mode and central-difference directional
    derivatives along ``n_dir`` random directions in parameter space."""
    store.zero_grad()
    tape = N.Tape()
    tape.backward(loss_of(tape))
    g, theta = store.flat_grad(names), store.flat(names)
    fd, an = [], []
    for _ in range(n_dir):
        d = rng.normal(size=theta.size)
        store.load_flat(theta + TN.H_FD * d, names)
        plus = float(loss_of(N.Tape(False)).value)
        store.load_flat(theta - TN.H_FD * d, names)
        minus = float(loss_of(N.Tape(False)).value)
        fd.append((plus - minus) / (2 * TN.H_FD))
        an.append(g @ d)
    store.load_flat(theta, names)
    return TN.rel_err(np.array(an), np.array(fd))


def test_criterion_05_autodiff(record_property):
    # every primitive and layer against central differences
    for op in ("elu", "tanh", "sigmoid", "square", "exp"):
        TN.test_unary_ops_fd(op)
    TN.test_binary_ops_broadcast_fd()
    TN.test_clip_concat_take_reshape_mean_fd()
    TN.test_affine_fd()
    TN.test_conv1d_fd_and_reference()
    TN.test_gaussian_log_prob_fd_and_closed_form()
    TN.test_random_mlp_directional_derivatives()

    # whole training losses with respect to every parameter
    rng = np.random.default_rng(5)
    cfg = TL.tiny_config()
    tr = Trainer(cfg)
    buf, _, last_v = train_mod.collect_rollouts(tr.env, tr.agent, 6, tr.rng, cfg.ppo.gamma, cfg.ppo.reward_scale)
    buf.advantages, buf.returns = compute_gae(buf.data["reward"], buf.data["value"], buf.data["done"], last_v,
                                              cfg.ppo.gamma, cfg.ppo.lam)
    mb = buf.flat()
    mb["a"] = mb["a"] + rng.normal(0, 0.05, mb["a"].shape)
    # the clipped surrogate has kinks where the ratio meets the clip range; keep samples away from them
    mean, log_std = tr.agent.policy(N.Tape(False), mb)
    ratio = np.exp(N.gaussian_log_prob_np(mb["a"], mean.value, log_std.value) - mb["log_prob"])
    keep = np.abs(np.abs(ratio - 1.0) - cfg.ppo.clip) > 1e-3
    mb = {k: v[keep] for k, v in mb.items()}
    store = tr.agent.store
    worst_ppo = _flat_fd(store, store.names(""), lambda t: ppo_loss(t, tr.agent, mb, cfg.ppo)[0], rng)
    # each adaptation term is a true function of its owner's parameters (the other side is held fixed)
    worst_roa = 0.0
    for i, owner in enumerate(("est_exp.", "est_imp.", "encoder.")):
        worst_roa = max(worst_roa, _flat_fd(store, store.names(owner),
                                            lambda t, i=i: roa_losses(t, tr.agent, mb, 0.3)[i], rng))
    record_property("ppo_loss_rel", fmt(worst_ppo, 3))
    record_property("roa_loss_rel", fmt(worst_roa, 3))
    assert worst_ppo < TN.RTOL and worst_roa < TN.RTOL

    # stop-gradients: each adaptation term reaches exactly one network, blocked gradients are exactly zero
    TN.test_stop_gradient_blocks_flow()
    TL.test_roa_stop_gradients_route_terms_to_one_network_each()
    TL.test_roa_zero_lambda_leaves_encoder_untouched()


# ---------------------------------------------------------------- 6. physics sanity


def test_criterion_06_physics_sanity(record_property):
    drift = PC.free_body_momentum_drift()
    state, params, model = PC.drop_to_stand()
    weight = sc.total_mass(params, model)[0] * 9.81
    normal = state.foot_force[0, :, 2].sum()
    checks = PC.contact_invariant_run(10**6)
    onsets = {mu: PC.sliding_onset(mu) / (mu * 9.81) - 1 for mu in (0.2, 0.3, 0.4)}
    record_property("momentum_drift", fmt(drift, 3))
    record_property("normal_over_weight", fmt(normal / weight, 5))
    record_property("substep_checks", checks)
    record_property("onset_rel_err", ",".join(fmt(v, 3) for v in onsets.values()))
    assert drift <= 1e-10
    assert state.contact.all() and normal == pytest.approx(weight, rel=0.02)
    assert checks >= 10**6
    assert all(abs(v) <= 0.05 for v in onsets.values())


# ---------------------------------------------------------------- 7. stand-still baseline


def test_criterion_07_stand_still_baseline(smoke_run, shard100, record_property):
    static = EB.run_stand_still(EB.build_benchmark(100, seed=2024, static=True))
    ss = EB.run_stand_still(shard100)
    rnd = EB.run_random(shard100)
    pol = EB.run_policy(smoke_run["agent"], shard100, "estimated")
    record_property("static_collisions", fmt(static.collision_rate))
    record_property("power_W", f"stand_still={fmt(ss.power)},policy={fmt(pol.power)},random={fmt(rnd.power)}")
    assert static.collision_rate == 0.0
    assert ss.power < pol.power and ss.power < rnd.power


# ---------------------------------------------------------------- 8. training smoke


def test_criterion_08_training_smoke(smoke_run, record_property):
    rows = smoke_run["rows"]
    assert [int(r["iteration"]) for r in rows] == list(range(1, SMOKE_ITERATIONS + 1))
    l10, l_end = float(rows[9]["L_exp"]), float(rows[-1]["L_exp"])
    levels = [int(r["level"]) for r in rows]
    start = TrainConfig().curriculum.start
    at_start = [float(r["window_success"]) for r in rows if int(r["level"]) == start]
    # once the curriculum leaves the start level its last window there reached the threshold
    success = 0.8 if max(levels) > start else (at_start[-1] if at_start else 0.0)
    bench = EB.build_benchmark(200, seed=77, ranges="train", level=start)
    rnd = EB.run_random(bench)
    rnd_success = float(np.mean(~rnd.log.collided))
    record_property("seconds", fmt(smoke_run["seconds"], 4))
    record_property("L_exp_10", fmt(l10))
    record_property("L_exp_end", fmt(l_end))
    record_property("success_level5", fmt(success))
    record_property("random_success", fmt(rnd_success))
    record_property("final_level", max(levels))
    assert smoke_run["seconds"] < 1800
    assert l_end <= 0.5 * l10
    assert success >= rnd_success + 0.30
    assert max(levels) >= start + 1


# ---------------------------------------------------------------- 9. ranking


def test_criterion_09_policy_collides_less_than_stand_still(smoke_run, record_property):
    bench = EB.build_benchmark(500, seed=9)
    ss = EB.run_stand_still(bench)
    pol = EB.run_policy(smoke_run["agent"], bench, "estimated")
    record_property("collision_stand_still", fmt(ss.collision_rate))
    record_property("collision_policy", fmt(pol.collision_rate))
    assert pol.collision_rate < ss.collision_rate


# ---------------------------------------------------------------- 10. estimator report


def test_criterion_10_estimator_report(smoke_run, shard100, record_property):
    rep = EB.estimator_accuracy(smoke_run["agent"], shard100.head(20))
    rows = rep.rows()
    assert len(rows) == 13 + 1
    assert [r[0] for r in rows[:13]] == list(E.EXP_NAMES) and rows[13][0] == "l_imp"
    assert np.all(np.isfinite(rep.explicit_l1)) and np.all(np.isfinite(rep.explicit_std))
    assert np.isfinite(rep.implicit_l2) and np.isfinite(rep.implicit_std)
    truth = EB.estimator_accuracy(smoke_run["agent"], shard100.head(5), estimator=lambda h, x, l: (x, l))
    assert np.all(truth.explicit_l1 == 0.0) and truth.implicit_l2 == 0.0
    record_property("mean_explicit_l1", fmt(float(rep.explicit_l1.mean())))
    record_property("implicit_l2", fmt(rep.implicit_l2))


# ---------------------------------------------------------------- 11. determinism


SMOKE_INI = """\
[ppo]
horizon = 4
epochs = 1
minibatches = 2

[roa]
epochs = 1
minibatches = 2

[net]
actor_hidden = 16, 8
encoder_hidden = 8
critic_hidden = 16
est_mlp = 8
est_channels = 4

[run]
n_envs = 3
iterations = 2
checkpoint_every = 1
"""


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_cli_determinism(tmp_path, monkeypatch, record_property):
    ini = tmp_path / "smoke.ini"
    ini.write_text(SMOKE_INI)
    root = tmp_path / "runs"
    monkeypatch.setenv("QUADBAL_OUT", str(root))
    common = ["--threads", "1", "--seed", "3"]
    trees = []
    for keep in ("first", "second"):
        assert cli.main(["gen-bench", "--count", "4", *common]) == 0
        assert cli.main(["train", "--config", str(ini), *common]) == 0
        bench, run = root / "bench-test-4-s3", root / "train-s3"
        ck = run / "checkpoints" / "last.ckpt"
        assert cli.main(["eval", "--bench", str(bench), "--checkpoint", str(ck), "--mode", "privileged",
                         "--baseline", "stand-still", "--baseline", "random", "--traces", "1", *common]) == 0
        ev = root / "eval-bench-test-4-s3"
        for what, src in (("stats", bench), ("estimator-traces", ev), ("training-curves", run)):
            assert cli.main(["export-plots", "--run", str(src), "--what", what, *common]) == 0
        trees.append(_tree_bytes(root))
        # same flags and environment for the re-run: move the first outputs out of the way
        shutil.move(str(root), str(tmp_path / keep))
    a, b = trees
    record_property("files", len(a))
    assert sorted(a) == sorted(b)
    differing = [k for k in a if a[k] != b[k]]
    assert not differing, differing
