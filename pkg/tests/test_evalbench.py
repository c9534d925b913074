import filecmp

import numpy as np
import pytest

from quadbal import env as E
from quadbal import evalbench as EB
from quadbal import nets as N
from quadbal import trajgen as tg
from quadbal.learn import AblationFlags, BalanceAgent


@pytest.fixture(scope="module")
def bench():
    return EB.build_benchmark(12, seed=5)


@pytest.fixture(scope="module")
def small_agent():
    spec = N.NetSpec(actor_hidden=(16, 8), encoder_hidden=(8,), critic_hidden=(16,), est_mlp=8, est_channels=4)
    return BalanceAgent(spec, N.init_params(spec, 0))


# ---------------------------------------------------------------- benchmark sets


def test_build_benchmark_is_deterministic_on_disk(tmp_path):
    a = EB.build_benchmark(6, seed=11, out_dir=tmp_path / "a")
    EB.build_benchmark(6, seed=11, out_dir=tmp_path / "b")
    assert filecmp.cmp(tmp_path / "a" / "manifest.json", tmp_path / "b" / "manifest.json", shallow=False)
    for e in a.entries:
        assert filecmp.cmp(tmp_path / "a" / e["file"], tmp_path / "b" / e["file"], shallow=False)
    c = EB.build_benchmark(6, seed=12)
    assert c.entries != a.entries


def test_benchmark_uses_testing_ranges(bench):
    big = EB.build_benchmark(300, seed=1)
    nw = big.column("n_waypoints")
    assert nw.min() >= 4 and nw.max() <= 16 and len(np.unique(nw)) > 8
    r = E.TEST_RANGES
    x = np.array([e["intrinsics"] for e in big.entries])
    assert np.all((x[:, 0] >= r.body_mass[0]) & (x[:, 0] <= r.body_mass[1]))
    assert np.all((x[:, 4] >= r.friction[0]) & (x[:, 4] <= r.friction[1]))
    kp = np.array([e["platform_kp"] for e in big.entries])
    assert np.all((kp >= r.platform_kp[0]) & (kp <= r.platform_kp[1]))


def test_manifest_round_trip_regenerates_episodes(tmp_path):
    made = EB.build_benchmark(4, seed=2, out_dir=tmp_path)
    back = EB.load_benchmark(tmp_path)
    assert back.entries == made.entries and back.seed == 2 and back.ranges == "test"
    for e in back.entries:
        traj, params, kp, kd, yaw = back.episode(e["index"])
        assert params.to_vector()[0].tolist() == e["intrinsics"] and yaw == e["yaw"]
        from_file = tg.load_trajectory(tmp_path / e["file"])
        np.testing.assert_array_equal(from_file.waypoints, traj.waypoints)
    with pytest.raises(FileNotFoundError):
        EB.load_benchmark(tmp_path / "missing")


def test_build_benchmark_rejects_bad_input():
    with pytest.raises(ValueError):
        EB.build_benchmark(0, seed=1)
    with pytest.raises(ValueError):
        EB.build_benchmark(2, seed=1, ranges="hard")


def test_stats_by_waypoint_count_shapes():
    out = EB.stats_by_waypoint_count([5, 6], 3, seed=0)
    assert set(out) == {5, 6} and all(len(v[0]) == 3 and np.all(v[1] > 0) for v in out.values())


# ---------------------------------------------------------------- runner and metrics


def test_stand_still_static_platform_never_collides():
    rep = EB.run_stand_still(EB.build_benchmark(8, seed=3, static=True), batch_size=8)
    assert rep.collision_rate == 0.0 and rep.height_violation_rate == 0.0
    assert rep.position_deviation < 0.02 and rep.power >= 0.0
    assert np.all(rep.log.steps == 500)


def test_untrained_policy_collides_almost_always(bench, small_agent):
    rep = EB.run_policy(small_agent, bench, "estimated")
    assert rep.collision_rate >= 0.9


def test_random_policy_uses_more_power_than_stand_still(bench):
    ss, rnd = EB.run_stand_still(bench), EB.run_random(bench)
    assert ss.power < rnd.power


def test_pre_collision_steps_exclude_the_collision_step(bench):
    rep = EB.run_stand_still(bench)
    log = rep.log
    np.testing.assert_array_equal(log.pre_steps, log.steps - log.collided)
    assert np.all((0 <= rep.values()[1]) & (np.array(rep.values()[:2]) <= 1))


def test_metrics_pool_over_pre_collision_steps():
    log = EB.EpisodeLog.empty(2)
    log.collided[:] = [True, False]
    log.steps[:] = [3, 5]
    log.pre_steps[:] = [2, 5]
    log.position[:] = [0.4, 0.3]
    log.rotation[:] = [0.2, 0.5]
    log.height[:] = [1, 0]
    log.power[:] = [7.0, 7.0]
    rep = EB.MetricsReport.from_log("m", log, shards=2)
    assert rep.collision_rate == 0.5
    assert rep.position_deviation == pytest.approx(0.7 / 7)
    assert rep.rotation_deviation == pytest.approx(0.7 / 7)
    assert rep.height_violation_rate == pytest.approx(1 / 7)
    assert rep.power == pytest.approx(2.0)
    assert rep.std["collision_rate"] == pytest.approx(np.std([1.0, 0.0], ddof=1))


def test_power_metric_matches_reward_power_term():
    bench = EB.build_benchmark(1, seed=9)
    rep = EB.run_stand_still(bench, batch_size=1)
    env = E.BalanceEnv(1, E.EnvConfig(ranges="test"))
    env.reset_env(0, *bench.episode(0))
    terms = []
    while True:
        _, rew, done, info = env.step(np.zeros((1, 12)))
        if info.collision[0]:
            break
        terms.append(-rew.reg_2[0] / env.cfg.reward.k[14])
        if done[0]:
            break
    assert rep.power == pytest.approx(np.mean(terms), rel=1e-12)


def test_results_do_not_depend_on_batching(bench):
    a = EB.run_stand_still(bench, batch_size=12)
    b = EB.run_stand_still(bench, batch_size=5)
    np.testing.assert_allclose(a.values(), b.values(), rtol=1e-9)
    np.testing.assert_array_equal(a.log.steps, b.log.steps)


def test_evaluation_is_repeatable(bench, small_agent):
    a = EB.run_policy(small_agent, bench, "privileged")
    b = EB.run_policy(small_agent, bench, "privileged")
    assert a.values() == b.values()


def test_state_log_has_documented_columns(tmp_path, bench):
    path = tmp_path / "states.csv"
    rep = EB.run_stand_still(bench.head(2), state_log=path)
    rows = path.read_text().splitlines()
    assert rows[0].split(",") == list(EB.sc.STATE_LOG_COLUMNS)
    assert len(rows) - 1 == rep.log.steps.sum()


def test_incompatible_checkpoint_names_dimension(small_agent, bench):
    with pytest.raises(EB.IncompatibleCheckpoint, match="exp_dim"):
        EB.run_policy(small_agent, bench, ablation=AblationFlags(no_ac=True, no_ee=True))
    with pytest.raises(ValueError, match="mode"):
        EB.run_policy(small_agent, bench, mode="oracle")


# ---------------------------------------------------------------- estimator accuracy


def test_injected_ground_truth_estimator_has_zero_error(small_agent, bench):
    rep = EB.estimator_accuracy(small_agent, bench.head(3), estimator=lambda h, x, l: (x, l), traces=2)
    assert np.all(rep.explicit_l1 == 0.0) and rep.implicit_l2 == 0.0
    assert np.all(rep.explicit_std == 0.0) and rep.steps > 0
    assert rep.traces.shape[1] == len(EB.TRACE_COLUMNS) == 2 + 2 * 13
    np.testing.assert_array_equal(rep.traces[:, 2:15], rep.traces[:, 15:])
    assert set(np.unique(rep.traces[:, 0])) <= {0, 1}


def test_estimator_report_structure(small_agent, bench):
    rep = EB.estimator_accuracy(small_agent, bench.head(3))
    rows = rep.rows()
    assert len(rows) == 14 and [r[0] for r in rows[:13]] == list(E.EXP_NAMES) and rows[13][0] == "l_imp"
    assert all(np.isfinite(r[2]) and r[2] >= 0 and np.isfinite(r[3]) for r in rows)


def test_ablated_estimator_reports_nan_for_missing_dimensions(bench):
    spec = N.NetSpec(exp_dim=7, aln_dim=0, actor_hidden=(8,), encoder_hidden=(8,), critic_hidden=(8,), est_mlp=8,
                     est_channels=4)
    rep = EB.estimator_accuracy(BalanceAgent(spec, N.init_params(spec, 1)), bench.head(2))
    assert np.all(np.isfinite(rep.explicit_l1[:7])) and np.all(np.isnan(rep.explicit_l1[7:]))


# ---------------------------------------------------------------- reports


def test_report_csv_round_trip_and_table(tmp_path, bench):
    rep = EB.run_stand_still(bench)
    paths = EB.emit_report([rep], tmp_path, bench=bench)
    back = EB.read_report_csv(tmp_path / "report.csv")
    assert len(back) == 1 and back[0].values() == rep.values() and back[0].std == rep.std
    table = (tmp_path / "report.txt").read_text().splitlines()
    assert len(table) == 3
    for h in EB.TABLE_HEADERS:
        assert h in table[0]
    assert (tmp_path / "plotdata" / "trajectory_summary.csv") in paths


def test_emit_report_needs_a_report(tmp_path):
    with pytest.raises(ValueError):
        EB.emit_report([], tmp_path)


def test_level_fixes_waypoint_count_and_round_trips(tmp_path):
    made = EB.build_benchmark(5, seed=4, ranges="train", out_dir=tmp_path, level=6)
    assert np.all(made.column("n_waypoints") == 6)
    back = EB.load_benchmark(tmp_path)
    assert back.level == 6 and back.head(2).level == 6
    np.testing.assert_array_equal(back.trajectory(3).waypoints, made.trajectory(3).waypoints)
