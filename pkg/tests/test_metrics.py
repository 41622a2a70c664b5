import csv
import dataclasses
import math

import numpy as np
import pytest

from anchorsim.metrics import (
    FeatureSpec,
    MetricsError,
    RolloutSet,
    default_feature_specs,
    infraction_rates,
    log_trace,
    min_ade,
    realism_score,
    simulate_rollout_set,
    smoothed_histogram,
    trace_rows,
    write_realism_csv,
    write_realism_json,
)
from anchorsim.scenario import AgentTrack, Scenario
from anchorsim.sim import DUMP_COLUMNS, SimConfig

CFG4 = SimConfig(horizon_steps=4)


def copies_of_log(sc, S, config=SimConfig()):
    tr = log_trace(sc, config)
    return RolloutSet.from_traces(sc.id, range(S), [tr] * S, np.flatnonzero(sc.controlled))


def test_smoothing_arithmetic():
    vals = np.array([[0.5, 1.5, 1.5, 3.0, np.nan]])
    p = smoothed_histogram(vals, (0.0, 1.0, 2.0, 3.0), 0.1)
    # counts (1, 2, 1) over 4 valid samples, B = 3
    want = (np.array([0.25, 0.5, 0.25]) + 0.1) / 1.3
    assert np.allclose(p[0], want, atol=1e-15)
    assert p.sum() == pytest.approx(1.0, abs=1e-15)


def test_out_of_range_values_clamp_into_end_bins():
    p = smoothed_histogram(np.array([[-5.0, 99.0]]), (0.0, 1.0, 2.0), 1e-3)
    assert p[0, 0] == pytest.approx(p[0, 1])


def test_perfect_replay_scores_limit_one(suite):
    sc = suite[0]
    eps = 1e-3
    rep = realism_score(copies_of_log(sc, 4), sc)
    for (a, f), m in rep.agent_scores.items():
        B = next(s.n_bins for s in default_feature_specs() if s.name == f)
        assert m == pytest.approx((1 + eps) / (1 + B * eps), rel=1e-12)
    rep = realism_score(copies_of_log(sc, 4), sc, default_feature_specs(1e-12))
    assert rep.composite > 1 - 1e-9
    assert rep.min_ade == 0.0


def test_scores_in_unit_interval(suite, vocab, small_policy):
    sc = suite[1]
    rs = simulate_rollout_set(small_policy, sc, S=4, vocab=vocab, config=SimConfig(horizon_steps=20))
    rep = realism_score(rs, sc, config=SimConfig(horizon_steps=20))
    for m in list(rep.agent_scores.values()) + list(rep.feature_scores.values()) + [rep.composite]:
        assert 0 < m <= 1
    assert set(rep.category_scores) == {"kinematic", "interactive", "map"}
    assert rep.composite == pytest.approx(np.mean(list(rep.category_scores.values())))


def test_min_ade_against_loop_oracle(suite, vocab, small_policy):
    sc = suite[2]
    cfg = SimConfig(horizon_steps=12)
    rs = simulate_rollout_set(small_policy, sc, S=3, vocab=vocab, config=cfg)
    gt = log_trace(sc, cfg)
    per_agent = []
    for a in rs.targets:
        best = math.inf
        for s in range(rs.S):
            ds = [
                math.hypot(rs.poses[s, a, t, 0] - gt.poses[a, t, 0], rs.poses[s, a, t, 1] - gt.poses[a, t, 1])
                for t in range(1, rs.T)
            ]
            best = min(best, sum(ds) / len(ds))
        per_agent.append(best)
    assert min_ade(rs, sc, cfg) == pytest.approx(sum(per_agent) / len(per_agent), rel=1e-12)


def test_min_ade_three_four_five(suite):
    sc = dataclasses.replace(suite[0], controlled=np.eye(suite[0].n_agents, dtype=bool)[0], _cache={})
    tr = log_trace(sc, CFG4)
    near = dataclasses.replace(tr, poses=tr.poses.copy())
    near.poses[0, 1:, 0] += 3.0
    near.poses[0, 1:, 1] += 4.0
    far = dataclasses.replace(tr, poses=tr.poses.copy())
    far.poses[0, 1:, 0] += 30.0
    rs = RolloutSet.from_traces(sc.id, [0, 1], [far, near], [0])
    assert min_ade(rs, sc, CFG4) == pytest.approx(5.0, abs=1e-12)


def _two_agent_fixture(suite):
    base = suite[0]
    T = len(base.tracks[0])
    t0 = base.init_step
    tracks = []
    for i, gt_speed in enumerate(([5, 5, 15, 15], [12, 12, 12, 12])):
        tr = base.tracks[i]
        sp = tr.speed.copy()
        sp[t0 + 1 : t0 + 5] = gt_speed
        tracks.append(AgentTrack(tr.x, tr.y, tr.heading, sp, tr.validity, tr.length, tr.width))
    sc = Scenario("fixture", base.road_graph, tracks, base.goals[:2], np.ones(2, bool), base.init_step, base.horizon_steps)
    gt = log_trace(sc, CFG4)
    assert not gt.collided.any()
    r0 = dataclasses.replace(gt, poses=gt.poses.copy(), collided=gt.collided.copy())
    r1 = dataclasses.replace(gt, poses=gt.poses.copy(), collided=gt.collided.copy())
    r0.poses[0, 1:, 3] = [5, 5, 5, 5]
    r1.poses[0, 1:, 3] = [5, 15, 15, 15]
    r0.collided[0, 2] = True
    return sc, RolloutSet.from_traces(sc.id, [0, 1], [r0, r1], [0, 1])


def test_hand_computed_two_agent_two_feature_fixture(suite):
    sc, rs = _two_agent_fixture(suite)
    eps = 0.1
    specs = [
        FeatureSpec("speed", "speed", "kinematic", (0.0, 10.0, 20.0), eps),
        FeatureSpec("collision", "collision_flag", "interactive", (0.0, 0.5, 1.0), eps),
    ]
    rep = realism_score(rs, sc, specs, CFG4)
    hit = 1.1 / 1.2  # both rollouts in the GT bin
    half = 0.6 / 1.2  # one of two rollouts in the GT bin
    m_speed_0 = (hit * half**3) ** 0.25
    m_col_0 = (hit**3 * half) ** 0.25
    assert rep.agent_scores[(0, "speed")] == pytest.approx(m_speed_0, rel=1e-12)
    assert rep.agent_scores[(1, "speed")] == pytest.approx(hit, rel=1e-12)
    assert rep.agent_scores[(0, "collision")] == pytest.approx(m_col_0, rel=1e-12)
    assert rep.agent_scores[(1, "collision")] == pytest.approx(hit, rel=1e-12)
    fs, fc = (m_speed_0 + hit) / 2, (m_col_0 + hit) / 2
    assert rep.feature_scores == pytest.approx({"speed": fs, "collision": fc}, rel=1e-12)
    assert rep.composite == pytest.approx((fs + fc) / 2, rel=1e-12)
    assert rep.collision_rate == pytest.approx(0.25)


def test_infraction_rates_recount_from_dump(tmp_path, suite, vocab, small_policy):
    sc = suite[3]
    cfg = SimConfig(horizon_steps=30)
    rs = simulate_rollout_set(small_policy, sc, S=4, vocab=vocab, config=cfg)
    from anchorsim.metrics import EpisodeTrace

    col_pairs, off_pairs, n = 0, 0, 0
    for s in range(rs.S):
        tr = EpisodeTrace(rs.poses[s], rs.active[s], rs.collided[s], rs.offroad[s], rs.goal[s])
        p = tmp_path / f"dump_{s}.csv"
        with open(p, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(DUMP_COLUMNS)
            w.writerows(trace_rows(sc, tr))
        with open(p) as f:
            rows = list(csv.DictReader(f))
        for a in rs.targets:
            mine = [r for r in rows if int(r["agent_id"]) == a]
            col_pairs += any(r["collided"] == "1" for r in mine)
            off_pairs += any(r["offroad"] == "1" for r in mine)
            n += 1
    col, off, _ = infraction_rates(rs)
    assert col == col_pairs / n
    assert off == off_pairs / n


def test_rollout_set_errors(suite, vocab, small_policy):
    sc = suite[0]
    with pytest.raises(MetricsError):
        simulate_rollout_set(small_policy, sc, S=3, seeds=[1, 1, 2], vocab=vocab, config=CFG4)
    with pytest.raises(MetricsError):
        simulate_rollout_set(small_policy, sc, S=1, vocab=vocab, config=CFG4)
    with pytest.raises(MetricsError):
        realism_score(copies_of_log(sc, 2, CFG4), sc)  # horizon mismatch
    with pytest.raises(MetricsError):
        FeatureSpec("bad", "speed", "kinematic", (1.0, 0.0))
    with pytest.raises(MetricsError):
        FeatureSpec("bad", "nope", "kinematic", (0.0, 1.0))


def test_rollout_sets_reproducible(suite, vocab, small_policy):
    a = simulate_rollout_set(small_policy, suite[0], S=3, seeds=[4, 5, 6], vocab=vocab, config=CFG4)
    b = simulate_rollout_set(small_policy, suite[0], S=3, seeds=[4, 5, 6], vocab=vocab, config=CFG4)
    assert a == b


def test_report_writers(tmp_path, suite):
    reps = [realism_score(copies_of_log(sc, 2), sc) for sc in suite[:2]]
    write_realism_csv(reps, tmp_path / "r.csv")
    write_realism_json(reps, tmp_path / "r.json")
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == ["scenario_id", "feature", "category", "score"]
    assert any(r[0] == "ALL" and r[1] == "composite" for r in rows)
