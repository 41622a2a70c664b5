import dataclasses
import math

import numpy as np
import pytest

from anchorsim.kernels import wrap_angle
from anchorsim.metrics import log_trace, run_episode
from anchorsim.rl import PpoConfig, RewardConfig, collect_rollouts
from anchorsim.scenario import AgentTrack, GoalSpec, RoadGraph, Scenario
from anchorsim.sim import SimConfig, SimError, build_observations, obs_dims, reset, step

from conftest import rigid


def transformed(sc: Scenario, tx, ty, rot) -> Scenario:
    def pts(p):
        x, y, _ = rigid(p[:, 0], p[:, 1], 0.0, tx, ty, rot)
        return np.stack([x, y], axis=1)

    rg = sc.road_graph
    tracks = []
    for t in sc.tracks:
        x, y, h = rigid(t.x, t.y, t.heading, tx, ty, rot)
        tracks.append(AgentTrack(x, y, np.asarray(wrap_angle(h)), t.speed.copy(), t.validity.copy(), t.length, t.width))
    goals = []
    for g in sc.goals:
        gx, gy, _ = rigid(g.position[0], g.position[1], 0.0, tx, ty, rot)
        goals.append(GoalSpec((float(gx), float(gy)), g.radius))
    return Scenario(
        sc.id,
        RoadGraph([pts(p) for p in rg.lane_centerlines], [pts(p) for p in rg.road_edges], [pts(p) for p in rg.drivable_areas]),
        tracks,
        goals,
        sc.controlled.copy(),
        sc.init_step,
        sc.horizon_steps,
    )


def uncontrolled(sc: Scenario) -> Scenario:
    return dataclasses.replace(sc, controlled=np.zeros(sc.n_agents, bool), _cache={})


def test_log_replay_bit_fidelity(suite):
    for sc in suite:
        replay = uncontrolled(sc)
        tr = run_episode(replay, None, SimConfig(), None, np.random.default_rng(0))
        st = sc.stacked()
        t0 = sc.init_step
        sl = slice(t0, t0 + tr.poses.shape[1])
        for k, key in enumerate(("x", "y", "heading", "speed")):
            assert tr.poses[..., k].tobytes() == np.ascontiguousarray(st[key][:, sl]).tobytes()
        ref = log_trace(sc)
        assert np.array_equal(tr.collided, ref.collided)
        assert np.array_equal(tr.offroad, ref.offroad)


def test_collect_rollouts_worker_count_invariant(suite, vocab, small_policy, small_reference):
    kw = dict(sim_config=SimConfig(horizon_steps=20), reward_config=RewardConfig(), ppo_config=PpoConfig(), seed=5)
    a = collect_rollouts(small_policy, small_reference, suite[:4], vocab, workers=1, **kw)
    b = collect_rollouts(small_policy, small_reference, suite[:4], vocab, workers=8, **kw)
    for f in ("actions", "logp", "values", "ref_logp", "collided", "offroad", "goal", "dones", "traj", "tstep"):
        assert np.array_equal(getattr(a, f), getattr(b, f)), f
    assert np.array_equal(a.obs.flat(), b.obs.flat())


def test_ego_frame_observations_invariant_under_rigid_motion(suite, vocab):
    rng = np.random.default_rng(0)
    for sc in suite[:3]:
        tx, ty, rot = rng.uniform(-200, 200), rng.uniform(-200, 200), rng.uniform(-math.pi, math.pi)
        sc2 = transformed(sc, tx, ty, rot)
        w1, w2 = reset(sc), reset(sc2)
        ids = np.flatnonzero(sc.controlled)
        for _ in range(5):
            for ctx in (False, True):
                o1 = build_observations(w1, sc, ids, None, SimConfig(), context=ctx)
                o2 = build_observations(w2, sc2, ids, None, SimConfig(), context=ctx)
                assert np.max(np.abs(o1.flat() - o2.flat())) <= 1e-9
            acts = {int(a): int(rng.integers(vocab.K)) for a in ids}
            w1, e1 = step(w1, acts, vocab, sc)
            w2, e2 = step(w2, acts, vocab, sc2)
            assert np.array_equal(e1.collided, e2.collided)


def test_step_rejects_bad_input(suite, vocab):
    sc = suite[0]
    w = reset(sc)
    ids = np.flatnonzero(sc.controlled)
    with pytest.raises(SimError):
        step(w, {}, vocab, sc)
    with pytest.raises(SimError):
        step(w, {int(a): vocab.K for a in ids}, vocab, sc)
    with pytest.raises(SimError):
        step(w, {int(a): 0 for a in ids} | {999: 0}, vocab, sc)


def test_zero_tokens_hold_position(suite, vocab):
    sc = suite[1]
    w = reset(sc)
    ids = np.flatnonzero(sc.controlled)
    w2, ev = step(w, {int(a): 0 for a in ids}, vocab, sc)
    assert np.array_equal(w2.x[ids], w.x[ids])
    assert np.all(w2.speed[ids] == 0)
    assert w2.step == w.step + 2


def test_episode_ends_and_raises(suite, vocab):
    sc = suite[0]
    cfg = SimConfig(horizon_steps=4)
    w = reset(sc, cfg)
    ids = np.flatnonzero(sc.controlled)
    for _ in range(2):
        w, _ = step(w, {int(a): 0 for a in ids}, vocab, sc, cfg)
    assert w.finished and w.done.all()
    with pytest.raises(SimError):
        step(w, {}, vocab, sc, cfg)


def test_observation_shapes_and_bounds(suite):
    sc = suite[2]
    w = reset(sc)
    ids = np.flatnonzero(sc.controlled)
    for ctx in (False, True):
        o = build_observations(w, sc, ids, None, SimConfig(), context=ctx)
        d = obs_dims(SimConfig(), ctx)
        assert o.partners.shape == (len(ids), d["M"], d["partner"])
        assert o.road.shape == (len(ids), d["R"], d["road"])
        assert np.all(np.abs(o.flat()) <= 1.0)
    o = build_observations(w, sc, ids, np.ones(len(ids), bool), SimConfig())
    assert np.all(o.ego[:, 1:4] == 0)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(horizon_steps=81)
    with pytest.raises(ValueError):
        SimConfig(policy_every=0)
