"""Distributional realism scoring: per-feature NLL of logged values under rollout histograms,
exponential aggregation, minADE and infraction rates."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .nn import CategoricalDist
from .policy import LateFusionNet
from .scenario import Scenario, offroad_mask
from .sim import SimConfig, WorldState, agent_events, build_observations, reset, step
from .tokenizer import TokenVocab

CATEGORIES = ("kinematic", "interactive", "map")
EXTRACTORS = ("speed", "accel_mag", "yaw_rate", "nearest_agent_dist", "collision_flag", "dist_to_road_edge", "offroad_flag")
NEAREST_CAP = 50.0  # nearest-agent distance when no other agent is present
EDGE_CAP = 20.0


class MetricsError(ValueError):
    pass


# ------------------------------------------------------------- controllers

@dataclass
class NetController:
    """Samples (or argmaxes) tokens from a network for a set of agents."""

    net: LateFusionNet
    vocab: TokenVocab
    config: SimConfig = field(default_factory=SimConfig)
    inputs: str | None = None  # "obs" | "context"; default follows the architecture
    greedy: bool = False

    def __post_init__(self):
        if self.net.arch.K != self.vocab.K:
            raise MetricsError(f"network K={self.net.arch.K} does not match vocabulary K={self.vocab.K}")
        if self.inputs is None:
            self.inputs = "context" if self.net.arch.name == "reference" else "obs"

    def act(self, world: WorldState, scenario: Scenario, ids, rng: np.random.Generator) -> dict:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            return {}
        ctx = self.inputs == "context"
        obs = build_observations(world, scenario, ids, None, self.config, context=ctx)
        dist = CategoricalDist(self.net.forward(obs, critic=False)[0])
        u = rng.random(ids.size)  # drawn even when greedy so streams stay aligned
        tok = dist.mode() if self.greedy else dist.sample(None, u=u)
        return {int(a): int(k) for a, k in zip(ids, tok)}


@dataclass
class EpisodeTrace:
    poses: np.ndarray  # (N, T, 4) x, y, heading, speed from init_step to the last simulated step
    active: np.ndarray  # (N, T)
    collided: np.ndarray  # (N, T)
    offroad: np.ndarray
    goal: np.ndarray


def run_episode(
    scenario: Scenario,
    vocab: TokenVocab | None,
    config: SimConfig,
    token_policy: Callable | None,
    rng: np.random.Generator,
    ego_planner: Callable | None = None,
    ego: int | None = None,
) -> EpisodeTrace:
    """Closed-loop episode. ``token_policy(world, scenario, ids, rng) -> {agent: token}`` drives the controlled
    agents; an optional ``ego_planner(world, scenario, ego) -> (policy_every, 4) poses`` drives ``ego``."""
    world = reset(scenario, config)
    N = scenario.n_agents
    T = world.end_step - world.step + 1
    poses = np.zeros((N, T, 4))
    active = np.zeros((N, T), dtype=bool)
    col = np.zeros((N, T), dtype=bool)
    off = np.zeros((N, T), dtype=bool)
    goal = np.zeros((N, T), dtype=bool)
    poses[:, 0] = np.stack([world.x, world.y, world.heading, world.speed], axis=1)
    active[:, 0] = world.active
    c0, o0, g0 = agent_events(world.x, world.y, world.heading, world.active, scenario)
    col[:, 0], off[:, 0], goal[:, 0] = c0, o0, g0
    k = 1
    while not world.finished:
        movers = np.flatnonzero(scenario.controlled & world.active & ~world.done)
        ego_poses = {}
        if ego is not None and ego_planner is not None and ego in movers:
            ego_poses[int(ego)] = ego_planner(world, scenario, int(ego))
            movers = movers[movers != ego]
        actions = token_policy(world, scenario, movers, rng) if (token_policy and movers.size) else {}
        world, ev = step(world, actions, vocab, scenario, config, ego_poses)
        P = ev.poses.shape[0]
        poses[:, k : k + P] = ev.poses.transpose(1, 0, 2)
        active[:, k : k + P] = ev.active_sub.T
        col[:, k : k + P] = ev.collided_sub.T
        off[:, k : k + P] = ev.offroad_sub.T
        goal[:, k : k + P] = ev.goal_sub.T
        k += P
    return EpisodeTrace(poses[:, :k], active[:, :k], col[:, :k], off[:, :k], goal[:, :k])


def trace_rows(scenario: Scenario, trace: EpisodeTrace) -> list:
    """Per-sim-step CSV rows (scenario_id, step, agent_id, x, y, heading, speed, collided, offroad, goal)."""
    rows = []
    N, T = trace.active.shape
    for k in range(T):
        for a in range(N):
            p = trace.poses[a, k]
            rows.append(
                [scenario.id, scenario.init_step + k, a, repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(p[3])),
                 int(trace.collided[a, k]), int(trace.offroad[a, k]), int(trace.goal[a, k])]
            )
    return rows


def log_trace(scenario: Scenario, config: SimConfig = SimConfig()) -> EpisodeTrace:
    """Ground-truth trace over the same window a simulated episode covers."""
    st = scenario.stacked()
    t0 = scenario.init_step
    t1 = t0 + min(config.horizon_steps, scenario.horizon_steps)
    sl = slice(t0, t1 + 1)
    poses = np.stack([st["x"][:, sl], st["y"][:, sl], st["heading"][:, sl], st["speed"][:, sl]], axis=2)
    active = st["valid"][:, sl].copy()
    T = active.shape[1]
    col = np.zeros_like(active)
    off = np.zeros_like(active)
    goal = np.zeros_like(active)
    for k in range(T):
        c, o, g = agent_events(poses[:, k, 0], poses[:, k, 1], poses[:, k, 2], active[:, k], scenario)
        col[:, k], off[:, k], goal[:, k] = c, o, g
    return EpisodeTrace(poses, active, col, off, goal)


# -------------------------------------------------------------- rollouts

@dataclass(eq=False)
class RolloutSet:
    scenario_id: str
    seeds: tuple
    poses: np.ndarray  # (S, N, T, 4)
    active: np.ndarray  # (S, N, T)
    collided: np.ndarray
    offroad: np.ndarray
    goal: np.ndarray
    targets: np.ndarray  # controlled agent ids

    def __post_init__(self):
        if self.poses.shape[0] < 2:
            raise MetricsError("a rollout set needs S >= 2")

    @property
    def S(self) -> int:
        return int(self.poses.shape[0])

    @property
    def T(self) -> int:
        return int(self.poses.shape[2])

    def __eq__(self, other):
        return (
            isinstance(other, RolloutSet)
            and self.seeds == other.seeds
            and all(
                np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("poses", "active", "collided", "offroad", "goal", "targets")
            )
        )

    @classmethod
    def from_traces(cls, scenario_id: str, seeds, traces: Sequence[EpisodeTrace], targets) -> "RolloutSet":
        return cls(
            scenario_id,
            tuple(int(s) for s in seeds),
            np.stack([t.poses for t in traces]),
            np.stack([t.active for t in traces]),
            np.stack([t.collided for t in traces]),
            np.stack([t.offroad for t in traces]),
            np.stack([t.goal for t in traces]),
            np.asarray(targets, dtype=np.int64),
        )


def simulate_rollout_set(
    net: LateFusionNet,
    scenario: Scenario,
    S: int = 32,
    seeds: Sequence[int] | None = None,
    vocab: TokenVocab | None = None,
    config: SimConfig = SimConfig(),
    greedy: bool = False,
    inputs: str | None = None,
) -> RolloutSet:
    """S closed-loop rollouts of all controlled agents, one distinct seed each."""
    if vocab is None:
        raise MetricsError("vocabulary required")
    seeds = list(range(S)) if seeds is None else [int(s) for s in seeds]
    if len(seeds) != S:
        raise MetricsError(f"expected {S} seeds, got {len(seeds)}")
    if S < 2:
        raise MetricsError("S must be >= 2")
    if len(set(seeds)) != len(seeds):
        raise MetricsError("rollout seeds must be distinct")
    ctl = NetController(net, vocab, config, inputs, greedy)
    traces = [run_episode(scenario, vocab, config, ctl.act, np.random.default_rng(s)) for s in seeds]
    return RolloutSet.from_traces(scenario.id, seeds, traces, np.flatnonzero(scenario.controlled))


# --------------------------------------------------------------- features

@dataclass(frozen=True)
class FeatureSpec:
    name: str
    extractor: str
    category: str
    bins: tuple
    epsilon: float = 1e-3

    def __post_init__(self):
        if self.extractor not in EXTRACTORS:
            raise MetricsError(f"unknown extractor {self.extractor!r}")
        if self.category not in CATEGORIES:
            raise MetricsError(f"unknown category {self.category!r}")
        b = np.asarray(self.bins, dtype=np.float64)
        if b.ndim != 1 or b.size < 2 or not np.all(np.diff(b) > 0):
            raise MetricsError(f"{self.name}: bins must be strictly increasing with >= 2 edges")
        if not self.epsilon > 0:
            raise MetricsError(f"{self.name}: epsilon must be > 0")
        object.__setattr__(self, "bins", tuple(float(v) for v in b))

    @property
    def n_bins(self) -> int:
        return len(self.bins) - 1


def _edges(lo, hi, n):
    return tuple(np.linspace(lo, hi, n + 1).tolist())


def default_feature_specs(epsilon: float = 1e-3) -> list[FeatureSpec]:
    return [
        FeatureSpec("speed", "speed", "kinematic", _edges(0, 30, 20), epsilon),
        FeatureSpec("accel", "accel_mag", "kinematic", _edges(-8, 8, 16), epsilon),
        FeatureSpec("yaw_rate", "yaw_rate", "kinematic", _edges(-1, 1, 16), epsilon),
        FeatureSpec("nearest_agent_dist", "nearest_agent_dist", "interactive", _edges(0, 50, 20), epsilon),
        FeatureSpec("collision", "collision_flag", "interactive", (0.0, 0.5, 1.0), epsilon),
        FeatureSpec("dist_to_road_edge", "dist_to_road_edge", "map", _edges(0, 20, 20), epsilon),
        FeatureSpec("offroad", "offroad_flag", "map", (0.0, 0.5, 1.0), epsilon),
    ]


def extract_feature(
    extractor: str, poses: np.ndarray, active: np.ndarray, collided, offroad, scenario: Scenario, dt: float, targets
):
    """Feature values (n_targets, T) and validity for one trace."""
    tg = np.asarray(targets, dtype=np.int64)
    T = poses.shape[1]
    x, y, h, v = (poses[..., i] for i in range(4))
    valid = active[tg].copy()
    if extractor == "speed":
        val = v[tg]
    elif extractor == "accel_mag":
        val = np.zeros((tg.size, T))
        val[:, 1:] = np.diff(v[tg], axis=1) / dt
        valid[:, 1:] &= active[tg, :-1]
        valid[:, 0] = False
    elif extractor == "yaw_rate":
        val = np.zeros((tg.size, T))
        val[:, 1:] = kernels.wrap_angle(np.diff(h[tg], axis=1)) / dt
        valid[:, 1:] &= active[tg, :-1]
        valid[:, 0] = False
    elif extractor == "nearest_agent_dist":
        dx = x[tg][:, None, :] - x[None, :, :]
        dy = y[tg][:, None, :] - y[None, :, :]
        d = np.hypot(dx, dy)
        other = active[None, :, :] & (np.arange(x.shape[0])[None, :, None] != tg[:, None, None])
        d = np.where(other, d, np.inf)
        val = np.minimum(d.min(axis=1), NEAREST_CAP)
    elif extractor == "collision_flag":
        val = collided[tg].astype(np.float64)
    elif extractor == "offroad_flag":
        val = offroad[tg].astype(np.float64)
    elif extractor == "dist_to_road_edge":
        segs = scenario.road_graph.edge_segments()
        px, py = x[tg].ravel(), y[tg].ravel()
        if len(segs):
            val = kernels.min_segment_distance(px, py, segs).reshape(tg.size, T)
        else:
            val = np.full((tg.size, T), EDGE_CAP)
        val = np.minimum(val, EDGE_CAP)
    else:
        raise MetricsError(f"unknown extractor {extractor!r}")
    return np.asarray(val, dtype=np.float64), valid


def bin_index(values: np.ndarray, bins) -> tuple[np.ndarray, np.ndarray]:
    """Bin ids for ``values`` with out-of-range values clamped into the end bins; returns (ids, clamped)."""
    b = np.asarray(bins)
    idx = np.searchsorted(b, values, side="right") - 1
    clamped = (values < b[0]) | (values > b[-1])
    idx = np.clip(idx, 0, b.size - 2)
    return idx, clamped


def smoothed_histogram(values: np.ndarray, bins, epsilon: float) -> np.ndarray:
    """(c_b / S + eps) / (1 + B * eps) over the last axis of ``values``; NaN entries are ignored."""
    B = len(bins) - 1
    idx, _ = bin_index(values, bins)
    ok = ~np.isnan(values)
    lead = values.shape[:-1]
    counts = np.zeros(lead + (B,))
    flat_c = counts.reshape(-1, B)
    flat_i = idx.reshape(-1, values.shape[-1])
    flat_ok = ok.reshape(-1, values.shape[-1])
    for r in range(flat_c.shape[0]):
        flat_c[r] = np.bincount(flat_i[r][flat_ok[r]], minlength=B)
    n = flat_ok.sum(axis=1).reshape(lead + (1,))
    frac = np.divide(counts, n, out=np.zeros_like(counts), where=n > 0)
    return (frac + epsilon) / (1.0 + B * epsilon)


# ---------------------------------------------------------------- report

@dataclass
class RealismReport:
    scenario_id: str
    agent_scores: dict  # (agent, feature) -> m(a, j)
    feature_scores: dict  # feature -> m(j)
    category_scores: dict
    composite: float
    min_ade: float
    collision_rate: float
    offroad_rate: float
    goal_rate: float
    clamped: dict = field(default_factory=dict)  # feature -> count of clamped GT values
    excluded_agents: list = field(default_factory=list)
    feature_category: dict = field(default_factory=dict)

    def rows(self):
        out = [(self.scenario_id, f, self.feature_category.get(f, ""), s) for f, s in self.feature_scores.items()]
        out += [(self.scenario_id, c, c, s) for c, s in self.category_scores.items()]
        out.append((self.scenario_id, "composite", "summary", self.composite))
        out.append((self.scenario_id, "min_ade", "summary", self.min_ade))
        out.append((self.scenario_id, "collision_rate", "summary", self.collision_rate))
        out.append((self.scenario_id, "offroad_rate", "summary", self.offroad_rate))
        return out

    def to_dict(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "agent_scores": [{"agent": int(a), "feature": f, "score": s} for (a, f), s in sorted(self.agent_scores.items())],
            "feature_scores": self.feature_scores,
            "category_scores": self.category_scores,
            "composite": self.composite,
            "min_ade": self.min_ade,
            "collision_rate": self.collision_rate,
            "offroad_rate": self.offroad_rate,
            "goal_rate": self.goal_rate,
            "clamped": self.clamped,
            "excluded_agents": [int(a) for a in self.excluded_agents],
        }


def realism_score(
    rollouts: RolloutSet,
    gt: Scenario,
    specs: Sequence[FeatureSpec] | None = None,
    config: SimConfig = SimConfig(),
) -> RealismReport:
    specs = default_feature_specs() if specs is None else list(specs)
    if not specs:
        raise MetricsError("no feature specs")
    ref = log_trace(gt, config)
    if ref.poses.shape[1] != rollouts.T:
        raise MetricsError(f"horizon mismatch: rollouts T={rollouts.T}, ground truth T={ref.poses.shape[1]}")
    tg = rollouts.targets
    S = rollouts.S
    agent_scores, feature_scores, clamped, cat_of = {}, {}, {}, {}
    for spec in specs:
        gv, gvalid = extract_feature(spec.extractor, ref.poses, ref.active, ref.collided, ref.offroad, gt, config.dt, tg)
        sv = np.full((tg.size, rollouts.T, S), np.nan)
        for s in range(S):
            v, ok = extract_feature(
                spec.extractor, rollouts.poses[s], rollouts.active[s], rollouts.collided[s], rollouts.offroad[s], gt, config.dt, tg
            )
            sv[..., s] = np.where(ok, v, np.nan)
        # only future steps are scored; the initial state is shared by every rollout
        use = gvalid.copy()
        use[:, 0] = False
        use &= ~np.all(np.isnan(sv), axis=2)
        p = smoothed_histogram(sv, spec.bins, spec.epsilon)
        gidx, gcl = bin_index(gv, spec.bins)
        clamped[spec.name] = int((gcl & use).sum())
        pg = np.take_along_axis(p, gidx[..., None], axis=2)[..., 0]
        nll = -np.log(pg)
        per_agent = []
        for i, a in enumerate(tg):
            n = int(use[i].sum())
            if n == 0:
                continue
            m = math.exp(-float(nll[i][use[i]].mean()))
            agent_scores[(int(a), spec.name)] = m
            per_agent.append(m)
        feature_scores[spec.name] = float(np.mean(per_agent)) if per_agent else float("nan")
        cat_of[spec.name] = spec.category
    category_scores = {}
    for c in CATEGORIES:
        vals = [feature_scores[f] for f in feature_scores if cat_of[f] == c and not math.isnan(feature_scores[f])]
        if vals:
            category_scores[c] = float(np.mean(vals))
    composite = float(np.mean(list(category_scores.values()))) if category_scores else float("nan")
    ade, excluded = _min_ade(rollouts, ref)
    col, off, goal = infraction_rates(rollouts)
    return RealismReport(gt.id, agent_scores, feature_scores, category_scores, composite, ade, col, off, goal, clamped, excluded, cat_of)


def _min_ade(rollouts: RolloutSet, ref: EpisodeTrace):
    tg = rollouts.targets
    vals, excluded = [], []
    for a in tg:
        valid = ref.active[a].copy()
        valid[0] = False
        if not valid.any():
            excluded.append(int(a))
            continue
        d = np.hypot(rollouts.poses[:, a, :, 0] - ref.poses[a, :, 0], rollouts.poses[:, a, :, 1] - ref.poses[a, :, 1])
        vals.append(float(d[:, valid].mean(axis=1).min()))
    return (float(np.mean(vals)) if vals else float("nan")), excluded


def min_ade(rollouts: RolloutSet, gt: Scenario, config: SimConfig = SimConfig()) -> float:
    """Mean over target agents of min over rollouts of the average displacement over valid future steps."""
    ref = log_trace(gt, config)
    if ref.poses.shape[1] != rollouts.T:
        raise MetricsError("horizon mismatch")
    return _min_ade(rollouts, ref)[0]


def infraction_rates(rollouts: RolloutSet) -> tuple[float, float, float]:
    """Fractions of (agent, rollout) pairs with at least one collision / offroad step / goal arrival."""
    tg = rollouts.targets
    if tg.size == 0:
        return 0.0, 0.0, 0.0
    col = rollouts.collided[:, tg].any(axis=2)
    off = rollouts.offroad[:, tg].any(axis=2)
    goal = rollouts.goal[:, tg].any(axis=2)
    return float(col.mean()), float(off.mean()), float(goal.mean())


# ---------------------------------------------------------------- output

def aggregate_reports(reports: Sequence[RealismReport]) -> dict:
    keys = ("composite", "min_ade", "collision_rate", "offroad_rate", "goal_rate")
    out = {k: float(np.nanmean([getattr(r, k) for r in reports])) for k in keys}
    cats = {}
    for c in CATEGORIES:
        v = [r.category_scores[c] for r in reports if c in r.category_scores]
        if v:
            cats[c] = float(np.mean(v))
    out["category_scores"] = cats
    out["n_scenarios"] = len(reports)
    return out


def write_realism_csv(reports: Sequence[RealismReport], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scenario_id", "feature", "category", "score"])
        for r in reports:
            for row in r.rows():
                w.writerow([row[0], row[1], row[2], repr(float(row[3]))])
        agg = aggregate_reports(reports)
        for k in ("composite", "min_ade", "collision_rate", "offroad_rate", "goal_rate"):
            w.writerow(["ALL", k, "summary", repr(agg[k])])


def write_realism_json(reports: Sequence[RealismReport], path) -> None:
    with open(path, "w") as f:
        json.dump({"summary": aggregate_reports(reports), "scenarios": [r.to_dict() for r in reports]}, f, indent=1)
