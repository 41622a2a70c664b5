"""Rule-based ego planners (IDM car following with pure-pursuit steering, Frenet polynomial
sampling) and a PDM-style closed-loop score."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import kernels
from .kernels import wrap_angle
from .scenario import DT, Scenario, lane_projection, polyline_point_at
from .sim import WorldState

WHEELBASE = 2.8
LOOKAHEAD = 5.0
MAX_BRAKE = 8.0
LANE_HALF_WIDTH = 1.75


class PlannerError(ValueError):
    pass


# ------------------------------------------------------------------ params

@dataclass(frozen=True)
class IdmParams:
    v0: float = 30.0
    s0: float = 2.0
    T: float = 1.5
    a_max: float = 2.0
    b_comf: float = 3.0
    delta: float = 4.0
    aggressiveness: float = 0.5
    perception_range: float = 50.0
    safety_factor: float = 1.0
    max_jerk: float | None = None
    length: float | None = None  # overrides the ego length used for gap computation
    reaction_time: float = 0.0
    ttc_threshold: float | None = None

    def __post_init__(self):
        for k in ("v0", "s0", "T", "a_max", "b_comf", "delta", "perception_range", "safety_factor"):
            if not getattr(self, k) > 0:
                raise PlannerError(f"IdmParams.{k} must be > 0")
        if not 0.0 <= self.aggressiveness <= 1.0:
            raise PlannerError("aggressiveness must be in [0, 1]")
        if self.reaction_time < 0:
            raise PlannerError("reaction_time must be >= 0")

    @property
    def effective_a_max(self) -> float:
        return self.a_max * (0.5 + self.aggressiveness)

    @property
    def effective_T(self) -> float:
        return self.T * (1.5 - self.aggressiveness)


@dataclass(frozen=True)
class FrenetParams:
    w_lateral: float = 10.0
    w_velocity: float = 1.0
    w_acceleration: float = 1.0
    w_progress: float = 1.0
    w_jerk: float = 0.5
    collision_penalty: float = 1000.0
    n_d: int = 15
    n_v: int = 7
    n_t: int = 5
    lateral_span: float = 3.5
    velocity_span: float = 10.0
    horizon_steps: int = 30
    speed_min: float = 0.0
    speed_max: float = 30.0

    def __post_init__(self):
        for k in ("w_lateral", "w_velocity", "w_acceleration", "w_progress", "w_jerk", "collision_penalty"):
            if getattr(self, k) < 0:
                raise PlannerError(f"FrenetParams.{k} must be >= 0")
        for k in ("n_d", "n_v", "n_t", "horizon_steps"):
            if getattr(self, k) < 1:
                raise PlannerError(f"FrenetParams.{k} must be >= 1")
        if not self.speed_max > self.speed_min >= 0:
            raise PlannerError("need 0 <= speed_min < speed_max")

    @property
    def v_desired(self) -> float:
        return self.speed_max


@dataclass(frozen=True)
class PdmWeights:
    progress: float = 5.0
    ttc: float = 5.0
    comfort: float = 2.0
    ttc_threshold: float = 1.5
    max_accel: float = 4.0
    max_jerk: float = 10.0

    def __post_init__(self):
        if not (self.progress > 0 and self.ttc > 0 and self.comfort > 0):
            raise PlannerError("soft weights must be > 0")


# ----------------------------------------------------------------- presets

IDM_PRESETS = {
    "IDM Baseline": IdmParams(v0=30, s0=2.0, T=1.5, a_max=2.0, b_comf=3.0, aggressiveness=0.5),
    "IDM Conservative": IdmParams(v0=25, s0=3.0, T=2.0, a_max=1.5, b_comf=2.0, aggressiveness=0.2, safety_factor=1.5),
    "IDM Aggressive": IdmParams(v0=35, s0=1.5, T=1.0, a_max=3.0, b_comf=4.0, aggressiveness=0.8, safety_factor=0.9),
    "IDM Comfort": IdmParams(v0=28, s0=2.5, T=1.8, a_max=1.5, b_comf=2.0, aggressiveness=0.3, max_jerk=2.0),
    "IDM Highway": IdmParams(v0=40, s0=3.0, T=1.2, aggressiveness=0.6, perception_range=100.0),
    "IDM City": IdmParams(v0=15, s0=2.0, T=1.5, aggressiveness=0.4, perception_range=30.0),
    "IDM Truck": IdmParams(v0=25, s0=4.0, T=2.0, aggressiveness=0.3, length=8.0),
    "IDM Emergency": IdmParams(v0=40, s0=1.5, T=0.8, a_max=4.0, aggressiveness=0.9),
    "IDM Adaptive": IdmParams(v0=30, s0=2.5, T=1.5, aggressiveness=0.5, reaction_time=0.2),
    "IDM Defensive": IdmParams(v0=25, s0=4.0, T=2.5, aggressiveness=0.1, ttc_threshold=3.0),
}

FRENET_PRESETS = {
    "Baseline": FrenetParams(),
    "Aggressive": FrenetParams(w_lateral=5.0, w_velocity=0.5, w_progress=2.0, speed_max=35.0, collision_penalty=500.0),
    "Conservative": FrenetParams(w_lateral=50.0, w_acceleration=3.0, w_jerk=1.5, speed_max=20.0, collision_penalty=5000.0),
    "Smooth Rider": FrenetParams(w_lateral=20.0, w_velocity=2.0, w_acceleration=5.0, w_jerk=3.0),
    "Lane Keeper": FrenetParams(w_lateral=100.0, lateral_span=1.5),
    "Wide Search": FrenetParams(n_d=20, n_v=10, n_t=7),
    "Fast Planner": FrenetParams(n_d=5, n_v=3, n_t=2, horizon_steps=20),
    "Long Horizon": FrenetParams(horizon_steps=40),
    "No Collision": FrenetParams(collision_penalty=0.0),
    "High Speed": FrenetParams(speed_min=5.0, speed_max=40.0, velocity_span=15.0),
}


def presets_to_dict() -> dict:
    out = {}
    for name, p in IDM_PRESETS.items():
        out[name] = {"family": "idm", **asdict(p)}
    for name, p in FRENET_PRESETS.items():
        out[f"Frenet {name}"] = {"family": "frenet", **asdict(p)}
    return out


def write_presets(path) -> None:
    Path(path).write_text(json.dumps(presets_to_dict(), indent=1))


def load_presets(path) -> dict:
    """name -> IdmParams | FrenetParams; unknown fields are rejected."""
    raw = json.loads(Path(path).read_text())
    out = {}
    for name, d in raw.items():
        d = dict(d)
        fam = d.pop("family", None)
        cls = {"idm": IdmParams, "frenet": FrenetParams}.get(fam)
        if cls is None:
            raise PlannerError(f"{name}: unknown planner family {fam!r}")
        bad = set(d) - {f.name for f in fields(cls)}
        if bad:
            raise PlannerError(f"{name}: unknown fields {sorted(bad)}")
        out[name] = cls(**d)
    return out


# ------------------------------------------------------------------- route

def ego_route(scenario: Scenario, ego: int) -> np.ndarray:
    """Lane centerline best matching the ego's initial pose (lateral offset plus heading mismatch)."""
    lanes = scenario.road_graph.lane_centerlines
    if not lanes:
        raise PlannerError("scenario has no lane centerlines")
    st = scenario.stacked()
    t = scenario.init_step
    x, y, h = st["x"][ego, t], st["y"][ego, t], st["heading"][ego, t]
    best, best_cost = None, math.inf
    for i, lane in enumerate(lanes):
        if len(lane) < 2:
            continue
        s, lat, tan, _ = lane_projection(lane, x, y)
        cost = abs(float(lat[0])) + 10.0 * abs(float(wrap_angle(h - tan[0])))
        if cost < best_cost:
            best, best_cost = i, cost
    if best is None:
        raise PlannerError("no usable lane for the ego")
    return np.asarray(lanes[best], dtype=np.float64)


# --------------------------------------------------------------------- IDM

def idm_acceleration(v, v0, gap, dv, p: IdmParams) -> float:
    """IDM law with the aggressiveness scaling applied; ``gap=None`` means free road."""
    a = p.effective_a_max
    free = 1.0 - (v / v0) ** p.delta
    if gap is None:
        return a * free
    s_star = p.s0 + v * p.effective_T + v * dv / (2.0 * math.sqrt(a * p.b_comf))
    s_star = p.safety_factor * max(s_star, p.s0) + v * p.reaction_time
    return a * (free - (s_star / max(gap, 1e-3)) ** 2)


def find_leader(world: WorldState, scenario: Scenario, ego: int, route: np.ndarray, perception_range: float, ego_length=None):
    """(gap, leader speed along the route) of the nearest active agent ahead on the route, or None."""
    st = scenario.stacked()
    s_e, _, _, _ = lane_projection(route, world.x[ego], world.y[ego])
    others = np.flatnonzero(world.active & (np.arange(world.x.shape[0]) != ego))
    if others.size == 0:
        return None
    s_o, lat_o, tan_o, _ = lane_projection(route, world.x[others], world.y[others])
    ahead = (s_o > s_e[0]) & (np.abs(lat_o) <= LANE_HALF_WIDTH + 0.5 * st["width"][others])
    L_e = st["length"][ego] if ego_length is None else ego_length
    gap = s_o - s_e[0] - 0.5 * (L_e + st["length"][others])
    ahead &= (s_o - s_e[0]) <= perception_range
    if not ahead.any():
        return None
    j = np.flatnonzero(ahead)[np.argmin(gap[ahead])]
    v_l = world.speed[others[j]] * math.cos(world.heading[others[j]] - tan_o[j])
    return float(gap[j]), float(v_l)


def pure_pursuit_heading_rate(x, y, h, v, route: np.ndarray, lookahead: float = LOOKAHEAD) -> float:
    s, _, _, _ = lane_projection(route, x, y)
    tx, ty, _ = polyline_point_at(route, s[0] + lookahead)
    alpha = math.atan2(float(ty) - y, float(tx) - x) - h
    alpha = float(wrap_angle(alpha))
    ld = math.hypot(float(tx) - x, float(ty) - y)
    kappa = 2.0 * math.sin(alpha) / max(ld, 1e-6)
    return v * kappa


def idm_plan(world: WorldState, scenario: Scenario, ego: int, params: IdmParams, route: np.ndarray,
             n_steps: int = 2, prev_accel: float | None = None, dt: float = DT) -> np.ndarray:
    """(n_steps, 4) poses from IDM longitudinal control and pure-pursuit steering, leader held at constant speed."""
    if route is None or len(route) < 2:
        raise PlannerError("empty route")
    x, y, h, v = float(world.x[ego]), float(world.y[ego]), float(world.heading[ego]), float(world.speed[ego])
    lead = find_leader(world, scenario, ego, route, params.perception_range, params.length)
    a_prev = prev_accel
    out = np.zeros((n_steps, 4))
    for k in range(n_steps):
        if lead is None:
            acc = idm_acceleration(v, params.v0, None, 0.0, params)
        else:
            gap, v_l = lead
            acc = idm_acceleration(v, params.v0, gap, v - v_l, params)
            closing = v - v_l
            if params.ttc_threshold is not None and closing > 0 and gap / closing < params.ttc_threshold:
                acc = -2.0 * params.b_comf
        acc = min(max(acc, -2.0 * params.b_comf), params.effective_a_max)
        if params.max_jerk is not None and a_prev is not None:
            lim = params.max_jerk * dt
            acc = min(max(acc, a_prev - lim), a_prev + lim)
        a_prev = acc
        yaw_rate = pure_pursuit_heading_rate(x, y, h, v, route)
        v_new = max(0.0, v + acc * dt)
        v_mid = 0.5 * (v + v_new)
        h = float(wrap_angle(h + yaw_rate * dt))
        x += v_mid * math.cos(h) * dt
        y += v_mid * math.sin(h) * dt
        v = v_new
        if lead is not None:
            gap, v_l = lead
            lead = (gap + (v_l - v_mid) * dt, v_l)
        out[k] = (x, y, h, v)
    return out


class IdmPlanner:
    """Stateful wrapper that carries the last commanded acceleration (for the jerk limit)."""

    def __init__(self, params: IdmParams, route: np.ndarray):
        self.params = params
        self.route = route
        self.prev_accel = None

    def __call__(self, world: WorldState, scenario: Scenario, ego: int, n_steps: int = 2) -> np.ndarray:
        v0 = float(world.speed[ego])
        plan = idm_plan(world, scenario, ego, self.params, self.route, n_steps, self.prev_accel)
        self.prev_accel = (plan[-1, 3] - (plan[-2, 3] if n_steps > 1 else v0)) / DT
        return plan


# ------------------------------------------------------------------ Frenet

def quintic_coeffs(d0, d0p, d0pp, d1, d1p, d1pp, T):
    """Coefficients c0..c5 of d(t) meeting position/velocity/acceleration at t=0 and t=T (vectorized)."""
    d0, d0p, d0pp, d1, d1p, d1pp, T = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (d0, d0p, d0pp, d1, d1p, d1pp, T)))
    c0, c1, c2 = d0, d0p, 0.5 * d0pp
    T2, T3, T4, T5 = T**2, T**3, T**4, T**5
    r1 = d1 - (c0 + c1 * T + c2 * T2)
    r2 = d1p - (c1 + 2 * c2 * T)
    r3 = d1pp - 2 * c2
    c3 = (10 * r1 - 4 * r2 * T + 0.5 * r3 * T2) / T3
    c4 = (-15 * r1 + 7 * r2 * T - r3 * T2) / T4
    c5 = (6 * r1 - 3 * r2 * T + 0.5 * r3 * T2) / T5
    return np.stack([c0, c1, c2, c3, c4, c5], axis=-1)


def quartic_coeffs(s0, s0p, s0pp, v1, a1, T):
    """Coefficients c0..c4 of s(t) with s, s', s'' at 0 and s'=v1, s''=a1 at T."""
    s0, s0p, s0pp, v1, a1, T = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (s0, s0p, s0pp, v1, a1, T)))
    c0, c1, c2 = s0, s0p, 0.5 * s0pp
    T2, T3 = T**2, T**3
    r1 = v1 - (c1 + 2 * c2 * T)
    r2 = a1 - 2 * c2
    c3 = (3 * r1 - r2 * T) / (3 * T2)
    c4 = (-2 * r1 + r2 * T) / (4 * T3)
    return np.stack([c0, c1, c2, c3, c4, np.zeros_like(c0)], axis=-1)


def poly_eval(c: np.ndarray, t: np.ndarray, der: int = 0) -> np.ndarray:
    """Evaluate polynomials with coefficients c (..., 6) at times t (..., n) (derivative order ``der``)."""
    c = np.asarray(c)
    out = np.zeros(np.broadcast_shapes(c.shape[:-1] + (1,), t.shape))
    for i in range(der, c.shape[-1]):
        f = math.factorial(i) / math.factorial(i - der)
        out = out + f * c[..., i : i + 1] * t ** (i - der)
    return out


def _profiles(c, T, t):
    """Position/vel/acc/jerk on grid t; beyond T the end state is held (constant velocity, zero acc)."""
    Tm = T[..., None]
    tc = np.minimum(t, Tm)
    p = poly_eval(c, tc)
    v = poly_eval(c, tc, 1)
    a = poly_eval(c, tc, 2)
    j = poly_eval(c, tc, 3)
    beyond = t > Tm
    p = np.where(beyond, p + v * (t - Tm), p)
    a = np.where(beyond, 0.0, a)
    j = np.where(beyond, 0.0, j)
    return p, v, a, j


@dataclass
class FrenetCandidates:
    x: np.ndarray  # (C, n)
    y: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    d: np.ndarray
    s: np.ndarray
    cost: np.ndarray  # without the collision term
    jerk_cost: np.ndarray
    d_target: np.ndarray
    v_target: np.ndarray
    duration: np.ndarray


def frenet_candidates(x, y, h, v, route: np.ndarray, p: FrenetParams, dt: float = DT) -> FrenetCandidates:
    s0, d0, tan, _ = lane_projection(route, x, y)
    s0, d0, tan = float(s0[0]), float(d0[0]), float(tan[0])
    dh = float(wrap_angle(h - tan))
    s0p, d0p = v * math.cos(dh), v * math.sin(dh)
    horizon = p.horizon_steps * dt
    d_t = np.linspace(-p.lateral_span, p.lateral_span, p.n_d) if p.n_d > 1 else np.zeros(1)
    v_lo = max(p.speed_min, s0p - p.velocity_span)
    v_hi = min(p.speed_max, s0p + p.velocity_span)
    if v_hi < v_lo:
        v_lo = v_hi = min(max(s0p, p.speed_min), p.speed_max)
    v_t = np.linspace(v_lo, v_hi, p.n_v) if p.n_v > 1 else np.array([0.5 * (v_lo + v_hi)])
    T_t = np.linspace(horizon / p.n_t, horizon, p.n_t)
    D, V, TT = np.meshgrid(d_t, v_t, T_t, indexing="ij")
    D, V, TT = D.ravel(), V.ravel(), TT.ravel()
    t = np.arange(1, p.horizon_steps + 1) * dt
    cd = quintic_coeffs(d0, d0p, 0.0, D, 0.0, 0.0, TT)
    cs = quartic_coeffs(s0, s0p, 0.0, V, 0.0, TT)
    d, dd, da, dj = _profiles(cd, TT, t)
    s, sd, sa, sj = _profiles(cs, TT, t)
    px, py, th = polyline_point_at(route, s)
    nx, ny = -np.sin(th), np.cos(th)
    X = px + d * nx
    Y = py + d * ny
    H = wrap_angle(th + np.arctan2(dd, np.maximum(sd, 1e-6)))
    SP = np.hypot(sd, dd)
    acc2 = ((da**2 + sa**2) * dt).sum(axis=1)
    jerk2 = ((dj**2 + sj**2) * dt).sum(axis=1)
    cost = (
        p.w_lateral * np.abs(d[:, -1])
        + p.w_velocity * np.abs(sd[:, -1] - p.v_desired)
        + p.w_acceleration * acc2
        + p.w_jerk * jerk2
        - p.w_progress * (s[:, -1] - s0)
    )
    return FrenetCandidates(X, Y, H, SP, d, s, cost, jerk2, D, V, TT)


def predict_constant_velocity(world: WorldState, ids: np.ndarray, n: int, dt: float = DT):
    t = np.arange(1, n + 1) * dt
    x = world.x[ids][:, None] + world.speed[ids][:, None] * np.cos(world.heading[ids])[:, None] * t
    y = world.y[ids][:, None] + world.speed[ids][:, None] * np.sin(world.heading[ids])[:, None] * t
    return x, y, np.repeat(world.heading[ids][:, None], n, axis=1)


def candidate_collisions(cand: FrenetCandidates, world: WorldState, scenario: Scenario, ego: int) -> np.ndarray:
    st = scenario.stacked()
    others = np.flatnonzero(world.active & (np.arange(world.x.shape[0]) != ego))
    C, n = cand.x.shape
    hit = np.zeros(C, dtype=bool)
    if others.size == 0:
        return hit
    ox, oy, oh = predict_constant_velocity(world, others, n)
    for j, a in enumerate(others):
        ov = kernels.obb_overlap_pairs(
            cand.x, cand.y, cand.heading, st["length"][ego], st["width"][ego],
            ox[j][None, :], oy[j][None, :], oh[j][None, :], st["length"][a], st["width"][a],
        )
        hit |= ov.any(axis=1)
    return hit


def max_brake_plan(x, y, h, v, n: int, dt: float = DT) -> np.ndarray:
    out = np.zeros((n, 4))
    for k in range(n):
        v_new = max(0.0, v - MAX_BRAKE * dt)
        d = 0.5 * (v + v_new) * dt
        x, y, v = x + d * math.cos(h), y + d * math.sin(h), v_new
        out[k] = (x, y, h, v)
    return out


def frenet_plan(world: WorldState, scenario: Scenario, ego: int, params: FrenetParams, route: np.ndarray,
                n_steps: int = 2, dt: float = DT) -> np.ndarray:
    """First ``n_steps`` poses of the min-cost candidate; max-brake fallback when every candidate collides."""
    if route is None or len(route) < 2:
        raise PlannerError("empty route")
    x, y, h, v = float(world.x[ego]), float(world.y[ego]), float(world.heading[ego]), float(world.speed[ego])
    cand = frenet_candidates(x, y, h, v, route, params, dt)
    if not np.all(np.isfinite(cand.cost)):
        raise PlannerError("projection failure: non-finite candidate cost")
    cost = cand.cost
    if params.collision_penalty > 0:
        hit = candidate_collisions(cand, world, scenario, ego)
        if hit.all():
            return max_brake_plan(x, y, h, v, n_steps, dt)
        cost = cost + params.collision_penalty * hit
    i = int(np.argmin(cost))  # first index on ties
    m = min(n_steps, cand.x.shape[1])
    out = np.stack([cand.x[i, :m], cand.y[i, :m], cand.heading[i, :m], cand.speed[i, :m]], axis=1)
    if m < n_steps:
        out = np.concatenate([out, max_brake_plan(*out[-1], n_steps - m, dt)])
    return out


class FrenetPlanner:
    def __init__(self, params: FrenetParams, route: np.ndarray):
        self.params = params
        self.route = route

    def __call__(self, world: WorldState, scenario: Scenario, ego: int, n_steps: int = 2) -> np.ndarray:
        return frenet_plan(world, scenario, ego, self.params, self.route, n_steps)


def make_planner(params, route: np.ndarray):
    if isinstance(params, IdmParams):
        return IdmPlanner(params, route)
    if isinstance(params, FrenetParams):
        return FrenetPlanner(params, route)
    if callable(params):
        return params
    raise PlannerError(f"unknown planner params {type(params).__name__}")


# --------------------------------------------------------------------- PDM

def time_to_collision_ok(ego_xyhv: np.ndarray, others_xyhv: np.ndarray, others_active: np.ndarray,
                         ego_dims, other_dims, threshold: float, dt: float = DT) -> np.ndarray:
    """Per step: True when constant-velocity extrapolation keeps the ego clear for ``threshold`` seconds.

    ego_xyhv (T, 4); others_xyhv (M, T, 4); others_active (M, T)."""
    T = ego_xyhv.shape[0]
    ok = np.ones(T, dtype=bool)
    if others_xyhv.shape[0] == 0:
        return ok
    taus = np.arange(0, int(round(threshold / dt)) + 1) * dt
    L, W = ego_dims
    for j in range(others_xyhv.shape[0]):
        o = others_xyhv[j]
        ex = ego_xyhv[:, 0:1] + ego_xyhv[:, 3:4] * np.cos(ego_xyhv[:, 2:3]) * taus
        ey = ego_xyhv[:, 1:2] + ego_xyhv[:, 3:4] * np.sin(ego_xyhv[:, 2:3]) * taus
        ox = o[:, 0:1] + o[:, 3:4] * np.cos(o[:, 2:3]) * taus
        oy = o[:, 1:2] + o[:, 3:4] * np.sin(o[:, 2:3]) * taus
        eh = np.repeat(ego_xyhv[:, 2:3], taus.size, axis=1)
        oh = np.repeat(o[:, 2:3], taus.size, axis=1)
        hit = kernels.obb_overlap_pairs(ex, ey, eh, L, W, ox, oy, oh, other_dims[j][0], other_dims[j][1]).any(axis=1)
        ok &= ~(hit & others_active[j])
    return ok


@dataclass
class PdmResult:
    score: float
    no_collision: float
    drivable: float
    progress: float
    ttc: float
    comfort: float

    def as_dict(self) -> dict:
        return asdict(self)


def pdm_score(ego_poses: np.ndarray, collided: np.ndarray, offroad: np.ndarray, scenario: Scenario, ego: int,
              others_poses: np.ndarray | None = None, others_active: np.ndarray | None = None,
              other_ids=None, route: np.ndarray | None = None, weights: PdmWeights = PdmWeights(),
              dt: float = DT) -> PdmResult:
    """Hard gates times the weighted mean of progress, TTC and comfort.

    ``ego_poses`` (T, 4) covers the scored window from the initial state; ``others_*`` (M, T, ...) the rest of the scene."""
    ego_poses = np.asarray(ego_poses, dtype=np.float64)
    T = ego_poses.shape[0]
    st = scenario.stacked()
    route = ego_route(scenario, ego) if route is None else route
    no_col = 0.0 if np.any(collided) else 1.0
    drivable = 0.0 if np.any(offroad) else 1.0
    t0 = scenario.init_step
    lx, ly = st["x"][ego, t0 : t0 + T], st["y"][ego, t0 : t0 + T]
    lv = st["valid"][ego, t0 : t0 + T]
    s_log, _, _, _ = lane_projection(route, lx[lv], ly[lv])
    s_ego, _, _, _ = lane_projection(route, ego_poses[[0, -1], 0], ego_poses[[0, -1], 1])
    log_prog = float(s_log[-1] - s_log[0]) if s_log.size else 0.0
    ego_prog = float(s_ego[1] - s_ego[0])
    if log_prog <= 1e-6:
        progress = 1.0
    else:
        progress = float(np.clip(ego_prog / log_prog, 0.0, 1.0))
    if others_poses is None:
        ids = np.flatnonzero(np.arange(scenario.n_agents) != ego) if other_ids is None else np.asarray(other_ids)
        others_poses = np.stack([st["x"][ids, t0 : t0 + T], st["y"][ids, t0 : t0 + T], st["heading"][ids, t0 : t0 + T], st["speed"][ids, t0 : t0 + T]], axis=2)
        others_active = st["valid"][ids, t0 : t0 + T]
        other_ids = ids
    other_ids = np.asarray(other_ids)
    dims = [(st["length"][a], st["width"][a]) for a in other_ids]
    ttc = float(time_to_collision_ok(ego_poses, others_poses, others_active, (st["length"][ego], st["width"][ego]), dims, weights.ttc_threshold, dt).mean())
    v = ego_poses[:, 3]
    acc = np.diff(v) / dt
    jerk = np.diff(acc) / dt
    ok = np.ones(T, dtype=bool)
    ok[1:] &= np.abs(acc) <= weights.max_accel
    ok[2:] &= np.abs(jerk) <= weights.max_jerk
    comfort = float(ok.mean())
    soft = (weights.progress * progress + weights.ttc * ttc + weights.comfort * comfort) / (weights.progress + weights.ttc + weights.comfort)
    return PdmResult(no_col * drivable * soft, no_col, drivable, progress, ttc, comfort)
