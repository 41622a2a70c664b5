"""Closed-loop planner evaluation across background-traffic strategies, correlation
statistics between strategies, and the controller throughput benchmark."""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .metrics import NetController, run_episode
from .nn import CategoricalDist
from .planners import PdmResult, PdmWeights, ego_route, make_planner, pdm_score
from .policy import LateFusionNet
from .scenario import Scenario
from .sim import Observation, SimConfig, build_observations, reset, step
from .tokenizer import TokenVocab, compose

STRATEGY_TAGS = ("log_replay", "reference_rollout", "policy_rollout")
PDM_METRICS = ("score", "no_collision", "drivable", "progress", "ttc", "comfort")
UNDEFINED = "undefined"


class HarnessError(ValueError):
    pass


@dataclass
class EvalStrategy:
    tag: str
    controller: LateFusionNet | None = None
    name: str | None = None

    def __post_init__(self):
        if self.tag not in STRATEGY_TAGS:
            raise HarnessError(f"unknown strategy tag {self.tag!r}")
        if (self.tag == "log_replay") != (self.controller is None):
            raise HarnessError(f"{self.tag}: log_replay takes no controller, the other strategies need exactly one")
        if self.name is None:
            self.name = self.tag


def ego_agent(scenario: Scenario) -> int:
    ids = np.flatnonzero(scenario.controlled)
    if ids.size == 0:
        raise HarnessError(f"{scenario.id}: no controlled agent to use as ego")
    return int(ids[0])


def strategy_scenario(scenario: Scenario, strategy: EvalStrategy, ego: int) -> Scenario:
    """Scenario view whose control mask matches the strategy (log replay controls only the ego)."""
    mask = scenario.controlled.copy()
    if strategy.tag == "log_replay":
        mask[:] = False
    mask[ego] = True
    return replace(scenario, controlled=mask)


class PolicyPlanner:
    """Trained token policy used as an ego planner: greedy token turned into continuous poses."""

    def __init__(self, net: LateFusionNet, vocab: TokenVocab, config: SimConfig = SimConfig()):
        self.ctl = NetController(net, vocab, config, greedy=True)
        self.vocab = vocab
        self.config = config

    def __call__(self, world, scenario: Scenario, ego: int, n_steps: int = 2) -> np.ndarray:
        if n_steps != self.vocab.H:
            raise HarnessError(f"policy planner emits {self.vocab.H} steps, {n_steps} requested")
        tok = self.ctl.act(world, scenario, [ego], np.random.default_rng(0))[ego]
        rel = self.vocab.tokens[tok]
        wx, wy, wh = compose(world.x[ego], world.y[ego], world.heading[ego], rel)
        steps = np.diff(np.vstack([np.zeros((1, 2)), rel[:, :2]]), axis=0)
        speed = np.hypot(steps[:, 0], steps[:, 1]) / self.config.dt
        speed[-1] = np.hypot(rel[-1, 0], rel[-1, 1]) / (self.vocab.H * self.config.dt)
        return np.stack([wx, wy, wh, speed], axis=1)


# ------------------------------------------------------------------ matrix

@dataclass
class ScoreMatrix:
    planners: list
    strategies: list
    scenario_ids: list
    cells: dict = field(default_factory=dict)  # (planner, strategy, scenario_id) -> PdmResult | str (failure)

    def failures(self) -> dict:
        return {k: v for k, v in self.cells.items() if isinstance(v, str)}

    def missing(self) -> list:
        return [
            (p, s, sc)
            for p in self.planners
            for s in self.strategies
            for sc in self.scenario_ids
            if (p, s, sc) not in self.cells
        ]

    def planner_means(self, strategy: str, metric: str = "score") -> dict:
        out = {}
        for p in self.planners:
            vals = [self.cells[(p, strategy, sc)] for sc in self.scenario_ids]
            if all(isinstance(v, PdmResult) for v in vals):
                out[p] = float(np.mean([getattr(v, metric) for v in vals]))
        return out

    def rows(self):
        for p in self.planners:
            for s in self.strategies:
                for sc in self.scenario_ids:
                    c = self.cells.get((p, s, sc), "missing")
                    if isinstance(c, PdmResult):
                        yield [p, s, sc, "ok"] + [repr(float(getattr(c, m))) for m in PDM_METRICS]
                    else:
                        yield [p, s, sc, f"failed: {c}"] + [""] * len(PDM_METRICS)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["planner", "strategy", "scenario_id", "status", *PDM_METRICS])
            w.writerows(self.rows())

    def __eq__(self, other):
        return isinstance(other, ScoreMatrix) and list(self.rows()) == list(other.rows())


def evaluate_cell(
    planner_params,
    scenario: Scenario,
    strategy: EvalStrategy,
    vocab: TokenVocab | None,
    config: SimConfig,
    seed: int,
    weights: PdmWeights = PdmWeights(),
) -> PdmResult:
    ego = ego_agent(scenario)
    view = strategy_scenario(scenario, strategy, ego)
    route = ego_route(scenario, ego)
    planner = make_planner(planner_params, route)

    def ego_fn(world, sc, a):
        return planner(world, sc, a, config.policy_every)

    token_policy = None
    if strategy.controller is not None:
        token_policy = NetController(strategy.controller, vocab, config).act
    trace = run_episode(view, vocab, config, token_policy, np.random.default_rng(seed), ego_fn, ego)
    others = np.flatnonzero(np.arange(scenario.n_agents) != ego)
    return pdm_score(
        trace.poses[ego],
        trace.collided[ego],
        trace.offroad[ego],
        scenario,
        ego,
        trace.poses[others],
        trace.active[others],
        others,
        route,
        weights,
        config.dt,
    )


def cell_seed(seed: int, scenario_index: int, strategy_index: int) -> int:
    # shared across planners so every planner faces the same background randomness
    return int(np.random.default_rng([seed, scenario_index, strategy_index]).integers(2**62))


def planner_eval_matrix(
    planners: Mapping[str, object],
    scenarios: Sequence[Scenario],
    strategies: Sequence[EvalStrategy],
    seed: int,
    vocab: TokenVocab | None = None,
    config: SimConfig = SimConfig(),
    workers: int = 1,
    weights: PdmWeights = PdmWeights(),
) -> ScoreMatrix:
    """One seeded rollout per (planner, strategy, scenario); failures are recorded in the cell."""
    if any(s.controller is not None for s in strategies) and vocab is None:
        raise HarnessError("network strategies need a vocabulary")
    names = [s.name for s in strategies]
    if len(set(names)) != len(names):
        raise HarnessError("strategy names must be unique")
    mat = ScoreMatrix(list(planners), names, [sc.id for sc in scenarios])
    tasks = [
        (p, si, ci)
        for p in planners
        for si in range(len(strategies))
        for ci in range(len(scenarios))
    ]

    def run(task):
        p, si, ci = task
        try:
            return evaluate_cell(planners[p], scenarios[ci], strategies[si], vocab, config, cell_seed(seed, ci, si), weights)
        except Exception as e:  # recorded per cell, the run continues
            return f"{type(e).__name__}: {e}"

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    for (p, si, ci), r in zip(tasks, results):
        mat.cells[(p, strategies[si].name, scenarios[ci].id)] = r
    return mat


# ------------------------------------------------------------ correlation

def _coef(fn, a: np.ndarray, b: np.ndarray):
    if a.size < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return UNDEFINED
    return float(np.clip(fn(a, b)[0], -1.0, 1.0))


def pearson(a, b):
    return _coef(stats.pearsonr, np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def spearman(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return _coef(stats.pearsonr, stats.rankdata(a), stats.rankdata(b)) if np.ptp(a) and np.ptp(b) else UNDEFINED


def correlation_stats(matrix: ScoreMatrix, strategy_a: str, strategy_b: str, metrics: Sequence[str] = PDM_METRICS) -> dict:
    """Per metric: Pearson / Spearman over planners of the scenario-averaged cell values."""
    for s in (strategy_a, strategy_b):
        if s not in matrix.strategies:
            raise HarnessError(f"unknown strategy {s!r}")
    out = {}
    for m in metrics:
        ma = matrix.planner_means(strategy_a, m)
        mb = matrix.planner_means(strategy_b, m)
        common = [p for p in matrix.planners if p in ma and p in mb]
        if len(common) < 3:
            raise HarnessError(f"need >= 3 planners with complete cells, have {len(common)}")
        a = np.array([ma[p] for p in common])
        b = np.array([mb[p] for p in common])
        out[m] = {"pearson": pearson(a, b), "spearman": spearman(a, b), "n_planners": len(common)}
    return out


def write_correlation_csv(rows: Sequence[tuple], path) -> None:
    """rows: (strategy_a, strategy_b, stats dict from correlation_stats)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["strategy_a", "strategy_b", "metric", "pearson", "spearman", "n_planners"])
        for a, b, st in rows:
            for m, d in st.items():
                w.writerow([a, b, m, d["pearson"], d["spearman"], d["n_planners"]])


# ------------------------------------------------------------- throughput

def run_batched_episodes(net: LateFusionNet, scenarios: Sequence[Scenario], vocab: TokenVocab, config: SimConfig,
                         rng: np.random.Generator, inputs: str | None = None) -> int:
    """Runs one episode per scenario in lock-step with a single forward pass per policy step. Returns agent-steps."""
    ctl = NetController(net, vocab, config, inputs)
    ctx = ctl.inputs == "context"
    worlds = [reset(sc, config) for sc in scenarios]
    agent_steps = 0
    while not all(w.finished for w in worlds):
        live = [i for i, w in enumerate(worlds) if not w.finished]
        ids = [np.flatnonzero(scenarios[i].controlled & worlds[i].active & ~worlds[i].done) for i in live]
        obs = [build_observations(worlds[i], scenarios[i], a, None, config, context=ctx) for i, a in zip(live, ids) if a.size]
        tok = np.zeros(0, dtype=np.int64)
        if obs:
            tok = CategoricalDist(net.forward(Observation.concat(obs), critic=False)[0]).sample(rng)
        k = 0
        for i, a in zip(live, ids):
            acts = {int(x): int(t) for x, t in zip(a, tok[k : k + a.size])}
            k += a.size
            worlds[i], _ = step(worlds[i], acts, vocab, scenarios[i], config)
            agent_steps += a.size * config.policy_every
    return agent_steps


@dataclass
class BenchResult:
    controller: str
    seeds: list
    rates: list  # scenarios/sec per seed
    agent_step_rates: list
    config: dict

    @property
    def mean(self) -> float:
        return float(np.mean(self.rates))

    @property
    def std(self) -> float:
        return float(np.std(self.rates))

    def to_dict(self) -> dict:
        return {
            "controller": self.controller,
            "seeds": self.seeds,
            "scenarios_per_sec": self.rates,
            "scenarios_per_sec_mean": self.mean,
            "scenarios_per_sec_std": self.std,
            "agent_steps_per_sec_mean": float(np.mean(self.agent_step_rates)),
            "config": self.config,
        }

    def to_text(self) -> str:
        return f"{self.controller}: {self.mean:.3f} ± {self.std:.3f} scenarios/sec ({np.mean(self.agent_step_rates):.1f} agent-steps/sec)"


def throughput_bench(
    net: LateFusionNet,
    scenarios: Sequence[Scenario],
    vocab: TokenVocab,
    n_worlds: int,
    seeds: Sequence[int],
    config: SimConfig = SimConfig(),
    episodes_per_seed: int | None = None,
    warmup: int = 1,
    name: str | None = None,
    clock=time.perf_counter,
) -> BenchResult:
    """Wall-clock scenarios/sec over full episodes, ``n_worlds`` worlds stepped in lock-step, per seed."""
    seeds = [int(s) for s in seeds]
    if len(seeds) < 3:
        raise HarnessError("throughput_bench needs >= 3 seeds")
    if n_worlds < 1 or not scenarios:
        raise HarnessError("need >= 1 world and >= 1 scenario")
    episodes = n_worlds if episodes_per_seed is None else episodes_per_seed
    rates, astep_rates = [], []
    for s in seeds:
        rng = np.random.default_rng(s)
        pick = rng.choice(len(scenarios), size=max(episodes, n_worlds), replace=len(scenarios) < max(episodes, n_worlds))
        for _ in range(warmup):
            run_batched_episodes(net, [scenarios[i] for i in pick[:n_worlds]], vocab, config, rng)
        t0 = clock()
        total_steps = 0
        done = 0
        while done < episodes:
            batch = [scenarios[i] for i in pick[done : done + n_worlds]]
            total_steps += run_batched_episodes(net, batch, vocab, config, rng)
            done += len(batch)
        elapsed = clock() - t0
        if not elapsed > 0 or not math.isfinite(elapsed):
            raise HarnessError(f"timer anomaly: elapsed {elapsed}")
        rates.append(done / elapsed)
        astep_rates.append(total_steps / elapsed)
    echo = {
        "n_worlds": n_worlds,
        "episodes_per_seed": episodes,
        "warmup": warmup,
        "policy_hz": 1.0 / (config.dt * config.policy_every),
        "horizon_steps": config.horizon_steps,
        "mean_agents": float(np.mean([int(sc.controlled.sum()) for sc in scenarios])),
        "net": net.arch.name,
        "hidden": net.arch.hidden,
    }
    return BenchResult(name or net.arch.name, seeds, rates, astep_rates, echo)


def bench_report(results: Sequence[BenchResult]) -> dict:
    out = {"results": [r.to_dict() for r in results]}
    by = {r.controller: r for r in results}
    if "policy" in by and "reference" in by:
        out["policy_reference_ratio"] = by["policy"].mean / by["reference"].mean
    return out


def write_bench(results: Sequence[BenchResult], path) -> dict:
    rep = bench_report(results)
    with open(path, "w") as f:
        json.dump(rep, f, indent=1)
    return rep
