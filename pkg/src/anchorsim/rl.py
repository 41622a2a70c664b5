"""Self-play PPO anchored to a frozen reference policy."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels, nn
from .nn import LOG_FLOOR, CategoricalDist
from .policy import LateFusionNet, NetArch
from .scenario import Scenario
from .sim import Observation, SimConfig, build_observations, reset, step
from .tokenizer import TokenVocab

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RewardConfig:
    w_goal: float = 0.0
    w_collided: float = 0.75
    w_offroad: float = 0.75
    w_humanlike: float = 0.0  # alpha
    kl_beta: float = 1.0
    goal_dropout_p: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            if not math.isfinite(getattr(self, f.name)):
                raise ValueError(f"{f.name} must be finite")
        if not 0.0 <= self.goal_dropout_p <= 1.0:
            raise ValueError("goal_dropout_p must be in [0, 1]")


# reward configurations of the ablation grid, keyed by a short name
ABLATIONS = {
    "no_kl_no_llh": RewardConfig(w_goal=1.0, w_humanlike=0.0, kl_beta=0.0),
    "goal_llh": RewardConfig(w_goal=1.0, w_humanlike=1.0, kl_beta=0.0),
    "goal_kl": RewardConfig(w_goal=1.0, w_humanlike=0.0, kl_beta=1.0),
    "kl_infraction": RewardConfig(w_goal=0.0, w_humanlike=0.0, kl_beta=1.0),
    "kl_infraction_llh": RewardConfig(w_goal=0.0, w_humanlike=1.0, kl_beta=1.0),
}


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_coef: float = 0.2
    update_epochs: int = 4
    ent_coef: float = 1e-4
    vf_coef: float = 0.3
    max_grad_norm: float = 0.5
    lr: float = 3e-4
    norm_adv: bool = True
    minibatch_size: int = 1024
    n_parallel_worlds: int = 16
    total_env_steps: int = 2_000_000
    n_updates: int | None = None
    checkpoint_every: int = 1

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must be in [0, 1]")
        if not self.clip_coef > 0:
            raise ValueError("clip_coef must be > 0")


@dataclass(eq=False)
class RolloutBuffer:
    obs: Observation
    actions: np.ndarray
    logp: np.ndarray
    values: np.ndarray
    ref_logp: np.ndarray  # (N, K)
    humanlike: np.ndarray
    collided: np.ndarray
    offroad: np.ndarray
    goal: np.ndarray
    dones: np.ndarray
    traj: np.ndarray
    tstep: np.ndarray
    goal_dropout: np.ndarray
    n_traj: int
    n_steps: int
    policy_every: int
    episode_collided: np.ndarray = None  # per trajectory flags
    episode_offroad: np.ndarray = None
    episode_goal: np.ndarray = None
    rewards: np.ndarray | None = None
    task_rewards: np.ndarray | None = None
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.actions.shape[0])

    @property
    def env_steps(self) -> int:
        return len(self) * self.policy_every


# ------------------------------------------------------------ collection

def _world_rng(seed: int, w: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7919, w])


def collect_rollouts(
    policy: LateFusionNet,
    reference: LateFusionNet | None,
    scenarios: Sequence[Scenario],
    vocab: TokenVocab,
    sim_config: SimConfig = SimConfig(),
    reward_config: RewardConfig = RewardConfig(),
    ppo_config: PpoConfig = PpoConfig(),
    seed: int = 0,
    workers: int = 1,
    reference_input: str = "context",
    greedy: bool = False,
) -> RolloutBuffer:
    """One full episode per scenario in ``scenarios`` (one world each), all controlled agents driven by ``policy``."""
    K = vocab.K
    if policy.arch.K != K or (reference is not None and reference.arch.K != K):
        raise ValueError("policy / reference / vocabulary size mismatch")
    n_worlds = len(scenarios)
    rngs = [_world_rng(seed, w) for w in range(n_worlds)]
    worlds = [reset(sc, sim_config) for sc in scenarios]
    ctrl = [np.flatnonzero(sc.controlled & w.active) for sc, w in zip(scenarios, worlds)]
    drop = [rngs[w].random(len(ctrl[w])) < reward_config.goal_dropout_p for w in range(n_worlds)]
    traj_base = np.cumsum([0] + [len(c) for c in ctrl])
    n_traj = int(traj_base[-1])
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def _map(fn, items):
        return list(pool.map(fn, items)) if pool else [fn(i) for i in items]

    rec = {k: [] for k in ("obs", "a", "lp", "v", "ref", "col", "off", "goal", "done", "traj", "t", "drop")}
    ep_col = np.zeros(n_traj, dtype=bool)
    ep_off = np.zeros(n_traj, dtype=bool)
    ep_goal = np.zeros(n_traj, dtype=bool)
    t_idx = 0
    try:
        while not all(w.finished for w in worlds):
            live = [w for w in range(n_worlds) if not worlds[w].finished]
            acting = {}
            for w in live:
                sel = ~worlds[w].done[ctrl[w]]
                acting[w] = np.flatnonzero(sel)

            def _obs(w):
                ids = ctrl[w][acting[w]]
                o = build_observations(worlds[w], scenarios[w], ids, drop[w][acting[w]], sim_config)
                if reference is None:
                    return o, None
                if reference_input == "context":
                    c = build_observations(worlds[w], scenarios[w], ids, None, sim_config, context=True)
                else:
                    c = build_observations(worlds[w], scenarios[w], ids, np.ones(len(ids), bool), sim_config)
                return o, c

            built = _map(_obs, live)
            obs = Observation.concat([b[0] for b in built])
            logits, values, _ = policy.forward(obs)
            dist = CategoricalDist(logits)
            if reference is not None:
                ref_logp = nn.log_softmax(reference.forward(Observation.concat([b[1] for b in built]))[0])
            else:
                ref_logp = np.full((len(obs), K), -math.log(K))
            counts = [len(acting[w]) for w in live]
            offs = np.cumsum([0] + counts)
            if greedy:
                actions = dist.mode()
            else:
                u = np.concatenate([rngs[w].random(c) for w, c in zip(live, counts)])
                actions = dist.sample(None, u=u)

            def _step(i):
                w = live[i]
                ids = ctrl[w][acting[w]]
                acts = {int(a): int(k) for a, k in zip(ids, actions[offs[i] : offs[i + 1]])}
                return step(worlds[w], acts, vocab, scenarios[w], sim_config)

            results = _map(_step, range(len(live)))
            for i, w in enumerate(live):
                new_world, ev = results[i]
                ids = ctrl[w][acting[w]]
                tr = traj_base[w] + acting[w]
                rec["col"].append(ev.collided[ids])
                rec["off"].append(ev.offroad[ids])
                rec["goal"].append(ev.goal[ids])
                rec["done"].append(new_world.done[ids])
                rec["traj"].append(tr)
                rec["t"].append(np.full(len(ids), t_idx))
                rec["drop"].append(drop[w][acting[w]])
                ep_col[tr] |= ev.collided[ids]
                ep_off[tr] |= ev.offroad[ids]
                ep_goal[tr] |= new_world.goal_reached[ids]
                worlds[w] = new_world
            rec["obs"].append(obs)
            rec["a"].append(actions)
            rec["lp"].append(dist.log_prob(actions))
            rec["v"].append(values if values is not None else np.zeros(len(obs)))
            rec["ref"].append(ref_logp)
            t_idx += 1
    finally:
        if pool:
            pool.shutdown()

    actions = np.concatenate(rec["a"])
    ref = np.concatenate(rec["ref"])
    return RolloutBuffer(
        obs=Observation.concat(rec["obs"]),
        actions=actions,
        logp=np.concatenate(rec["lp"]),
        values=np.concatenate(rec["v"]),
        ref_logp=ref,
        humanlike=ref[np.arange(len(actions)), actions],
        collided=np.concatenate(rec["col"]),
        offroad=np.concatenate(rec["off"]),
        goal=np.concatenate(rec["goal"]),
        dones=np.concatenate(rec["done"]),
        traj=np.concatenate(rec["traj"]),
        tstep=np.concatenate(rec["t"]),
        goal_dropout=np.concatenate(rec["drop"]),
        n_traj=n_traj,
        n_steps=t_idx,
        policy_every=sim_config.policy_every,
        episode_collided=ep_col,
        episode_offroad=ep_off,
        episode_goal=ep_goal,
    )


# --------------------------------------------------------------- rewards

def assemble_rewards(buf: RolloutBuffer, rc: RewardConfig) -> RolloutBuffer:
    task = rc.w_goal * buf.goal - rc.w_collided * buf.collided - rc.w_offroad * buf.offroad
    buf.task_rewards = task.astype(np.float64)
    hl = np.maximum(buf.humanlike, LOG_FLOOR)
    buf.rewards = buf.task_rewards + (rc.w_humanlike * hl if rc.w_humanlike != 0.0 else 0.0)
    return buf


def _to_grid(buf: RolloutBuffer, x: np.ndarray, fill: float) -> np.ndarray:
    g = np.full((buf.n_traj, buf.n_steps), fill, dtype=np.float64)
    g[buf.traj, buf.tstep] = x
    return g


def compute_gae(buf: RolloutBuffer, gamma: float, lam: float, norm_adv: bool = False) -> RolloutBuffer:
    """Advantages/returns per trajectory; steps after an agent's last transition act as terminal padding."""
    present = np.zeros((buf.n_traj, buf.n_steps), dtype=bool)
    present[buf.traj, buf.tstep] = True
    r = _to_grid(buf, buf.rewards, 0.0)
    v = _to_grid(buf, buf.values, 0.0)
    d = _to_grid(buf, buf.dones.astype(np.float64), 1.0)
    adv = kernels.gae(r, v, d, np.zeros(buf.n_traj), gamma, lam)
    a = adv[buf.traj, buf.tstep]
    buf.returns = a + buf.values
    if norm_adv and len(a) > 1:
        a = (a - a.mean()) / (a.std() + 1e-8)
    buf.advantages = a
    if not np.all(np.isfinite(buf.advantages)):
        raise nn.NonFiniteError("non-finite advantages")
    return buf


# ---------------------------------------------------------------- update

def ppo_loss_and_grads(
    policy: LateFusionNet,
    obs: Observation,
    actions: np.ndarray,
    old_logp: np.ndarray,
    adv: np.ndarray,
    returns: np.ndarray,
    ref_logp: np.ndarray,
    pc: PpoConfig,
    beta: float,
    dropout_rng=None,
):
    """Total loss = -surrogate + vf_coef*MSE - ent_coef*entropy + beta*KL(ref || pi)."""
    B = len(actions)
    logits, values, cache = policy.forward(obs, dropout_rng=dropout_rng)
    logp_all = nn.log_softmax(logits)
    p = np.exp(logp_all)
    rows = np.arange(B)
    new_lp = logp_all[rows, actions]
    ratio = np.exp(new_lp - old_logp)
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - pc.clip_coef, 1.0 + pc.clip_coef) * adv
    surr = float(np.minimum(s1, s2).mean())
    vdiff = values - returns
    vloss = float((vdiff**2).mean())
    ent = -(p * logp_all).sum(axis=1)
    kl = nn.kl_from_log_probs(ref_logp, logp_all)
    total = -surr + pc.vf_coef * vloss - pc.ent_coef * float(ent.mean()) + beta * float(kl.mean())

    dlp = np.where(s1 <= s2, ratio * adv, 0.0) / B
    onehot = np.zeros_like(p)
    onehot[rows, actions] = 1.0
    dlogits = -dlp[:, None] * (onehot - p)
    if pc.ent_coef:
        dlogits -= pc.ent_coef * nn.entropy_grad_wrt_logits(logp_all) / B
    if beta:
        dlogits += beta * nn.kl_grad_wrt_logits(ref_logp, logp_all) / B
    dvalue = pc.vf_coef * 2.0 * vdiff / B
    grads = policy.backward(cache, dlogits, dvalue)
    stats = {
        "loss": total,
        "surrogate": surr,
        "value_loss": vloss,
        "entropy": float(ent.mean()),
        "kl": float(kl.mean()),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > pc.clip_coef)),
    }
    return total, grads, stats


REPORT_COLUMNS = (
    "update",
    "env_steps",
    "mean_task_reward",
    "mean_reward",
    "kl",
    "entropy",
    "value_loss",
    "clip_frac",
    "collision_rate",
    "offroad_rate",
    "goal_rate",
)


def ppo_update(
    policy: LateFusionNet,
    buf: RolloutBuffer,
    pc: PpoConfig,
    rc: RewardConfig,
    opt: nn.AdamState,
    seed: int = 0,
) -> dict:
    rng = np.random.default_rng([seed, 104729])
    n = len(buf)
    # KL and entropy of the behavior policy on this batch
    old_dist = CategoricalDist.from_log_probs(_batched_logp(policy, buf.obs))
    kl0 = float(nn.kl_from_log_probs(buf.ref_logp, old_dist.log_probs).mean())
    ent0 = float(old_dist.entropy().mean())
    agg = {"value_loss": [], "clip_frac": []}
    for _ in range(pc.update_epochs):
        perm = rng.permutation(n)
        for s in range(0, n, pc.minibatch_size):
            mb = perm[s : s + pc.minibatch_size]
            total, grads, st = ppo_loss_and_grads(
                policy,
                buf.obs.take(mb),
                buf.actions[mb],
                buf.logp[mb],
                buf.advantages[mb],
                buf.returns[mb],
                buf.ref_logp[mb],
                pc,
                rc.kl_beta,
                dropout_rng=rng,
            )
            if not math.isfinite(total):
                raise nn.NonFiniteError(f"non-finite PPO loss: {st}")
            nn.adam_step(policy.params, grads, opt, pc.lr, pc.max_grad_norm)
            agg["value_loss"].append(st["value_loss"])
            agg["clip_frac"].append(st["clip_frac"])
    return {
        "mean_task_reward": float(buf.task_rewards.mean()),
        "mean_reward": float(buf.rewards.mean()),
        "kl": kl0,
        "entropy": ent0,
        "value_loss": float(np.mean(agg["value_loss"])),
        "clip_frac": float(np.mean(agg["clip_frac"])),
        "collision_rate": float(buf.episode_collided.mean()),
        "offroad_rate": float(buf.episode_offroad.mean()),
        "goal_rate": float(buf.episode_goal.mean()),
    }


def _batched_logp(net: LateFusionNet, obs: Observation, batch: int = 4096) -> np.ndarray:
    out = []
    for s in range(0, len(obs), batch):
        out.append(nn.log_softmax(net.forward(obs.take(slice(s, s + batch)), critic=False)[0]))
    return np.concatenate(out)


# ----------------------------------------------------------------- train

@dataclass
class TrainConfig:
    reward: RewardConfig = field(default_factory=RewardConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    embed: int = 64
    hidden: int = 128
    dropout: float = 0.01
    reference_input: str = "context"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        for key, typ in (("reward", RewardConfig), ("ppo", PpoConfig), ("sim", SimConfig)):
            sub = d.get(key, {})
            if isinstance(sub, dict):
                bad = set(sub) - {f.name for f in fields(typ)}
                if bad:
                    raise ValueError(f"unknown {key} config keys: {sorted(bad)}")
                d[key] = typ(**sub)
        return cls(**d)


@dataclass
class TrainState:
    policy: LateFusionNet
    opt: nn.AdamState
    update: int = 0
    env_steps: int = 0
    report: list = field(default_factory=list)


def pick_scenarios(n_scenarios: int, n_worlds: int, seed: int, update: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 15485863, update])
    return rng.choice(n_scenarios, size=n_worlds, replace=n_worlds > n_scenarios)


def new_train_state(cfg: TrainConfig, vocab: TokenVocab, seed: int) -> TrainState:
    arch = NetArch(K=vocab.K, embed=cfg.embed, hidden=cfg.hidden, dropout=cfg.dropout)
    pol = LateFusionNet(arch, seed=seed)
    return TrainState(pol, nn.AdamState.for_params(pol.params))


def train_iteration(
    state: TrainState,
    reference: LateFusionNet | None,
    scenarios: Sequence[Scenario],
    vocab: TokenVocab,
    cfg: TrainConfig,
    seed: int,
    workers: int = 1,
) -> dict:
    u = state.update
    pick = pick_scenarios(len(scenarios), cfg.ppo.n_parallel_worlds, seed, u)
    ref = reference if (cfg.reward.kl_beta != 0.0 or cfg.reward.w_humanlike != 0.0) else None
    buf = collect_rollouts(
        state.policy,
        ref,
        [scenarios[i] for i in pick],
        vocab,
        cfg.sim,
        cfg.reward,
        cfg.ppo,
        seed=int(np.random.default_rng([seed, 31, u]).integers(2**62)),
        workers=workers,
        reference_input=cfg.reference_input,
    )
    if ref is None and reference is not None:
        # KL is still reported against the reference even when it does not shape the loss
        buf.ref_logp = _reference_logp_for(buf, reference, scenarios, pick, vocab, cfg, seed, u, workers)
        buf.humanlike = buf.ref_logp[np.arange(len(buf)), buf.actions]
    assemble_rewards(buf, cfg.reward)
    compute_gae(buf, cfg.ppo.gamma, cfg.ppo.gae_lambda, cfg.ppo.norm_adv)
    row = ppo_update(state.policy, buf, cfg.ppo, cfg.reward, state.opt, seed=int(np.random.default_rng([seed, 37, u]).integers(2**62)))
    state.update += 1
    state.env_steps += buf.env_steps
    row = {"update": state.update, "env_steps": state.env_steps, **row}
    state.report.append(row)
    return row


def _reference_logp_for(buf, reference, scenarios, pick, vocab, cfg, seed, u, workers):
    # replay the collected actions to rebuild contexts; cheaper alternative is unnecessary at desk scale
    sc = [scenarios[i] for i in pick]
    worlds = [reset(s, cfg.sim) for s in sc]
    out = np.zeros((len(buf), vocab.K))
    ctrl = [np.flatnonzero(s.controlled & w.active) for s, w in zip(sc, worlds)]
    base = np.cumsum([0] + [len(c) for c in ctrl])
    lookup = {}
    for i, (tr, t) in enumerate(zip(buf.traj, buf.tstep)):
        lookup[(int(tr), int(t))] = i
    for t in range(buf.n_steps):
        ctxs, rows = [], []
        for w, s in enumerate(sc):
            if worlds[w].finished:
                continue
            ids = [a for k, a in enumerate(ctrl[w]) if (int(base[w] + k), t) in lookup]
            if not ids:
                continue
            ctxs.append(build_observations(worlds[w], s, ids, None, cfg.sim, context=cfg.reference_input == "context"))
            rows.extend(lookup[(int(base[w] + ctrl[w].tolist().index(a)), t)] for a in ids)
            acts = {int(a): int(buf.actions[lookup[(int(base[w] + ctrl[w].tolist().index(a)), t)]]) for a in ids}
            worlds[w], _ = step(worlds[w], acts, vocab, s, cfg.sim)
        if ctxs:
            out[rows] = nn.log_softmax(reference.forward(Observation.concat(ctxs))[0])
    return out


def write_report_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([r[c] if c in ("update", "env_steps") else repr(float(r[c])) for c in REPORT_COLUMNS])


def save_train_state(state: TrainState, path, cfg: TrainConfig, seed: int) -> None:
    state.policy.save(
        path,
        state.opt,
        rng_state={"seed": seed, "update": state.update},
        extra={"env_steps": state.env_steps, "report": state.report, "config": cfg.to_dict()},
    )


def load_train_state(path) -> TrainState:
    ck = nn.load_checkpoint(path)
    pol = LateFusionNet(NetArch(**ck["arch"]), params=ck["params"])
    extra = ck["extra"] or {}
    return TrainState(pol, ck["optimizer"], int(ck["rng"]["update"]), int(extra.get("env_steps", 0)), list(extra.get("report", [])))


def train(
    cfg: TrainConfig,
    scenarios: Sequence[Scenario],
    vocab: TokenVocab,
    reference: LateFusionNet | None,
    out_dir,
    seed: int,
    workers: int = 1,
    resume_from=None,
    stop_after: int | None = None,
    on_update=None,
) -> TrainState:
    """Collect -> rewards -> GAE -> update until the step/update budget; checkpoints into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "train_config.json").write_text(json.dumps({"seed": seed, **cfg.to_dict()}, indent=2, sort_keys=True))
    if (cfg.reward.kl_beta != 0.0 or cfg.reward.w_humanlike != 0.0) and reference is None:
        raise ValueError("reference checkpoint required when kl_beta or w_humanlike is non-zero")
    state = load_train_state(resume_from) if resume_from else new_train_state(cfg, vocab, seed)
    if state.policy.arch.K != vocab.K:
        raise ValueError("checkpoint vocabulary size mismatch")

    def done() -> bool:
        if cfg.ppo.n_updates is not None:
            return state.update >= cfg.ppo.n_updates
        return state.env_steps >= cfg.ppo.total_env_steps

    n_this_call = 0
    while not done():
        row = train_iteration(state, reference, scenarios, vocab, cfg, seed, workers)
        n_this_call += 1
        log.info("update %d steps %d kl %.4f ent %.3f col %.3f off %.3f goal %.3f",
                 row["update"], row["env_steps"], row["kl"], row["entropy"], row["collision_rate"], row["offroad_rate"], row["goal_rate"])
        if on_update:
            on_update(row)
        if state.update % cfg.ppo.checkpoint_every == 0 or done():
            save_train_state(state, out / "checkpoint.json", cfg, seed)
            write_report_csv(state.report, out / "train_report.csv")
        if stop_after is not None and n_this_call >= stop_after:
            break
    save_train_state(state, out / "checkpoint.json", cfg, seed)
    write_report_csv(state.report, out / "train_report.csv")
    return state
