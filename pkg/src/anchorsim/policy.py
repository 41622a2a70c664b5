"""Late-fusion actor-critic, the centralized reference model and behavior cloning."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .kernels import wrap_angle
from .nn import CategoricalDist, mlp_backward, mlp_forward
from .scenario import Scenario
from .sim import EGO_DIM, PARTNER_DIM, ROAD_DIM, Observation, SimConfig, WorldState, build_observations
from .tokenizer import TokenVocab, encode_segments, relative_segments


@dataclass(frozen=True)
class NetArch:
    K: int
    embed: int = 64
    hidden: int = 128
    critic: bool = True
    dropout: float = 0.01
    ego_dim: int = EGO_DIM
    partner_dim: int = PARTNER_DIM
    road_dim: int = ROAD_DIM
    name: str = "policy"


def policy_arch(K: int, **kw) -> NetArch:
    return NetArch(K=K, **kw)


def reference_arch(K: int, **kw) -> NetArch:
    # wider than the policy in both the encoders and the trunk
    kw.setdefault("embed", 128)
    kw.setdefault("hidden", 256)
    kw.setdefault("critic", False)
    kw.setdefault("name", "reference")
    return NetArch(K=K, **kw)


class LateFusionNet:
    """Ego / partner / road encoders (2 tanh layers each), masked mean pooling, one tanh trunk,
    actor logits and optional scalar critic."""

    def __init__(self, arch: NetArch, seed: int = 0, zero_actor: bool = False, params: dict | None = None):
        self.arch = arch
        self.seed = seed
        if params is not None:
            self.params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            return
        rng = np.random.default_rng(seed)
        p: dict = {}
        E = arch.embed
        nn.init_mlp(rng, [arch.ego_dim, E, E], "ego", p)
        nn.init_mlp(rng, [arch.partner_dim, E, E], "partner", p)
        nn.init_mlp(rng, [arch.road_dim, E, E], "road", p)
        nn.init_mlp(rng, [3 * E, arch.hidden], "trunk", p)
        nn.init_mlp(rng, [arch.hidden, arch.K], "actor", p, last_scale=0.01)
        if zero_actor:
            p["actor.0.W"][:] = 0.0
        if arch.critic:
            nn.init_mlp(rng, [arch.hidden, 1], "critic", p)
        self.params = p

    # ------------------------------------------------------------ forward
    def _encode_set(self, x, mask, prefix):
        n, m, d = x.shape
        if d != self.params[f"{prefix}.0.W"].shape[0]:
            raise nn.ShapeError(f"{prefix} feature dim {d} != {self.params[f'{prefix}.0.W'].shape[0]}")
        flat_mask = mask.reshape(-1)
        rows = x.reshape(-1, d)[flat_mask]
        emb, cache = mlp_forward(self.params, rows, prefix, 2)
        full = np.zeros((n * m, emb.shape[1]))
        full[flat_mask] = emb
        count = mask.sum(axis=1, keepdims=True).astype(np.float64)
        pooled = full.reshape(n, m, -1).sum(axis=1) / np.maximum(count, 1.0)
        return pooled, (cache, flat_mask, count, n, m)

    def forward(self, obs: Observation, dropout_rng: np.random.Generator | None = None, critic: bool = True):
        """Returns (logits, value or None, cache). ``critic=False`` skips the value head (acting only)."""
        if obs.ego.shape[1] != self.arch.ego_dim:
            raise nn.ShapeError(f"ego dim {obs.ego.shape[1]} != {self.arch.ego_dim}")
        e, ce = mlp_forward(self.params, obs.ego, "ego", 2)
        pp, cp = self._encode_set(obs.partners, obs.partner_mask, "partner")
        rp, cr = self._encode_set(obs.road, obs.road_mask, "road")
        fused = np.concatenate([e, pp, rp], axis=1)
        mask = nn.dropout_mask(dropout_rng, fused.shape, self.arch.dropout)
        if mask is not None:
            fused = fused * mask
        h, ct = mlp_forward(self.params, fused, "trunk", 1)
        logits, ca = mlp_forward(self.params, h, "actor", 1, final_activation=False)
        value, cc = None, None
        if critic and self.arch.critic:
            v, cc = mlp_forward(self.params, h, "critic", 1, final_activation=False)
            value = v[:, 0]
        return logits, value, (ce, cp, cr, mask, ct, ca, cc)

    def backward(self, cache, dlogits: np.ndarray, dvalue: np.ndarray | None = None) -> dict:
        ce, cp, cr, mask, ct, ca, cc = cache
        grads = nn.zeros_like_params(self.params)
        dh = mlp_backward(self.params, ca, dlogits, "actor", grads, need_input_grad=True)
        if dvalue is not None and self.arch.critic:
            dh = dh + mlp_backward(self.params, cc, dvalue[:, None], "critic", grads, need_input_grad=True)
        dfused = mlp_backward(self.params, ct, dh, "trunk", grads, need_input_grad=True)
        if mask is not None:
            dfused = dfused * mask
        E = self.arch.embed
        mlp_backward(self.params, ce, dfused[:, :E], "ego", grads)
        for prefix, c, dp in (("partner", cp, dfused[:, E : 2 * E]), ("road", cr, dfused[:, 2 * E :])):
            sub, flat_mask, count, n, m = c
            if flat_mask.any():
                drows = np.repeat(dp / np.maximum(count, 1.0), m, axis=0)[flat_mask]
                mlp_backward(self.params, sub, drows, prefix, grads)
        return grads

    def dist(self, obs: Observation) -> CategoricalDist:
        logits, _, _ = self.forward(obs, critic=False)
        return CategoricalDist(logits)

    def n_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "LateFusionNet":
        return LateFusionNet(self.arch, self.seed, params=self.params)

    # -------------------------------------------------------- persistence
    def save(self, path, opt: nn.AdamState | None = None, rng_state=None, extra=None) -> None:
        nn.save_checkpoint(path, asdict(self.arch), self.params, opt, rng_state, extra)

    @classmethod
    def load(cls, path) -> "LateFusionNet":
        ck = nn.load_checkpoint(path)
        return cls(NetArch(**ck["arch"]), params=ck["params"])


ReferenceNet = LateFusionNet


def policy_forward(net: LateFusionNet, obs: Observation):
    logits, value, _ = net.forward(obs)
    return CategoricalDist(logits), value


def reference_forward(ref: LateFusionNet, contexts: Observation) -> CategoricalDist:
    """One forward pass for a batch of per-(agent, timestep) contexts."""
    logits, _, _ = ref.forward(contexts)
    return CategoricalDist(logits)


# --------------------------------------------------------- behavior cloning

@dataclass
class BcDataset:
    train: Observation
    train_targets: np.ndarray
    val: Observation
    val_targets: np.ndarray
    K: int

    def __len__(self) -> int:
        return len(self.train_targets) + len(self.val_targets)


def logged_world(scenario: Scenario, t: int) -> WorldState:
    st = scenario.stacked()
    n = scenario.n_agents
    return WorldState(
        step=t,
        x=st["x"][:, t].copy(),
        y=st["y"][:, t].copy(),
        heading=st["heading"][:, t].copy(),
        speed=st["speed"][:, t].copy(),
        active=st["valid"][:, t].copy(),
        done=np.zeros(n, dtype=bool),
        collisions=np.zeros(n, dtype=np.int64),
        offroad_steps=np.zeros(n, dtype=np.int64),
        goal_reached=np.zeros(n, dtype=bool),
        end_step=scenario.final_step,
    )


def pursuit_segments(x0, y0, h0, px, py, arc: np.ndarray) -> np.ndarray:
    """Constant-curvature segments from poses (x0, y0, h0) that pass through the point (px, py),
    sampled at arc lengths ``arc`` (n, H). Curvature is the pure-pursuit 2 * lateral / distance^2."""
    c, s = np.cos(h0), np.sin(h0)
    dx, dy = px - x0, py - y0
    lx, ly = c * dx + s * dy, -s * dx + c * dy
    kappa = (2.0 * ly / np.maximum(lx * lx + ly * ly, 1e-9))[:, None]
    th = kappa * arc
    small = np.abs(th) < 1e-6
    k = np.where(small, 1.0, kappa)
    out = np.empty(arc.shape + (3,))
    out[..., 0] = np.where(small, arc - kappa**2 * arc**3 / 6.0, np.sin(th) / k)
    out[..., 1] = np.where(small, kappa * arc**2 / 2.0, (1.0 - np.cos(th)) / k)
    out[..., 2] = th
    return out


def expert_pairs(
    scenarios: Sequence[Scenario],
    vocab: TokenVocab,
    config: SimConfig = SimConfig(),
    stride: int = 1,
    context: bool = True,
    noise: tuple[float, float] | None = None,
    rng: np.random.Generator | None = None,
    lookahead: int = 10,
):
    """(contexts, target tokens) from logged states; windows start every ``stride`` sim steps.

    With ``noise=(lateral_m, yaw_rad)`` every controlled start pose is jittered by Gaussian
    offsets and labelled with a corrective token: the arc from the jittered pose back to the
    logged position ``lookahead`` steps ahead, travelled at the logged speed."""
    H = vocab.H
    obs_list, tgt = [], []
    for sc in scenarios:
        st = sc.stacked()
        valid = st["valid"]
        for t in range(sc.init_step, sc.final_step - H + 1, stride):
            ok = sc.controlled & valid[:, t : t + H + 1].all(axis=1)
            ids = np.flatnonzero(ok)
            if ids.size == 0:
                continue
            world = logged_world(sc, t)
            drop = np.ones(ids.size, dtype=bool)  # observation variant: goal hidden
            if noise is None:
                segs = np.concatenate(
                    [relative_segments(st["x"][a], st["y"][a], st["heading"][a], np.array([t]), H) for a in ids]
                )
            else:
                lat = rng.normal(0.0, noise[0], ids.size)
                world.x[ids] -= lat * np.sin(world.heading[ids])
                world.y[ids] += lat * np.cos(world.heading[ids])
                world.heading[ids] = wrap_angle(world.heading[ids] + rng.normal(0.0, noise[1], ids.size))
                # last index of the valid run starting at t, capped at the lookahead
                run = np.cumprod(valid[ids, t : t + lookahead + 1], axis=1).sum(axis=1) - 1
                la = t + run
                steps = np.hypot(np.diff(st["x"][ids, t : t + H + 1]), np.diff(st["y"][ids, t : t + H + 1]))
                segs = pursuit_segments(
                    world.x[ids], world.y[ids], world.heading[ids], st["x"][ids, la], st["y"][ids, la], np.cumsum(steps, axis=1)
                )
            obs_list.append(build_observations(world, sc, ids, drop, config, context=context))
            tgt.append(encode_segments(segs, vocab))
    if not obs_list:
        raise ValueError("no expert pairs")
    return Observation.concat(obs_list), np.concatenate(tgt)


def build_bc_dataset(
    scenarios: Sequence[Scenario],
    vocab: TokenVocab,
    config: SimConfig = SimConfig(),
    val_fraction: float = 0.2,
    stride: int = 1,
    context: bool = True,
    n_augment: int = 0,
    noise: tuple[float, float] = (0.5, 0.05),
    seed: int = 0,
) -> BcDataset:
    """Split by scenario (last ``val_fraction`` of the list is validation).

    ``n_augment`` extra jittered copies of the training split are added (see ``expert_pairs``);
    validation stays on clean logged states."""
    if not scenarios:
        raise ValueError("empty scenario list")
    n_val = int(round(len(scenarios) * val_fraction))
    if len(scenarios) > 1:
        n_val = min(max(n_val, 1), len(scenarios) - 1)
    else:
        n_val = 0
    train_sc = scenarios[: len(scenarios) - n_val]
    val_sc = scenarios[len(scenarios) - n_val :]
    tr, ttr = expert_pairs(train_sc, vocab, config, stride, context)
    if n_augment:
        rng = np.random.default_rng(seed)
        parts = [expert_pairs(train_sc, vocab, config, stride, context, noise, rng) for _ in range(n_augment)]
        tr = Observation.concat([tr] + [p[0] for p in parts])
        ttr = np.concatenate([ttr] + [p[1] for p in parts])
    if val_sc:
        va, tva = expert_pairs(val_sc, vocab, config, stride, context)
    else:
        va, tva = tr.take(slice(0, 0)), ttr[:0]
    return BcDataset(tr, ttr, va, tva, vocab.K)


@dataclass
class BcReport:
    rows: list = field(default_factory=list)  # (epoch, train_nll, val_nll, val_acc)

    @property
    def final_val_nll(self) -> float:
        return self.rows[-1][2]

    @property
    def final_val_acc(self) -> float:
        return self.rows[-1][3]

    @property
    def initial_val_nll(self) -> float:
        return self.rows[0][2]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "train_nll", "val_nll", "val_acc"])
            for r in self.rows:
                w.writerow([r[0], repr(float(r[1])), repr(float(r[2])), repr(float(r[3]))])


def nll_and_acc(net: LateFusionNet, obs: Observation, targets: np.ndarray, batch: int = 4096):
    if len(targets) == 0:
        return float("nan"), float("nan")
    tot, hit = 0.0, 0
    for s in range(0, len(targets), batch):
        o = obs.take(slice(s, s + batch))
        d = net.dist(o)
        tgt = targets[s : s + batch]
        tot += float(-d.log_prob(tgt).sum())
        hit += int((d.mode() == tgt).sum())
    return tot / len(targets), hit / len(targets)


def bc_train(
    net: LateFusionNet,
    dataset: BcDataset,
    epochs: int,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 256,
    clip_norm: float | None = 1.0,
    log=None,
) -> tuple[LateFusionNet, BcReport]:
    """Cross-entropy training of the reference on expert tokens. Row 0 of the report is the untrained net."""
    n = len(dataset.train_targets)
    if n == 0:
        raise ValueError("empty BC dataset")
    if net.arch.K != dataset.K:
        raise ValueError("vocabulary size mismatch")
    rng = np.random.default_rng(seed)
    opt = nn.AdamState.for_params(net.params)
    report = BcReport()
    tr_nll, _ = nll_and_acc(net, dataset.train, dataset.train_targets)
    v_nll, v_acc = nll_and_acc(net, dataset.val, dataset.val_targets)
    report.rows.append((0, tr_nll, v_nll, v_acc))
    for ep in range(1, epochs + 1):
        perm = rng.permutation(n)
        tot = 0.0
        for s in range(0, n, batch_size):
            idx = perm[s : s + batch_size]
            obs = dataset.train.take(idx)
            tgt = dataset.train_targets[idx]
            logits, _, cache = net.forward(obs, dropout_rng=rng)
            logp = nn.log_softmax(logits)
            tot += float(-logp[np.arange(len(idx)), tgt].sum())
            dlogits = np.exp(logp)
            dlogits[np.arange(len(idx)), tgt] -= 1.0
            grads = net.backward(cache, dlogits / len(idx))
            nn.adam_step(net.params, grads, opt, lr, clip_norm)
        v_nll, v_acc = nll_and_acc(net, dataset.val, dataset.val_targets)
        report.rows.append((ep, tot / n, v_nll, v_acc))
        if log:
            log(f"bc epoch {ep}: train_nll={tot / n:.4f} val_nll={v_nll:.4f} val_acc={v_acc:.3f}")
    return net, report
