import csv
import math

import numpy as np
import pytest

from anchorsim import nn
from anchorsim.rl import (
    ABLATIONS,
    LOG_FLOOR,
    PpoConfig,
    RewardConfig,
    TrainConfig,
    assemble_rewards,
    collect_rollouts,
    compute_gae,
    load_train_state,
    train,
)
from anchorsim.sim import SimConfig

from oracles import gae_double_loop

SHORT = SimConfig(horizon_steps=16)


@pytest.fixture(scope="module")
def buf(suite, vocab, small_policy, small_reference):
    return collect_rollouts(small_policy, small_reference, suite[:3], vocab, SHORT, RewardConfig(), PpoConfig(), seed=1)


def test_reward_assembly_arithmetic(buf):
    rc = RewardConfig(w_goal=2.0, w_collided=0.75, w_offroad=0.5, w_humanlike=0.3)
    assemble_rewards(buf, rc)
    for i in range(len(buf)):
        want = 2.0 * buf.goal[i] - 0.75 * buf.collided[i] - 0.5 * buf.offroad[i]
        assert buf.task_rewards[i] == pytest.approx(want, abs=0)
        assert buf.rewards[i] == pytest.approx(want + 0.3 * max(buf.humanlike[i], LOG_FLOOR), rel=1e-15)


def test_humanlike_floor(buf):
    saved = buf.humanlike.copy()
    buf.humanlike[:] = -np.inf
    assemble_rewards(buf, RewardConfig(w_humanlike=1.0))
    assert np.all(np.isfinite(buf.rewards))
    assert LOG_FLOOR == pytest.approx(math.log(1e-20))
    buf.humanlike[:] = saved


def test_humanlike_is_reference_logprob_of_action(buf):
    assert np.array_equal(buf.humanlike, buf.ref_logp[np.arange(len(buf)), buf.actions])


def test_gae_on_padded_grid_matches_oracle(buf):
    assemble_rewards(buf, RewardConfig(w_goal=1.0))
    compute_gae(buf, 0.99, 0.95, norm_adv=False)
    r = np.zeros((buf.n_traj, buf.n_steps))
    v = np.zeros_like(r)
    d = np.ones_like(r)
    r[buf.traj, buf.tstep] = buf.rewards
    v[buf.traj, buf.tstep] = buf.values
    d[buf.traj, buf.tstep] = buf.dones
    ref = gae_double_loop(r, v, d, np.zeros(buf.n_traj), 0.99, 0.95)
    assert np.allclose(buf.advantages, ref[buf.traj, buf.tstep], atol=1e-10)
    assert np.allclose(buf.returns, buf.advantages + buf.values)


def test_buffer_env_steps(buf):
    assert buf.env_steps == len(buf) * 2
    assert buf.n_steps == 8


def test_ablation_grid():
    got = {k: (v.w_goal, v.w_humanlike, v.kl_beta) for k, v in ABLATIONS.items()}
    assert got == {
        "no_kl_no_llh": (1.0, 0.0, 0.0),
        "goal_llh": (1.0, 1.0, 0.0),
        "goal_kl": (1.0, 0.0, 1.0),
        "kl_infraction": (0.0, 0.0, 1.0),
        "kl_infraction_llh": (0.0, 1.0, 1.0),
    }
    for v in ABLATIONS.values():
        assert (v.w_collided, v.w_offroad, v.goal_dropout_p) == (0.75, 0.75, 0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        RewardConfig(goal_dropout_p=1.5)
    with pytest.raises(ValueError):
        RewardConfig(kl_beta=math.inf)
    with pytest.raises(ValueError):
        PpoConfig(gamma=0.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"ppo": {"bogus": 1}})
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"nope": 1})
    cfg = TrainConfig.from_dict({"reward": {"kl_beta": 0.0}, "embed": 8})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def _tiny_cfg(n_updates, beta=1.0):
    return TrainConfig(
        reward=RewardConfig(kl_beta=beta, w_goal=1.0),
        ppo=PpoConfig(n_parallel_worlds=2, n_updates=n_updates, minibatch_size=64, update_epochs=2),
        sim=SHORT,
        embed=8,
        hidden=12,
    )


def _read(path):
    return path.read_text()


def test_resume_is_identical(tmp_path, suite, vocab, small_reference):
    cfg = _tiny_cfg(3)
    full = train(cfg, suite, vocab, small_reference, tmp_path / "a", seed=3)
    train(cfg, suite, vocab, small_reference, tmp_path / "b", seed=3, stop_after=1)
    res = train(cfg, suite, vocab, small_reference, tmp_path / "b", seed=3, resume_from=tmp_path / "b" / "checkpoint.json")
    assert _read(tmp_path / "a" / "train_report.csv") == _read(tmp_path / "b" / "train_report.csv")
    for k in full.policy.params:
        assert np.array_equal(full.policy.params[k], res.policy.params[k])
    st = load_train_state(tmp_path / "a" / "checkpoint.json")
    assert st.update == 3 and st.env_steps == full.env_steps


def test_report_columns_and_kl_reported_without_anchor(tmp_path, suite, vocab, small_reference):
    train(_tiny_cfg(1, beta=0.0), suite, vocab, small_reference, tmp_path, seed=0)
    with open(tmp_path / "train_report.csv") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 1
    assert float(rows[0]["kl"]) > 0


def test_reference_required(tmp_path, suite, vocab):
    with pytest.raises(ValueError):
        train(_tiny_cfg(1), suite, vocab, None, tmp_path, seed=0)


def test_kl_term_pulls_policy_toward_reference(suite, vocab, small_reference):
    """Pure KL loss (no task reward, no entropy) must reduce KL(ref || pi) on the batch it is trained on."""
    from anchorsim.policy import LateFusionNet, policy_arch
    from anchorsim.rl import ppo_update

    pol = LateFusionNet(policy_arch(vocab.K, embed=8, hidden=12), seed=9)
    b = collect_rollouts(pol, small_reference, suite[:2], vocab, SHORT, RewardConfig(), PpoConfig(), seed=0)
    assemble_rewards(b, RewardConfig(w_collided=0, w_offroad=0))
    compute_gae(b, 0.99, 0.95)
    b.advantages[:] = 0.0
    pc = PpoConfig(ent_coef=0.0, vf_coef=0.0, lr=3e-3, update_epochs=20, minibatch_size=4096)
    opt = nn.AdamState.for_params(pol.params)
    before = ppo_update(pol, b, pc, RewardConfig(kl_beta=1.0), opt)["kl"]
    after = ppo_update(pol, b, pc, RewardConfig(kl_beta=1.0), opt)["kl"]
    assert after < 0.7 * before
