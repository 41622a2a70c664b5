import math

import numpy as np
import pytest

from anchorsim import kernels, nn
from anchorsim.nn import CategoricalDist, kl_from_log_probs, log_softmax
from anchorsim.policy import LateFusionNet, policy_arch, reference_arch
from anchorsim.rl import PpoConfig, ppo_loss_and_grads
from anchorsim.sim import SimConfig, build_observations, reset

from oracles import finite_difference_check, gae_double_loop


def _obs(suite, context):
    sc = suite[0]
    w = reset(sc)
    ids = np.flatnonzero(sc.controlled)
    return build_observations(w, sc, ids, np.zeros(ids.size, bool), SimConfig(), context=context)


def _fd_agree(rows, rtol=1e-3, atol=1e-7):
    bad = [r for r in rows if abs(r[2] - r[3]) > rtol * max(abs(r[2]), abs(r[3])) + atol]
    return bad


@pytest.mark.parametrize("kind", ["policy", "reference"])
def test_backprop_matches_finite_differences(suite, vocab, kind):
    if kind == "policy":
        net = LateFusionNet(policy_arch(vocab.K, embed=12, hidden=16), seed=3)
    else:
        net = LateFusionNet(reference_arch(vocab.K, embed=12, hidden=20), seed=4)
    obs = _obs(suite, context=kind == "reference")
    rng = np.random.default_rng(0)
    wl = rng.normal(size=(len(obs), vocab.K))
    wv = rng.normal(size=len(obs))

    def loss():
        logits, value, _ = net.forward(obs, dropout_rng=np.random.default_rng(5))
        out = float((wl * logits).sum())
        if value is not None:
            out += float((wv * value).sum())
        return out

    logits, value, cache = net.forward(obs, dropout_rng=np.random.default_rng(5))
    grads = net.backward(cache, wl, wv if value is not None else None)
    rows = finite_difference_check(loss, net.params, grads, np.random.default_rng(1))
    assert not _fd_agree(rows)


def test_ppo_loss_gradient_matches_finite_differences(suite, vocab):
    net = LateFusionNet(policy_arch(vocab.K, embed=12, hidden=16), seed=3)
    obs = _obs(suite, context=False)
    n = len(obs)
    rng = np.random.default_rng(2)
    acts = rng.integers(0, vocab.K, n)
    lp0 = log_softmax(net.forward(obs)[0])[np.arange(n), acts]
    old = lp0 + rng.uniform(-0.1, 0.1, n)  # ratios well inside the clip range
    adv = rng.normal(size=n)
    ret = rng.normal(size=n)
    ref = log_softmax(rng.normal(size=(n, vocab.K)))
    pc = PpoConfig(ent_coef=0.01)

    def f():
        return ppo_loss_and_grads(net, obs, acts, old, adv, ret, ref, pc, 0.7)[0]

    _, grads, _ = ppo_loss_and_grads(net, obs, acts, old, adv, ret, ref, pc, 0.7)
    rows = finite_difference_check(f, net.params, grads, np.random.default_rng(3), per_tensor=4)
    assert not _fd_agree(rows)


def test_kl_closed_form_matches_monte_carlo():
    rng = np.random.default_rng(0)
    lp = log_softmax(rng.normal(size=12))
    lq = log_softmax(rng.normal(size=12))
    kl = float(kl_from_log_probs(lp, lq))
    x = CategoricalDist(lp).sample(rng, u=rng.random(1_000_000))
    s = lp[x] - lq[x]
    se = s.std() / math.sqrt(s.size)
    assert abs(s.mean() - kl) <= 3 * se


def test_kl_zero_on_identical_and_nonnegative():
    rng = np.random.default_rng(1)
    lp = log_softmax(rng.normal(size=(50, 9)))
    assert np.allclose(kl_from_log_probs(lp, lp), 0.0, atol=1e-12)
    lq = log_softmax(rng.normal(size=(50, 9)))
    assert np.all(kl_from_log_probs(lp, lq) >= 0)


def test_kl_shape_mismatch():
    with pytest.raises(nn.ShapeError):
        kl_from_log_probs(np.zeros(3), np.zeros(4))


def test_kl_floor_keeps_finite():
    lp = np.log(np.array([0.5, 0.5]))
    lq = np.array([0.0, -np.inf])
    assert np.isfinite(kl_from_log_probs(lp, lq))


def test_kl_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    lp = log_softmax(rng.normal(size=7))
    z = rng.normal(size=7)
    g = nn.kl_grad_wrt_logits(lp, log_softmax(z))
    h = 1e-6
    for i in range(7):
        e = np.zeros(7)
        e[i] = h
        num = (kl_from_log_probs(lp, log_softmax(z + e)) - kl_from_log_probs(lp, log_softmax(z - e))) / (2 * h)
        assert abs(num - g[i]) < 1e-7


@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_gae_matches_double_loop(backend):
    rng = np.random.default_rng(0)
    r = rng.normal(size=(6, 17))
    v = rng.normal(size=(6, 17))
    d = (rng.random((6, 17)) < 0.15).astype(float)
    last = rng.normal(size=6)
    fn = kernels.gae if backend == "numba" else kernels.gae_numpy
    got = fn(r, v, d, last, 0.99, 0.95)
    assert np.max(np.abs(got - gae_double_loop(r, v, d, last, 0.99, 0.95))) <= 1e-10


def test_gae_lambda_extremes():
    rng = np.random.default_rng(1)
    r = rng.normal(size=(2, 5))
    v = rng.normal(size=(2, 5))
    d = np.zeros((2, 5))
    d[:, -1] = 1
    last = np.zeros(2)
    one_step = kernels.gae(r, v, d, last, 0.9, 0.0)
    v_next = np.concatenate([v[:, 1:], np.zeros((2, 1))], axis=1)
    assert np.allclose(one_step, r + 0.9 * v_next * (1 - d) - v, atol=1e-12)
    mc = kernels.gae(r, v, d, last, 0.9, 1.0)
    ret = np.zeros_like(r)
    acc = np.zeros(2)
    for t in range(4, -1, -1):
        acc = r[:, t] + 0.9 * acc
        ret[:, t] = acc
    assert np.allclose(mc, ret - v, atol=1e-12)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(20, 33)) * 5
    c = rng.normal(size=(20, 1)) * 100
    assert np.max(np.abs(log_softmax(z) - log_softmax(z + c))) <= 1e-9


def test_softmax_large_logits_finite():
    z = np.array([[1e4, 0.0, -1e4]])
    lp = log_softmax(z)
    assert np.all(np.isfinite(lp[:, :2]))
    assert abs(np.exp(lp).sum() - 1) < 1e-12


def test_categorical_sample_inverse_cdf_and_errors():
    d = CategoricalDist(np.log(np.array([[0.2, 0.3, 0.5]])))
    assert d.sample(None, u=np.array([0.1]))[0] == 0
    assert d.sample(None, u=np.array([0.45]))[0] == 1
    assert d.sample(None, u=np.array([0.99]))[0] == 2
    with pytest.raises(IndexError):
        d.log_prob(np.array([3]))
    assert abs(float(d.entropy()[0]) + sum(p * math.log(p) for p in (0.2, 0.3, 0.5))) < 1e-12


def test_categorical_ops_modes():
    d = CategoricalDist(np.zeros(4))
    assert nn.categorical_ops(d, "log_prob", token_id=2) == pytest.approx(-math.log(4))
    assert nn.categorical_ops(d, "entropy") == pytest.approx(math.log(4))
    a = nn.categorical_ops(d, "sample", seed=3)
    b = nn.categorical_ops(d, "sample", seed=3)
    assert a == b
    with pytest.raises(ValueError):
        nn.categorical_ops(d, "bogus")


def test_adam_first_step_and_clipping():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([3.0, 4.0])}
    st = nn.AdamState.for_params(p)
    norm = nn.adam_step(p, g, st, lr=0.1, clip_norm=1.0)
    assert norm == pytest.approx(5.0)
    # first Adam step moves each coordinate by ~lr in the sign direction
    assert np.allclose(p["w"], [0.9, -2.1], atol=1e-6)


def test_adam_rejects_nonfinite():
    p = {"w": np.zeros(2)}
    with pytest.raises(nn.NonFiniteError):
        nn.adam_step(p, {"w": np.array([np.nan, 0.0])}, nn.AdamState.for_params(p), 0.1)


def test_checkpoint_roundtrip_bit_exact(tmp_path, small_policy):
    st = nn.AdamState.for_params(small_policy.params)
    st.t = 3
    small_policy.save(tmp_path / "c.json", st, {"seed": 1})
    ck = nn.load_checkpoint(tmp_path / "c.json")
    for k, v in small_policy.params.items():
        assert np.array_equal(v, ck["params"][k])
    assert ck["optimizer"].t == 3
    net2 = LateFusionNet.load(tmp_path / "c.json")
    assert net2.arch == small_policy.arch


def test_checkpoint_schema_version_rejected(tmp_path, small_policy):
    import json

    small_policy.save(tmp_path / "c.json")
    d = json.loads((tmp_path / "c.json").read_text())
    d["schema_version"] = 99
    (tmp_path / "c.json").write_text(json.dumps(d))
    with pytest.raises(ValueError):
        nn.load_checkpoint(tmp_path / "c.json")


def test_zero_actor_gives_uniform(suite, vocab):
    net = LateFusionNet(reference_arch(vocab.K, embed=8, hidden=8), seed=0, zero_actor=True)
    lp = log_softmax(net.forward(_obs(suite, True))[0])
    assert np.allclose(lp, -math.log(vocab.K))
