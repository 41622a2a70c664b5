from dataclasses import replace

import numpy as np
import pytest

from anchorsim.policy import LateFusionNet, bc_train, build_bc_dataset, expert_pairs, pursuit_segments, reference_arch
from anchorsim.sim import SimConfig, build_observations, reset
from anchorsim.tokenizer import expert_segments, fit_kdisk_to_size


class ConstRng:
    """Stands in for a Generator: every normal draw returns +sd."""

    def normal(self, mu, sd, n):
        return np.full(n, mu + sd)


def test_partner_order_does_not_matter(suite, small_policy):
    sc = suite[0]
    w = reset(sc, SimConfig())
    ids = np.flatnonzero(sc.controlled)
    obs = build_observations(w, sc, ids, None, SimConfig())
    perm = np.random.default_rng(0).permutation(obs.partners.shape[1])
    shuffled = replace(obs, partners=obs.partners[:, perm], partner_mask=obs.partner_mask[:, perm], partner_ids=None)
    a, va, _ = small_policy.forward(obs)
    b, vb, _ = small_policy.forward(shuffled)
    assert np.allclose(a, b, rtol=0, atol=1e-12)
    assert np.allclose(va, vb, rtol=0, atol=1e-12)


def test_bc_dataset_split_and_targets(suite, vocab):
    ds = build_bc_dataset(suite, vocab)
    assert len(ds.val_targets) > 0 and len(ds.train_targets) > len(ds.val_targets)
    assert ds.train_targets.max() < vocab.K and ds.val_targets.max() < vocab.K
    _, clean_val = expert_pairs(suite[-1:], vocab)
    assert np.array_equal(ds.val_targets, clean_val)


@pytest.fixture(scope="module")
def mirrored_vocab(suite):
    return fit_kdisk_to_size(expert_segments(suite, mirror=True), 24, 0)


@pytest.mark.parametrize("kappa", [0.0, 0.05, -0.2, 1e-8])
def test_pursuit_segments_follow_the_circle(kappa):
    # a point on the circle of curvature kappa through the origin yields that circle
    L = 6.0
    if kappa == 0.0:
        px, py = L, 0.0
    else:
        px, py = np.sin(kappa * L) / kappa, 2 * np.sin(kappa * L / 2) ** 2 / kappa
    arc = np.array([[0.7, 1.5]])
    got = pursuit_segments(np.zeros(1), np.zeros(1), np.zeros(1), np.array([px]), np.array([py]), arc)[0]
    for (x, y, th), s_ in zip(got, arc[0]):
        ex = s_ if kappa == 0.0 else np.sin(kappa * s_) / kappa
        ey = 0.0 if kappa == 0.0 else 2 * np.sin(kappa * s_ / 2) ** 2 / kappa
        assert x == pytest.approx(ex, abs=1e-12)
        assert y == pytest.approx(ey, abs=1e-12)
        assert th == pytest.approx(kappa * s_, abs=1e-12)


def test_pursuit_segments_rigid_invariance():
    rng = np.random.default_rng(0)
    x0, y0, h0 = rng.normal(size=5), rng.normal(size=5), rng.uniform(-3, 3, 5)
    px, py = x0 + rng.normal(5, 1, 5), y0 + rng.normal(0, 2, 5)
    arc = np.cumsum(rng.uniform(0.5, 1.0, (5, 2)), axis=1)
    a = pursuit_segments(x0, y0, h0, px, py, arc)
    c, s = np.cos(0.7), np.sin(0.7)
    rot = lambda x, y: (c * x - s * y + 3.0, s * x + c * y - 1.0)
    b = pursuit_segments(*rot(x0, y0), h0 + 0.7, *rot(px, py), arc)
    assert np.allclose(a, b, rtol=0, atol=1e-9)


@pytest.mark.parametrize("noise", [(0.6, 0.0), (0.0, 0.1)])
def test_corrective_labels_steer_back(suite, mirrored_vocab, noise):
    # a start pose pushed or yawed to the left must be labelled with a right turn;
    # the coarse vocabulary maps most small corrections back onto the clean token
    v = mirrored_vocab
    _, clean = expert_pairs(suite, v)
    _, jit = expert_pairs(suite, v, noise=noise, rng=ConstRng())
    d = v.tokens[jit][:, -1, 2] - v.tokens[clean][:, -1, 2]
    assert d.mean() < 0
    assert (d < 0).mean() > 0.1
    assert (d < 0).mean() > 20 * (d > 0).mean()


def test_augmented_dataset_grows_train_only(suite, vocab):
    base = build_bc_dataset(suite, vocab)
    aug = build_bc_dataset(suite, vocab, n_augment=2, seed=3)
    assert len(aug.train_targets) == 3 * len(base.train_targets)
    assert np.array_equal(aug.val_targets, base.val_targets)
    again = build_bc_dataset(suite, vocab, n_augment=2, seed=3)
    assert np.array_equal(aug.train_targets, again.train_targets)


def test_bc_training_lowers_training_nll(suite, vocab):
    # six scenarios overfit quickly, so only the training loss is checked here
    ds = build_bc_dataset(suite, vocab)
    net = LateFusionNet(reference_arch(vocab.K, embed=16, hidden=32), seed=0, zero_actor=True)
    _, rep = bc_train(net, ds, 3, lr=3e-3, seed=0)
    assert rep.initial_val_nll == pytest.approx(np.log(vocab.K), abs=1e-9)
    assert rep.rows[0][1] == pytest.approx(np.log(vocab.K), abs=1e-9)
    assert rep.rows[-1][1] < rep.rows[0][1] - 0.1
