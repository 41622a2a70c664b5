import math

import numpy as np
import pytest

from anchorsim import tokenizer as tk
from anchorsim.scenario import Pose2
from anchorsim.tokenizer import TokenVocab

from conftest import rigid


def test_zero_token_first_and_separation(vocab):
    assert np.array_equal(vocab.tokens[0], np.zeros((vocab.H, 3)))
    for i in range(vocab.K):
        for j in range(i + 1, vocab.K):
            assert tk.segment_distance(vocab.tokens[i], vocab.tokens[j], vocab.distance_lambda) > vocab.radius


def test_encode_equals_linear_scan(vocab):
    rng = np.random.default_rng(0)
    segs = rng.normal(scale=[1.5, 0.2, 0.05], size=(1000, vocab.H, 3))
    segs[..., 0] += np.linspace(0, 3, vocab.H)
    got = tk.encode_segments(segs, vocab)
    for s, g in zip(segs, got):
        d = [tk.segment_distance(s, t, vocab.distance_lambda) for t in vocab.tokens]
        assert g == int(np.argmin(d))


def test_reconstruction_within_radius(suite, vocab):
    # every training window lies within the covering radius of some token
    assert vocab.coverage == 1.0
    for sc in suite:
        for tr in sc.tracks:
            err = tk.window_reconstruction_error(tr, vocab, sc.init_step)
            assert np.all(err <= vocab.radius + 1e-12)


def test_fit_to_size_hits_target(suite):
    v = tk.fit_kdisk_to_size(tk.expert_segments(suite), 16, 3)
    assert v.K == 16


def test_mirrored_segments_cover_both_turn_directions(suite):
    segs = tk.expert_segments(suite)
    both = tk.expert_segments(suite, mirror=True)
    assert len(both) == 2 * len(segs)
    assert np.array_equal(both[: len(segs)], segs)
    assert np.array_equal(both[len(segs) :, :, 0], segs[..., 0])
    assert np.array_equal(both[len(segs) :, :, 1:], -segs[..., 1:])
    v = tk.fit_kdisk_to_size(both, 24, 0)
    # every reflected token is still covered by the vocabulary
    flipped = v.tokens * np.array([1.0, -1.0, -1.0])
    assert tk.coverage_fraction(flipped, v) == 1.0


def test_fit_determinism(suite):
    segs = tk.expert_segments(suite)
    assert tk.fit_kdisk(segs, 0.3, 50, 1) == tk.fit_kdisk(segs, 0.3, 50, 1)


def test_apply_zero_token_is_identity(vocab):
    p = Pose2(3.0, -2.0, 0.4)
    q, v = tk.apply_token(p, 7.0, vocab.tokens[0])
    assert (q.x, q.y, q.heading) == (p.x, p.y, p.heading)
    assert v == 0.0


def test_apply_token_rigid_equivariance(vocab):
    rng = np.random.default_rng(1)
    for _ in range(50):
        x, y, h = rng.normal(size=3) * 5
        tx, ty, rot = rng.normal(size=3) * 4
        tok = vocab.tokens[rng.integers(vocab.K)]
        a, va = tk.apply_token(Pose2(x, y, h), 0.0, tok)
        x2, y2, h2 = rigid(x, y, h, tx, ty, rot)
        b, vb = tk.apply_token(Pose2(x2, y2, h2), 0.0, tok)
        ax, ay, ah = rigid(a.x, a.y, a.heading, tx, ty, rot)
        assert abs(ax - b.x) < 1e-9 and abs(ay - b.y) < 1e-9
        assert abs(math.remainder(ah - b.heading, 2 * math.pi)) < 1e-9
        assert va == vb


def test_relative_segments_invariant_under_rigid(suite):
    tr = suite[0].tracks[0]
    starts = np.arange(0, 20, 2)
    a = tk.relative_segments(tr.x, tr.y, tr.heading, starts, 2)
    x2, y2, h2 = rigid(tr.x, tr.y, tr.heading, 10.0, -4.0, 1.1)
    from anchorsim.kernels import wrap_angle

    b = tk.relative_segments(x2, y2, np.asarray(wrap_angle(h2)), starts, 2)
    assert np.allclose(a, b, atol=1e-9)


def test_vocab_save_load(tmp_path, vocab):
    vocab.save(tmp_path / "v.json")
    assert TokenVocab.load(tmp_path / "v.json") == vocab


def test_errors(vocab):
    with pytest.raises(tk.TokenizerError):
        tk.fit_kdisk(np.zeros((3, 2, 3)), 0.0, 4, 0)
    with pytest.raises(tk.TokenizerError):
        tk.encode_segment(np.zeros((3, 3)), vocab)
    with pytest.raises(tk.TokenizerError):
        tk.fit_kdisk(np.zeros((0, 2, 3)), 0.5, 4, 0)
