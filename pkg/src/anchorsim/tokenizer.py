"""K-disk motion vocabulary: fitting, nearest-token encoding, token application."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import kernels
from .kernels import wrap_angle
from .scenario import DT, AgentTrack, Pose2, Scenario

VOCAB_SCHEMA_VERSION = 1
DEFAULT_H = 2
DEFAULT_LAMBDA = 1.0


class TokenizerError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MotionSegment:
    """H relative poses (dx, dy, dtheta) in the frame of the segment start."""

    rel_poses: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rel_poses, dtype=np.float64).reshape(-1, 3).copy()
        if r.shape[0] < 1 or not np.all(np.isfinite(r)):
            raise TokenizerError("segment needs H >= 1 finite relative poses")
        r[:, 2] = wrap_angle(r[:, 2])
        object.__setattr__(self, "rel_poses", r)

    @property
    def H(self) -> int:
        return self.rel_poses.shape[0]

    def __eq__(self, other):
        return isinstance(other, MotionSegment) and np.array_equal(self.rel_poses, other.rel_poses)


@dataclass(eq=False)
class TokenVocab:
    tokens: np.ndarray  # (K, H, 3)
    radius: float
    distance_lambda: float = DEFAULT_LAMBDA
    coverage: float | None = None

    @property
    def K(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def H(self) -> int:
        return int(self.tokens.shape[1])

    def segment(self, j: int) -> MotionSegment:
        return MotionSegment(self.tokens[j])

    def __eq__(self, other):
        return (
            isinstance(other, TokenVocab)
            and self.radius == other.radius
            and self.distance_lambda == other.distance_lambda
            and np.array_equal(self.tokens, other.tokens)
        )

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(
                {
                    "schema_version": VOCAB_SCHEMA_VERSION,
                    "radius": self.radius,
                    "distance_lambda": self.distance_lambda,
                    "coverage": self.coverage,
                    "tokens": self.tokens.tolist(),
                }
            )
        )

    @classmethod
    def load(cls, path) -> "TokenVocab":
        d = json.loads(Path(path).read_text())
        if d.get("schema_version") != VOCAB_SCHEMA_VERSION:
            raise TokenizerError(f"unsupported vocab schema_version {d.get('schema_version')!r}")
        return cls(np.asarray(d["tokens"], dtype=np.float64), float(d["radius"]), float(d["distance_lambda"]), d.get("coverage"))


def _as_array(segments) -> np.ndarray:
    if isinstance(segments, np.ndarray):
        arr = np.asarray(segments, dtype=np.float64)
    else:
        segments = list(segments)
        if not segments:
            raise TokenizerError("no segments")
        arr = np.stack([s.rel_poses if isinstance(s, MotionSegment) else np.asarray(s, dtype=np.float64) for s in segments])
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise TokenizerError(f"segments must be (N, H, 3), got {arr.shape}")
    return arr


def segment_distance(a, b, lam: float = DEFAULT_LAMBDA) -> float:
    """max over steps of position error plus lam * |heading error|."""
    a = a.rel_poses if isinstance(a, MotionSegment) else np.asarray(a, dtype=np.float64)
    b = b.rel_poses if isinstance(b, MotionSegment) else np.asarray(b, dtype=np.float64)
    return float(kernels.segment_distance_numpy(a[None], b[None], lam)[0, 0])


def coverage_fraction(segments, vocab: TokenVocab) -> float:
    arr = _as_array(segments)
    _, d = kernels.nearest_token(arr, vocab.tokens, vocab.distance_lambda)
    return float(np.mean(d <= vocab.radius))


def fit_kdisk(segments, radius: float, k_max: int, seed: int, lam: float = DEFAULT_LAMBDA) -> TokenVocab:
    """Greedy K-disk: zero token first, then shuffled candidates kept iff farther than ``radius`` from all kept."""
    if not radius > 0:
        raise TokenizerError("radius must be > 0")
    arr = _as_array(segments)
    if arr.shape[0] == 0:
        raise TokenizerError("no segments")
    if k_max < 1:
        raise TokenizerError("k_max must be >= 1")
    H = arr.shape[1]
    zero = np.zeros((1, H, 3))
    order = np.random.default_rng(seed).permutation(arr.shape[0])
    chosen = kernels.kdisk_greedy(arr, order, zero, radius, lam, k_max)
    tokens = np.concatenate([zero, arr[chosen]], axis=0)
    vocab = TokenVocab(tokens, float(radius), float(lam))
    vocab.coverage = coverage_fraction(arr, vocab)
    return vocab


def fit_kdisk_to_size(segments, k_target: int, seed: int, lam: float = DEFAULT_LAMBDA, iters: int = 40) -> TokenVocab:
    """Bisect the radius so the greedy pass lands on ``k_target`` tokens with full coverage where possible."""
    arr = _as_array(segments)
    big = 10 * k_target + 10

    def count(r):
        return fit_kdisk(arr, r, big, seed, lam).K

    lo, hi = 1e-4, 1.0
    while count(hi) > k_target:
        hi *= 2.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if count(mid) > k_target:
            lo = mid
        else:
            hi = mid
    return fit_kdisk(arr, hi, k_target, seed, lam)


def encode_segment(seg, vocab: TokenVocab) -> int:
    r = seg.rel_poses if isinstance(seg, MotionSegment) else np.asarray(seg, dtype=np.float64)
    if r.shape[0] != vocab.H:
        raise TokenizerError(f"segment H={r.shape[0]} does not match vocab H={vocab.H}")
    idx, _ = kernels.nearest_token(r[None], vocab.tokens, vocab.distance_lambda)
    return int(idx[0])


def encode_segments(segs: np.ndarray, vocab: TokenVocab) -> np.ndarray:
    segs = _as_array(segs)
    if segs.shape[1] != vocab.H:
        raise TokenizerError("H mismatch")
    idx, _ = kernels.nearest_token(segs, vocab.tokens, vocab.distance_lambda)
    return idx


def compose(x, y, h, rel):
    """World poses of relative poses ``rel`` (..., H, 3) from start poses (...)."""
    x = np.asarray(x, dtype=np.float64)[..., None]
    y = np.asarray(y, dtype=np.float64)[..., None]
    h = np.asarray(h, dtype=np.float64)[..., None]
    c, s = np.cos(h), np.sin(h)
    wx = x + c * rel[..., 0] - s * rel[..., 1]
    wy = y + s * rel[..., 0] + c * rel[..., 1]
    wh = wrap_angle(h + rel[..., 2])
    return wx, wy, np.asarray(wh, dtype=np.float64)


def apply_token(pose: Pose2, speed: float, token, dt: float = DT) -> tuple[Pose2, float]:
    rel = token.rel_poses if isinstance(token, MotionSegment) else np.asarray(token, dtype=np.float64)
    wx, wy, wh = compose(pose.x, pose.y, pose.heading, rel)
    H = rel.shape[0]
    new_speed = math.hypot(rel[-1, 0], rel[-1, 1]) / (H * dt)
    return Pose2(float(wx[-1]), float(wy[-1]), float(wh[-1])), new_speed


def relative_segments(x, y, h, starts, H: int) -> np.ndarray:
    """Windows [s, s+H] of a pose sequence expressed in the start-pose frame -> (n, H, 3)."""
    starts = np.asarray(starts, dtype=np.int64)
    idx = starts[:, None] + np.arange(1, H + 1)[None, :]
    x0, y0, h0 = x[starts][:, None], y[starts][:, None], h[starts][:, None]
    dx, dy = x[idx] - x0, y[idx] - y0
    c, s = np.cos(h0), np.sin(h0)
    out = np.empty((starts.shape[0], H, 3))
    out[..., 0] = c * dx + s * dy
    out[..., 1] = -s * dx + c * dy
    out[..., 2] = wrap_angle(h[idx] - h0)
    return out


def track_window_starts(track: AgentTrack, H: int, start: int = 0, stride: int | None = None) -> np.ndarray:
    """Start indices of windows whose H+1 steps are all valid."""
    stride = H if stride is None else stride
    v = np.asarray(track.validity, dtype=bool)
    starts = np.arange(start, len(track) - H, stride)
    if starts.size == 0:
        return starts
    ok = np.array([v[s : s + H + 1].all() for s in starts])
    return starts[ok]


def tokenize_track(track: AgentTrack, vocab: TokenVocab, start: int = 0) -> np.ndarray:
    """Stride-H tokens for a track, starting at ``start``."""
    starts = track_window_starts(track, vocab.H, start)
    if starts.size == 0:
        raise TokenizerError(f"track needs >= {vocab.H + 1} consecutive valid steps")
    segs = relative_segments(track.x, track.y, track.heading, starts, vocab.H)
    return encode_segments(segs, vocab)


def window_reconstruction_error(track: AgentTrack, vocab: TokenVocab, start: int = 0) -> np.ndarray:
    """Per-window max position error when each window is replayed from its true start pose."""
    starts = track_window_starts(track, vocab.H, start)
    segs = relative_segments(track.x, track.y, track.heading, starts, vocab.H)
    ids = encode_segments(segs, vocab)
    wx, wy, _ = compose(track.x[starts], track.y[starts], track.heading[starts], vocab.tokens[ids])
    idx = starts[:, None] + np.arange(1, vocab.H + 1)[None, :]
    return np.hypot(wx - track.x[idx], wy - track.y[idx]).max(axis=1)


def expert_segments(scenarios: Iterable[Scenario], H: int = DEFAULT_H, stride: int = 1, mirror: bool = False) -> np.ndarray:
    """All valid expert windows. ``mirror`` appends their left/right reflections (dy, dθ negated)
    so a vocabulary fitted on them can steer both ways even when the logs turn one way only."""
    out = []
    for sc in scenarios:
        for tr in sc.tracks:
            starts = track_window_starts(tr, H, sc.init_step, stride)
            if starts.size:
                out.append(relative_segments(tr.x, tr.y, tr.heading, starts, H))
    if not out:
        raise TokenizerError("no usable expert windows")
    segs = np.concatenate(out, axis=0)
    if mirror:
        segs = np.concatenate([segs, segs * np.array([1.0, -1.0, -1.0])], axis=0)
    return segs
