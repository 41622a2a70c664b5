"""Hot numeric kernels.

Every kernel exists twice: an explicit-loop version compiled with numba
(``*_loop``) and a vectorized numpy version (``*_numpy``). The public name
dispatches on :mod:`anchorsim._accel`. Both paths must agree exactly on
boolean/integer outputs and to rounding on float outputs.
"""

import math

import numpy as np

from ._accel import HAVE_NUMBA, njit

PI = math.pi
TWO_PI = 2.0 * math.pi


# ---------------------------------------------------------------- angles

@njit
def _wrap_scalar(a):
    if a > -PI and a <= PI:
        return a
    return PI - ((PI - a) % TWO_PI)


def wrap_angle(a):
    """Normalize angle(s) into (-pi, pi]. In-range values pass through untouched."""
    a = np.asarray(a, dtype=np.float64)
    inside = (a > -PI) & (a <= PI)
    out = np.where(inside, a, PI - np.mod(PI - a, TWO_PI))
    if out.ndim == 0:
        return float(out)
    return out


# ----------------------------------------------------- OBB overlap (SAT)

@njit
def obb_overlap_matrix_loop(x, y, h, length, width, active):
    n = x.shape[0]
    out = np.zeros((n, n), dtype=np.bool_)
    c = np.cos(h)
    s = np.sin(h)
    for i in range(n):
        if not active[i]:
            continue
        for j in range(i + 1, n):
            if not active[j]:
                continue
            dx = x[j] - x[i]
            dy = y[j] - y[i]
            hit = True
            for k in range(4):
                if k == 0:
                    ax, ay = c[i], s[i]
                elif k == 1:
                    ax, ay = -s[i], c[i]
                elif k == 2:
                    ax, ay = c[j], s[j]
                else:
                    ax, ay = -s[j], c[j]
                ri = 0.5 * length[i] * abs(c[i] * ax + s[i] * ay) + 0.5 * width[i] * abs(-s[i] * ax + c[i] * ay)
                rj = 0.5 * length[j] * abs(c[j] * ax + s[j] * ay) + 0.5 * width[j] * abs(-s[j] * ax + c[j] * ay)
                if abs(dx * ax + dy * ay) > ri + rj:
                    hit = False
                    break
            out[i, j] = hit
            out[j, i] = hit
    return out


def obb_overlap_matrix_numpy(x, y, h, length, width, active):
    x, y, h = (np.asarray(v, dtype=np.float64) for v in (x, y, h))
    length = np.asarray(length, dtype=np.float64)
    width = np.asarray(width, dtype=np.float64)
    active = np.asarray(active, dtype=bool)
    c, s = np.cos(h), np.sin(h)
    dx = x[None, :] - x[:, None]
    dy = y[None, :] - y[:, None]
    hit = np.ones(dx.shape, dtype=bool)
    # axes of box i (rows) then box j (cols)
    axes = (
        (c[:, None], s[:, None]),
        (-s[:, None], c[:, None]),
        (c[None, :], s[None, :]),
        (-s[None, :], c[None, :]),
    )
    for ax, ay in axes:
        ri = 0.5 * length[:, None] * np.abs(c[:, None] * ax + s[:, None] * ay) + 0.5 * width[:, None] * np.abs(
            -s[:, None] * ax + c[:, None] * ay
        )
        rj = 0.5 * length[None, :] * np.abs(c[None, :] * ax + s[None, :] * ay) + 0.5 * width[None, :] * np.abs(
            -s[None, :] * ax + c[None, :] * ay
        )
        hit &= ~(np.abs(dx * ax + dy * ay) > ri + rj)
    hit &= active[:, None] & active[None, :]
    np.fill_diagonal(hit, False)
    return hit


# --------------------------------------------------- point in polygon

@njit
def _point_in_polygon(px, py, poly):
    n = poly.shape[0]
    inside = False
    for k in range(n):
        x1 = poly[k, 0]
        y1 = poly[k, 1]
        x2 = poly[(k + 1) % n, 0]
        y2 = poly[(k + 1) % n, 1]
        # on-edge counts as inside
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        seg = math.hypot(x2 - x1, y2 - y1)
        if abs(cross) <= 1e-9 * max(seg, 1.0):
            if min(x1, x2) - 1e-12 <= px <= max(x1, x2) + 1e-12 and min(y1, y2) - 1e-12 <= py <= max(y1, y2) + 1e-12:
                return True
        if (y1 > py) != (y2 > py):
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            if px < xint:
                inside = not inside
    return inside


@njit
def points_in_polygon_loop(px, py, poly):
    out = np.zeros(px.shape[0], dtype=np.bool_)
    for i in range(px.shape[0]):
        out[i] = _point_in_polygon(px[i], py[i], poly)
    return out


def points_in_polygon_numpy(px, py, poly):
    px = np.asarray(px, dtype=np.float64)[:, None]
    py = np.asarray(py, dtype=np.float64)[:, None]
    poly = np.asarray(poly, dtype=np.float64)
    x1, y1 = poly[:, 0][None, :], poly[:, 1][None, :]
    nxt = np.roll(poly, -1, axis=0)
    x2, y2 = nxt[:, 0][None, :], nxt[:, 1][None, :]
    cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    seg = np.hypot(x2 - x1, y2 - y1)
    on_edge = (
        (np.abs(cross) <= 1e-9 * np.maximum(seg, 1.0))
        & (np.minimum(x1, x2) - 1e-12 <= px)
        & (px <= np.maximum(x1, x2) + 1e-12)
        & (np.minimum(y1, y2) - 1e-12 <= py)
        & (py <= np.maximum(y1, y2) + 1e-12)
    )
    straddle = (y1 > py) != (y2 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
    crossings = straddle & (px < xint)
    inside = (np.count_nonzero(crossings, axis=1) % 2) == 1
    return inside | on_edge.any(axis=1)


# --------------------------------------------- point-segment distance

@njit
def min_segment_distance_loop(px, py, segs):
    n = px.shape[0]
    out = np.empty(n)
    for i in range(n):
        best = np.inf
        for k in range(segs.shape[0]):
            ax, ay, bx, by = segs[k, 0], segs[k, 1], segs[k, 2], segs[k, 3]
            vx, vy = bx - ax, by - ay
            l2 = vx * vx + vy * vy
            t = 0.0
            if l2 > 0.0:
                t = ((px[i] - ax) * vx + (py[i] - ay) * vy) / l2
                t = min(1.0, max(0.0, t))
            qx = ax + t * vx - px[i]
            qy = ay + t * vy - py[i]
            d = math.sqrt(qx * qx + qy * qy)
            if d < best:
                best = d
        out[i] = best
    return out


def min_segment_distance_numpy(px, py, segs):
    px = np.asarray(px, dtype=np.float64)[:, None]
    py = np.asarray(py, dtype=np.float64)[:, None]
    segs = np.asarray(segs, dtype=np.float64)
    ax, ay, bx, by = (segs[:, k][None, :] for k in range(4))
    vx, vy = bx - ax, by - ay
    l2 = vx * vx + vy * vy
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(l2 > 0.0, ((px - ax) * vx + (py - ay) * vy) / l2, 0.0)
    t = np.clip(t, 0.0, 1.0)
    qx = ax + t * vx - px
    qy = ay + t * vy - py
    return np.sqrt(qx * qx + qy * qy).min(axis=1)


# ----------------------------------------------------- K-disk distance

@njit
def _seg_distance(a, b, lam):
    best = 0.0
    for h in range(a.shape[0]):
        dth = _wrap_scalar(a[h, 2] - b[h, 2])
        d = math.hypot(a[h, 0] - b[h, 0], a[h, 1] - b[h, 1]) + lam * abs(dth)
        if d > best:
            best = d
    return best


@njit
def nearest_token_loop(segs, tokens, lam):
    n = segs.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n)
    for i in range(n):
        best = np.inf
        arg = 0
        for k in range(tokens.shape[0]):
            d = _seg_distance(segs[i], tokens[k], lam)
            if d < best:  # strict: lowest index wins ties
                best = d
                arg = k
        idx[i] = arg
        dist[i] = best
    return idx, dist


def segment_distance_numpy(segs, tokens, lam):
    """Pairwise K-disk distance, (N, H, 3) x (K, H, 3) -> (N, K)."""
    segs = np.asarray(segs, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.float64)
    d = segs[:, None, :, :] - tokens[None, :, :, :]
    dth = wrap_angle(d[..., 2])
    per_step = np.hypot(d[..., 0], d[..., 1]) + lam * np.abs(dth)
    return per_step.max(axis=-1)


def nearest_token_numpy(segs, tokens, lam):
    segs = np.asarray(segs, dtype=np.float64)
    idx = np.empty(segs.shape[0], dtype=np.int64)
    dist = np.empty(segs.shape[0])
    for start in range(0, segs.shape[0], 4096):
        dm = segment_distance_numpy(segs[start : start + 4096], tokens, lam)
        a = np.argmin(dm, axis=1)  # first occurrence on ties
        idx[start : start + 4096] = a
        dist[start : start + 4096] = dm[np.arange(dm.shape[0]), a]
    return idx, dist


@njit
def kdisk_greedy_loop(cands, order, tokens0, radius, lam, k_max):
    k0 = tokens0.shape[0]
    chosen = np.empty(k_max, dtype=np.int64)
    bank = np.empty((k_max, cands.shape[1], cands.shape[2]))
    n_tok = 0
    for k in range(k0):
        bank[n_tok] = tokens0[k]
        n_tok += 1
    n_new = 0
    for oi in range(order.shape[0]):
        if n_tok >= k_max:
            break
        c = cands[order[oi]]
        ok = True
        for k in range(n_tok):
            if _seg_distance(c, bank[k], lam) <= radius:
                ok = False
                break
        if ok:
            bank[n_tok] = c
            n_tok += 1
            chosen[n_new] = order[oi]
            n_new += 1
    return chosen[:n_new]


def kdisk_greedy_numpy(cands, order, tokens0, radius, lam, k_max):
    cands = np.asarray(cands, dtype=np.float64)
    bank = [np.asarray(t, dtype=np.float64) for t in tokens0]
    chosen = []
    for oi in order:
        if len(bank) >= k_max:
            break
        c = cands[oi]
        dm = segment_distance_numpy(c[None], np.stack(bank), lam)[0]
        if np.all(dm > radius):
            bank.append(c)
            chosen.append(int(oi))
    return np.asarray(chosen, dtype=np.int64)


# ------------------------------------------------------------------ GAE

@njit
def gae_loop(rewards, values, dones, last_values, gamma, lam):
    n, t_len = rewards.shape
    adv = np.zeros((n, t_len))
    for i in range(n):
        running = 0.0
        next_v = last_values[i]
        for t in range(t_len - 1, -1, -1):
            nonterm = 1.0 - dones[i, t]
            delta = rewards[i, t] + gamma * next_v * nonterm - values[i, t]
            running = delta + gamma * lam * nonterm * running
            adv[i, t] = running
            next_v = values[i, t]
    return adv


def gae_numpy(rewards, values, dones, last_values, gamma, lam):
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    adv = np.zeros_like(rewards)
    running = np.zeros(rewards.shape[0])
    next_v = np.asarray(last_values, dtype=np.float64).copy()
    for t in range(rewards.shape[1] - 1, -1, -1):
        nonterm = 1.0 - dones[:, t]
        delta = rewards[:, t] + gamma * next_v * nonterm - values[:, t]
        running = delta + gamma * lam * nonterm * running
        adv[:, t] = running
        next_v = values[:, t]
    return adv


# -------------------------------------------------------------- dispatch

def _f(a):
    return np.ascontiguousarray(a, dtype=np.float64)


if HAVE_NUMBA:

    def obb_overlap_matrix(x, y, h, length, width, active):
        return obb_overlap_matrix_loop(_f(x), _f(y), _f(h), _f(length), _f(width), np.ascontiguousarray(active, dtype=np.bool_))

    def points_in_polygon(px, py, poly):
        return points_in_polygon_loop(_f(px), _f(py), _f(poly))

    def min_segment_distance(px, py, segs):
        return min_segment_distance_loop(_f(px), _f(py), _f(segs))

    def nearest_token(segs, tokens, lam):
        return nearest_token_loop(_f(segs), _f(tokens), float(lam))

    def kdisk_greedy(cands, order, tokens0, radius, lam, k_max):
        return kdisk_greedy_loop(
            _f(cands), np.ascontiguousarray(order, dtype=np.int64), _f(tokens0), float(radius), float(lam), int(k_max)
        )

    def gae(rewards, values, dones, last_values, gamma, lam):
        return gae_loop(_f(rewards), _f(values), _f(dones), _f(last_values), float(gamma), float(lam))

else:
    obb_overlap_matrix = obb_overlap_matrix_numpy
    points_in_polygon = points_in_polygon_numpy
    min_segment_distance = min_segment_distance_numpy
    nearest_token = nearest_token_numpy
    kdisk_greedy = kdisk_greedy_numpy
    gae = gae_numpy


def obb_overlap_pairs(x1, y1, h1, l1, w1, x2, y2, h2, l2, w2):
    """Elementwise SAT between two broadcastable sets of boxes (numpy only)."""
    c1, s1, c2, s2 = np.cos(h1), np.sin(h1), np.cos(h2), np.sin(h2)
    dx = np.asarray(x2, dtype=np.float64) - x1
    dy = np.asarray(y2, dtype=np.float64) - y1
    hit = np.ones(np.broadcast(dx, c1, c2).shape, dtype=bool)
    for ax, ay in ((c1, s1), (-s1, c1), (c2, s2), (-s2, c2)):
        r1 = 0.5 * l1 * np.abs(c1 * ax + s1 * ay) + 0.5 * w1 * np.abs(-s1 * ax + c1 * ay)
        r2 = 0.5 * l2 * np.abs(c2 * ax + s2 * ay) + 0.5 * w2 * np.abs(-s2 * ax + c2 * ay)
        hit &= ~(np.abs(dx * ax + dy * ay) > r1 + r2)
    return hit
