"""Compiled (numba) vs pure-numpy kernels.

Times each hot kernel both ways on representative sizes and checks the
outputs agree. With ``--episodes`` it also times whole closed-loop episodes
in two subprocesses, one per value of ANCHORSIM_NUMBA.

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeat 20 --episodes 4
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from anchorsim import kernels
from anchorsim._accel import HAVE_NUMBA


def best_of(fn, args, repeat):
    fn(*args)  # warm-up / compile
    ts = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        ts.append(time.perf_counter() - t0)
    return min(ts)


def cases(rng):
    n = 32
    boxes = (rng.uniform(-20, 20, n), rng.uniform(-20, 20, n), rng.uniform(-3, 3, n),
             rng.uniform(4, 5, n), rng.uniform(1.8, 2.1, n), np.ones(n, bool))
    ang = np.linspace(0, 2 * np.pi, 200, endpoint=False)
    poly = np.stack([50 * np.cos(ang), 30 * np.sin(ang)], axis=1)
    pts = (rng.uniform(-60, 60, 4000), rng.uniform(-40, 40, 4000))
    segs = rng.normal(size=(400, 4)) * 30
    tok_segs = rng.normal(size=(5000, 2, 3))
    toks = rng.normal(size=(64, 2, 3))
    order = rng.permutation(5000)
    r = rng.normal(size=(128, 40))
    v = rng.normal(size=(128, 40))
    d = (rng.random((128, 40)) < 0.05).astype(float)
    return {
        "obb_overlap_matrix": (kernels.obb_overlap_matrix_loop, kernels.obb_overlap_matrix_numpy, boxes),
        "points_in_polygon": (kernels.points_in_polygon_loop, kernels.points_in_polygon_numpy, (*pts, poly)),
        "min_segment_distance": (kernels.min_segment_distance_loop, kernels.min_segment_distance_numpy, (*pts, segs)),
        "nearest_token": (kernels.nearest_token_loop, kernels.nearest_token_numpy, (tok_segs, toks, 1.0)),
        "kdisk_greedy": (kernels.kdisk_greedy_loop, kernels.kdisk_greedy_numpy,
                         (tok_segs, order, np.zeros((1, 2, 3)), 1.0, 1.0, 256)),
        "gae": (kernels.gae_loop, kernels.gae_numpy, (r, v, d, np.zeros(128), 0.99, 0.95)),
    }


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    a, b = np.asarray(a), np.asarray(b)
    if a.dtype.kind in "biu":
        return np.array_equal(a, b)
    return np.allclose(a, b, rtol=0, atol=1e-10)


EPISODE_SNIPPET = """
import json, time, numpy as np
from anchorsim._accel import backend
from anchorsim.synthetic import generate_suite
from anchorsim.tokenizer import expert_segments, fit_kdisk_to_size
from anchorsim.policy import LateFusionNet, policy_arch
from anchorsim.metrics import NetController, run_episode
from anchorsim.sim import SimConfig
suite = generate_suite({n}, 0)
vocab = fit_kdisk_to_size(expert_segments(suite), 64, 0)
net = LateFusionNet(policy_arch(vocab.K), seed=0)
ctl = NetController(net, vocab)
run_episode(suite[0], vocab, SimConfig(), ctl.act, np.random.default_rng(0))
t0 = time.perf_counter()
for i, sc in enumerate(suite):
    run_episode(sc, vocab, SimConfig(), ctl.act, np.random.default_rng(i))
print(json.dumps({{"backend": backend(), "sec_per_episode": (time.perf_counter() - t0) / len(suite)}}))
"""


def episode_timing(n):
    out = {}
    for flag in ("1", "0"):
        env = {**os.environ, "ANCHORSIM_NUMBA": flag}
        res = subprocess.run([sys.executable, "-c", EPISODE_SNIPPET.format(n=n)], env=env, capture_output=True, text=True)
        if res.returncode:
            raise RuntimeError(res.stderr)
        d = json.loads(res.stdout.strip().splitlines()[-1])
        out[d["backend"]] = d["sec_per_episode"]
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--episodes", type=int, default=0, help="also time N full episodes per backend")
    ap.add_argument("--json", help="write results here")
    args = ap.parse_args()
    if not HAVE_NUMBA:
        sys.exit("numba path disabled (ANCHORSIM_NUMBA=0 or numba missing); nothing to compare")

    rng = np.random.default_rng(args.seed)
    rows = {}
    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  agree")
    for name, (fast, ref, a) in cases(rng).items():
        tf = best_of(fast, a, args.repeat)
        tn = best_of(ref, a, args.repeat)
        ok = same(fast(*a), ref(*a))
        rows[name] = {"numba_s": tf, "numpy_s": tn, "speedup": tn / tf, "agree": bool(ok)}
        print(f"{name:<22}{tf * 1e3:>10.3f}{tn * 1e3:>10.3f}{tn / tf:>9.2f}  {ok}")

    result = {"kernels": rows}
    if args.episodes:
        ep = episode_timing(args.episodes)
        result["episode"] = ep
        print(f"episode: numba {ep['numba']:.3f}s  numpy {ep['numpy']:.3f}s  speedup {ep['numpy'] / ep['numba']:.2f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(result, f, indent=1)


if __name__ == "__main__":
    main()
