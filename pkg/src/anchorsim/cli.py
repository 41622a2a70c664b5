"""Command-line pipeline: scenarios -> vocabulary -> reference -> policy -> reports."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np
import yaml

from . import RUN_CONFIG_NAME, __version__
from .harness import (
    STRATEGY_TAGS,
    EvalStrategy,
    PolicyPlanner,
    correlation_stats,
    planner_eval_matrix,
    throughput_bench,
    write_bench,
    write_correlation_csv,
)
from .metrics import NetController, realism_score, run_episode, simulate_rollout_set, trace_rows, write_realism_csv, write_realism_json
from .planners import FRENET_PRESETS, IDM_PRESETS, load_presets
from .policy import LateFusionNet, bc_train, build_bc_dataset, reference_arch
from .rl import TrainConfig, train
from .scenario import load_scenario_dir, read_scenario, write_scenario
from .sim import DUMP_COLUMNS, SimConfig
from .synthetic import TEMPLATES, generate_suite
from .tokenizer import TokenVocab, expert_segments, fit_kdisk, fit_kdisk_to_size

CONFIG_ERROR = 2
RUNTIME_ERROR = 3

log = logging.getLogger("anchorsim")


class ConfigError(Exception):
    pass


DEFAULTS = {
    "gen-data": {"template": "mixed", "n": 50, "n_agents_min": 4, "n_agents_max": 8},
    "fit-vocab": {"scenarios": None, "k": 64, "radius": None, "H": 2, "stride": 1, "mirror": True},
    "train-ref": {
        "scenarios": None,
        "vocab": None,
        "epochs": 15,
        "lr": 1e-3,
        "batch_size": 256,
        "val_fraction": 0.2,
        "n_augment": 1,
        "aug_noise": [0.5, 0.05],
        "hidden": 256,
        "embed": 128,
        "dropout": 0.01,
    },
    "train": {
        "scenarios": None,
        "vocab": None,
        "reference": None,
        "resume": None,
        "reward": {},
        "ppo": {},
        "sim": {},
        "embed": 64,
        "hidden": 128,
        "dropout": 0.01,
        "reference_input": "context",
    },
    "eval-realism": {"scenarios": None, "vocab": None, "checkpoint": None, "S": 32, "max_scenarios": None, "greedy": False},
    "eval-planners": {
        "scenarios": None,
        "vocab": None,
        "reference": None,
        "background_policy": None,
        "policies": [],
        "presets": None,
        "strategies": list(STRATEGY_TAGS),
        "max_scenarios": 10,
    },
    "bench": {"scenarios": None, "vocab": None, "policy": None, "reference": None, "n_worlds": 8, "seeds": [0, 1, 2], "episodes": None, "warmup": 1},
    "rollout-dump": {"scenarios": None, "vocab": None, "checkpoint": None, "scenario_id": None},
}

# keys that must be present (non-null) for each command
REQUIRED = {
    "fit-vocab": ("scenarios",),
    "train-ref": ("scenarios", "vocab"),
    "train": ("scenarios", "vocab"),
    "eval-realism": ("scenarios", "vocab", "checkpoint"),
    "eval-planners": ("scenarios", "vocab"),
    "bench": ("scenarios", "vocab", "policy", "reference"),
    "rollout-dump": ("scenarios", "vocab", "checkpoint"),
}
PATH_KEYS = ("scenarios", "vocab", "reference", "resume", "checkpoint", "presets", "policy", "background_policy")


# ------------------------------------------------------------------ config

class _Loader(yaml.SafeLoader):
    pass


# YAML 1.1 reads 1e-3 as a string; accept exponents without a dot or sign
_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?|\.[0-9_]+)(?:[eE][-+]?[0-9]+)?$|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$""", re.X),
    list("-+0123456789."),
)


def _yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        d = _yaml(p.read_text())  # JSON is a YAML subset
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {p} is not valid YAML/JSON: {e}") from e
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"config file {p} must hold a mapping")
    return d


def parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    k, v = item.split("=", 1)
    return k.strip(), _yaml(v)


def resolve_config(command: str, args) -> dict:
    """Defaults <- config file <- --set overrides <- named flags; unknown keys rejected."""
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    file_cfg = load_config_file(args.config) if args.config else {}
    seed = file_cfg.pop("seed", None)
    overrides = dict(file_cfg)
    for item in args.set or []:
        k, v = parse_override(item)
        if k == "seed":
            seed = v
            continue
        if "." in k:  # nested keys for train sections, e.g. reward.kl_beta=0
            head, tail = k.split(".", 1)
            overrides.setdefault(head, {})
            if not isinstance(overrides[head], dict):
                raise ConfigError(f"{head} is not a section")
            overrides[head] = {**overrides[head], tail: v}
        else:
            overrides[k] = v
    for k, v in vars(args).items():
        if k.startswith("opt_") and v is not None:
            overrides[k[4:]] = v
    unknown = set(overrides) - set(cfg)
    if unknown:
        raise ConfigError(f"unknown {command} config keys: {sorted(unknown)} (allowed: {sorted(cfg)})")
    for k, v in overrides.items():
        if isinstance(cfg[k], dict) and isinstance(v, dict):
            cfg[k] = {**cfg[k], **v}
        else:
            cfg[k] = v
    if args.seed is not None:
        seed = args.seed
    cfg["seed"] = 0 if seed is None else seed
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    for k in REQUIRED.get(command, ()):
        if cfg.get(k) in (None, ""):
            raise ConfigError(f"{command}: missing required input {k!r} (flag --{k.replace('_', '-')} or config key)")
    for k in PATH_KEYS:
        if cfg.get(k) and not Path(cfg[k]).exists():
            raise ConfigError(f"{command}: {k} path does not exist: {cfg[k]}")
    for p in cfg.get("policies") or []:
        if not Path(p).exists():
            raise ConfigError(f"{command}: policy checkpoint does not exist: {p}")
    return cfg


def echo_config(command: str, cfg: dict, out: Path, workers: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "version": __version__, "workers": workers, **cfg}
    text = json.dumps(payload, indent=2, sort_keys=True, default=str)
    (out / RUN_CONFIG_NAME).write_text(text + "\n")
    print(text)


# ---------------------------------------------------------------- commands

def _scenarios(cfg, limit=None):
    p = Path(cfg["scenarios"])
    sc = [read_scenario(p)] if p.is_file() else load_scenario_dir(p)
    if not sc:
        raise ConfigError(f"no scenario files in {p}")
    return sc[:limit] if limit else sc


def cmd_gen_data(cfg, out: Path, workers: int):
    tpl = cfg["template"]
    templates = TEMPLATES if tpl == "mixed" else (tpl,)
    if any(t not in TEMPLATES for t in templates):
        raise ConfigError(f"unknown template {tpl!r}; choose from {TEMPLATES} or 'mixed'")
    suite = generate_suite(int(cfg["n"]), cfg["seed"], (int(cfg["n_agents_min"]), int(cfg["n_agents_max"])), templates)
    for sc in suite:
        write_scenario(sc, out / f"{sc.id}.json")
    print(f"wrote {len(suite)} scenarios to {out}")


def cmd_fit_vocab(cfg, out: Path, workers: int):
    segs = expert_segments(_scenarios(cfg), int(cfg["H"]), int(cfg["stride"]), bool(cfg["mirror"]))
    if cfg["radius"] is not None:
        vocab = fit_kdisk(segs, float(cfg["radius"]), int(cfg["k"]), cfg["seed"])
    else:
        vocab = fit_kdisk_to_size(segs, int(cfg["k"]), cfg["seed"])
    vocab.save(out / "vocab.json")
    print(f"K={vocab.K} radius={vocab.radius:.5f} coverage={vocab.coverage:.4f} from {len(segs)} segments")


def cmd_train_ref(cfg, out: Path, workers: int):
    vocab = TokenVocab.load(cfg["vocab"])
    noise = tuple(float(x) for x in cfg["aug_noise"])
    if len(noise) != 2 or min(noise) < 0:
        raise ConfigError("aug_noise must be [lateral_m, yaw_rad], both >= 0")
    ds = build_bc_dataset(
        _scenarios(cfg), vocab, val_fraction=float(cfg["val_fraction"]), n_augment=int(cfg["n_augment"]), noise=noise, seed=cfg["seed"]
    )
    arch = reference_arch(vocab.K, hidden=int(cfg["hidden"]), embed=int(cfg["embed"]), dropout=float(cfg["dropout"]))
    net = LateFusionNet(arch, seed=cfg["seed"], zero_actor=True)
    net, rep = bc_train(net, ds, int(cfg["epochs"]), float(cfg["lr"]), cfg["seed"], int(cfg["batch_size"]), log=print)
    net.save(out / "reference.json")
    rep.to_csv(out / "bc_report.csv")
    print(f"val top-1 {rep.final_val_acc:.4f}, val NLL {rep.final_val_nll:.4f}")


def cmd_train(cfg, out: Path, workers: int):
    vocab = TokenVocab.load(cfg["vocab"])
    try:
        tc = TrainConfig.from_dict({k: cfg[k] for k in ("reward", "ppo", "sim", "embed", "hidden", "dropout", "reference_input")})
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    ref = LateFusionNet.load(cfg["reference"]) if cfg["reference"] else None
    if ref is None and (tc.reward.kl_beta != 0.0 or tc.reward.w_humanlike != 0.0):
        raise ConfigError("train: reference checkpoint required when kl_beta or w_humanlike is non-zero")
    if ref is not None and ref.arch.K != vocab.K:
        raise ConfigError("reference K does not match the vocabulary")
    state = train(tc, _scenarios(cfg), vocab, ref, out, cfg["seed"], workers, resume_from=cfg["resume"])
    last = state.report[-1] if state.report else {}
    print(f"updates {state.update} env_steps {state.env_steps} final kl {last.get('kl', float('nan')):.4f}")


def cmd_eval_realism(cfg, out: Path, workers: int):
    vocab = TokenVocab.load(cfg["vocab"])
    net = LateFusionNet.load(cfg["checkpoint"])
    if net.arch.K != vocab.K:
        raise ConfigError("checkpoint K does not match the vocabulary")
    S = int(cfg["S"])
    reports = []
    for i, sc in enumerate(_scenarios(cfg, cfg["max_scenarios"])):
        seeds = [int(s) for s in np.random.default_rng([cfg["seed"], i]).choice(2**31, size=S, replace=False)]
        rs = simulate_rollout_set(net, sc, S, seeds, vocab, greedy=bool(cfg["greedy"]))
        reports.append(realism_score(rs, sc))
    write_realism_csv(reports, out / "realism.csv")
    write_realism_json(reports, out / "realism.json")
    comp = float(np.mean([r.composite for r in reports]))
    ade = float(np.mean([r.min_ade for r in reports]))
    print(f"composite {comp:.4f} minADE {ade:.4f} over {len(reports)} scenarios")


def cmd_eval_planners(cfg, out: Path, workers: int):
    vocab = TokenVocab.load(cfg["vocab"])
    planners = load_presets(cfg["presets"]) if cfg["presets"] else {**IDM_PRESETS, **{f"Frenet {k}": v for k, v in FRENET_PRESETS.items()}}
    for p in cfg["policies"] or []:
        planners[f"policy:{Path(p).stem}"] = PolicyPlanner(LateFusionNet.load(p), vocab)
    strategies = []
    for tag in cfg["strategies"]:
        if tag == "log_replay":
            strategies.append(EvalStrategy(tag))
        elif tag == "reference_rollout":
            if not cfg["reference"]:
                raise ConfigError("reference_rollout strategy needs 'reference'")
            strategies.append(EvalStrategy(tag, LateFusionNet.load(cfg["reference"])))
        elif tag == "policy_rollout":
            bg = cfg["background_policy"] or ((cfg["policies"] or [None])[0])
            if not bg:
                raise ConfigError("policy_rollout strategy needs 'background_policy' or at least one entry in 'policies'")
            strategies.append(EvalStrategy(tag, LateFusionNet.load(bg)))
        else:
            raise ConfigError(f"unknown strategy {tag!r}")
    scen = _scenarios(cfg, cfg["max_scenarios"])
    mat = planner_eval_matrix(planners, scen, strategies, cfg["seed"], vocab, workers=workers)
    mat.to_csv(out / "score_matrix.csv")
    rows = []
    names = [s.name for s in strategies]
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            try:
                rows.append((names[i], names[j], correlation_stats(mat, names[i], names[j])))
            except ValueError as e:
                print(f"correlation {names[i]} vs {names[j]} skipped: {e}")
    write_correlation_csv(rows, out / "correlations.csv")
    print(f"{len(mat.cells)} cells, {len(mat.failures())} failures")


def cmd_bench(cfg, out: Path, workers: int):
    vocab = TokenVocab.load(cfg["vocab"])
    scen = _scenarios(cfg)
    results = []
    for name in ("policy", "reference"):
        net = LateFusionNet.load(cfg[name])
        r = throughput_bench(net, scen, vocab, int(cfg["n_worlds"]), cfg["seeds"], episodes_per_seed=cfg["episodes"], warmup=int(cfg["warmup"]), name=name)
        print(r.to_text())
        results.append(r)
    rep = write_bench(results, out / "bench.json")
    print(f"policy/reference ratio {rep['policy_reference_ratio']:.3f}")


def cmd_rollout_dump(cfg, out: Path, workers: int):
    vocab = TokenVocab.load(cfg["vocab"])
    net = LateFusionNet.load(cfg["checkpoint"])
    scen = _scenarios(cfg)
    if cfg["scenario_id"] is not None:
        scen = [s for s in scen if s.id == cfg["scenario_id"]]
        if not scen:
            raise ConfigError(f"scenario id {cfg['scenario_id']!r} not found")
    rows = []
    for i, sc in enumerate(scen):
        rng = np.random.default_rng([cfg["seed"], i])
        tr = run_episode(sc, vocab, SimConfig(), NetController(net, vocab).act, rng)
        rows.extend(trace_rows(sc, tr))
    with open(out / "rollout.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(DUMP_COLUMNS)
        w.writerows(rows)
    print(f"wrote {len(rows)} rows")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit-vocab": cmd_fit_vocab,
    "train-ref": cmd_train_ref,
    "train": cmd_train,
    "eval-realism": cmd_eval_realism,
    "eval-planners": cmd_eval_planners,
    "bench": cmd_bench,
    "rollout-dump": cmd_rollout_dump,
}


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anchorsim", description=__doc__)
    ap.add_argument("--version", action="version", version=f"anchorsim {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", "").replace("_", " "))
        p.add_argument("--config", help="YAML or JSON file with this command's parameters")
        p.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--workers", type=int, default=1, help="worker threads for simulation stepping")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (nested: reward.kl_beta=0)")
        p.add_argument("-v", "--verbose", action="store_true")
        keys = DEFAULTS[name]
        for k in ("scenarios", "vocab", "reference", "checkpoint", "policy", "resume", "presets"):
            if k in keys:
                p.add_argument(f"--{k}", dest=f"opt_{k}", default=None)
        if name == "gen-data":
            p.add_argument("--template", dest="opt_template", default=None, choices=(*TEMPLATES, "mixed"))
            p.add_argument("--n", dest="opt_n", type=int, default=None)
        if name == "fit-vocab":
            p.add_argument("--k", dest="opt_k", type=int, default=None)
        if name == "train-ref":
            p.add_argument("--epochs", dest="opt_epochs", type=int, default=None)
        if name == "eval-realism":
            p.add_argument("--S", dest="opt_S", type=int, default=None)
    return ap


def run_command(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return CONFIG_ERROR if e.code else 0
    if not args.command:
        ap.print_help(sys.stderr)
        return CONFIG_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return CONFIG_ERROR
    out = Path(args.out)
    try:
        cfg = resolve_config(args.command, args)
        if args.command in ("eval-planners", "bench", "train-ref", "train", "eval-realism", "rollout-dump"):
            TokenVocab.load(cfg["vocab"])  # fail before any output is written
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return CONFIG_ERROR
    except (ValueError, OSError, KeyError) as e:
        print(f"config error: {type(e).__name__}: {e}", file=sys.stderr)
        return CONFIG_ERROR
    echo_config(args.command, cfg, out, args.workers)
    try:
        COMMANDS[args.command](cfg, out, args.workers)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return CONFIG_ERROR
    except Exception as e:
        log.debug("failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return RUNTIME_ERROR
    return 0


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
