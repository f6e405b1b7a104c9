"""Command-line front end: data generation, BNN training, scoring, active
learning and risk-sensitive policy search.

Every command writes ``effective_config.json`` next to its main output and
is bit-reproducible for a given configuration and seed. Failures exit with
status 1 and a single ``error: ...`` line on stderr.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bnn import TrainConfig, load_posterior, save_posterior
from .decompose import ALConfig, DecomposeConfig, al_loop, fit_posterior, score_inputs
from .envs import Dataset, TransitionBatch, collect_batch, get_env, make_dataset, narrow_passage_mdp
from .policy import (
    RISK_MODES, RolloutConfig, evaluate_model_bias, frontier, load_policy, save_policy, train_policy,
)

DEFAULTS = {
    "seed": 0,
    "bnn": {
        "arch": [20, 20],
        "lambda": 1.0,
        "gamma": 1.0,
        "sigma": 0.01,
        "alpha": 1.0,
        "mc_samples": 20,
        "steps": 10000,
        "step_size": 0.01,
        "minibatch": 50,
    },
    "decompose": {"M": 50, "L": 500, "k": 3},
    "al": {"init_n": 50, "per_round": 50, "pool_size": 200, "test_size": 500, "eval_grid": "-6:6:25"},
    "policy": {
        "T": 100,
        "M": 50,
        "N": 25,
        "beta": 0.0,
        "risk_mode": "bias",
        "arch": [20, 20],
        "train_steps": 2000,
        "step_size": 0.001,
        "max_grad_norm": 100.0,
        "starts_per_step": 1,
        "clip_states": True,
        "reps_true": 200,
        "eval_starts": 20,
    },
}


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def merge_config(user: dict, defaults: dict = DEFAULTS, where: str = "") -> dict:
    """Defaults overlaid with ``user``; unknown keys are an error."""
    if not isinstance(user, dict):
        raise CliError(f"config{where or ''} must be a JSON object")
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        path = f"{where}.{key}" if where else key
        if key not in defaults:
            raise CliError(f"unknown config key {path!r}")
        if isinstance(defaults[key], dict):
            out[key] = merge_config(value, defaults[key], path)
        else:
            out[key] = value
    return out


def load_config(path, seed=None) -> dict:
    user = {}
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    cfg = merge_config(user)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    b = cfg["bnn"]
    return TrainConfig(alpha=float(b["alpha"]), mc_samples=int(b["mc_samples"]), step_size=float(b["step_size"]),
                       steps=int(b["steps"]), minibatch_size=int(b["minibatch"]), seed=int(cfg["seed"]))


def decompose_config(cfg: dict) -> DecomposeConfig:
    d = cfg["decompose"]
    return DecomposeConfig(weight_draws=int(d["M"]), samples_per_entropy=int(d["L"]), neighbor_k=int(d["k"]),
                           seed=int(cfg["seed"]))


def rollout_config(cfg: dict) -> RolloutConfig:
    p = cfg["policy"]
    if p["risk_mode"] not in RISK_MODES:
        raise CliError(f"policy.risk_mode must be one of {', '.join(RISK_MODES)}")
    return RolloutConfig(horizon=int(p["T"]), weight_draws=int(p["M"]), noise_draws=int(p["N"]),
                         beta=float(p["beta"]), risk_mode=p["risk_mode"],
                         starts_per_step=int(p["starts_per_step"]), clip_states=bool(p["clip_states"]),
                         seed=int(cfg["seed"]))


def parse_grid(spec: str) -> np.ndarray:
    parts = spec.split(":")
    try:
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
        if len(parts) != 3:
            raise ValueError
    except (ValueError, IndexError):
        raise CliError(f"grid spec {spec!r} is not min:max:count") from None
    if count < 1:
        raise CliError(f"grid spec {spec!r} is empty")
    return np.linspace(lo, hi, count)


def parse_list(text: str, kind=float) -> list:
    try:
        return [kind(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise CliError(f"cannot parse {text!r} as a comma-separated list") from None


# ---------------------------------------------------------------------------
# CSV


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_csv(path):
    """Header plus a float matrix; malformed rows are reported by line number."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CliError(f"{path}: empty file") from None
        rows = []
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise CliError(f"{path}: row {line}: expected {len(header)} fields, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise CliError(f"{path}: row {line}: non-numeric field") from None
            if not all(np.isfinite(vals)):
                raise CliError(f"{path}: row {line}: non-finite value")
            rows.append(vals)
    if not rows:
        raise CliError(f"{path}: no data rows")
    return header, np.array(rows)


def _columns(header, prefix):
    return [i for i, h in enumerate(header) if h.rsplit("_", 1)[0] == prefix]


def read_table(path):
    """A ``Dataset`` (x_/y_ columns) or a ``TransitionBatch`` (s_/a_/sp_ columns)."""
    header, data = read_csv(path)
    if _columns(header, "x") and _columns(header, "y"):
        return Dataset(data[:, _columns(header, "x")], data[:, _columns(header, "y")])
    s, a, sp = _columns(header, "s"), _columns(header, "a"), _columns(header, "sp")
    if s and a and sp:
        return TransitionBatch(data[:, s], data[:, a], data[:, sp])
    raise CliError(f"{path}: header must have x_/y_ or s_/a_/sp_ columns")


def write_dataset(path, data: Dataset) -> None:
    header = [f"x_{i}" for i in range(data.inputs.shape[1])] + [f"y_{i}" for i in range(data.targets.shape[1])]
    write_csv(path, header, np.hstack([data.inputs, data.targets]).tolist())


def write_transitions(path, batch: TransitionBatch) -> None:
    sd, ad = batch.states.shape[1], batch.actions.shape[1]
    header = [f"s_{i}" for i in range(sd)] + [f"a_{i}" for i in range(ad)] + [f"sp_{i}" for i in range(sd)]
    write_csv(path, header, np.hstack([batch.states, batch.actions, batch.next_states]).tolist())


def write_effective_config(out, cfg, command, extra=None) -> None:
    doc = {"command": command, "version": __version__, "config": cfg}
    if extra:
        doc["arguments"] = extra
    path = Path(out).parent / "effective_config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sibling(out, suffix) -> Path:
    out = Path(out)
    return out.with_name(out.stem + suffix)


def _out(args, positional=None):
    path = positional or args.out
    if path is None:
        raise CliError("no output path given (positional or --out)")
    return Path(path)


def _require(path):
    if not Path(path).is_file():
        raise CliError(f"{path}: no such file")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, cfg):
    seed = cfg["seed"] if args.gen_seed is None else args.gen_seed
    cfg["seed"] = seed
    if args.n < 1:
        raise CliError("n must be >= 1")
    try:
        env = get_env(args.env)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    out = _out(args, args.path)
    write_dataset(out, make_dataset(env, args.n, seed))
    return out, {"env": args.env, "n": args.n}


def cmd_train(args, cfg):
    table = read_table(_require(args.data))
    data = table.as_dataset() if isinstance(table, TransitionBatch) else table
    b = cfg["bnn"]
    post, trace = fit_posterior(data, train_config(cfg), tuple(b["arch"]), float(b["lambda"]),
                                float(b["gamma"]), float(b["sigma"]))
    out = _out(args, args.path)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_posterior(post, out)
    write_csv(_sibling(out, "_energy.csv"), ["step", "energy"], enumerate(trace.tolist()))
    return out, {"data": str(args.data)}


def cmd_score(args, cfg):
    post = load_posterior(_require(args.model))
    if post.feature_dim != 1:
        raise CliError("score grids are one-dimensional; model has "
                       f"{post.feature_dim} input features")
    grid = parse_grid(args.grid)
    scores = score_inputs(post, grid[:, None], decompose_config(cfg))
    out = _out(args, args.path)
    write_csv(out, ["x_0", "total_entropy", "aleatoric_entropy", "epistemic_score"],
              [(s.x[0], s.total_entropy, s.aleatoric_entropy, s.epistemic_score) for s in scores])
    return out, {"model": str(args.model), "grid": args.grid}


def cmd_al(args, cfg):
    if args.rounds < 0:
        raise CliError("rounds must be >= 0")
    try:
        env = get_env(args.env)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    a, b = cfg["al"], cfg["bnn"]
    grid = parse_grid(a["eval_grid"])
    al = ALConfig(init_n=int(a["init_n"]), rounds=args.rounds, per_round=int(a["per_round"]),
                  pool_size=int(a["pool_size"]), test_size=int(a["test_size"]),
                  eval_grid=(float(grid[0]), float(grid[-1]), grid.size), hidden=tuple(b["arch"]),
                  prior_weight_variance=float(b["lambda"]), prior_latent_variance=float(b["gamma"]),
                  noise_variance=float(b["sigma"]), strategy=args.strategy, seed=int(cfg["seed"]))
    records = al_loop(env, al, decompose_config(cfg), train_config(cfg))
    out = _out(args, args.path)
    keys = ["round", "strategy", "n", "test_loglik", "mean_epistemic"]
    write_csv(out, keys, [[r[k] for k in keys] for r in records])
    return out, {"env": args.env, "rounds": args.rounds, "strategy": args.strategy}


def cmd_collect(args, cfg):
    if args.episodes < 1:
        raise CliError("episodes must be >= 1")
    mdp = narrow_passage_mdp(int(cfg["policy"]["T"]))
    out = _out(args, args.path)
    write_transitions(out, collect_batch(mdp, args.episodes, int(cfg["seed"])))
    return out, {"episodes": args.episodes}


def _apply_policy_flags(args, cfg):
    if getattr(args, "risk_mode", None) is not None:
        cfg["policy"]["risk_mode"] = args.risk_mode
    if getattr(args, "beta", None) is not None:
        cfg["policy"]["beta"] = args.beta


def _start_pool(path):
    table = read_table(_require(path))
    if not isinstance(table, TransitionBatch):
        raise CliError(f"{path}: start states need a transitions CSV (s_/a_/sp_ columns)")
    return table.states


def _grad_cap(p):
    return None if p["max_grad_norm"] is None else float(p["max_grad_norm"])


def _eval_starts(cfg, mdp):
    return mdp.sample_initial(np.random.default_rng([int(cfg["seed"]), 7]), int(cfg["policy"]["eval_starts"]))


def cmd_policy_train(args, cfg):
    _apply_policy_flags(args, cfg)
    post = load_posterior(_require(args.model))
    pool = _start_pool(args.starts)
    p = cfg["policy"]
    mdp = narrow_passage_mdp(int(p["T"]))
    policy, trace = train_policy(post, pool, rollout_config(cfg), int(p["train_steps"]), float(p["step_size"]),
                                 int(cfg["seed"]), mdp, hidden=tuple(p["arch"]),
                                 max_grad_norm=_grad_cap(p))
    out = _out(args, args.path)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_policy(policy, out)
    write_csv(_sibling(out, "_objective.csv"), ["step", "objective"], enumerate(trace.tolist()))
    return out, {"model": str(args.model), "starts": str(args.starts)}


def cmd_policy_eval(args, cfg):
    _apply_policy_flags(args, cfg)
    policy = load_policy(_require(args.policy))
    post = load_posterior(_require(args.model))
    mdp = narrow_passage_mdp(int(cfg["policy"]["T"]))
    rep = evaluate_model_bias(policy, post, mdp, _eval_starts(cfg, mdp), int(cfg["policy"]["reps_true"]),
                              rollout_config(cfg), int(cfg["seed"]))
    out = _out(args, args.path)
    write_csv(out, ["expected_model_cost", "expected_true_cost", "model_bias"],
              [(rep.expected_model_cost, rep.expected_true_cost, rep.bias)])
    write_csv(_sibling(out, "_per_step.csv"), ["t", "abs_gap"],
              [(t + 1, g) for t, g in enumerate(rep.per_step_gap.tolist())])
    return out, {"policy": str(args.policy), "model": str(args.model)}


def cmd_frontier(args, cfg):
    _apply_policy_flags(args, cfg)
    betas = parse_list(args.betas)
    seeds = parse_list(args.seeds, int)
    if not betas or not seeds:
        raise CliError("--betas and --seeds must be non-empty")
    post = load_posterior(_require(args.model))
    pool = _start_pool(args.starts)
    p = cfg["policy"]
    mdp = narrow_passage_mdp(int(p["T"]))
    records = frontier(post, mdp, betas, p["risk_mode"], seeds, rollout_config(cfg), pool,
                       _eval_starts(cfg, mdp), int(p["train_steps"]), float(p["step_size"]), int(p["reps_true"]),
                       _grad_cap(p))
    out = _out(args, args.path)
    keys = ["beta", "seed", "expected_model_cost", "expected_true_cost", "model_bias"]
    write_csv(out, keys, [[r[k] for k in keys] for r in records])
    return out, {"model": str(args.model), "starts": str(args.starts), "betas": betas, "seeds": seeds}


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: {' '.join(message.split())}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides the config file)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    common.add_argument("--out", default=argparse.SUPPRESS, help="main output path")

    parser = _Parser(prog="latentbnn", description=__doc__.split("\n")[0], parents=[common])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="sample a toy regression dataset")
    p.add_argument("env")
    p.add_argument("n", type=int)
    p.add_argument("gen_seed", type=int, nargs="?", metavar="seed")
    p.add_argument("path", nargs="?", metavar="out")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="fit the BNN to a dataset or transitions CSV")
    p.add_argument("data")
    p.add_argument("path", nargs="?", metavar="out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", parents=[common], help="entropy decomposition on a min:max:count grid")
    p.add_argument("model")
    p.add_argument("grid")
    p.add_argument("path", nargs="?", metavar="out")
    p.set_defaults(func=cmd_score)
    # let grids such as -6:6:121 through as positionals rather than options
    p._negative_number_matcher = re.compile(r"^-\d+$|^-\d*\.\d+$|^-[\d.eE+-]*:")

    p = sub.add_parser("al", parents=[common], help="active-learning learning curve")
    p.add_argument("env")
    p.add_argument("rounds", type=int)
    p.add_argument("path", nargs="?", metavar="out")
    p.add_argument("--strategy", choices=("epistemic", "random"), default="epistemic")
    p.set_defaults(func=cmd_al)

    p = sub.add_parser("collect", parents=[common], help="behaviour-policy transitions from the MDP")
    p.add_argument("episodes", type=int)
    p.add_argument("path", nargs="?", metavar="out")
    p.set_defaults(func=cmd_collect)

    for name, func, help_ in (("policy-train", cmd_policy_train, "train a policy on the BNN model"),
                              ("frontier", cmd_frontier, "beta sweep of trained policies")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("model")
        p.add_argument("starts", help="transitions CSV whose states form the start pool")
        p.add_argument("path", nargs="?", metavar="out")
        p.add_argument("--risk-mode", choices=RISK_MODES, default=None)
        if name == "frontier":
            p.add_argument("--betas", default="0,0.5,1,2,5")
            p.add_argument("--seeds", default="1,2,3")
        else:
            p.add_argument("--beta", type=float, default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("policy-eval", parents=[common], help="true cost and model bias of a policy")
    p.add_argument("policy")
    p.add_argument("model")
    p.add_argument("path", nargs="?", metavar="out")
    p.add_argument("--risk-mode", choices=RISK_MODES, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.set_defaults(func=cmd_policy_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("seed", "config", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        cfg = load_config(args.config, args.seed)
        out, extra = args.func(args, cfg)
        write_effective_config(out, cfg, args.command, extra)
    except (CliError, ValueError, OSError, FloatingPointError, KeyError, TypeError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
