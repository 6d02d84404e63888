"""Command-line interface.

Subcommands: ``bounds``, ``lemmas``, ``train``, ``eval``, ``coverage`` and
``report``. Exit codes: 0 success, 1 usage error, 2 domain or configuration
error, 3 verification failure. ``METAPAC_SEED`` and ``METAPAC_OUT`` override
the seed and output directory of configuration files; command-line flags
override both.

Every report starts with a ``# metapac <version> seed=<seed> config=<json>``
comment line (CSV) or a ``meta`` object (JSON), followed by the rows.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import fields
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .bounds import BOUND_NAMES, BoundInputs, get_bound, optimize_hyperparams
from .coverage import CoverageConfig, run_coverage
from .data import SyntheticEnvSpec, gen_synthetic, load_dataset, make_permuted_tasks, read_idx
from .errors import ConfigError, DomainError, FormatError, MetapacError, NumericalError
from .lemmas import Dist, TrialConfig, verify_dgamma, verify_dv_random, verify_maurer, verify_subgauss_sq, verify_union_sum
from .trainer import MetaState, TrainConfig, adapt_result, baseline_result, train

EXIT_OK, EXIT_USAGE, EXIT_DOMAIN, EXIT_VERIFY = 0, 1, 2, 3

BOUNDS_COLUMNS = ("bound", "valid", "value", "hyperparams", "terms", "error")
LEMMA_COLUMNS = ("lemma", "empirical", "certified", "slack_sds", "passed", "exact", "trials")
HISTORY_COLUMNS = ("epoch", "objective", "train_loss", "kl_env", "kl_task_mean", "terms", "hyperparams")
EVAL_COLUMNS = ("task", "bound", "method", "test_loss", "certified_bound")
COVERAGE_COLUMNS = ("bound", "trials", "violations", "violation_rate", "delta", "mc_slack", "pass",
                    "mean_bound", "mean_risk", "max_excess")
REPORT_COLUMNS = ("bound", "method", "tasks", "mean_test_error", "std")
LEMMA_NAMES = ("subgauss", "subgauss-sqrt", "maurer", "dgamma", "donsker-varadhan", "union-sum")


def tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# report writing


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, dict):
        return ";".join(f"{k}={_fmt(v)}" for k, v in value.items())
    return "" if value is None else str(value)


def _json_value(value):
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    if isinstance(value, dict):
        return {k: _json_value(v) for k, v in value.items()}
    return value


def render(rows, columns, meta: dict, fmt: str) -> str:
    if fmt == "json":
        doc = {"meta": _json_value(meta), "rows": [{c: _json_value(r.get(c)) for c in columns} for r in rows]}
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"
    buf = io.StringIO()
    buf.write(f"# metapac {meta['version']} seed={meta['seed']} config={json.dumps(_json_value(meta['config']), sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def emit(args, name: str, rows, columns, config: dict, stdout=True) -> str:
    meta = {"version": tool_version(), "seed": args.seed, "config": config}
    text = render(rows, columns, meta, args.format)
    if stdout:
        sys.stdout.write(text)
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.{args.format}").write_text(text, encoding="utf-8")
    return text


def read_report(path) -> tuple[dict, list]:
    """Parse a CSV or JSON report written by ``render``."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        doc = json.loads(text)
        return doc["meta"], doc["rows"]
    first, _, rest = text.partition("\n")
    if not first.startswith("# metapac "):
        raise FormatError(f"{path} is not a metapac report (missing comment line)", 0)
    meta = {}
    try:
        _, _, ver, seed, config = first.split(" ", 4)
        meta = {"version": ver, "seed": int(seed.split("=", 1)[1]), "config": json.loads(config.split("=", 1)[1])}
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: unreadable report comment line ({exc})", 0) from None
    return meta, list(csv.DictReader(io.StringIO(rest)))


# --------------------------------------------------------------------------
# argument types


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _nonneg_int(text):
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {text}")
    return value


def _finite(text):
    value = float(text)
    if not math.isfinite(value):
        raise argparse.ArgumentTypeError(f"expected a finite number, got {text}")
    return value


def _unit_open(text):
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"expected a number in (0, 1), got {text}")
    return value


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _grid_item(text):
    name, sep, values = text.partition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError(f"expected NAME=v1,v2,..., got {text!r}")
    return name, _float_list(values)


def _seed(text):
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return value


def _dist(text):
    try:
        return Dist.parse(text)
    except DomainError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


# --------------------------------------------------------------------------
# bounds


def cmd_bounds(args) -> int:
    names = BOUND_NAMES if args.bound == "all" else (args.bound,)
    grids: dict = {}
    for key, values in args.grid or []:
        grids[key] = values
    rows = []
    for name in names:
        entry = get_bound(name)
        row = {"bound": name, "valid": False, "value": math.nan, "hyperparams": {}, "terms": {}, "error": ""}
        try:
            inp = BoundInputs(args.n, args.m, args.delta, args.train_loss, args.kl_env, args.kl_task)
            grid = {p: grids[p] for p in entry.params if p in grids}
            if grid and set(grid) != set(entry.params):
                grid = {p: grid.get(p, entry.default_grid[p]) for p in entry.params}
            hp, report = optimize_hyperparams(inp, name, grid or None)
            row.update(valid=True, value=report.value, hyperparams={k: float(v) for k, v in sorted(hp.items())},
                       terms=dict(report.terms))
        except DomainError as exc:
            row["error"] = str(exc)
        rows.append(row)
    config = {"n": args.n, "m": args.m, "delta": args.delta, "train_loss": args.train_loss, "kl_env": args.kl_env,
              "kl_task": args.kl_task, "bound": args.bound, "grid": grids}
    emit(args, "bounds", rows, BOUNDS_COLUMNS, config)
    if not any(r["valid"] for r in rows):
        for r in rows:
            print(f"error: {r['bound']}: {r['error']}", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


# --------------------------------------------------------------------------
# lemmas


def cmd_lemmas(args) -> int:
    cfg = TrialConfig(trials=args.trials, seed=args.seed, inner=args.inner, dist=args.dist)
    selected = LEMMA_NAMES if args.lemma == "all" else (args.lemma,)
    verdicts = []
    for name in selected:
        if name == "subgauss":
            verdicts.append(verify_subgauss_sq(cfg, args.lam, "full"))
        elif name == "subgauss-sqrt":
            verdicts.append(verify_subgauss_sq(cfg, args.lam, "sqrt"))
        elif name == "maurer":
            verdicts.append(verify_maurer(cfg, args.n))
        elif name == "dgamma":
            verdicts.append(verify_dgamma(cfg, args.n, args.gamma))
        elif name == "donsker-varadhan":
            verdicts.append(verify_dv_random(args.seed, args.dv_cases))
        else:
            verdicts.append(verify_union_sum(cfg, args.deltas))
    rows = [v.as_dict() for v in verdicts]
    config = {"lemma": args.lemma, "trials": args.trials, "inner": args.inner, "dist": str(args.dist), "n": args.n,
              "lam": args.lam, "gamma": args.gamma, "deltas": args.deltas, "dv_cases": args.dv_cases}
    emit(args, "lemmas", rows, LEMMA_COLUMNS, config)
    return EXIT_OK if all(v.passed for v in verdicts) else EXIT_VERIFY


# --------------------------------------------------------------------------
# train / eval configuration


_DATA_KINDS = ("synthetic", "path", "idx")
_IDX_FIELDS = {"images": str, "labels": str, "kind": str, "n": int, "m": int, "m_test": int, "swaps": int,
               "n_test_tasks": int, "seed": int}


def _check_fields(section: dict, path: str, allowed: dict, required=()):
    if not isinstance(section, dict):
        raise ConfigError(path, "expected a JSON object")
    for key in required:
        if key not in section:
            raise ConfigError(f"{path}.{key}", "missing required field")
    for key, value in section.items():
        if key not in allowed:
            raise ConfigError(f"{path}.{key}", "unknown field")
        kind = allowed[key]
        if kind is None:
            continue
        ok = (isinstance(value, (int, float)) and not isinstance(value, bool)) if kind is float else (
            isinstance(value, kind) and not (kind is int and isinstance(value, bool)))
        if not ok:
            raise ConfigError(f"{path}.{key}", f"expected {kind.__name__}, got {type(value).__name__}")


def _dataclass_types(cls) -> dict:
    types = {"int": int, "float": float, "str": str, "bool": bool}
    out = {}
    for f in fields(cls):
        t = str(f.type).split(" ")[0]
        out[f.name] = types.get(t)
    return out


def load_config(path, args) -> dict:
    """Read and validate a train/eval configuration document.

    Layout: ``{"train": {TrainConfig fields}, "data": {"synthetic": {...}} |
    {"path": "file"} | {"idx": {...}}}``. The seed precedence is the
    ``--seed`` flag, then ``METAPAC_SEED``, then ``train.seed``.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON: {exc}") from None
    _check_fields(doc, "config", {"train": dict, "data": dict}, required=("train", "data"))
    train_types = _dataclass_types(TrainConfig)
    train_types["bound_params"] = dict
    _check_fields(doc["train"], "config.train", train_types)
    data = doc["data"]
    _check_fields(data, "config.data", {k: None for k in _DATA_KINDS})
    present = [k for k in _DATA_KINDS if k in data]
    if len(present) != 1:
        raise ConfigError("config.data", f"expected exactly one of {', '.join(_DATA_KINDS)}")
    if "synthetic" in data:
        syn_types = _dataclass_types(SyntheticEnvSpec)
        syn_types["env_mean"] = list
        _check_fields(data["synthetic"], "config.data.synthetic", syn_types)
    elif "path" in data:
        if not isinstance(data["path"], str):
            raise ConfigError("config.data.path", "expected str")
    else:
        _check_fields(data["idx"], "config.data.idx", _IDX_FIELDS, required=("images", "labels"))
    train_section = dict(doc["train"])
    if args.seed is not None:
        train_section["seed"] = args.seed
    try:
        cfg = TrainConfig(**train_section)
    except DomainError as exc:
        raise ConfigError("config.train", str(exc)) from None
    args.seed = cfg.seed
    return {"train": cfg, "data": data, "raw": {"train": cfg.as_dict(), "data": data}}


def build_dataset(data: dict, base: Path):
    if "synthetic" in data:
        spec = dict(data["synthetic"])
        if "env_mean" in spec:
            spec["env_mean"] = tuple(spec["env_mean"])
        try:
            return gen_synthetic(SyntheticEnvSpec(**spec))[0]
        except DomainError as exc:
            raise ConfigError("config.data.synthetic", str(exc)) from None
    if "path" in data:
        return load_dataset(base / data["path"])
    spec = dict(data["idx"])
    images, _ = read_idx(base / spec.pop("images"))
    labels, _ = read_idx(base / spec.pop("labels"))
    return make_permuted_tasks(images, labels, **spec)


def _state_to_json(state: MetaState) -> dict:
    return {"shape": list(state.shape), "kappa_s_sq": state.kappa_s_sq, "kappa_p_sq": state.kappa_p_sq,
            "theta": state.theta.tolist(), "means": state.means.tolist(), "log_vars": state.log_vars.tolist()}


def _state_from_json(doc: dict) -> MetaState:
    try:
        return MetaState(np.array(doc["theta"]), np.array(doc["means"]), np.array(doc["log_vars"]),
                         float(doc["kappa_s_sq"]), float(doc["kappa_p_sq"]), tuple(doc["shape"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError("state", f"malformed state file: {exc}") from None


def _out_dir(args) -> Path:
    return Path(args.out if args.out is not None else ".")


def cmd_train(args) -> int:
    conf = load_config(args.config, args)
    data = build_dataset(conf["data"], Path(args.config).parent)
    cfg = conf["train"]
    state, history = train(cfg, data)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "state.json").write_text(json.dumps(_state_to_json(state)) + "\n", encoding="utf-8")
    rows = []
    for epoch, (value, br) in enumerate(zip(history.objective, history.breakdown)):
        rows.append({
            "epoch": epoch, "objective": value, "train_loss": br["train_loss"], "kl_env": br["kl_env"],
            "kl_task_mean": br["kl_task_mean"],
            "terms": {k[5:]: v for k, v in br.items() if k.startswith("term:")},
            "hyperparams": {k[3:]: v for k, v in br.items() if k.startswith("hp:")},
        })
    args.out = str(out)
    emit(args, "history", rows, HISTORY_COLUMNS, conf["raw"], stdout=False)
    first = history.objective[0] if history.objective else math.nan
    last = history.objective[-1] if history.objective else math.nan
    print(f"trained {cfg.epochs} epochs on {data.n} tasks: objective {first!r} -> {last!r}; wrote {out / 'state.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    conf = load_config(args.config, args)
    data = build_dataset(conf["data"], Path(args.config).parent)
    cfg = conf["train"]
    out = _out_dir(args)
    state_path = Path(args.state) if args.state else out / "state.json"
    try:
        state = _state_from_json(json.loads(state_path.read_text(encoding="utf-8")))
    except FileNotFoundError:
        raise ConfigError("state", f"file not found: {state_path}") from None
    tasks = data.test_tasks
    if not tasks:
        raise ConfigError("config.data", "the dataset has no meta-test tasks")
    rows = []
    for i, task in enumerate(tasks):
        res = adapt_result(state, task, cfg, i)
        rows.append({"task": i, "bound": cfg.bound, "method": "meta", "test_loss": res.test_loss,
                     "certified_bound": res.bound})
        if args.baseline:
            base = baseline_result(task, cfg, i)
            rows.append({"task": i, "bound": cfg.bound, "method": "baseline", "test_loss": base.test_loss,
                         "certified_bound": base.bound})
    args.out = str(out)
    config = dict(conf["raw"], state=str(state_path), baseline=args.baseline)
    emit(args, "eval", rows, EVAL_COLUMNS, config)
    return EXIT_OK


# --------------------------------------------------------------------------
# coverage and report


def cmd_coverage(args) -> int:
    bounds = [b for b in args.bound.split(",") if b]
    for b in bounds:
        try:
            get_bound(b)
        except DomainError as exc:
            raise UsageError(f"--bound: {exc}") from None
    env = SyntheticEnvSpec(dim=args.dim, task_spread=args.task_spread, obs_noise=args.obs_noise, m=args.m, n=args.n,
                           n_test_tasks=0, m_test=0)
    cfg = CoverageConfig(bound=bounds[0], trials=args.trials, delta=args.delta, seed=args.seed, env=env,
                         loss=args.loss, mc_samples_u=args.mc_samples_u, risk_tasks=args.risk_tasks,
                         risk_w=args.risk_w)
    reports = run_coverage(cfg, {b: b for b in bounds})
    emit(args, "coverage", [r.as_dict() for r in reports], COVERAGE_COLUMNS, dict(cfg.as_dict(), bounds=bounds))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VERIFY


def cmd_report(args) -> int:
    groups: dict = {}
    for path in args.inputs:
        try:
            _, rows = read_report(path)
        except FileNotFoundError:
            raise ConfigError("report", f"file not found: {path}") from None
        for r in rows:
            if "test_loss" not in r:
                raise ConfigError("report", f"{path} is not an eval report")
            groups.setdefault((r["bound"], r["method"]), []).append(float(r["test_loss"]))
    rows = []
    for (bound, method), losses in sorted(groups.items()):
        arr = np.array(losses)
        rows.append({"bound": bound, "method": method, "tasks": arr.size, "mean_test_error": float(arr.mean()),
                     "std": float(arr.std(ddof=1)) if arr.size > 1 else 0.0})
    emit(args, "report", rows, REPORT_COLUMNS, {"inputs": [str(p) for p in args.inputs]})
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metapac", description="PAC-Bayes meta-learning bounds, lemma checks and training.")
    parser.add_argument("--version", action="version", version=f"metapac {tool_version()}")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=_seed, default=None, help="global seed (default: METAPAC_SEED, config, or 0)")
    common.add_argument("--out", default=None, help="output directory (default: METAPAC_OUT)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("bounds", parents=[common], help="evaluate bounds with optimized hyperparameters")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--m", type=_positive_int, required=True)
    p.add_argument("--delta", type=_unit_open, default=0.1)
    p.add_argument("--train-loss", type=_finite, default=0.0)
    p.add_argument("--kl-env", type=float, default=0.0)
    p.add_argument("--kl-task", type=_float_list, default=[0.0], help="scalar or comma-separated per-task list")
    p.add_argument("--bound", choices=("all",) + BOUND_NAMES, default="all")
    p.add_argument("--grid", type=_grid_item, action="append", help="NAME=v1,v2,... hyperparameter grid")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("lemmas", parents=[common], help="verify the concentration lemmas")
    p.add_argument("--lemma", choices=("all",) + LEMMA_NAMES, default="all")
    p.add_argument("--trials", type=_positive_int, default=100_000)
    p.add_argument("--inner", type=_positive_int, default=10, help="sample size inside each trial")
    p.add_argument("--dist", type=_dist, default=Dist(), help="uniform | bernoulli:P | beta:A,B")
    p.add_argument("--n", type=_positive_int, default=None, help="sample size for maurer/dgamma (default --inner)")
    p.add_argument("--lam", type=_finite, default=1.0)
    p.add_argument("--gamma", type=_finite, default=-1.0)
    p.add_argument("--deltas", type=_float_list, default=[0.05, 0.05])
    p.add_argument("--dv-cases", type=_positive_int, default=10_000)
    p.set_defaults(func=cmd_lemmas)

    for name, func, helptext in (("train", cmd_train, "meta-train on a dataset"),
                                 ("eval", cmd_eval, "adapt to meta-test tasks and report losses")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--config", required=True, help="JSON configuration file")
        if name == "eval":
            p.add_argument("--state", default=None, help="trained state (default: OUT/state.json)")
            p.add_argument("--baseline", action="store_true", help="also adapt from the hyper-prior")
        p.set_defaults(func=func)

    p = sub.add_parser("coverage", parents=[common], help="bound coverage experiment on synthetic environments")
    p.add_argument("--bound", default="new-classic", help="bound name or comma-separated names")
    p.add_argument("--trials", type=_positive_int, default=500)
    p.add_argument("--delta", type=_unit_open, default=0.1)
    p.add_argument("--n", type=_positive_int, default=5)
    p.add_argument("--m", type=_positive_int, default=50)
    p.add_argument("--dim", type=_positive_int, default=4)
    p.add_argument("--task-spread", type=float, default=0.25)
    p.add_argument("--obs-noise", type=float, default=0.01)
    p.add_argument("--loss", choices=("exp-square", "clipped-square"), default="exp-square")
    p.add_argument("--mc-samples-u", type=_positive_int, default=8)
    p.add_argument("--risk-tasks", type=_positive_int, default=200)
    p.add_argument("--risk-w", type=_positive_int, default=10)
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("report", parents=[common], help="merge eval reports into a comparison table")
    p.add_argument("inputs", nargs="+", help="eval CSV or JSON reports")
    p.set_defaults(func=cmd_report)
    return parser


def _apply_env(args) -> None:
    if args.seed is None and os.environ.get("METAPAC_SEED"):
        try:
            args.seed = _seed(os.environ["METAPAC_SEED"])
        except (ValueError, argparse.ArgumentTypeError):
            raise UsageError("METAPAC_SEED must be a 64-bit unsigned integer") from None
    if args.out is None and os.environ.get("METAPAC_OUT"):
        args.out = os.environ["METAPAC_OUT"]
    if args.seed is None and args.command not in ("train", "eval"):
        args.seed = 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _apply_env(args)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ConfigError, DomainError, FormatError, MetapacError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
