"""Command-line front end: train / attack / eval / surface / verify / sweep,
plus make-data (synthetic corpus files) and rerun (manifest re-execution).

Config files are strict JSON: unknown keys are rejected, every key has a
documented default (see --help), and presets ship inside the package. Heavy
imports happen only after flag parsing so --threads can cap BLAS workers
before numpy loads. Exit codes: 0 success, 1 usage/config error, 2 runtime
failure (including reproduction mismatches and failed verification checks).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

VERSION = "v0.1.0"

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config schema: key -> (default, help); nested dicts are sections

_ATTACK_KEYS = lambda eps, step, iters, rs, seed: {  # noqa: E731 - table builder
    "epsilon": (eps, "ball radius"),
    "step": (step, "step size per iteration"),
    "iters": (iters, "iteration count"),
    "mu": (1.0, "momentum decay (mifgsm only)"),
    "random_start": (rs, "start from a uniform point of the ball"),
    "seed": (seed, "stream seed for random starts"),
}

SCHEMA = {
    "method": ("standard", "training method: standard | at | gradreg | lfr"),
    "lam": (0.02, "weight of the ball-max gradient-norm penalty"),
    "lr": (0.1, "SGD learning rate"),
    "batch": (32, "minibatch size"),
    "epochs": (15, "training epochs"),
    "seed": (1, "root seed (init / shuffle / derived attack streams)"),
    "arch": ([784, 256, 128, 10], "layer widths, input through classes"),
    "activation": ("softplus", "hidden activation: softplus | relu"),
    "inner": _ATTACK_KEYS(0.3, 0.04, 10, False, 0),
    "eval_attack": _ATTACK_KEYS(0.3, 0.01, 40, True, 11),
    "data": {
        "synthetic": (True, "generate the synthetic corpus (else read IDX files)"),
        "dir": ("", "IDX directory when synthetic is false"),
        "seed": (0, "corpus generation / subset seed"),
        "train_n": (2000, "training set size"),
        "test_n": (1000, "test set size"),
    },
}


def _walk_schema(schema=SCHEMA, prefix=""):
    for key, val in schema.items():
        path = f"{prefix}{key}"
        if isinstance(val, dict):
            yield from _walk_schema(val, path + ".")
        else:
            yield path, val[0], val[1]


def schema_help() -> str:
    lines = ["config keys (JSON; unknown keys are rejected):"]
    for path, default, text in _walk_schema():
        lines.append(f"  {path:24s} default {json.dumps(default):22s} {text}")
    return "\n".join(lines)


def _validate_section(blob: dict, schema: dict, prefix: str) -> dict:
    resolved = {}
    for key in blob:
        if key not in schema:
            raise ConfigError(f"unknown config key {prefix + key!r}")
    for key, spec in schema.items():
        path = prefix + key
        if isinstance(spec, dict):
            sub = blob.get(key, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            resolved[key] = _validate_section(sub, spec, path + ".")
            continue
        default, _ = spec
        if key not in blob:
            resolved[key] = default
            continue
        value = blob[key]
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"config key {path!r} must be a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"config key {path!r} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"config key {path!r} must be a number")
            value = float(value)
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"config key {path!r} must be a string")
        elif isinstance(default, list):
            if not isinstance(value, list) or not value or any(
                isinstance(v, bool) or not isinstance(v, int) for v in value
            ):
                raise ConfigError(f"config key {path!r} must be a list of integers")
        resolved[key] = value
    return resolved


def validate_config(blob: dict) -> dict:
    """Resolve a raw JSON object against the schema (defaults applied)."""
    if not isinstance(blob, dict):
        raise ConfigError("config root must be a JSON object")
    return _validate_section(blob, SCHEMA, "")


def config_load(path: str) -> dict:
    """Strict-load a config file: JSON object, known keys only, defaults in."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            blob = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return validate_config(blob)


def preset_path(name: str) -> str:
    path = os.path.join(os.path.dirname(__file__), "presets", name + ".json")
    if not os.path.exists(path):
        have = sorted(
            p[:-5]
            for p in os.listdir(os.path.join(os.path.dirname(__file__), "presets"))
            if p.endswith(".json")
        )
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(have)}")
    return path


# ---------------------------------------------------------------------------
# resolved config -> domain objects (imports deferred for --threads)


def _attack_config(section: dict, where: str):
    from .attacks import AttackConfig

    try:
        return AttackConfig(**section)
    except ValueError as exc:
        raise ConfigError(f"config section {where!r}: {exc}") from exc


def _train_config(resolved: dict):
    from .training import TrainConfig

    try:
        return TrainConfig(
            method=resolved["method"],
            lam=resolved["lam"],
            inner=_attack_config(resolved["inner"], "inner"),
            eval_attack=_attack_config(resolved["eval_attack"], "eval_attack"),
            lr=resolved["lr"],
            batch=resolved["batch"],
            epochs=resolved["epochs"],
            seed=resolved["seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _architecture(resolved: dict):
    from . import model as md

    try:
        return md.Architecture(tuple(resolved["arch"]), resolved["activation"])
    except ValueError as exc:
        raise ConfigError(f"config key 'arch'/'activation': {exc}") from exc


def _load_data(section: dict):
    """(train, test, input file paths) for a resolved data section."""
    from . import data as dt
    from . import synthdata as sd

    if section["synthetic"]:
        train_ds, test_ds = sd.make_corpus(
            section["seed"], section["train_n"], section["test_n"]
        )
        return train_ds, test_ds, []
    if not section["dir"]:
        raise ConfigError("config key 'data.dir' is required when synthetic is false")
    paths = []
    splits = {}
    for split in ("train", "test"):
        ds, used = dt.load_split(section["dir"], split, return_paths=True)
        splits[split] = ds
        paths.extend(used)
    n = {"train": section["train_n"], "test": section["test_n"]}
    for split, ds in splits.items():
        if n[split] < len(ds.images):
            splits[split] = dt.subset(ds, n[split], seed=section["seed"])
    return splits["train"], splits["test"], paths


# ---------------------------------------------------------------------------
# executors: (invocation, out_dir) -> list of artifact paths
# every executor is a pure function of its invocation, so a rerun from the
# manifest performs the identical computation


def _execute_train(inv: dict, out: str) -> list[str]:
    from . import model as md
    from .training import train

    cfg = _train_config(inv["config"])
    arch = _architecture(inv["config"])
    train_ds, test_ds, _ = _load_data(inv["config"]["data"])
    metrics_path = os.path.join(out, "metrics.csv")
    params, _ = train(train_ds, arch, cfg, metrics_path=metrics_path)
    ckpt_path = os.path.join(out, "checkpoint.json")
    md.save_checkpoint(params, ckpt_path)
    summary = {
        "method": cfg.method,
        "clean_train_accuracy": md.accuracy(params, train_ds.images, train_ds.labels),
        "clean_test_accuracy": md.accuracy(params, test_ds.images, test_ds.labels),
    }
    summary_path = os.path.join(out, "train-report.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [ckpt_path, metrics_path, summary_path]


def _execute_attack(inv: dict, out: str) -> list[str]:
    from . import model as md
    from .attacks import adversarial_accuracy

    params = md.load_checkpoint(inv["checkpoint"])
    _, test_ds, _ = _load_data(inv["config"]["data"])
    cfg = _attack_config(inv["config"]["eval_attack"], "eval_attack")
    res = adversarial_accuracy(
        params, test_ds.images, test_ds.labels, inv["attack"], cfg
    )
    path = os.path.join(out, "report.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(res, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [path]


def _execute_eval(inv: dict, out: str) -> list[str]:
    from . import model as md
    from .evaluation import robustness_table, standard_attack_suite

    models = [(name, md.load_checkpoint(path)) for name, path in inv["models"]]
    _, test_ds, _ = _load_data(inv["config"]["data"])
    ev_cfg = inv["config"]["eval_attack"]
    suite = standard_attack_suite(
        epsilon=ev_cfg["epsilon"],
        step=ev_cfg["step"],
        iters=ev_cfg["iters"],
        seed=ev_cfg["seed"],
        random_start=ev_cfg["random_start"],
        mu=ev_cfg["mu"],
    )
    report = robustness_table(models, test_ds, suite)
    json_path = os.path.join(out, "report.json")
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    txt_path = os.path.join(out, "report.txt")
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    return [json_path, txt_path]


def _execute_surface(inv: dict, out: str) -> list[str]:
    from . import model as md
    from .evaluation import surface_grid, write_surface

    params = md.load_checkpoint(inv["checkpoint"])
    _, test_ds, _ = _load_data(inv["config"]["data"])
    i = inv["index"]
    if not 0 <= i < len(test_ds.images):
        raise ConfigError(f"--index {i} outside the test set (n={len(test_ds.images)})")
    grid = surface_grid(
        params,
        test_ds.images[i],
        int(test_ds.labels[i]),
        kind=inv["kind"],
        span=inv["span"],
        resolution=inv["resolution"],
        seed=inv["seed"],
        center_index=i,
    )
    csv_path = os.path.join(out, "surface.csv")
    sidecar = write_surface(grid, csv_path)
    return [csv_path, sidecar]


def _verify_lemma1(seed: int) -> dict:
    import numpy as np

    from .rng import named_stream
    from .theory import dual_norm_check, dual_norm_vertex_bruteforce

    rng = named_stream(seed, "verify.lemma1")
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 9))
        beta = rng.uniform(-10.0, 10.0, size=d)
        for p in (1, 2, np.inf):
            attained, closed = dual_norm_check(beta, p)
            worst = max(worst, abs(attained - closed))
        worst = max(worst, abs(dual_norm_vertex_bruteforce(beta) - np.abs(beta).sum()))
    return {"max_residual": worst, "passed": bool(worst < 1e-12)}


def _verify_theorem1(seed: int) -> dict:
    from .theory import check_theorem1_toy

    reports = [check_theorem1_toy(201, seed + k) for k in range(5)]
    violations = sum(r.violations for r in reports)
    return {
        "nets": len(reports),
        "violations": violations,
        "min_slack": min(r.min_slack for r in reports),
        "passed": bool(violations == 0),
    }


def _verify_theorem3(seed: int) -> dict:
    import numpy as np

    from . import model as md
    from . import synthdata as sd
    from .attacks import AttackConfig
    from .theory import check_theorem3, check_theorem3_mean, relu_kink_probe
    from .training import TrainConfig, train

    train_ds, test_ds = sd.make_corpus(seed=seed, train_n=400, test_n=60)
    cfg = TrainConfig(
        method="standard",
        lam=0.0,
        inner=AttackConfig(epsilon=0.3, step=0.04, iters=1),
        eval_attack=AttackConfig(epsilon=0.3, step=0.01, iters=1),
        lr=0.1,
        batch=64,
        epochs=3,
        seed=seed,
    )
    params, _ = train(train_ds, md.Architecture((784, 32, 10)), cfg)
    eps_values = np.logspace(-3.5, -1.7, 8)
    mean_slope, _ = check_theorem3_mean(
        params, test_ds.images[:20], test_ds.labels[:20], eps_values
    )
    kink_params, kx, ky = relu_kink_probe(seed)
    kink_slope = check_theorem3(kink_params, kx, ky, eps_values)
    return {
        "mean_slope": mean_slope,
        "kink_slope": kink_slope,
        "passed": bool(1.7 <= mean_slope <= 2.3 and not 1.7 <= kink_slope <= 2.3),
    }


def _verify_lemma2(seed: int) -> dict:
    from . import model as md
    from .theory import check_lemma2_segment

    params = md.init_params(md.Architecture((2, 16, 2)), seed)
    report = check_lemma2_segment(params, [0.5, 0.5], 1, 0.3, n_pairs=100, seed=seed)
    return {
        "pairs": report.samples,
        "violations": report.violations,
        "min_slack": report.min_slack,
        "passed": bool(report.violations == 0),
    }


_CHECKS = {
    "lemma1": _verify_lemma1,
    "theorem1": _verify_theorem1,
    "theorem3": _verify_theorem3,
    "lemma2": _verify_lemma2,
}


def _execute_verify(inv: dict, out: str) -> list[str]:
    results = {name: _CHECKS[name](inv["seed"]) for name in inv["checks"]}
    path = os.path.join(out, "report.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return [path]


def _execute_sweep(inv: dict, out: str) -> list[str]:
    from .evaluation import lambda_sweep, sweep_to_csv

    cfg = _train_config(inv["config"])
    arch = _architecture(inv["config"])
    train_ds, test_ds, _ = _load_data(inv["config"]["data"])
    rows = lambda_sweep(inv["lambdas"], train_ds, arch, cfg, test_ds)
    path = os.path.join(out, "sweep.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(sweep_to_csv(rows))
    return [path]


def _execute_make_data(inv: dict, out: str) -> list[str]:
    from .synthdata import write_corpus

    paths = write_corpus(out, inv["seed"], inv["train_n"], inv["test_n"])
    return sorted(paths.values())


_EXECUTORS = {
    "train": _execute_train,
    "attack": _execute_attack,
    "eval": _execute_eval,
    "surface": _execute_surface,
    "verify": _execute_verify,
    "sweep": _execute_sweep,
    "make-data": _execute_make_data,
}


# ---------------------------------------------------------------------------
# command wiring


def _seeds_of(inv: dict) -> dict:
    seeds = {}
    cfg = inv.get("config")
    if cfg:
        seeds["root"] = cfg["seed"]
        seeds["data"] = cfg["data"]["seed"]
        seeds["inner"] = cfg["inner"]["seed"]
        seeds["eval_attack"] = cfg["eval_attack"]["seed"]
    if "seed" in inv:
        seeds["root"] = inv["seed"]
    return seeds


def _input_paths(inv: dict) -> list[str]:
    paths = []
    cfg = inv.get("config")
    if cfg and not cfg["data"]["synthetic"]:
        from .data import STANDARD_FILES

        for img, lab in STANDARD_FILES.values():
            for name in (img, lab):
                for cand in (name, name + ".gz"):
                    full = os.path.join(cfg["data"]["dir"], cand)
                    if os.path.exists(full):
                        paths.append(full)
                        break
    if "checkpoint" in inv:
        paths.append(inv["checkpoint"])
    for _, path in inv.get("models", []):
        paths.append(path)
    if "config_path" in inv and inv["config_path"]:
        paths.append(inv["config_path"])
    return paths


def _run(subcommand: str, inv: dict, out: str) -> list[str]:
    from .manifest import RunManifest, digest_map, write_manifest

    os.makedirs(out, exist_ok=True)
    t0 = time.time()
    artifacts = _EXECUTORS[subcommand](inv, out)
    manifest = RunManifest(
        subcommand=subcommand,
        invocation=inv,
        seeds=_seeds_of(inv),
        inputs=digest_map(_input_paths(inv)),
        outputs=digest_map(artifacts, base_dir=out),
        wall_clock=time.time() - t0,
        version=VERSION,
    )
    write_manifest(manifest, os.path.join(out, "manifest.json"))
    return artifacts


def _resolved_config(args) -> dict:
    if getattr(args, "preset", None) and getattr(args, "config", None):
        raise ConfigError("--config and --preset are mutually exclusive")
    if getattr(args, "preset", None):
        resolved = config_load(preset_path(args.preset))
    elif getattr(args, "config", None):
        resolved = config_load(args.config)
    else:
        resolved = validate_config({})
    if getattr(args, "method", None):
        resolved["method"] = args.method
    if getattr(args, "seed", None) is not None:
        resolved["seed"] = args.seed
    try:
        _train_config(resolved)  # surface constraint errors before running
        _architecture(resolved)
    except ConfigError:
        raise
    return resolved


def _config_path_of(args) -> str:
    if getattr(args, "preset", None):
        return preset_path(args.preset)
    return getattr(args, "config", None) or ""


def cmd_train(args) -> int:
    inv = {"config": _resolved_config(args), "config_path": _config_path_of(args)}
    _run("train", inv, args.out)
    return 0


def cmd_attack(args) -> int:
    inv = {
        "config": _resolved_config(args),
        "config_path": _config_path_of(args),
        "checkpoint": args.checkpoint,
        "attack": args.attack,
    }
    _run("attack", inv, args.out)
    return 0


def cmd_eval(args) -> int:
    models = []
    for spec in args.model:
        name, sep, path = spec.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"--model expects NAME=PATH, got {spec!r}")
        models.append([name, path])
    inv = {
        "config": _resolved_config(args),
        "config_path": _config_path_of(args),
        "models": models,
    }
    _run("eval", inv, args.out)
    return 0


def cmd_surface(args) -> int:
    inv = {
        "config": _resolved_config(args),
        "config_path": _config_path_of(args),
        "checkpoint": args.checkpoint,
        "index": args.index,
        "kind": args.kind,
        "span": args.span,
        "resolution": args.resolution,
        "seed": args.surface_seed,
    }
    _run("surface", inv, args.out)
    return 0


def cmd_verify(args) -> int:
    checks = sorted(_CHECKS) if args.check == "all" else [args.check]
    inv = {"checks": checks, "seed": args.seed}
    _run("verify", inv, args.out)
    with open(os.path.join(args.out, "report.json"), "r", encoding="utf-8") as fh:
        results = json.load(fh)
    failed = [name for name, res in results.items() if not res["passed"]]
    for name in checks:
        status = "ok" if results[name]["passed"] else "FAILED"
        print(f"{name}: {status}")
    return 2 if failed else 0


def cmd_sweep(args) -> int:
    try:
        lambdas = [float(v) for v in args.lambdas.split(",")]
    except ValueError as exc:
        raise ConfigError(f"--lambdas expects comma-separated numbers: {exc}")
    inv = {
        "config": _resolved_config(args),
        "config_path": _config_path_of(args),
        "lambdas": lambdas,
    }
    try:
        _run("sweep", inv, args.out)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return 0


def cmd_make_data(args) -> int:
    inv = {"seed": args.seed, "train_n": args.train_n, "test_n": args.test_n}
    if args.train_n <= 0 or args.test_n <= 0:
        raise ConfigError("--train-n and --test-n must be positive")
    _run("make-data", inv, args.out)
    return 0


def cmd_rerun(args) -> int:
    from .manifest import load_manifest, verify_outputs

    manifest = load_manifest(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    _EXECUTORS[manifest.subcommand](manifest.invocation, base)
    mismatches = verify_outputs(manifest, base)
    for rel in manifest.outputs:
        mark = "MISMATCH" if rel in mismatches else "reproduced"
        print(f"{rel}: {mark}")
    if mismatches:
        print(f"{len(mismatches)} artifact(s) did not reproduce", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; contract wants 1
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_flags(sub):
    sub.add_argument("--config", help="JSON config file (see top-level --help)")
    sub.add_argument("--preset", help="shipped preset name: desk | paper-mnist")
    sub.add_argument("--out", default="runs/latest", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="flatreg",
        description="Train and probe flatness-regularized robust classifiers.",
        epilog=schema_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="cap BLAS/OpenMP worker threads (set before numpy loads)",
    )
    subs = parser.add_subparsers(dest="subcommand", metavar="subcommand")

    p = subs.add_parser("train", help="train a model, write checkpoint + metrics")
    _add_config_flags(p)
    p.add_argument("--method", choices=("standard", "at", "gradreg", "lfr"))
    p.add_argument("--seed", type=int, help="override the config root seed")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("attack", help="run one attack on a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attack", choices=("fgsm", "pgd", "mifgsm"), default="pgd")
    p.set_defaults(func=cmd_attack)

    p = subs.add_parser("eval", help="robustness table over models × attacks")
    _add_config_flags(p)
    p.add_argument(
        "--model",
        action="append",
        required=True,
        metavar="NAME=PATH",
        help="checkpoint to evaluate (repeatable)",
    )
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("surface", help="export a 2-D decision/loss surface grid")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0, help="test-set sample index")
    p.add_argument("--kind", choices=("decision", "loss"), default="decision")
    p.add_argument("--span", type=float, default=0.4, help="grid half-width")
    p.add_argument("--resolution", type=int, default=41, help="odd grid size >= 21")
    p.add_argument("--surface-seed", type=int, default=0)
    p.set_defaults(func=cmd_surface)

    p = subs.add_parser("verify", help="run the built-in theory checks")
    p.add_argument(
        "--check",
        choices=("lemma1", "theorem1", "theorem3", "lemma2", "all"),
        default="all",
    )
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", default="runs/verify", help="output directory")
    p.set_defaults(func=cmd_verify)

    p = subs.add_parser("sweep", help="train at several λ values, export the curve")
    _add_config_flags(p)
    p.add_argument("--lambdas", default="0,0.01,0.02", help="comma-separated, with 0")
    p.set_defaults(func=cmd_sweep)

    p = subs.add_parser("make-data", help="write the synthetic IDX corpus")
    p.add_argument("--out", default="data/synth", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-n", type=int, default=2000)
    p.add_argument("--test-n", type=int, default=1000)
    p.set_defaults(func=cmd_make_data)

    p = subs.add_parser("rerun", help="re-execute a manifest, verify byte-identity")
    p.add_argument("manifest", help="path to a manifest.json")
    p.set_defaults(func=cmd_rerun)

    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 1
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.subcommand is None:
        parser.print_usage(sys.stderr)
        return 1
    if args.threads is not None:
        if args.threads < 1:
            print("flatreg: error: --threads must be >= 1", file=sys.stderr)
            return 1
        for var in _THREAD_VARS:
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except Exception as exc:
        usage_kinds = (ConfigError, FileNotFoundError)
        try:  # only importable errors that were already loadable at failure time
            from .data import IdxFormatError
            from .manifest import ManifestError

            usage_kinds = usage_kinds + (IdxFormatError, ManifestError)
        except ImportError:
            pass
        if isinstance(exc, usage_kinds):
            print(f"flatreg: error: {exc}", file=sys.stderr)
            return 1
        kind = type(exc).__name__  # runtime failure: single line, exit 2
        print(f"flatreg: runtime failure ({kind}): {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
