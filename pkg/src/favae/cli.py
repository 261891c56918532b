"""Command-line interface.

Configuration is a JSON document with the sections ``model`` (prior
hyper-parameters), ``train`` (outer-loop settings), ``views`` (per-view
settings keyed by view name) and ``prune`` (whether to drop irrelevant
factors after training).  Values are resolved with the precedence

    built-in defaults < --config file < FAVAE_* environment < command-line flags

Environment overrides use ``FAVAE_<SECTION>__<KEY>`` (nested keys joined by
``__``), e.g. ``FAVAE_TRAIN__MAX_OUTER_ITERS=20`` or
``FAVAE_VIEWS__IMG__BETA=4``; values are parsed as JSON when possible.
``--set section.key=value`` is the flag form of the same thing.

Exit codes: 0 success, 2 invalid input, 3 file errors, 4 numerical or
training failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import data_io, generation
from .errors import FavaeError, FormatError, NumericalError, StructuralError, TrainingError
from .fa_core import Hyperparams
from .trainer import TrainConfig, TrainTrace, ViewSettings, build_model, train
from .views import MultilabelView, VaeView

log = logging.getLogger("favae")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
ENV_PREFIX = "FAVAE_"

_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name != "per_view"]
_MODEL_KEYS = [f.name for f in fields(Hyperparams)]
_VIEW_KEYS = [f.name for f in fields(ViewSettings)]


class ConfigError(StructuralError):
    """Invalid configuration; the message names the offending key path."""


def default_config() -> dict:
    hp = asdict(Hyperparams(k_c=10))
    tc = TrainConfig().to_dict()
    tc.pop("per_view")
    return {"model": hp, "train": tc, "views": {}, "prune": True}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(cfg: dict, path: List[str], value, origin: str):
    if not path or not all(path):
        raise ConfigError(f"{origin}: empty key")
    node = cfg
    for i, key in enumerate(path[:-1]):
        if key == "views" and i == 0:
            node = node.setdefault("views", {})
        elif key in node and isinstance(node[key], dict):
            node = node[key]
        elif node is cfg.get("views"):
            node = node.setdefault(key, {})
        else:
            raise ConfigError(f"{origin}: unknown key {'.'.join(path[:i + 1])!r}")
    node[path[-1]] = value
    return ".".join(path)


def _merge(base: dict, over: dict, prefix: str = ""):
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value, f"{prefix}{key}.")
        elif isinstance(value, dict) and key not in base and prefix == "views.":
            base[key] = copy.deepcopy(value)
        else:
            base[key] = value


def validate_config(cfg: dict) -> dict:
    """Check every key against the schema; raises ConfigError naming the bad path."""
    allowed = {"model": _MODEL_KEYS, "train": _TRAIN_KEYS}
    for key in cfg:
        if key not in ("model", "train", "views", "prune"):
            raise ConfigError(f"unknown config key {key!r}")
    for section, keys in allowed.items():
        if not isinstance(cfg.get(section), dict):
            raise ConfigError(f"{section}: expected a mapping")
        for key in cfg[section]:
            if key not in keys:
                raise ConfigError(f"unknown config key '{section}.{key}'")
    if not isinstance(cfg.get("views"), dict):
        raise ConfigError("views: expected a mapping")
    for name, vs in cfg["views"].items():
        if not isinstance(vs, dict):
            raise ConfigError(f"views.{name}: expected a mapping")
        for key in vs:
            if key not in _VIEW_KEYS:
                raise ConfigError(f"unknown config key 'views.{name}.{key}'")
    if not isinstance(cfg.get("prune"), bool):
        raise ConfigError("prune: expected true or false")
    try:
        hyperparams(cfg)
        train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration value: {exc}") from None
    return cfg


def resolve_config(path: Optional[str], env: Optional[Dict[str, str]] = None,
                   overrides: Optional[List[str]] = None, flags: Optional[dict] = None) -> dict:
    """Merge defaults, config file, environment and flag overrides, then validate."""
    cfg = default_config()
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for key in doc:
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r} in {path}")
        _merge(cfg, doc)
    env = os.environ if env is None else env
    origins = {}
    for name in sorted(env):
        if name.startswith(ENV_PREFIX):
            parts = [p.lower() for p in name[len(ENV_PREFIX):].split("__")]
            if parts[0] == "views" and len(parts) > 2:
                parts = ["views", name[len(ENV_PREFIX):].split("__")[1]] + parts[2:]
            origins[_set_path(cfg, parts, _parse_value(env[name]), f"environment {name}")] = name
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        origins[_set_path(cfg, key.split("."), _parse_value(value), f"--set {key}")] = f"--set {key}"
    for dotted, value in (flags or {}).items():
        if value is not None:
            _set_path(cfg, dotted.split("."), value, f"flag for {dotted}")
    try:
        return validate_config(cfg)
    except ConfigError as exc:
        culprit = [o for path, o in origins.items() if f"'{path}'" in str(exc)]
        if culprit:
            raise ConfigError(f"{exc} (set by {culprit[0]})") from None
        raise


def hyperparams(cfg: dict) -> Hyperparams:
    return Hyperparams(**cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    per_view = {name: ViewSettings(**vs) for name, vs in cfg["views"].items()}
    return TrainConfig(**cfg["train"], per_view=per_view)


def _write_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    if not args.out:
        raise ConfigError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", args.resolved)
    _write_json(out / "invocation.json", {"argv": args.argv})
    return out


# ---------------------------------------------------------------------------
# Plots and image export
# ---------------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_trace(trace: TrainTrace, out: Path) -> List[Path]:
    plt = _pyplot()
    written = []
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(1, len(trace.records) + 1), trace.fa_elbo, marker=".")
    ax.set_xlabel("outer iteration")
    ax.set_ylabel("factor-analysis ELBO")
    fig.tight_layout()
    fig.savefig(out / "elbo.png", dpi=100)
    plt.close(fig)
    written.append(out / "elbo.png")
    views = sorted({v for r in trace.records for v in r.epoch_gll})
    if views:
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        for v in views:
            axes[0].plot(trace.epoch_series(v, "gll"), label=v)
            axes[1].plot(trace.epoch_series(v, "kl"), label=v)
        axes[0].set_title("reconstruction (GLL)")
        axes[1].set_title("KL")
        for ax in axes:
            ax.set_xlabel("epoch")
            ax.legend()
        fig.tight_layout()
        fig.savefig(out / "gll_kl.png", dpi=100)
        plt.close(fig)
        written.append(out / "gll_kl.png")
    return written


def save_grid(values: np.ndarray, path: Path):
    """Grayscale grid with one tile per row; square tiles when D is a perfect square."""
    plt = _pyplot()
    values = np.atleast_2d(values)
    n, d = values.shape
    side = int(round(np.sqrt(d)))
    h, w = (side, side) if side * side == d else (1, d)
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.zeros((rows * (h + 1), cols * (w + 1)))
    lo, hi = float(values.min()), float(values.max())
    scaled = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * (h + 1):r * (h + 1) + h, c * (w + 1):c * (w + 1) + w] = scaled[i].reshape(h, w)
    plt.imsave(path, grid, cmap="gray", vmin=0.0, vmax=1.0)


def _write_generated(gen: generation.Generated, out: Path, model, prefix: str = "") -> dict:
    stem = f"{prefix}{gen.view}"
    flat = gen.values.reshape(-1, gen.values.shape[-1])
    data_io.write_matrix(out / f"{stem}.samples.favm", flat)
    files = {"samples": f"{stem}.samples.favm"}
    if gen.probabilities is not None:
        data_io.write_matrix(out / f"{stem}.probabilities.favm", gen.probabilities.reshape(flat.shape))
        files["probabilities"] = f"{stem}.probabilities.favm"
    if isinstance(model[gen.view], VaeView):
        save_grid(flat, out / f"{stem}.png")
        files["image"] = f"{stem}.png"
    return files


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _load_spec(path: str, seed: Optional[int]) -> data_io.SynthSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from None
    allowed = {f.name for f in fields(data_io.SynthSpec)}
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown spec key {key!r}")
    view_keys = {f.name for f in fields(data_io.SynthView)}
    for i, v in enumerate(doc.get("views", [])):
        for key in v:
            if key not in view_keys:
                raise ConfigError(f"unknown spec key 'views[{i}].{key}'")
    if seed is not None:
        doc["seed"] = seed
    try:
        return data_io.SynthSpec(**doc)
    except TypeError as exc:
        raise ConfigError(f"spec: {exc}") from None


def cmd_synth(args) -> int:
    spec = _load_spec(args.spec, args.seed)
    out = _out_dir(args)
    data_io.generate_synthetic(spec, out)
    _write_json(out / "spec.json", asdict(spec))
    print(out / "manifest.json")
    return EXIT_OK


def _resolved(args) -> dict:
    flags = {"train.seed": args.seed}
    if getattr(args, "max_iters", None) is not None:
        flags["train.max_outer_iters"] = args.max_iters
    if getattr(args, "k", None) is not None:
        flags["model.k_c"] = args.k
    return resolve_config(args.config, None, args.set, flags)


def _finish_training(model, trace, tc, out: Path, ckpt: Path):
    data_io.save_checkpoint(model, trace, ckpt, tc)
    (out / "trace.jsonl").write_text("".join(line + "\n" for line in trace.to_lines()))
    e = trace.fa_elbo
    summary = {"iterations": model.iteration, "converged": model.converged, "k": model.k,
               "final_fa_elbo": float(e[-1]) if e.size else None,
               "fa_elbo_monotone": bool(np.all(np.diff(e) >= -1e-8 * np.maximum(1.0, np.abs(e[1:]))))}
    _write_json(out / "summary.json", summary)
    plot_trace(trace, out)
    return summary


def cmd_train(args) -> int:
    cfg = args.resolved
    out = _out_dir(args)
    ckpt = out / "checkpoint"
    _, dataset = data_io.load_manifest(args.manifest)
    tc = train_config(cfg)
    if args.resume and (ckpt / data_io.CHECKPOINT_META).exists():
        model, trace, _ = data_io.load_checkpoint(ckpt, dataset)
        remaining = tc.max_outer_iters - model.iteration
        if model.converged or remaining <= 0:
            log.info("run already finished at iteration %d; nothing to do", model.iteration)
            return EXIT_OK
        tc.max_outer_iters = remaining
    else:
        model = build_model(dataset, hyperparams(cfg), tc.per_view, seed=tc.seed)
        trace = None
    model, trace = train(model, tc, trace, checkpoint_dir=ckpt)
    tc.max_outer_iters = cfg["train"]["max_outer_iters"]
    if cfg["prune"]:
        model.prune_factors()
    summary = _finish_training(model, trace, tc, out, ckpt)
    print(json.dumps(summary))
    return EXIT_OK


def cmd_resume(args) -> int:
    args.resume = True
    return cmd_train(args)


def _load_model(path):
    model, _, _ = data_io.load_checkpoint(path)
    return model


def _matrix_arg(value, what: str) -> np.ndarray:
    """A matrix given as a .favm path or inline JSON rows."""
    if isinstance(value, str):
        if value.endswith(".favm"):
            return data_io.read_matrix(value, what)
        value = json.loads(value)
    a = np.atleast_2d(np.asarray(value, dtype=float))
    if a.ndim != 2:
        raise ConfigError(f"{what}: expected a matrix")
    return a


def cmd_generate(args) -> int:
    model = _load_model(args.checkpoint)
    req_path = Path(args.request)
    doc = json.loads(req_path.read_text())
    for key in doc:
        if key not in ("given", "target", "n_samples", "seed", "sample_latent", "encoded"):
            raise ConfigError(f"unknown request key {key!r}")
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    if "target" not in doc:
        raise ConfigError("request needs a 'target'")
    if doc["target"] in doc.get("given", {}):
        raise ConfigError(f"target view {doc['target']!r} is also listed in 'given'")
    given = {}
    for name, value in doc.get("given", {}).items():
        if isinstance(value, str) and not os.path.isabs(value) and value.endswith(".favm"):
            value = str(req_path.parent / value)
        x = _matrix_arg(value, f"given.{name}")
        given[name] = x if doc.get("encoded", False) else generation.encode_evidence(model, name, x, seed)
    req = generation.ConditionRequest(given, doc["target"], int(doc.get("n_samples", 1)), seed,
                                      bool(doc.get("sample_latent", False)))
    gen = generation.conditional_generate(model, req)
    out = _out_dir(args)
    files = _write_generated(gen, out, model)
    _write_json(out / "request.json", {**doc, "seed": seed, "files": files})
    return EXIT_OK


def cmd_cross(args) -> int:
    model = _load_model(args.checkpoint)
    model[args.source]
    model[args.target]
    x = _matrix_arg(args.input, "--input")
    seed = 0 if args.seed is None else args.seed
    gen = generation.cross_generate(model, args.source, x, args.target, args.n_samples, seed)
    out = _out_dir(args)
    files = _write_generated(gen, out, model)
    _write_json(out / "cross.json", {"source": args.source, "target": args.target, "seed": seed,
                                     "n_samples": args.n_samples, "input": args.input, "files": files})
    return EXIT_OK


def cmd_interpolate(args) -> int:
    model = _load_model(args.checkpoint)
    a = _matrix_arg(args.start, "--start")[0]
    b = _matrix_arg(args.end, "--end")[0]
    lambdas = generation.lambda_grid(args.steps)
    out = _out_dir(args)
    seed = 0 if args.seed is None else args.seed
    data_io.write_matrix(out / "lambdas.favm", lambdas[:, None])
    files = {}
    if args.space == "private":
        if not args.view:
            raise ConfigError("--view is required for private interpolation")
        codes = generation.interpolate_private(a, b, lambdas)
        decoded = generation.decode_private(model, args.view, codes)
        data_io.write_matrix(out / "codes.favm", codes)
        data_io.write_matrix(out / f"{args.view}.favm", decoded)
        files[args.view] = f"{args.view}.favm"
        if isinstance(model[args.view], VaeView):
            save_grid(decoded, out / f"{args.view}.png")
    else:
        codes = generation.interpolate_global(a, b, lambdas)
        data_io.write_matrix(out / "codes.favm", codes)
        views = [args.view] if args.view else None
        for name, gen in generation.decode_global(model, codes, views, seed).items():
            files[name] = _write_generated(gen, out, model)
    _write_json(out / "interpolation.json", {"space": args.space, "steps": args.steps,
                                             "lambdas": lambdas.tolist(), "files": files})
    return EXIT_OK


def cmd_relevance(args) -> int:
    model = _load_model(args.checkpoint)
    report = generation.latent_relevance(model, args.mode, args.reference)
    out = _out_dir(args)
    (out / "relevance.txt").write_text(report.to_text())
    report.save_heatmap(out / "relevance.png")
    data_io.write_matrix(out / "relevance.favm", report.matrix())
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model, trace, config = data_io.load_checkpoint(args.checkpoint)
    views = {}
    for name, v in model.views.items():
        info = {"kind": v.kind.value, "dim": int(v.w.d), "alpha_mean": v.alpha.mean.tolist()}
        if v.tau is not None:
            info["tau_mean"] = float(v.tau.mean)
        if isinstance(v, MultilabelView):
            info["observed_entries"] = int(v.observed().sum())
        views[name] = info
    doc = {"iteration": model.iteration, "converged": model.converged, "k": model.k,
           "n": model.n, "data_hash": model.data_hash, "views": views,
           "final_fa_elbo": float(trace.fa_elbo[-1]) if trace.records else None, "config": config}
    print(json.dumps(doc, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration value, e.g. train.max_outer_iters=20")

    parser = argparse.ArgumentParser(prog="favae", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("spec")
    p.set_defaults(func=cmd_synth)

    for name, func in (("train", cmd_train), ("resume", cmd_resume)):
        p = sub.add_parser(name, parents=[common], help=f"{name} a model on a dataset manifest")
        p.add_argument("manifest")
        p.add_argument("--max-iters", type=int)
        p.add_argument("-k", type=int, help="number of global factors")
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue from OUT/checkpoint if present")
        p.set_defaults(func=func)

    p = sub.add_parser("generate", parents=[common], help="conditional generation")
    p.add_argument("checkpoint")
    p.add_argument("request", help="JSON request: given, target, n_samples, seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("cross", parents=[common], help="cross-view generation")
    p.add_argument("checkpoint")
    p.add_argument("--from", dest="source", required=True)
    p.add_argument("--to", dest="target", required=True)
    p.add_argument("--input", required=True, help=".favm file or JSON rows")
    p.add_argument("--n-samples", type=int, default=1)
    p.set_defaults(func=cmd_cross)

    p = sub.add_parser("interpolate", parents=[common], help="latent interpolation")
    p.add_argument("checkpoint")
    p.add_argument("--space", choices=["private", "global"], required=True)
    p.add_argument("--view")
    p.add_argument("--start", required=True)
    p.add_argument("--end", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("relevance", parents=[common], help="factor relevance report")
    p.add_argument("checkpoint")
    p.add_argument("--mode", choices=["abs_mean", "signed_mean"], default="abs_mean")
    p.add_argument("--reference")
    p.set_defaults(func=cmd_relevance)

    p = sub.add_parser("inspect", parents=[common], help="summarize a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (TrainingError, NumericalError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, (FormatError, OSError)):
        return EXIT_IO
    if isinstance(exc, (StructuralError, ValueError, KeyError, TypeError)):
        return EXIT_INVALID
    if isinstance(exc, FavaeError):
        return EXIT_NUMERIC
    raise exc


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    args.argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args.resolved = _resolved(args)
        return args.func(args)
    except Exception as exc:
        code = exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
