"""Command-line interface.

Subcommands: ``fit``, ``sample``, ``score``, ``synth``, ``coherence``.
Options may also be supplied as a flat JSON document via ``--config``;
explicit flags win over the file. Exit codes: 0 success, 1 usage error,
2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .dataio import (
    atomic_write_bytes,
    load_dataset,
    read_trajectory,
    write_states_csv,
    write_trajectory,
    write_trajectory_csv,
)
from .errors import DataError, NumericalError
from .model import model_from_json, model_to_json, sample_trajectory
from .pipeline import (
    MODES,
    FitConfig,
    coherence_metric,
    fit,
    score,
    synth_double_well,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; this interface reserves 2
    # for data errors and uses 1 for usage.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(
        prog="mslds",
        description="Learn and sample metastable switching linear dynamical systems.",
    )
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p_fit = sub.add_parser("fit", help="fit a model to a trajectory dataset")
    p_fit.add_argument("--data", help="dataset directory or single trajectory file")
    p_fit.add_argument("--states", type=int, help="number of hidden states")
    p_fit.add_argument("--mode", choices=MODES, help="model family (default mslds)")
    p_fit.add_argument("--out", help="output model JSON path")
    p_fit.add_argument("--max-iters", type=int, dest="max_iters")
    p_fit.add_argument("--tol", type=float, help="relative loglik improvement threshold")
    p_fit.add_argument("--eta", type=float, help="spectral norm bound")
    p_fit.add_argument("--seed", type=int)
    p_fit.add_argument("--threads", type=int)
    p_fit.add_argument("--trace", help="write per-iteration records to this CSV")
    p_fit.add_argument("--config", help="flat JSON config file; flags override")

    p_sample = sub.add_parser("sample", help="sample a trajectory from a model")
    p_sample.add_argument("--model", help="model JSON path")
    p_sample.add_argument("--steps", type=int)
    p_sample.add_argument("--seed", type=int)
    p_sample.add_argument("--out", help="output prefix: writes PREFIX.obs.csv and PREFIX.states.csv")
    p_sample.add_argument(
        "--allow-unstable",
        action="store_true",
        default=None,
        dest="allow_unstable",
        help="skip the stability validation (for unconstrained-mode models)",
    )
    p_sample.add_argument("--config", help="flat JSON config file; flags override")

    p_score = sub.add_parser("score", help="log-likelihood of a dataset under a model")
    p_score.add_argument("--model", help="model JSON path")
    p_score.add_argument("--data", help="dataset directory or single trajectory file")
    p_score.add_argument("--config", help="flat JSON config file; flags override")

    p_synth = sub.add_parser("synth", help="generate double-well benchmark data")
    p_synth.add_argument(
        "--wells",
        help="well spec: 'c1,...,cd@stiffness;...' e.g. '-2@0.1;2@0.1'",
    )
    p_synth.add_argument("--steps", type=int)
    p_synth.add_argument("--seed", type=int)
    p_synth.add_argument("--noise", type=float, help="per-step noise scale (default 0.1)")
    p_synth.add_argument("--hop", type=float, help="per-step hop probability (default 0.005)")
    p_synth.add_argument("--out", help="output trajectory file (.csv or .msld)")
    p_synth.add_argument("--config", help="flat JSON config file; flags override")

    p_coh = sub.add_parser("coherence", help="increment-roughness metric of a trajectory")
    p_coh.add_argument("--data", help="trajectory file")
    p_coh.add_argument("--window", type=int, help="increment lag (default 1)")
    p_coh.add_argument("--config", help="flat JSON config file; flags override")

    return parser


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise _UsageError(f"cannot load config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise _UsageError(f"config {path} must be a flat JSON object")
    return doc


class _Options:
    """Flag-over-config resolution with a record of missing required keys."""

    def __init__(self, args: argparse.Namespace, config: dict):
        self.args = vars(args)
        self.config = config

    def get(self, key: str, default=None, cast=None):
        value = self.args.get(key)
        if value is None:
            value = self.config.get(key, default)
        if value is not None and cast is not None:
            try:
                value = cast(value)
            except (TypeError, ValueError) as exc:
                raise _UsageError(f"bad value for {key}: {exc}") from exc
        return value

    def require(self, key: str):
        value = self.get(key)
        if value is None:
            raise _UsageError(f"missing required option --{key.replace('_', '-')}")
        return value


def _parse_wells(spec: str) -> list[tuple[list[float], float]]:
    wells = []
    try:
        for chunk in spec.split(";"):
            chunk = chunk.strip()
            if not chunk:
                continue
            center_txt, _, kappa_txt = chunk.partition("@")
            if not kappa_txt:
                raise ValueError(f"well {chunk!r} lacks '@stiffness'")
            center = [float(v) for v in center_txt.split(",")]
            wells.append((center, float(kappa_txt)))
    except ValueError as exc:
        raise _UsageError(f"bad --wells spec: {exc}") from exc
    if not wells:
        raise _UsageError("bad --wells spec: no wells given")
    return wells


def _read_model(path: str):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc}") from exc
    return model_from_json(text)


def _cmd_fit(opts: _Options) -> int:
    cfg = FitConfig(
        n_states=int(opts.require("states")),
        max_em_iters=opts.get("max_iters", 100, int),
        em_tol=opts.get("tol", 1e-5, float),
        eta=opts.get("eta", 0.99, float),
        mode=opts.get("mode", "mslds"),
        seed=opts.get("seed", 0, int),
        threads=opts.get("threads", 1, int),
    )
    dataset = load_dataset(opts.require("data"))
    out = Path(opts.require("out"))
    params, report = fit(dataset, cfg)
    atomic_write_bytes(out, model_to_json(params).encode("utf-8"))
    trace = opts.get("trace")
    if trace is not None:
        _write_trace(Path(trace), report)
    final = report.records[-1]
    print(
        f"fit: mode={cfg.mode} states={cfg.n_states} iterations={len(report.records)} "
        f"loglik={final.loglik:.6f} reason={report.reason} model={out}"
    )
    return 0


def _write_trace(path: Path, report) -> None:
    k = report.params.n_states
    header = (
        ["iteration", "loglik", "wall_time"]
        + [f"surrogate_{s}" for s in range(k)]
        + [f"status_{s}" for s in range(k)]
    )
    lines = [",".join(header)]
    for rec in report.records:
        row = [str(rec.iteration), format(rec.loglik, ".17g"), format(rec.wall_time, ".6g")]
        row += [format(v, ".17g") for v in rec.surrogates]
        row += list(rec.statuses)
        lines.append(",".join(row))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _cmd_sample(opts: _Options) -> int:
    params = _read_model(opts.require("model"))
    steps = opts.get("steps", None, int)
    if steps is None:
        raise _UsageError("missing required option --steps")
    seed = opts.get("seed", 0, int)
    prefix = str(opts.require("out"))
    validate = not bool(opts.get("allow_unstable", False))
    states, obs = sample_trajectory(params, steps, seed, validate=validate)
    obs_path = Path(prefix + ".obs.csv")
    states_path = Path(prefix + ".states.csv")
    write_trajectory_csv(obs_path, obs)
    write_states_csv(states_path, states)
    print(f"sample: steps={steps} seed={seed} obs={obs_path} states={states_path}")
    return 0


def _cmd_score(opts: _Options) -> int:
    params = _read_model(opts.require("model"))
    dataset = load_dataset(opts.require("data"))
    per_traj, total = score(params, dataset)
    print("trajectory,loglik")
    for i, (traj, ll) in enumerate(zip(dataset.trajectories, per_traj)):
        name = traj.source_id or str(i)
        print(f"{name},{ll:.17g}")
    print(f"TOTAL,{total:.17g}")
    return 0


def _cmd_synth(opts: _Options) -> int:
    wells = _parse_wells(str(opts.require("wells")))
    steps = opts.get("steps", None, int)
    if steps is None:
        raise _UsageError("missing required option --steps")
    traj = synth_double_well(
        wells,
        steps,
        seed=opts.get("seed", 0, int),
        noise=opts.get("noise", 0.1, float),
        hop=opts.get("hop", 0.005, float),
    )
    out = opts.require("out")
    write_trajectory(out, traj)
    print(f"synth: wells={len(wells)} steps={steps} out={out}")
    return 0


def _cmd_coherence(opts: _Options) -> int:
    traj = read_trajectory(opts.require("data"))
    value = coherence_metric(traj, window=opts.get("window", 1, int))
    print(format(value, ".17g"))
    return 0


_COMMANDS = {
    "fit": _cmd_fit,
    "sample": _cmd_sample,
    "score": _cmd_score,
    "synth": _cmd_synth,
    "coherence": _cmd_coherence,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("a subcommand is required")
    try:
        config = _load_config(getattr(args, "config", None))
        return _COMMANDS[args.command](_Options(args, config))
    except _UsageError as exc:
        print(f"mslds {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        # Config-level contradictions (bad mode, non-positive tolerances).
        print(f"mslds {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"mslds {args.command}: data error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"mslds {args.command}: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"mslds {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
