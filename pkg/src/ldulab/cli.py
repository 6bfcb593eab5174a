"""Command-line entry point: ``labcli <subcommand>`` (also ``python -m ldulab``).

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, apply_overrides, from_dict, write_resolved
from .errors import (
    ConfigError,
    ConstraintNotMet,
    FormatError,
    ModeError,
    NumericalError,
    ShapeError,
    TrainingDiverged,
)
from .nets import TokenTable
from .plots import emit_plot, read_csv_rows
from .tensorcore import ParamStore

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("ldulab")


def _config(args) -> ExperimentConfig:
    data = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}", str(args.config)) from exc
    data = apply_overrides(data, getattr(args, "set", None) or [])
    if getattr(args, "experiment", None):
        data["experiment"] = args.experiment
    if getattr(args, "out", None):
        data["output_dir"] = str(args.out)
    return from_dict(data)


def _load_points(path: str) -> tuple[np.ndarray, np.ndarray | None]:
    rows = np.genfromtxt(path, delimiter=",", names=True)
    names = rows.dtype.names
    xs = np.stack([rows[n] for n in names if n.startswith("x")], axis=1)
    labels = rows["label"].astype(int) if "label" in names else None
    return xs, labels


def cmd_train_dm(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    lab = ex.setup(cfg, out)
    write_resolved(cfg, out)
    print(out / "checkpoints" / "dm.ldul" if not cfg.model.checkpoint else cfg.model.checkpoint)
    return EXIT_OK


def cmd_personalize(args) -> int:
    cfg = _config(args)
    lab = ex.setup(cfg)
    write_resolved(cfg, lab.out)
    tokens = ex.craft_tokens(lab, args.seed)
    path = lab.out / "checkpoints" / f"tokens_seed{args.seed}.ldul"
    save_checkpoint(path, ParamStore({TokenTable.PSEUDO: tokens}))
    print(path)
    return EXIT_OK


def cmd_craft(args) -> int:
    cfg = _config(args)
    lab = ex.setup(cfg)
    write_resolved(cfg, lab.out)
    c = ex.craft(lab, args.seed, cfg.unlearn.delta_255, tag="craft")
    linf, worst = ex._imperceptibility(lab, c)
    print(json.dumps({"feasible": c.feasible, "linf": linf, "psnr_db": worst, "lambda": c.penalty_lambda}, sort_keys=True))
    return EXIT_OK if c.feasible else EXIT_NUMERIC


def cmd_attack(args) -> int:
    cfg = _config(args)
    lab = ex.setup(cfg)
    x, labels = _load_points(args.input)
    out = ex.apply_attack(lab, [x], args.seed)[0]
    from .datasets import export_points_csv

    export_points_csv(out, args.output, labels)
    print(args.output)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    lab = ex.setup(cfg)
    x, labels = _load_points(args.input)
    if labels is None:
        raise ConfigError("input CSV needs a label column (token ids)", "input")
    samples = [x[labels == i + 1] for i in range(len(lab.dataset.identities))]
    scores, dist, base = ex.score(lab, samples, args.seed)
    print(json.dumps({"protection_score": scores, "mmd": dist, "mmd_clean": base}))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    records = ex.run(cfg)
    print(f"{len(records)} rows -> {Path(cfg.output_dir) / 'metrics.csv'}")
    return EXIT_OK


def cmd_plot(args) -> int:
    rows = read_csv_rows(args.csv)
    emit_plot(rows, args.x, args.y, args.output, title=args.title or "")
    print(args.output)
    return EXIT_OK


def cmd_inspect(args) -> int:
    params, sched = load_checkpoint(args.path)
    info = {"tensors": {n: list(params[n].shape) for n in params.names()}, "schedule": None if sched is None else {"T": sched.T, "kind": sched.kind}}
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="labcli", description="Latent-perturbation unlearnable-sample lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        return sp

    common(sub.add_parser("train-dm", help="train (or load) the denoiser and cache its checkpoint"), seed=False).set_defaults(fn=cmd_train_dm)
    common(sub.add_parser("personalize", help="clean textual inversion; writes pseudo-token checkpoint")).set_defaults(fn=cmd_personalize)
    common(sub.add_parser("craft", help="train the perturbation net and emit protected samples")).set_defaults(fn=cmd_craft)
    sp = common(sub.add_parser("attack", help="apply the configured attack to a samples CSV"))
    sp.add_argument("input")
    sp.add_argument("output")
    sp.set_defaults(fn=cmd_attack)
    sp = common(sub.add_parser("eval", help="personalize on a samples CSV and report protection scores"))
    sp.add_argument("input")
    sp.set_defaults(fn=cmd_eval)
    sp = common(sub.add_parser("run", help="run an experiment sweep"), seed=False)
    sp.add_argument("experiment", choices=list(ex.UNITS))
    sp.set_defaults(fn=cmd_run)
    sp = sub.add_parser("plot", help="render an SVG line chart from a metrics CSV")
    sp.add_argument("csv")
    sp.add_argument("--x", default="sweep_value")
    sp.add_argument("--y", action="append", required=True)
    sp.add_argument("--title")
    sp.add_argument("-o", "--output", required=True)
    sp.set_defaults(fn=cmd_plot)
    sp = sub.add_parser("inspect", help="list the tensors in a checkpoint")
    sp.add_argument("path")
    sp.set_defaults(fn=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, ModeError, FormatError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, TrainingDiverged, ConstraintNotMet, ShapeError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
