"""Run one experiment config against a shared, cached denoiser checkpoint.

Usage::

    python scripts/run_experiment.py scripts/configs/main.json [--dm runs/dm.ldul] [--set key=value ...]

The denoiser is trained on first use (default config: T=200, 2e4 steps) and
reused by every later run, so sweeps only pay for crafting and evaluation.
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from ldulab import experiments as ex
from ldulab.config import apply_overrides, from_dict


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--dm", default="runs/dm.ldul", help="denoiser checkpoint (trained here if missing)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    data = apply_overrides(json.loads(Path(args.config).read_text()), args.set)
    dm = Path(args.dm)
    if not dm.exists():
        t0 = time.perf_counter()
        train_dir = dm.parent / "dm_train"
        ex.setup(from_dict({k: v for k, v in data.items() if k in ("dataset", "schedule", "model")}), train_dir)
        dm.write_bytes((train_dir / "checkpoints" / "dm.ldul").read_bytes())
        print(f"trained denoiser in {time.perf_counter() - t0:.0f}s -> {dm}")
    data.setdefault("model", {})["checkpoint"] = str(dm)
    cfg = from_dict(data)
    t0 = time.perf_counter()
    records = ex.run(cfg)
    print(f"{cfg.experiment}: {len(records)} rows in {time.perf_counter() - t0:.0f}s -> {Path(cfg.output_dir) / 'metrics.csv'}")
    print((Path(cfg.output_dir) / "metrics.csv").read_text())


if __name__ == "__main__":
    main()
