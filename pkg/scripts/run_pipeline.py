#!/usr/bin/env python3
"""Run the full pipeline for one config: generate -> train x3 -> tune ->
calibrate -> forecast -> evaluate -> export-plot.

Usage:
    python scripts/run_pipeline.py --config configs/desk.yaml [--skip-generate]

Equivalent to calling the `sohcast` CLI once per stage; kept as a script so a
whole experiment is one command and the stage timings end up in one log.
"""

import argparse
import logging
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from sohcast import pipeline  # noqa: E402
from sohcast.config import load_config  # noqa: E402

log = logging.getLogger("run_pipeline")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", type=Path, required=True)
    parser.add_argument(
        "--skip-generate",
        action="store_true",
        help="reuse an existing bundle instead of simulating the fleet",
    )
    parser.add_argument(
        "--skip-tune",
        action="store_true",
        help="skip LOBO tuning (required unless adapt.lam is a number)",
    )
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    cfg = load_config(args.config)
    stages = []
    if not args.skip_generate:
        stages.append(("generate", lambda: pipeline.cmd_generate(cfg)))
    stages.append(("train baseline", lambda: pipeline.cmd_train(cfg, "baseline")))
    if not args.skip_tune:
        stages.append(("tune", lambda: pipeline.cmd_tune(cfg)))
    stages += [
        ("train adapted", lambda: pipeline.cmd_train(cfg, "adapted")),
        ("train finetune", lambda: pipeline.cmd_train(cfg, "finetune")),
        ("calibrate", lambda: pipeline.cmd_calibrate(cfg, "adapted")),
        ("forecast", lambda: pipeline.cmd_forecast(cfg, "adapted")),
        ("evaluate", lambda: pipeline.cmd_evaluate(cfg)),
        ("export-plot", lambda: pipeline.cmd_export_plot(cfg)),
    ]

    t_start = time.perf_counter()
    for name, stage in stages:
        t0 = time.perf_counter()
        result = stage()
        log.info("%-16s done in %6.1f s", name, time.perf_counter() - t0)
        if name == "evaluate":
            for key, value in result["metrics"].items():
                log.info("  %-18s rmse=%6.3f%%  r2=%.4f", key, value["rmse_pct"], value["r2"])
            log.info("  coverage_target=%.3f", result["summary"]["coverage_target"])
    log.info("pipeline finished in %.1f s", time.perf_counter() - t_start)
    return 0


if __name__ == "__main__":
    sys.exit(main())
