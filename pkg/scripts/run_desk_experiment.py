"""Run the desk-scale Naive / Ideal / Multi-lang / Lang.-adv comparison and check its orderings.

    python scripts/run_desk_experiment.py [--config configs/desk.json] [--out runs/desk] [--workers N]
"""

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from sluadv.cli import experiment_data, load_config
from sluadv.evaluation import ComparisonConfig, run_comparison

ROOT = Path(__file__).resolve().parents[1]


def ordering_checks(report):
    """The three ordering checks on per-seed averaged SemER, in percentage points."""
    semer = {m: 100 * np.array(report.avg_semer(m)) for m in report.rows}
    beats = int(np.sum(semer["Multi-lang"] < semer["Naive"]))
    means = {m: float(v.mean()) for m, v in semer.items()}
    return [
        (f"Multi-lang < Naive in {beats}/{len(report.seeds)} seeds (need >= 4)", beats >= 4),
        (f"Lang.-adv {means['Lang.-adv']:.2f} <= Multi-lang {means['Multi-lang']:.2f} + 0.5",
         means["Lang.-adv"] <= means["Multi-lang"] + 0.5),
        (f"Ideal {means['Ideal']:.2f} <= Multi-lang {means['Multi-lang']:.2f} + 1.0",
         means["Ideal"] <= means["Multi-lang"] + 1.0),
    ]


def run(config_path, workers=None):
    cfg = load_config(config_path)
    if workers:
        cfg.workers = workers
    ccfg = ComparisonConfig(train=cfg.train, model=cfg.model, min_token_freq=cfg.min_token_freq,
                            dtype=cfg.dtype, workers=cfg.workers)
    t0 = time.time()
    report = run_comparison(experiment_data(cfg), list(cfg.split_spec().fractions), ccfg, cfg.seeds,
                            meta={"experiment": cfg.experiment})
    return report, time.time() - t0


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "desk.json"))
    ap.add_argument("--out", default=str(ROOT / "runs" / "desk"))
    ap.add_argument("--workers", type=int)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    report, seconds = run(args.config, args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.md").write_text(report.to_markdown())
    print(report.to_markdown())
    ok = True
    for text, passed in ordering_checks(report):
        print(f"[{'PASS' if passed else 'FAIL'}] {text}")
        ok &= passed
    print(f"runtime {seconds / 60:.1f} min")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
