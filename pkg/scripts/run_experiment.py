"""Run the 20-patient phantom experiment and print its headline numbers.

    python scripts/run_experiment.py --out runs/default [--config cfg.json] [--seed 7]
"""
import argparse
import json
import logging
import time
from pathlib import Path

from radq import pipeline
from radq.config import RunConfig, load_config, with_seed


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def summarize(report: dict) -> str:
    lines = [f"{'sequencer':<12}{'sens':>8}{'spec':>8}{'acc':>8}{'FC':>10}"]
    for name, s in report["sequencers"].items():
        p = s["pooled"]
        fc = report["separability"][name]["aggregate"]
        lines.append(f"{name:<12}{_fmt(p['sensitivity']):>8}{_fmt(p['specificity']):>8}"
                     f"{_fmt(p['accuracy']):>8}{fc:>10.4g}")
    for pair, tests in report["paired_tests"].items():
        for metric, t in tests.items():
            p = "degenerate" if t["p"] is None else f"p={t['p']:.4f}"
            lines.append(f"{pair} {metric}: {p} over {t['n_folds']} folds")
    lines.append(f"leakage audit passed: {report['leakage_audit']['passed']}")
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True, type=Path)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    cfg, text = load_config(args.config) if args.config else (RunConfig(), None)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    t0 = time.perf_counter()
    pipeline.run_all(cfg, args.out, text)
    report = json.loads((args.out / "report" / "report.json").read_text())
    print(summarize(report))
    print(f"wall time {time.perf_counter() - t0:.0f} s; digest {pipeline.reproducibility_digest(args.out)[:16]}")


if __name__ == "__main__":
    main()
