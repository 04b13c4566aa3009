#!/usr/bin/env python3
"""Desk-scale end-to-end run: synth corpus, features, training, held-out evaluation.

Compares the learned embedding against the raw mean-pooled CQT baseline on
the same held-out tracks. Every stage goes through the ``segbed`` CLI, so
the work directory afterwards holds all intermediate artifacts.

    python scripts/desk_experiment.py work/ --tracks 20 --held-out 4
"""

import argparse
import json
import shutil
import sys
import time
from pathlib import Path

from segbed import cli


def run(*argv):
    code = cli.main([str(a) for a in argv])
    if code:
        sys.exit(f"segbed {argv[0]} failed with exit code {code}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("work_dir", type=Path)
    ap.add_argument("--tracks", type=int, default=20)
    ap.add_argument("--held-out", type=int, default=4)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--batches", type=int, default=64)
    ap.add_argument("--sampler", choices=["unbiased", "biased"], default="unbiased")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", help="optional segbed config file")
    args = ap.parse_args()

    w = args.work_dir
    common = ["--config", args.config] if args.config else []
    audio, feat, held = w / "audio", w / "feat", w / "held"
    if held.exists() or feat.exists():
        sys.exit(f"{w} already holds feature stores; pick a fresh work_dir")
    t0 = time.perf_counter()
    run("synth", audio, args.tracks, "--seed", args.seed, *common)
    run("features", audio, feat, *common)
    held.mkdir(parents=True)
    ids = sorted(p.name for p in feat.iterdir() if p.is_dir())
    for tid in ids[len(ids) - args.held_out :]:
        shutil.move(str(feat / tid), str(held / tid))

    t1 = time.perf_counter()
    model = w / "model.bin"
    run("train", feat, model, "--epochs", args.epochs, "--batches", args.batches,
        "--seed", args.seed, "--sampler", args.sampler, *common)
    train_min = (time.perf_counter() - t1) / 60

    summary = {"train_minutes": round(train_min, 2)}
    for name, extra in (("embedding", ["--model", model]), ("baseline", ["--raw"])):
        run("segment", held, w / name, *extra, *common)
        run("eval", w / name, audio, w / f"{name}.json", *common)
        rep = json.loads((w / f"{name}.json").read_text())
        summary[name] = {"mean_f": rep["mean_f"], "std_f": rep["std_f"], "per_track": rep["per_track"]}
    summary["total_minutes"] = round((time.perf_counter() - t0) / 60, 2)
    (w / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    e, b = summary["embedding"], summary["baseline"]
    print(f"embedding F@3s {e['mean_f']:.3f} ± {e['std_f']:.3f}")
    print(f"baseline  F@3s {b['mean_f']:.3f} ± {b['std_f']:.3f}")
    print(f"training {train_min:.1f} min; total {summary['total_minutes']:.1f} min")


if __name__ == "__main__":
    main()
