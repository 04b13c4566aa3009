#!/usr/bin/env python3
"""How well can the boundary detector do with near-perfect features?

Builds per-beat one-hot section features from a synthetic corpus's exact
annotations and beat times, adds iid Gaussian noise of several sizes, and
reports the mean trimmed F@3s. Nothing here touches audio or a model, so
the numbers bound what any embedding can reach with the default detector.

    python scripts/detector_ceiling.py --tracks 20 --noise 0,0.003,0.03,0.3
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from segbed.dsp import BeatGrid, read_beat_file
from segbed.evaluation import evaluate_track, parse_annotations
from segbed.segmentation import SegmentParams, segment_features
from segbed.synth import generate_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tracks", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise", default="0,0.003,0.01,0.03,0.1,0.3")
    ap.add_argument("--tau", type=float, default=SegmentParams().tau)
    args = ap.parse_args()

    params = SegmentParams(tau=args.tau)
    rng = np.random.default_rng(args.seed)
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        ids = generate_corpus(tmp / "audio", args.tracks, args.seed, beats_dir=tmp / "beats")
        tracks = []
        for tid in ids:
            ann = parse_annotations(tmp / "audio" / f"{tid}.tsv")
            beats = read_beat_file(tmp / "beats" / f"{tid}.txt")
            tracks.append((ann, beats))

    print(f"{'noise':>7} {'ratio':>8} {'F@3s':>6} {'P':>6} {'R':>6}")
    for s in (float(x) for x in args.noise.split(",")):
        f, p, r, ratio = [], [], [], []
        for ann, beats in tracks:
            inst = np.searchsorted(ann.boundaries_sec, beats.beat_times, side="right") - 1
            x = np.eye(inst.max() + 1)[inst] + s * rng.standard_normal((inst.size, inst.max() + 1))
            res = segment_features(x, BeatGrid(beats.beat_times), params)
            m = evaluate_track(res.boundaries.times_sec, ann)
            f.append(m.f_measure), p.append(m.precision), r.append(m.recall)
            d = res.ssm.values
            same = inst[:, None] == inst[None, :]
            ratio.append(d[same].mean() / d[~same].mean())
        # ratio: mean within-section over mean between-section squared distance
        print(f"{s:>7.3f} {np.mean(ratio):>8.4f} {np.mean(f):>6.3f} {np.mean(p):>6.3f} {np.mean(r):>6.3f}")


if __name__ == "__main__":
    main()
