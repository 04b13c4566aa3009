"""``segbed`` command line: synth, features, train, segment, eval, fpfn, dump-config."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import config as config_mod
from .audio import load_audio
from .dsp import read_beat_file, track_beats
from .embedding import embed_track, load_model, save_model, train
from .errors import EmptyDataset, SegbedError
from .evaluation import evaluate_corpus, parse_annotations
from .features import MANIFEST, build_store, load_store, save_to_dataset
from .sampling import (
    SamplingParams,
    SegmentTimeline,
    fn_probability,
    fp_probability,
    monte_carlo_rates,
)
from .segmentation import (
    pooled_patch_features,
    read_boundaries_csv,
    segment_features,
    write_boundaries_csv,
    write_ssm,
)
from .synth import SynthConfig, generate_corpus

log = logging.getLogger("segbed")


class Fatal(Exception):
    """Abort the command with exit status 1."""


def _jobs_default() -> int:
    try:
        return max(1, int(os.environ.get("SEGBED_JOBS", "1")))
    except ValueError:
        return 1


def _map(fn, items, jobs: int):
    """``map`` over tracks, in worker processes when ``jobs > 1``."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _store_dirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise Fatal(f"{root}: not a directory")
    dirs = sorted(p for p in root.iterdir() if (p / MANIFEST).is_file())
    if not dirs:
        raise Fatal(f"{root}: no feature stores found")
    return dirs


# --- features ----------------------------------------------------------------


def _features_one(task):
    wav, out_dir, beats_dir, cfg = task
    tid = wav.stem
    try:
        audio = load_audio(wav, cfg.audio.sample_rate)
        if beats_dir is not None:
            beats = read_beat_file(Path(beats_dir) / f"{tid}.txt")
        else:
            beats = track_beats(audio)
        store = build_store(audio, beats, tid, cfg.cqt, cfg.patch)
        save_to_dataset(store, out_dir)
        return tid, None
    except (SegbedError, OSError, ValueError) as exc:
        return tid, f"{type(exc).__name__}: {exc}"


def cmd_features(args, cfg) -> int:
    audio_dir = Path(args.audio_dir)
    wavs = sorted(audio_dir.glob("*.wav")) if audio_dir.is_dir() else []
    if not wavs:
        raise Fatal(f"{audio_dir}: no .wav files")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(w, out, args.beats_dir, cfg) for w in wavs]
    results = _map(_features_one, tasks, args.jobs)
    failed = [(tid, err) for tid, err in results if err]
    for tid, err in failed:
        log.warning("skipped %s: %s", tid, err)
    ok = len(results) - len(failed)
    log.info("wrote %d feature stores, %d warnings", ok, len(failed))
    if ok == 0:
        raise Fatal("no track could be processed")
    return 0


# --- train ---------------------------------------------------------------------


def cmd_train(args, cfg) -> int:
    stores = [load_store(d) for d in _store_dirs(Path(args.store_dir))]
    tc = cfg.train
    pairs = (("seed", args.seed), ("epochs", args.epochs), ("batches_per_epoch", args.batches))
    overrides = {k: v for k, v in pairs if v is not None}
    if overrides:
        tc = dataclasses.replace(tc, **overrides)
    out = Path(args.out_model)
    out.parent.mkdir(parents=True, exist_ok=True)
    loss_log = Path(args.loss_log) if args.loss_log else out.with_name(out.name + ".loss.csv")
    log.info("training on %d tracks, sampler=%s, seed=%d", len(stores), args.sampler, tc.seed)
    try:
        model = train(
            stores,
            args.sampler,
            tc,
            cfg.arch,
            cfg.sampling,
            loss_log=loss_log,
            triplet_log=Path(args.triplet_log) if args.triplet_log else None,
        )
    except EmptyDataset as exc:
        raise Fatal(str(exc)) from None
    save_model(model, out)
    log.info("saved %s", out)
    return 0


# --- segment -------------------------------------------------------------------


def _segment_one(task):
    store_dir, model_path, out_dir, dump, cfg = task
    try:
        store = load_store(store_dir)
        if model_path is None:
            feats = pooled_patch_features(store)
        else:
            model = load_model(model_path)
            feats = embed_track(model, store, normalize_patches=cfg.train.normalize_patches).vectors
        res = segment_features(feats, store.beat_grid, cfg.segment)
        write_boundaries_csv(out_dir / f"{store.track_id}.csv", res.boundaries)
        if dump:
            write_ssm(out_dir / f"{store.track_id}.ssm.f32", res.ssm_filtered)
            np.savetxt(out_dir / f"{store.track_id}.novelty.csv", res.novelty, fmt="%.9g", header="novelty", comments="")
        return store.track_id, len(res.boundaries.beat_indices), None
    except (SegbedError, OSError, ValueError) as exc:
        return Path(store_dir).name, 0, f"{type(exc).__name__}: {exc}"


def cmd_segment(args, cfg) -> int:
    dirs = _store_dirs(Path(args.store_dir))
    if args.model is None and not args.raw:
        raise Fatal("give --model, or --raw for the unembedded baseline")
    if args.model is not None:
        load_model(args.model)  # fail fast on a bad checkpoint
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(d, args.model, out, args.dump, cfg) for d in dirs]
    failed = 0
    for tid, n, err in _map(_segment_one, tasks, args.jobs):
        if err:
            failed += 1
            log.warning("skipped %s: %s", tid, err)
        else:
            log.info("%s: %d boundaries", tid, n)
    if failed == len(tasks):
        raise Fatal("no track could be segmented")
    return 0


# --- eval ----------------------------------------------------------------------


def cmd_eval(args, cfg) -> int:
    est_dir, ref_dir = Path(args.est_dir), Path(args.ref_dir)
    est_files = sorted(est_dir.glob("*.csv")) if est_dir.is_dir() else []
    if not est_files:
        raise Fatal(f"{est_dir}: no boundary CSVs")
    window = cfg.eval.window_sec if args.window is None else args.window
    pairs, ids, errors = [], [], []
    for f in est_files:
        tid = f.stem
        if tid.endswith(".novelty"):
            continue
        try:
            est = read_boundaries_csv(f).times_sec
            ann = parse_annotations(ref_dir / f"{tid}.tsv")
        except (SegbedError, OSError, ValueError, KeyError) as exc:
            errors.append({"id": tid, "error": f"{type(exc).__name__}: {exc}"})
            log.warning("%s: %s", tid, errors[-1]["error"])
            continue
        pairs.append((est, ann.boundaries_sec, ann.duration_sec))
        ids.append(tid)
    if not pairs:
        raise Fatal("no track could be evaluated")
    report = evaluate_corpus(pairs, window, ids)
    report.errors = errors or None
    Path(args.out_json).write_text(report.to_json() + "\n")
    log.info(
        "F=%.3f±%.3f P=%.3f±%.3f R=%.3f±%.3f over %d tracks (window %.2fs)",
        report.mean_f, report.std_f, report.mean_p, report.std_p, report.mean_r, report.std_r, len(ids), window,
    )
    return 0


# --- fpfn ----------------------------------------------------------------------

FPFN_COLUMNS = [
    "delta_p", "delta_n_min", "delta_n_max",
    "fp_formula", "fp_empirical", "fn_formula", "fn_empirical",
    "seg_len", "sampler", "formula_out_of_range",
]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def fpfn_table(
    delta_p, delta_n_min, delta_n_max, seg_len, n_segments=8, n_labels=4, trials=100_000, seed=0, biased=False
) -> list[dict]:
    """Closed-form vs Monte Carlo FP/FN rates over a parameter grid.

    Each timeline has ``n_segments`` equal segments with labels cycling over
    ``n_labels``; anchors stay inside the interior segments.
    """
    grid = [(dp, lo, hi, l) for l in seg_len for dp in delta_p for lo in delta_n_min for hi in delta_n_max]
    seeds = np.random.SeedSequence(seed).spawn(len(grid))
    rows = []
    for (dp, lo, hi, l), ss in zip(grid, seeds):
        params = SamplingParams(dp, lo, hi)
        n_seg = max(n_segments, 3)
        names = [chr(ord("A") + k % n_labels) for k in range(n_seg)]
        tl = SegmentTimeline(tuple((k * l, (k + 1) * l, names[k]) for k in range(n_seg)), n_seg * l)
        rng = np.random.default_rng(ss)
        fp_mc, fn_mc = monte_carlo_rates(tl, params, biased, trials, rng, (l, (n_seg - 1) * l - 1))
        fp_f = fp_probability(l, dp)
        fn_f = float(np.mean([fn_probability(tl, k, params) for k in range(1, n_seg - 1)]))
        bad = [name for name, v in (("fp", fp_f), ("fn", fn_f)) if not 0.0 <= v <= 1.0]
        rows.append(
            {
                "delta_p": dp, "delta_n_min": lo, "delta_n_max": hi,
                "fp_formula": fp_f, "fp_empirical": fp_mc, "fn_formula": fn_f, "fn_empirical": fn_mc,
                "seg_len": l, "sampler": "biased" if biased else "unbiased",
                "formula_out_of_range": "+".join(bad),
            }
        )
    return rows


def write_fpfn_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, FPFN_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_fpfn(args, cfg) -> int:
    s = cfg.sampling
    try:
        rows = fpfn_table(
            _ints(args.delta_p) if args.delta_p else [s.delta_p],
            _ints(args.delta_n_min) if args.delta_n_min else [s.delta_n_min],
            _ints(args.delta_n_max) if args.delta_n_max else [s.delta_n_max],
            _ints(args.seg_len),
            n_segments=args.n_segments,
            n_labels=args.n_labels,
            trials=args.trials,
            seed=args.seed,
            biased=args.sampler == "biased",
        )
    except (ValueError, SegbedError) as exc:
        raise Fatal(f"fpfn: {exc}") from None
    write_fpfn_csv(args.out_csv, rows)
    for r in rows:
        if r["formula_out_of_range"]:
            log.warning(
                "formula outside [0,1] (%s) at l=%d delta_p=%d delta_n_min=%d: fp=%.4g fn=%.4g",
                r["formula_out_of_range"], r["seg_len"], r["delta_p"], r["delta_n_min"], r["fp_formula"], r["fn_formula"],
            )
    return 0


# --- synth / dump-config -------------------------------------------------------


def cmd_synth(args, cfg) -> int:
    sc = SynthConfig(duration_sec=args.duration, n_textures=args.textures, sample_rate=cfg.audio.sample_rate)
    try:
        sc.validate()
    except ValueError as exc:
        raise Fatal(str(exc)) from None
    ids = generate_corpus(args.out_dir, args.n_tracks, args.seed, sc, beats_dir=args.beats_dir)
    log.info("wrote %d tracks to %s", len(ids), args.out_dir)
    return 0


def cmd_dump_config(args, cfg) -> int:
    text = config_mod.dumps(cfg)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file (see dump-config)")
    common.add_argument("--jobs", type=int, default=_jobs_default(), help="worker processes (default $SEGBED_JOBS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="segbed", description="Music structure segmentation with learned embeddings.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("features", parents=[common], help="beat-synchronous CQT feature stores")
    s.add_argument("audio_dir")
    s.add_argument("out_dir")
    s.add_argument("--beats-dir", help="use <id>.txt beat files instead of the tracker")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train", parents=[common], help="train an embedding with triplet loss")
    s.add_argument("store_dir")
    s.add_argument("out_model")
    s.add_argument("--sampler", choices=["unbiased", "biased"], default="unbiased")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batches", type=int, help="mini-batches per epoch")
    s.add_argument("--loss-log", help="default: <out_model>.loss.csv")
    s.add_argument("--triplet-log", help="CSV of every sampled triplet")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("segment", parents=[common], help="detect boundaries")
    s.add_argument("store_dir")
    s.add_argument("out_dir")
    s.add_argument("--model", help="embedding checkpoint")
    s.add_argument("--raw", action="store_true", help="use mean-pooled CQT patches instead of an embedding")
    s.add_argument("--dump", action="store_true", help="also write SSM and novelty curves")
    s.set_defaults(func=cmd_segment)

    s = sub.add_parser("eval", parents=[common], help="trimmed boundary hit rate")
    s.add_argument("est_dir")
    s.add_argument("ref_dir")
    s.add_argument("out_json")
    s.add_argument("--window", type=float, help="tolerance in seconds (default from config, 3.0)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("fpfn", parents=[common], help="sampling FP/FN rates: closed form vs Monte Carlo")
    s.add_argument("out_csv")
    s.add_argument("--delta-p", help="comma list, e.g. 4,8,16,32")
    s.add_argument("--delta-n-min", help="comma list")
    s.add_argument("--delta-n-max", help="comma list")
    s.add_argument("--seg-len", default="64", help="comma list of segment lengths in beats")
    s.add_argument("--n-segments", type=int, default=8)
    s.add_argument("--n-labels", type=int, default=4)
    s.add_argument("--sampler", choices=["unbiased", "biased"], default="unbiased")
    s.add_argument("--trials", type=int, default=100_000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_fpfn)

    s = sub.add_parser("synth", parents=[common], help="synthetic multi-section corpus")
    s.add_argument("out_dir")
    s.add_argument("n_tracks", type=int)
    s.add_argument("--textures", type=int, default=4, help="textures per track")
    s.add_argument("--duration", type=float, default=180.0, help="seconds per track")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--beats-dir", help="also write ground-truth beat files here")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("dump-config", parents=[common], help="print the default configuration")
    s.add_argument("out", nargs="?")
    s.set_defaults(func=cmd_dump_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = config_mod.load(args.config)
        return args.func(args, cfg)
    except Fatal as exc:
        log.error("%s", exc)
        return 1
    except (SegbedError, OSError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
