import csv
import json
import logging

import numpy as np
import pytest

from segbed import cli
from segbed.audio import write_wav
from segbed.config import PipelineConfig, load, loads
from segbed.dsp import BeatGrid, read_beat_file, write_beat_file
from segbed.evaluation import parse_annotations
from segbed.features import load_dataset
from segbed.segmentation import read_boundaries_csv, read_ssm

TINY = """\
patch.B = 8
patch.R = 4
arch.conv_channels = 4, 4
arch.pool = true, true
arch.dense_units = 8
arch.D = 8
train.tracks_per_batch = 2
train.triplets_per_track = 4
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert run("synth", root / "audio", 3, "--duration", 40, "--seed", 3, "--beats-dir", root / "beats") == 0
    assert run("features", root / "audio", root / "feat", "--config", cfg, "--beats-dir", root / "beats") == 0
    return root


def test_synth_outputs(corpus):
    wavs = sorted((corpus / "audio").glob("*.wav"))
    tsvs = sorted((corpus / "audio").glob("*.tsv"))
    assert len(wavs) == len(tsvs) == 3
    for t in tsvs:
        parse_annotations(t)


def test_features_one_store_per_track_with_given_beats(corpus):
    ds = load_dataset(corpus / "feat")
    assert sorted(ds) == ["synth_000", "synth_001", "synth_002"]
    for tid, store in ds.items():
        ref = read_beat_file(corpus / "beats" / f"{tid}.txt").beat_times
        np.testing.assert_allclose(store.beat_grid.beat_times, ref, atol=1e-6)
        assert store.config.B == 8 and store.config.R == 4


def test_features_skips_corrupt_wav(corpus, tmp_path, caplog):
    audio = tmp_path / "audio"
    audio.mkdir()
    (audio / "good.wav").write_bytes((corpus / "audio" / "synth_000.wav").read_bytes())
    (audio / "bad.wav").write_bytes(b"RIFF\x00\x00garbage")
    cfg = corpus / "tiny.cfg"
    with caplog.at_level(logging.INFO, logger="segbed"):
        assert run("features", audio, tmp_path / "feat", "--config", cfg) == 0
    assert sorted(load_dataset(tmp_path / "feat")) == ["good"]
    assert "skipped bad" in caplog.text and "1 warnings" in caplog.text


def test_features_fatal_cases(tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("features", tmp_path / "empty", tmp_path / "out") == 1
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "x.wav").write_bytes(b"not audio")
    assert run("features", tmp_path / "bad", tmp_path / "out") == 1


def test_features_parallel_matches_serial(corpus, tmp_path):
    cfg = corpus / "tiny.cfg"
    assert run("features", corpus / "audio", tmp_path / "par", "--config", cfg, "--jobs", 2) == 0
    assert run("features", corpus / "audio", tmp_path / "ser", "--config", cfg) == 0
    b, c = load_dataset(tmp_path / "par"), load_dataset(tmp_path / "ser")
    assert sorted(b) == sorted(c) and len(c) == 3
    for tid in c:
        np.testing.assert_array_equal(b[tid].rows, c[tid].rows)
        np.testing.assert_array_equal(b[tid].beat_grid.beat_times, c[tid].beat_grid.beat_times)


def test_train_is_byte_deterministic(corpus, tmp_path):
    cfg = corpus / "tiny.cfg"
    outs = []
    for k in range(2):
        model = tmp_path / f"m{k}.bin"
        trip = tmp_path / f"t{k}.csv"
        args = ["train", corpus / "feat", model, "--config", cfg, "--seed", 7, "--epochs", 1, "--batches", 2]
        assert run(*args, "--triplet-log", trip) == 0
        outs.append((model.read_bytes(), trip.read_bytes()))
        assert (tmp_path / f"m{k}.bin.loss.csv").is_file()
    assert outs[0] == outs[1]
    args = ["train", corpus / "feat", tmp_path / "other.bin", "--config", cfg, "--seed", 8, "--epochs", 1, "--batches", 2]
    assert run(*args) == 0
    assert (tmp_path / "other.bin").read_bytes() != outs[0][0]


def test_train_biased_logs_sampler(corpus, tmp_path, caplog):
    trip = tmp_path / "trip.csv"
    args = ["train", corpus / "feat", tmp_path / "m.bin", "--config", corpus / "tiny.cfg", "--epochs", 1, "--batches", 1]
    with caplog.at_level(logging.INFO, logger="segbed"):
        assert run(*args, "--sampler", "biased", "--triplet-log", trip) == 0
    assert "sampler=biased" in caplog.text
    with open(trip) as fh:
        rows = list(csv.DictReader(fh))
    assert rows and all(r["sampler"] == "biased" for r in rows)


def test_train_single_track_warns(corpus, tmp_path, caplog):
    one = tmp_path / "one"
    one.mkdir()
    src = corpus / "feat" / "synth_000"
    (one / "synth_000").mkdir()
    for f in src.iterdir():
        (one / "synth_000" / f.name).write_bytes(f.read_bytes())
    args = ["train", one, tmp_path / "m.bin", "--config", corpus / "tiny.cfg", "--epochs", 1, "--batches", 1]
    with caplog.at_level(logging.WARNING):
        assert run(*args) == 0
    assert any(r.levelno == logging.WARNING for r in caplog.records)


def test_train_empty_store_dir_fails(tmp_path):
    (tmp_path / "none").mkdir()
    assert run("train", tmp_path / "none", tmp_path / "m.bin") == 1


def test_segment_with_model_and_dump(corpus, tmp_path):
    cfg = corpus / "tiny.cfg"
    model = tmp_path / "m.bin"
    assert run("train", corpus / "feat", model, "--config", cfg, "--epochs", 1, "--batches", 1) == 0
    out = tmp_path / "seg"
    assert run("segment", corpus / "feat", out, "--config", cfg, "--model", model, "--dump") == 0
    ds = load_dataset(corpus / "feat")
    for tid, store in ds.items():
        b = read_boundaries_csv(out / f"{tid}.csv")
        np.testing.assert_allclose(b.times_sec, store.beat_grid.beat_times[b.beat_indices], atol=1e-6)
        ssm = read_ssm(out / f"{tid}.ssm.f32")
        assert ssm.L == store.L and ssm.filtered
        nov = np.loadtxt(out / f"{tid}.novelty.csv", skiprows=1)
        assert nov.shape == (store.L,) and np.all(nov >= 0)


def test_segment_fatal_cases(corpus, tmp_path):
    (tmp_path / "empty").mkdir()
    assert run("segment", tmp_path / "empty", tmp_path / "out", "--raw") == 1
    assert run("segment", corpus / "feat", tmp_path / "out") == 1  # neither --model nor --raw
    (tmp_path / "junk.bin").write_bytes(b"junk")
    assert run("segment", corpus / "feat", tmp_path / "out", "--model", tmp_path / "junk.bin") == 1


def test_segment_two_texture_track(tmp_path):
    # two steady tones, 30 s each, on an exact half-second beat grid
    sr = 22050
    t = np.arange(60 * sr) / sr
    x = np.where(t < 30, np.sin(2 * np.pi * 220 * t), 0.5 * np.sin(2 * np.pi * 330 * t) + 0.3 * np.sin(2 * np.pi * 660 * t))
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    write_wav(tmp_path / "a" / "two.wav", (0.5 * x).astype(np.float32), sr)
    write_beat_file(tmp_path / "b" / "two.txt", BeatGrid(np.arange(0, 60, 0.5)))
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY)
    assert run("features", tmp_path / "a", tmp_path / "f", "--config", cfg, "--beats-dir", tmp_path / "b") == 0
    assert run("segment", tmp_path / "f", tmp_path / "s", "--config", cfg, "--raw") == 0
    b = read_boundaries_csv(tmp_path / "s" / "two.csv")
    # beats whose patches reach past either end of the audio see padding, not music
    half = 8 // 2
    interior = b.beat_indices[(b.beat_indices >= half) & (b.beat_indices < 120 - half)]
    assert interior.size == 1
    assert abs(interior[0] - 60) <= 1


def _write_est(path, times):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["beat_index", "time_sec"])
        for k, t in enumerate(times):
            w.writerow([k, f"{t:.6f}"])


def test_eval_perfect_and_missing_reference(corpus, tmp_path):
    est = tmp_path / "est"
    est.mkdir()
    for tsv in sorted((corpus / "audio").glob("*.tsv")):
        _write_est(est / f"{tsv.stem}.csv", parse_annotations(tsv).boundaries_sec)
    out = tmp_path / "m.json"
    assert run("eval", est, corpus / "audio", out) == 0
    rep = json.loads(out.read_text())
    assert rep["mean_f"] == 1.0 and rep["std_f"] == 0.0 and "errors" not in rep

    _write_est(est / "ghost.csv", [10.0])
    assert run("eval", est, corpus / "audio", out) == 0
    rep = json.loads(out.read_text())
    assert [e["id"] for e in rep["errors"]] == ["ghost"]
    assert len(rep["per_track"]) == 3


def test_eval_window_monotone(corpus, tmp_path):
    est = tmp_path / "est"
    est.mkdir()
    rng = np.random.default_rng(0)
    for tsv in sorted((corpus / "audio").glob("*.tsv")):
        ref = parse_annotations(tsv).boundaries_sec
        _write_est(est / f"{tsv.stem}.csv", np.sort(ref + rng.uniform(-2.5, 2.5, ref.size)))
    wide, narrow = tmp_path / "w.json", tmp_path / "n.json"
    assert run("eval", est, corpus / "audio", wide) == 0
    assert run("eval", est, corpus / "audio", narrow, "--window", 0.5) == 0
    w, n = json.loads(wide.read_text()), json.loads(narrow.read_text())
    assert w["window_sec"] == 3.0 and n["window_sec"] == 0.5
    for a, b in zip(w["per_track"], n["per_track"]):
        assert b["f"] <= a["f"] and b["p"] <= a["p"] and b["r"] <= a["r"]


def test_eval_fatal_when_nothing_to_score(tmp_path):
    (tmp_path / "e").mkdir()
    assert run("eval", tmp_path / "e", tmp_path, tmp_path / "o.json") == 1


def test_fpfn_deterministic_and_flags(tmp_path, caplog):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["--delta-p", "4,8,16,32", "--seg-len", "8,64", "--trials", 4000, "--seed", 5]
    with caplog.at_level(logging.WARNING, logger="segbed"):
        assert run("fpfn", a, *args) == 0
    assert run("fpfn", b, *args) == 0
    assert a.read_bytes() == b.read_bytes()
    with open(a) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == cli.FPFN_COLUMNS
    assert len(rows) == 8
    for r in rows:
        fp, fn = float(r["fp_formula"]), float(r["fn_formula"])
        flagged = set(filter(None, r["formula_out_of_range"].split("+")))
        assert ("fp" in flagged) == (not 0 <= fp <= 1)
        assert ("fn" in flagged) == (not 0 <= fn <= 1)
        assert 0 <= float(r["fp_empirical"]) <= 1
    bad = next(r for r in rows if r["seg_len"] == "8" and r["delta_p"] == "16")
    assert float(bad["fp_formula"]) == 3.0 and "fp" in bad["formula_out_of_range"]
    assert "formula outside [0,1]" in caplog.text


def test_fpfn_rejects_bad_grid(tmp_path):
    assert run("fpfn", tmp_path / "x.csv", "--delta-p", "0", "--trials", 10) == 1


def test_dump_config_round_trip(tmp_path, capsys):
    out = tmp_path / "d.cfg"
    assert run("dump-config", out) == 0
    assert load(out) == PipelineConfig()
    assert run("dump-config") == 0
    assert capsys.readouterr().out == out.read_text()

    tiny = tmp_path / "tiny.cfg"
    tiny.write_text(TINY)
    assert run("dump-config", tmp_path / "t2.cfg", "--config", tiny) == 0
    assert load(tmp_path / "t2.cfg") == loads(TINY)


def test_bad_config_is_fatal(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("segment.nonsense = 3\n")
    assert run("dump-config", "--config", bad) == 1
    assert run("dump-config", "--config", tmp_path / "missing.cfg") == 1


def test_jobs_default_from_environment(monkeypatch):
    monkeypatch.setenv("SEGBED_JOBS", "3")
    assert cli.build_parser().parse_args(["dump-config"]).jobs == 3
    monkeypatch.setenv("SEGBED_JOBS", "zero")
    assert cli.build_parser().parse_args(["dump-config"]).jobs == 1
    monkeypatch.delenv("SEGBED_JOBS")
    assert cli.build_parser().parse_args(["dump-config"]).jobs == 1
