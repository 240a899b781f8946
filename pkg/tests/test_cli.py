"""End-to-end command-line coverage: every subcommand runs against a tiny
corpus, and artifacts (manifests, checkpoints, decodes) are spot-checked."""

import json
import os

import numpy as np
import pytest

from pagerec.cli import build_parser, main
from pagerec.data import load_manifest
from pagerec.imageprep import read_bilevel


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = str(tmp_path_factory.mktemp("corpus"))
    rc = main(["synth", "--out", d, "--pages", "10", "--lines", "1",
               "--chars", "2", "--noise", "--seed", "3"])
    assert rc == 0
    return d


@pytest.fixture(scope="module")
def line_run(corpus, tmp_path_factory):
    """One-epoch line training pass shared by the eval/decode/bootstrap tests."""
    out = str(tmp_path_factory.mktemp("line_run"))
    rc = main(["train", "--manifest", os.path.join(corpus, "manifest"),
               "--out", out, "--epochs", "1", "--batch-size", "4",
               "--L", "1", "--seed", "0"])
    assert rc == 0
    return out


def test_unknown_flag_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--out", "x", "--no-such-flag"])
    assert exc.value.code != 0


def test_missing_subcommand_exits_nonzero():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code != 0


def test_parser_wires_every_subcommand():
    parser = build_parser()
    actions = [a for a in parser._subparsers._group_actions][0]
    expected = {"synth", "prep", "train", "eval", "decode", "sweep",
                "gradcheck", "clean-pages", "flatten-1d"}
    assert expected <= set(actions.choices)


def test_synth_writes_corpus_tree(corpus, capsys, tmp_path):
    manifest = load_manifest(os.path.join(corpus, "manifest"))
    pages = [e for e in manifest.entries if e.kind == "page"]
    lines = [e for e in manifest.entries if e.kind == "line"]
    assert len(pages) == 10 and len(lines) == 10
    for split in ("train", "validate", "test"):
        assert os.path.exists(os.path.join(corpus, f"manifest.{split}"))
    # same seed, fresh directory: bit-identical images
    twin = str(tmp_path / "twin")
    assert main(["synth", "--out", twin, "--pages", "10", "--lines", "1",
                 "--chars", "2", "--noise", "--seed", "3"]) == 0
    out = capsys.readouterr().out
    assert "wrote 10 pages and 10 line crops" in out
    name = pages[0].image
    a = open(os.path.join(corpus, name), "rb").read()
    b = open(os.path.join(twin, name), "rb").read()
    assert a == b


def test_prep_binarizes_corpus(corpus, tmp_path, capsys):
    out = str(tmp_path / "prepped")
    rc = main(["prep", "--manifest", os.path.join(corpus, "manifest"),
               "--out", out, "--deslant"])
    assert rc == 0
    assert "prepared 20 images" in capsys.readouterr().out
    prepped = load_manifest(os.path.join(out, "manifest"))
    assert len(prepped.entries) == 20
    img = read_bilevel(prepped.image_path(prepped.entries[0]))
    assert set(np.unique(img)) <= {0.0, 1.0}


def test_train_writes_checkpoint_and_metrics(line_run, capsys):
    assert os.path.exists(os.path.join(line_run, "ckpt_last"))
    lines = open(os.path.join(line_run, "metrics.jsonl")).read().splitlines()
    records = [json.loads(l) for l in lines]
    assert [r["epoch"] for r in records] == [1]
    assert "val_cer" in records[0]


def test_eval_reports_cer_with_uncertainty(line_run, corpus, capsys):
    rc = main(["eval", "--ckpt", os.path.join(line_run, "ckpt_last"),
               "--manifest", os.path.join(corpus, "manifest"),
               "--split", "test", "--z", "1.0"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "CER" in out and "+/-" in out and "z=1" in out and "N=" in out


def test_eval_dump_lists_every_test_sample(line_run, corpus, tmp_path):
    dump = str(tmp_path / "dump.jsonl")
    rc = main(["eval", "--ckpt", os.path.join(line_run, "ckpt_last"),
               "--manifest", os.path.join(corpus, "manifest"),
               "--split", "test", "--dump", dump])
    assert rc == 0
    records = [json.loads(l) for l in open(dump)]
    assert len(records) == 1  # 10 pages split 8/1/1 -> one test line
    assert set(records[0]) == {"ref", "hyp"}


def test_decode_prints_a_transcription(line_run, corpus, capsys):
    manifest = load_manifest(os.path.join(corpus, "manifest"))
    entry = next(e for e in manifest.entries if e.kind == "line")
    rc = main(["decode", "--ckpt", os.path.join(line_run, "ckpt_last"),
               "--image", manifest.image_path(entry)])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.endswith("\n")  # a (possibly empty) transcription line


def test_train_curriculum_bootstraps_cnn(line_run, corpus, tmp_path, capsys):
    out = str(tmp_path / "page_run")
    rc = main(["train", "--manifest", os.path.join(corpus, "manifest"),
               "--out", out, "--epochs", "1", "--batch-size", "4",
               "--L", "4", "--seed", "0",
               "--curriculum", os.path.join(line_run, "ckpt_last")])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "copied" in printed and "reinitialized 0 tensors" in printed
    assert "trained 1 epochs on page entries" in printed
    assert os.path.exists(os.path.join(out, "ckpt_last"))


def test_sweep_prints_table_and_writes_json(corpus, tmp_path, capsys):
    out = str(tmp_path / "sweep")
    rc = main(["sweep", "--manifest", os.path.join(corpus, "manifest"),
               "--out", out, "--L", "1", "--epochs", "1",
               "--batch-size", "4", "--seed", "0"])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "err[%]" in printed and "trained" in printed
    rows = json.load(open(os.path.join(out, "sweep.json")))
    assert [r["L"] for r in rows] == [1]
    assert rows[0]["height"] == 64


def test_clean_pages_rebuilds_from_boxes(corpus, tmp_path, capsys):
    out = str(tmp_path / "clean")
    rc = main(["clean-pages", "--manifest", os.path.join(corpus, "manifest"),
               "--out", out])
    assert rc == 0
    assert "reconstructed 10 clean pages" in capsys.readouterr().out
    cleaned = load_manifest(os.path.join(out, "manifest"))
    # noise decals live outside the boxes, so the clean page has less ink
    entry = next(e for e in cleaned.entries if e.kind == "page")
    noisy = read_bilevel(os.path.join(corpus, entry.image))
    clean = read_bilevel(os.path.join(out, entry.image))
    assert clean.sum() < noisy.sum()
    assert clean.shape == noisy.shape


def test_flatten_1d_joins_lines(corpus, tmp_path, capsys):
    out = str(tmp_path / "flat")
    rc = main(["flatten-1d", "--manifest", os.path.join(corpus, "manifest"),
               "--out", out])
    assert rc == 0
    assert "flattened 10 pages" in capsys.readouterr().out
    flat = load_manifest(os.path.join(out, "manifest"))
    assert len(flat.entries) == 10
    assert all(e.kind == "line" for e in flat.entries)
    originals = load_manifest(os.path.join(corpus, "manifest"))
    page = {e.page_id: e for e in originals.entries if e.kind == "page"}
    for e in flat.entries:
        assert e.transcript == page[e.page_id].transcript


def test_gradcheck_parser_wiring():
    args = build_parser().parse_args(["gradcheck", "--seed", "7"])
    assert args.seed == 7 and args.func.__name__ == "cmd_gradcheck"
