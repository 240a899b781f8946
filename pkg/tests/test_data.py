"""Symbol tables, manifest loading/validation, and the procedural glyph-page
generator with its round-trip guarantees."""

import json
import os

import numpy as np
import pytest

from pagerec.data import (KINDS, SPLITS, Manifest, ManifestEntry, NoiseParams,
                          SymbolTable, build_symbol_table, default_glyphs,
                          gen_corpus, gen_synthetic_page, load_glyphs,
                          load_manifest, make_glyph, save_manifest,
                          split_assignments, write_split_manifests)
from pagerec.imageprep import reconstruct_clean_page, write_bilevel


# ---------------------------------------------------------------------------
# symbol table
# ---------------------------------------------------------------------------

def test_build_symbol_table_basic():
    table = build_symbol_table(["ab", "ba"])
    assert table.symbols == "ab"
    assert table.n_symbols == 3
    assert table.blank_id == 2


def test_space_is_a_symbol():
    table = build_symbol_table(["a b"])
    assert " " in table.symbols
    assert table.encode("a b") == [table.symbols.index(c) for c in "a b"]


def test_encode_decode_identity():
    table = build_symbol_table(["0123456789 "])
    text = "90 8812 3"
    assert table.decode(table.encode(text)) == text


def test_blank_never_decodes():
    table = build_symbol_table(["ab"])
    with pytest.raises(ValueError, match="outside"):
        table.decode([table.blank_id])


def test_encode_unknown_char_lists_missing():
    table = build_symbol_table(["ab"])
    with pytest.raises(ValueError, match="'x'"):
        table.encode("axb")


def test_missing_symbols_reported_for_coverage():
    table = build_symbol_table(["abc"])
    assert table.missing_symbols(["abd", "xe"]) == ["d", "e", "x"]
    assert table.missing_symbols(["cab"]) == []


def test_content_hash_deterministic_and_content_sensitive():
    a = build_symbol_table(["ab", "ba"])
    b = build_symbol_table(["b", "a"])
    c = build_symbol_table(["abc"])
    assert a.content_hash == b.content_hash
    assert a.content_hash != c.content_hash


def test_duplicate_symbols_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        SymbolTable("aa")


def test_empty_corpus_rejected():
    with pytest.raises(ValueError, match="empty"):
        build_symbol_table([])


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def _write_image(root, name, h=8, w=8):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    write_bilevel(os.path.join(root, "images", name),
                  np.zeros((h, w), dtype=np.uint8))


def _write_manifest(root, records):
    path = os.path.join(root, "manifest")
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return path


def test_minimal_manifest_loads(tmp_path):
    root = str(tmp_path)
    _write_image(root, "l0.png")
    path = _write_manifest(root, [
        {"image": "images/l0.png", "transcript": "71", "kind": "line",
         "split": "train"},
    ])
    manifest = load_manifest(path)
    assert len(manifest.entries) == 1
    entry = manifest.entries[0]
    assert entry.transcript == "71" and entry.kind == "line"
    assert os.path.exists(manifest.image_path(entry))


def test_manifest_schema_error_carries_line_number(tmp_path):
    root = str(tmp_path)
    _write_image(root, "l0.png")
    path = _write_manifest(root, [
        {"image": "images/l0.png", "transcript": "1", "kind": "line",
         "split": "train"},
        {"image": "images/l0.png", "transcript": "", "kind": "line",
         "split": "train"},
    ])
    with pytest.raises(ValueError, match="line 2"):
        load_manifest(path)


def test_manifest_bad_json_carries_line_number(tmp_path):
    path = tmp_path / "manifest"
    good = ('{"image": "a.png", "transcript": "1", "kind": "line", '
            '"split": "train"}')
    path.write_text(good + "\nnot json at all\n")
    with pytest.raises(ValueError, match="line 2: invalid JSON"):
        load_manifest(str(path))


def test_manifest_unknown_kind_and_split_rejected(tmp_path):
    root = str(tmp_path)
    _write_image(root, "l0.png")
    for field, value in (("kind", "word"), ("split", "dev")):
        rec = {"image": "images/l0.png", "transcript": "1", "kind": "line",
               "split": "train"}
        rec[field] = value
        with pytest.raises(ValueError, match=value):
            load_manifest(_write_manifest(root, [rec]))


def test_duplicate_image_across_splits_is_leakage(tmp_path):
    root = str(tmp_path)
    _write_image(root, "l0.png")
    path = _write_manifest(root, [
        {"image": "images/l0.png", "transcript": "1", "kind": "line",
         "split": "train"},
        {"image": "images/l0.png", "transcript": "1", "kind": "line",
         "split": "test"},
    ])
    with pytest.raises(ValueError, match="leak"):
        load_manifest(path)


def test_page_and_its_lines_must_share_split(tmp_path):
    root = str(tmp_path)
    _write_image(root, "p0.png")
    _write_image(root, "p0_l0.png")
    path = _write_manifest(root, [
        {"image": "images/p0.png", "transcript": "1 2", "kind": "page",
         "split": "train", "page_id": "p0",
         "boxes": [[0, 0, 4, 2], [0, 4, 4, 2]]},
        {"image": "images/p0_l0.png", "transcript": "1", "kind": "line",
         "split": "test", "page_id": "p0"},
    ])
    with pytest.raises(ValueError, match="p0"):
        load_manifest(path)


def test_missing_image_file_names_the_path(tmp_path):
    root = str(tmp_path)
    path = _write_manifest(root, [
        {"image": "images/ghost.png", "transcript": "1", "kind": "line",
         "split": "train"},
    ])
    with pytest.raises(FileNotFoundError, match="ghost.png"):
        load_manifest(path)
    manifest = load_manifest(path, require_images=False)
    assert len(manifest.entries) == 1


def test_boxes_sorted_by_y_and_indexed(tmp_path):
    root = str(tmp_path)
    _write_image(root, "p0.png")
    path = _write_manifest(root, [
        {"image": "images/p0.png", "transcript": "a b", "kind": "page",
         "split": "train", "boxes": [[0, 9, 4, 2], [0, 1, 4, 2]]},
    ])
    manifest = load_manifest(path)
    boxes = manifest.entries[0].boxes
    assert [b.y for b in boxes] == [1, 9]
    assert [b.line_index for b in boxes] == [0, 1]


def test_save_then_load_round_trip(tmp_path):
    root = str(tmp_path)
    _write_image(root, "l0.png")
    entries = [ManifestEntry(image="images/l0.png", transcript="42",
                             kind="line", split="validate", page_id="p0")]
    save_manifest(os.path.join(root, "manifest"), entries)
    manifest = load_manifest(os.path.join(root, "manifest"))
    got = manifest.entries[0]
    assert (got.image, got.transcript, got.kind, got.split, got.page_id) == \
        ("images/l0.png", "42", "line", "validate", "p0")


# ---------------------------------------------------------------------------
# glyphs
# ---------------------------------------------------------------------------

def test_glyphs_cover_digits_and_are_distinct():
    glyphs = default_glyphs()
    assert set(glyphs) == set("0123456789")
    rendered = {ch: g.tobytes() for ch, g in glyphs.items()}
    assert len(set(rendered.values())) == 10
    for g in glyphs.values():
        assert g.shape[0] == 32
        assert set(np.unique(g)) <= {0, 1}
        assert g.sum() > 0


def test_glyph_height_parameter():
    g = make_glyph("8", height=48)
    assert g.shape[0] == 48


def test_glyphs_load_from_directory(tmp_path):
    glyphs = default_glyphs()
    for ch, img in glyphs.items():
        write_bilevel(os.path.join(str(tmp_path), f"{ch}.pgm"), img)
    back = load_glyphs(str(tmp_path))
    assert set(back) == set(glyphs)
    for ch in glyphs:
        np.testing.assert_array_equal(back[ch], glyphs[ch])


# ---------------------------------------------------------------------------
# page generator
# ---------------------------------------------------------------------------

def test_one_line_page_contract():
    page, transcript, boxes = gen_synthetic_page(
        np.random.default_rng(0), default_glyphs(), 1, 5, noise=None)
    assert len(transcript) == 5
    assert len(boxes) == 1
    assert set(np.unique(page)) <= {0, 1}


def test_fixed_seed_bit_identical():
    args = (default_glyphs(), 3, 6)
    a = gen_synthetic_page(np.random.default_rng(7), *args)
    b = gen_synthetic_page(np.random.default_rng(7), *args)
    np.testing.assert_array_equal(a[0], b[0])
    assert a[1] == b[1]
    assert [(x.x, x.y, x.w, x.h) for x in a[2]] == \
        [(x.x, x.y, x.w, x.h) for x in b[2]]


def test_four_by_eight_page_shape_of_truth():
    page, transcript, boxes = gen_synthetic_page(
        np.random.default_rng(1), default_glyphs(), 4, 8,
        noise=NoiseParams())
    assert len(boxes) == 4
    assert transcript.count(" ") == 3
    assert len(transcript) == 4 * 8 + 3
    lines = transcript.split(" ")
    assert all(len(line) == 8 for line in lines)
    ys = [b.y for b in boxes]
    assert ys == sorted(ys)
    assert [b.line_index for b in boxes] == [0, 1, 2, 3]


def test_noise_stays_outside_line_boxes():
    rng = np.random.default_rng(2)
    clean = gen_synthetic_page(np.random.default_rng(2), default_glyphs(), 4, 8)
    noisy = gen_synthetic_page(rng, default_glyphs(), 4, 8,
                               noise=NoiseParams(page_number=True,
                                                 margin_marks=2))
    # same content rng stream: inside the boxes the pages agree exactly
    assert noisy[1] == clean[1]
    for box in noisy[2]:
        np.testing.assert_array_equal(
            noisy[0][box.y:box.y + box.h, box.x:box.x + box.w],
            clean[0][box.y:box.y + box.h, box.x:box.x + box.w])
    assert noisy[0].sum() > clean[0].sum()  # decals added ink somewhere


def test_generator_round_trip_reconstructs_clean_page():
    rng = np.random.default_rng(3)
    page, _, boxes = gen_synthetic_page(rng, default_glyphs(), 3, 5,
                                        noise=NoiseParams())
    crops = [page[b.y:b.y + b.h, b.x:b.x + b.w] for b in boxes]
    rebuilt = reconstruct_clean_page(page.shape[0], page.shape[1], boxes, crops)
    clean = gen_synthetic_page(np.random.default_rng(3), default_glyphs(), 3, 5,
                               noise=None)[0]
    np.testing.assert_array_equal(rebuilt, clean)


def test_page_too_small_for_content_errors():
    with pytest.raises(ValueError, match="too small"):
        gen_synthetic_page(np.random.default_rng(4), default_glyphs(), 2, 4,
                           page_size=(40, 40))


def test_1d_layout_single_band():
    page, transcript, boxes = gen_synthetic_page(
        np.random.default_rng(5), default_glyphs(), 1, 12, layout="1d")
    assert len(boxes) == 1
    assert len(transcript) == 12


def test_ink_fraction_in_plausible_band():
    page, _, _ = gen_synthetic_page(np.random.default_rng(6), default_glyphs(),
                                    4, 8, noise=NoiseParams())
    frac = page.mean()
    assert 0.02 <= frac <= 0.25


# ---------------------------------------------------------------------------
# corpus writer
# ---------------------------------------------------------------------------

def test_split_assignments_fractions():
    splits = split_assignments(10)
    assert splits.count("train") == 8
    assert splits.count("validate") == 1
    assert splits.count("test") == 1
    assert set(split_assignments(100)) == set(SPLITS)


def test_gen_corpus_writes_consistent_tree(tmp_path):
    out = str(tmp_path / "corpus")
    entries = gen_corpus(out, n_pages=5, n_lines=2, chars_per_line=3, seed=0)
    manifest = load_manifest(os.path.join(out, "manifest"))
    assert len(manifest.entries) == len(entries) == 5 * (1 + 2)
    pages = manifest.kind("page")
    lines = manifest.kind("line")
    assert len(pages) == 5 and len(lines) == 10
    for kind in KINDS:
        assert all(e.kind in KINDS for e in manifest.kind(kind))
    # split manifests exist and partition the entries
    sizes = []
    for split in SPLITS:
        part = load_manifest(os.path.join(out, f"manifest.{split}"))
        sizes.append(len(part.entries))
        assert all(e.split == split for e in part.entries)
    assert sum(sizes) == len(entries)
    meta = json.load(open(os.path.join(out, "corpus.json")))
    assert meta["n_pages"] == 5


def test_gen_corpus_line_crops_match_page_content(tmp_path):
    out = str(tmp_path / "corpus")
    gen_corpus(out, n_pages=2, n_lines=2, chars_per_line=4, seed=1)
    manifest = load_manifest(os.path.join(out, "manifest"))
    from pagerec.imageprep import read_bilevel

    for page_entry in manifest.kind("page"):
        page = read_bilevel(manifest.image_path(page_entry))
        siblings = [e for e in manifest.kind("line")
                    if e.page_id == page_entry.page_id]
        assert len(siblings) == 2
        assert all(e.split == page_entry.split for e in siblings)
        texts = page_entry.transcript.split(" ")
        assert sorted(e.transcript for e in siblings) == sorted(texts)
        for entry in siblings:
            crop = read_bilevel(manifest.image_path(entry))
            idx = int(entry.image.rsplit("_", 1)[1].split(".")[0])
            box = page_entry.boxes[idx]
            np.testing.assert_array_equal(
                crop, page[box.y:box.y + box.h, box.x:box.x + box.w])


def test_gen_corpus_deterministic(tmp_path):
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    gen_corpus(a, n_pages=3, n_lines=2, chars_per_line=3, seed=9)
    gen_corpus(b, n_pages=3, n_lines=2, chars_per_line=3, seed=9)
    ma = open(os.path.join(a, "manifest")).read()
    mb = open(os.path.join(b, "manifest")).read()
    assert ma == mb
    from pagerec.imageprep import read_bilevel

    for name in sorted(os.listdir(os.path.join(a, "images")))[:4]:
        np.testing.assert_array_equal(
            read_bilevel(os.path.join(a, "images", name)),
            read_bilevel(os.path.join(b, "images", name)))
