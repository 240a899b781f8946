"""Symbol tables, corpus manifests, and the synthetic glyph-page generator.

The generator draws seven-segment digit glyphs procedurally (no external
dataset): pages are black with white strokes, lines sit in jittered
horizontal bands, and optional margin decals (page numbers, margin marks)
add realistic out-of-line noise that never enters a transcript or a line
box.  Content and noise come from independent child RNG streams, so the
same seed produces the same text layout with noise on or off.

Manifests are JSON-lines files: one record per sample with fields
``image`` (path relative to the manifest), ``transcript``, ``kind``
("line" or "page"), ``split`` ("train" / "validate" / "test"), and
optionally ``boxes`` ([x, y, w, h] per line, top to bottom) and
``page_id`` (ties a page and its line crops together for split hygiene).
"""

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .imageprep import LineBox, read_bilevel, write_bilevel

SPLITS = ("train", "validate", "test")
KINDS = ("line", "page")


# ---------------------------------------------------------------------------
# symbol table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SymbolTable:
    """Bijection between characters and dense ids; blank takes the last id."""

    symbols: str

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("symbol table contains duplicate characters")

    @property
    def n_symbols(self):
        return len(self.symbols) + 1  # + blank

    @property
    def blank_id(self):
        return len(self.symbols)

    @property
    def content_hash(self):
        return hashlib.sha256(self.symbols.encode("utf-8")).hexdigest()

    def encode(self, text):
        try:
            return [self.symbols.index(ch) for ch in text]
        except ValueError:
            missing = sorted(set(text) - set(self.symbols))
            raise ValueError(f"characters not in symbol table: {missing!r}") from None

    def decode(self, ids):
        out = []
        for i in ids:
            if not 0 <= i < len(self.symbols):
                raise ValueError(f"id {i} outside the printable range")
            out.append(self.symbols[i])
        return "".join(out)

    def missing_symbols(self, transcripts):
        """Characters used by ``transcripts`` but absent from the table."""
        seen = set()
        for text in transcripts:
            seen.update(text)
        return sorted(seen - set(self.symbols))


def build_symbol_table(transcripts):
    """Sorted unique characters of the corpus plus a trailing blank."""
    chars = set()
    n_texts = 0
    for text in transcripts:
        chars.update(text)
        n_texts += 1
    if n_texts == 0 or not chars:
        raise ValueError("cannot build a symbol table from an empty corpus")
    return SymbolTable("".join(sorted(chars)))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    image: str
    transcript: str
    kind: str
    split: str
    boxes: list = None
    page_id: str = None

    def to_record(self):
        rec = {
            "image": self.image,
            "transcript": self.transcript,
            "kind": self.kind,
            "split": self.split,
        }
        if self.boxes is not None:
            rec["boxes"] = [[b.x, b.y, b.w, b.h] for b in self.boxes]
        if self.page_id is not None:
            rec["page_id"] = self.page_id
        return rec


@dataclass
class Manifest:
    root: str
    entries: list = field(default_factory=list)

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def kind(self, name, split=None):
        return [
            e for e in self.entries
            if e.kind == name and (split is None or e.split == split)
        ]

    def image_path(self, entry):
        return os.path.join(self.root, entry.image)


def _parse_entry(rec, line_no):
    def fail(msg):
        raise ValueError(f"manifest line {line_no}: {msg}")

    if not isinstance(rec, dict):
        fail("record is not an object")
    for key in ("image", "transcript", "kind", "split"):
        if key not in rec:
            fail(f"missing field {key!r}")
    if not isinstance(rec["image"], str) or not rec["image"]:
        fail("'image' must be a non-empty path")
    if not isinstance(rec["transcript"], str) or not rec["transcript"]:
        fail("'transcript' must be a non-empty string")
    if rec["kind"] not in KINDS:
        fail(f"'kind' must be one of {KINDS}, got {rec['kind']!r}")
    if rec["split"] not in SPLITS:
        fail(f"'split' must be one of {SPLITS}, got {rec['split']!r}")
    boxes = None
    if "boxes" in rec and rec["boxes"] is not None:
        raw = rec["boxes"]
        if not isinstance(raw, list):
            fail("'boxes' must be a list of [x, y, w, h]")
        parsed = []
        for b in raw:
            if not (isinstance(b, list) and len(b) == 4
                    and all(isinstance(v, int) and v >= 0 for v in b)):
                fail(f"bad box {b!r} (expected four non-negative integers)")
            parsed.append(tuple(b))
        parsed.sort(key=lambda b: (b[1], b[0]))  # line_index increases with y
        boxes = [
            LineBox(x, y, w, h, line_index=i)
            for i, (x, y, w, h) in enumerate(parsed)
        ]
    page_id = rec.get("page_id")
    if page_id is not None and not isinstance(page_id, str):
        fail("'page_id' must be a string")
    return ManifestEntry(
        image=rec["image"], transcript=rec["transcript"], kind=rec["kind"],
        split=rec["split"], boxes=boxes, page_id=page_id,
    )


def load_manifest(path, require_images=True):
    """Parse and validate a JSON-lines manifest.

    Schema violations name the offending line; split leakage (one image
    path or one page_id appearing in two splits) is an error, mirroring the
    strict train/test hygiene the recognizer depends on.
    """
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"manifest line {line_no}: invalid JSON ({e})") from None
            entries.append(_parse_entry(rec, line_no))
    root = os.path.dirname(os.path.abspath(path))
    by_image = {}
    by_page = {}
    for e in entries:
        if e.image in by_image and by_image[e.image] != e.split:
            raise ValueError(
                f"split leakage: image {e.image!r} appears in both "
                f"{by_image[e.image]!r} and {e.split!r}"
            )
        by_image[e.image] = e.split
        if e.page_id is not None:
            if e.page_id in by_page and by_page[e.page_id] != e.split:
                raise ValueError(
                    f"split leakage: page {e.page_id!r} straddles "
                    f"{by_page[e.page_id]!r} and {e.split!r}"
                )
            by_page[e.page_id] = e.split
    manifest = Manifest(root=root, entries=entries)
    if require_images:
        for e in entries:
            full = manifest.image_path(e)
            if not os.path.isfile(full):
                raise FileNotFoundError(f"manifest references missing image: {full}")
    return manifest


def save_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e.to_record(), sort_keys=True) + "\n")


def write_split_manifests(out_dir, entries):
    """Write the combined manifest plus one filtered file per split."""
    save_manifest(os.path.join(out_dir, "manifest"), entries)
    for split in SPLITS:
        save_manifest(
            os.path.join(out_dir, f"manifest.{split}"),
            [e for e in entries if e.split == split],
        )


# ---------------------------------------------------------------------------
# procedural glyphs (seven-segment digits)
# ---------------------------------------------------------------------------

# segments: a top, g middle, d bottom; f/b upper left/right, e/c lower left/right
_SEGMENTS = {
    "0": "abcdef",
    "1": "bc",
    "2": "abged",
    "3": "abgcd",
    "4": "fgbc",
    "5": "afgcd",
    "6": "afgedc",
    "7": "abc",
    "8": "abcdefg",
    "9": "abcfgd",
}


def make_glyph(char, height=32):
    """Render one seven-segment digit as a bilevel [height, width] array."""
    if char not in _SEGMENTS:
        raise ValueError(f"no glyph template for {char!r} (digits only)")
    h = height
    w = max(5, round(height * 0.625))
    t = max(2, height // 10)
    mid = (h - t) // 2
    img = np.zeros((h, w), dtype=np.uint8)
    segs = _SEGMENTS[char]
    if "a" in segs:
        img[0:t, :] = 1
    if "g" in segs:
        img[mid : mid + t, :] = 1
    if "d" in segs:
        img[h - t :, :] = 1
    if "f" in segs:
        img[0 : mid + t, 0:t] = 1
    if "b" in segs:
        img[0 : mid + t, w - t :] = 1
    if "e" in segs:
        img[mid:, 0:t] = 1
    if "c" in segs:
        img[mid:, w - t :] = 1
    return img


def default_glyphs(height=32):
    return {ch: make_glyph(ch, height) for ch in sorted(_SEGMENTS)}


def load_glyphs(directory):
    """Optional external glyphs: one ``<char>.pgm`` / ``<char>.png`` per symbol."""
    glyphs = {}
    for name in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in (".pgm", ".png") or len(stem) != 1:
            continue
        glyphs[stem] = read_bilevel(os.path.join(directory, name))
    if not glyphs:
        raise ValueError(f"no single-character .pgm/.png glyphs in {directory}")
    return glyphs


# ---------------------------------------------------------------------------
# synthetic pages
# ---------------------------------------------------------------------------

@dataclass
class NoiseParams:
    page_number: bool = True
    margin_marks: int = 2


def _render_line(canvas, rng, glyphs, text, x0, y0, glyph_gap, jitter):
    """Paste ``text`` starting at (x0, y0); returns the tight placement box."""
    x = x0
    min_y, max_y = None, None
    for ch in text:
        if ch == " ":
            x += 2 * glyph_gap + 8
            continue
        g = glyphs[ch]
        dy = int(rng.integers(-jitter, jitter + 1)) if jitter else 0
        y = y0 + dy
        canvas[y : y + g.shape[0], x : x + g.shape[1]] |= g
        min_y = y if min_y is None else min(min_y, y)
        max_y = y + g.shape[0] if max_y is None else max(max_y, y + g.shape[0])
        x += g.shape[1] + glyph_gap + int(rng.integers(-2, 3))
    return x0, min_y, x - glyph_gap, max_y  # x1, y1, x2, y2


def _apply_noise(canvas, rng, noise, margin):
    """Decals strictly inside the outer margin frame, clear of all line boxes."""
    h, w = canvas.shape
    if noise.page_number:
        digits = [str(int(d)) for d in rng.integers(0, 10, size=2)]
        x = w // 2 - 12
        y = h - margin + 6
        for ch in digits:
            g = make_glyph(ch, height=12)
            canvas[y : y + g.shape[0], x : x + g.shape[1]] |= g
            x += g.shape[1] + 3
    for _ in range(noise.margin_marks):
        side_left = bool(rng.integers(0, 2))
        mark_h = int(rng.integers(6, 13))
        y = int(rng.integers(margin, max(margin + 1, h - margin - mark_h)))
        x = int(rng.integers(2, max(3, margin - 9)))
        if not side_left:
            x = w - margin + 4 + (x % 4)
        canvas[y : y + mark_h, x : x + 4] = 1


def gen_synthetic_page(rng, glyphs, n_lines, chars_per_line, layout="2d",
                       noise=None, glyph_gap=6, line_gap=24, margin=28,
                       jitter=2, page_size=None):
    """Render one synthetic page; returns (image, transcript, boxes).

    2D: ``n_lines`` bands of glyphs with jittered baselines; the page-level
    transcript joins the line texts with single spaces.  1D: the same
    content in one long band (one box).  Noise decals stay strictly outside
    every line box.
    """
    if not glyphs:
        raise ValueError("glyph set is empty")
    if layout not in ("1d", "2d"):
        raise ValueError(f"layout must be '1d' or '2d', got {layout!r}")
    content_rng, noise_rng = rng.spawn(2)
    alphabet = sorted(glyphs)
    glyph_h = max(g.shape[0] for g in glyphs.values())
    glyph_w = max(g.shape[1] for g in glyphs.values())
    line_texts = [
        "".join(content_rng.choice(alphabet, size=chars_per_line))
        for _ in range(n_lines)
    ]
    if layout == "1d":
        band_texts = [" ".join(line_texts)]
    else:
        band_texts = line_texts
    transcript = " ".join(line_texts)

    # worst-case content extents (advance jitter <= +2 per glyph)
    chars_per_band = max(len(t.replace(" ", "")) for t in band_texts)
    n_spaces = max(t.count(" ") for t in band_texts)
    content_w = chars_per_band * (glyph_w + glyph_gap + 2) + n_spaces * (2 * glyph_gap + 8)
    content_h = len(band_texts) * glyph_h + (len(band_texts) - 1) * line_gap + 2 * jitter
    if page_size is None:
        page_h = content_h + 2 * margin
        page_w = content_w + 2 * margin
    else:
        page_h, page_w = page_size
        if page_h < content_h + 2 * margin or page_w < content_w + 2 * margin:
            raise ValueError(
                f"page {page_h}x{page_w} too small for {content_h}x{content_w} "
                f"content plus {margin}px margins"
            )
    page = np.zeros((page_h, page_w), dtype=np.uint8)
    boxes = []
    for i, text in enumerate(band_texts):
        y0 = margin + jitter + i * (glyph_h + line_gap)
        x1, y1, x2, y2 = _render_line(
            page, content_rng, glyphs, text, margin, y0, glyph_gap, jitter
        )
        boxes.append(LineBox(x=x1, y=y1, w=x2 - x1, h=y2 - y1, line_index=i))
    if noise is not None:
        _apply_noise(page, noise_rng, noise, margin)
    return page, transcript, boxes


# ---------------------------------------------------------------------------
# corpus writer
# ---------------------------------------------------------------------------

def split_assignments(n, fractions=(0.8, 0.1, 0.1)):
    """Deterministic contiguous split of n items into train/validate/test."""
    n_train = round(n * fractions[0])
    n_val = round(n * fractions[1])
    out = []
    for i in range(n):
        if i < n_train:
            out.append("train")
        elif i < n_train + n_val:
            out.append("validate")
        else:
            out.append("test")
    return out


def gen_corpus(out_dir, n_pages, n_lines, chars_per_line, layout="2d",
               noise=None, seed=0, fractions=(0.8, 0.1, 0.1),
               glyph_height=32, write_lines=True):
    """Generate a full synthetic corpus: page images, line crops, manifests.

    A page and its line crops share a page_id and always land in the same
    split.  Returns the entry list.
    """
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    rng = np.random.default_rng(seed)
    glyphs = default_glyphs(glyph_height)
    splits = split_assignments(n_pages, fractions)
    entries = []
    for i in range(n_pages):
        page, transcript, boxes = gen_synthetic_page(
            rng, glyphs, n_lines, chars_per_line, layout=layout, noise=noise
        )
        page_id = f"page_{i:04d}"
        image_rel = f"images/{page_id}.png"
        write_bilevel(os.path.join(out_dir, image_rel), page)
        entries.append(ManifestEntry(
            image=image_rel, transcript=transcript, kind="page",
            split=splits[i], boxes=boxes, page_id=page_id,
        ))
        if write_lines:
            line_texts = transcript.split(" ") if layout == "2d" else [transcript]
            if len(line_texts) != len(boxes):
                raise ValueError(
                    "line transcripts cannot be recovered from the page "
                    "transcript (glyph alphabet must not contain spaces)"
                )
            for box, text in zip(boxes, line_texts):
                crop = page[box.y : box.y + box.h, box.x : box.x + box.w]
                line_rel = f"images/{page_id}_line_{box.line_index}.png"
                write_bilevel(os.path.join(out_dir, line_rel), crop)
                entries.append(ManifestEntry(
                    image=line_rel, transcript=text, kind="line",
                    split=splits[i], boxes=None, page_id=page_id,
                ))
    write_split_manifests(out_dir, entries)
    with open(os.path.join(out_dir, "corpus.json"), "w", encoding="utf-8") as fh:
        json.dump({
            "n_pages": n_pages, "n_lines": n_lines,
            "chars_per_line": chars_per_line, "layout": layout,
            "noise": None if noise is None else vars(noise),
            "seed": seed, "fractions": list(fractions),
            "glyph_height": glyph_height,
        }, fh, indent=2, sort_keys=True)
    return entries
