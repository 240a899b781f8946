"""Command-line workflow: corpus prep and synthesis, training, evaluation,
decoding, the oversample sweep, gradient self-checks, and the clean-page /
1D-flattening experiment harnesses.
"""

import argparse
import json
import os
import shutil
import sys
from dataclasses import replace

import numpy as np

from . import data, gradcheck, imageprep, model, trainer
from .metrics import DEFAULT_Z


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="RNG seed")


def _load_table_for(manifest):
    return data.build_symbol_table(e.transcript for e in manifest.entries)


def _parse_train_flags(p):
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--profile", choices=("toy", "paper"), default="toy")
    p.add_argument("--backend", choices=("transformer", "blstm"),
                   default="transformer")
    p.add_argument("--L", type=int, default=1, help="oversample factor")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--z", type=float, default=DEFAULT_Z)
    p.add_argument("--augment", action="store_true",
                   help="rotation + elastic jitter + block masking")
    p.add_argument("--kind", choices=("line", "page"), default=None,
                   help="entry kind to train on (default: page when L>1)")
    p.add_argument("--curriculum", default=None,
                   help="line checkpoint to bootstrap the CNN from")
    p.add_argument("--early-stop-cer", type=float, default=None)
    _add_common(p)


def cmd_synth(args):
    noise = data.NoiseParams() if args.noise else None
    entries = data.gen_corpus(
        args.out, n_pages=args.pages, n_lines=args.lines,
        chars_per_line=args.chars, layout=args.layout, noise=noise,
        seed=args.seed,
    )
    pages = sum(1 for e in entries if e.kind == "page")
    lines = sum(1 for e in entries if e.kind == "line")
    print(f"wrote {pages} pages and {lines} line crops to {args.out}")
    return 0


def cmd_prep(args):
    manifest = data.load_manifest(args.manifest)
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    out_entries = []
    failures = []
    for e in manifest.entries:
        try:
            gray = imageprep.read_gray(manifest.image_path(e))
            img = imageprep.binarize(gray, args.threshold)
            if args.deslant:
                img = imageprep.deslant(img)
            rel = os.path.join("images", os.path.basename(e.image))
            imageprep.write_bilevel(os.path.join(args.out, rel), img)
            out_entries.append(replace_entry_image(e, rel))
        except (OSError, ValueError) as err:
            failures.append((e.image, str(err)))
    data.write_split_manifests(args.out, out_entries)
    print(f"prepared {len(out_entries)} images into {args.out}")
    for name, err in failures:
        print(f"FAILED {name}: {err}", file=sys.stderr)
    return 1 if failures else 0


def replace_entry_image(entry, new_image):
    return data.ManifestEntry(
        image=new_image, transcript=entry.transcript, kind=entry.kind,
        split=entry.split, boxes=entry.boxes, page_id=entry.page_id,
    )


def _build_model(args, table, rng):
    cfg = model.make_config(args.profile, args.backend, table.n_symbols,
                            oversample_L=args.L)
    if args.curriculum:
        ckpt = trainer.Checkpoint.load(args.curriculum)
        net, report = trainer.bootstrap_from_checkpoint(ckpt, cfg, table, rng)
        print(report.to_text())
        return net
    return model.PageModel(cfg, rng)


def cmd_train(args):
    manifest = data.load_manifest(args.manifest)
    table = _load_table_for(manifest)
    rng = np.random.default_rng(args.seed)
    net = _build_model(args, table, rng)
    kind = args.kind or ("page" if args.L > 1 else "line")
    cfg = trainer.TrainConfig(
        lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
        seed=args.seed, L=args.L, z=args.z,
        augment_params=imageprep.DEFAULT_AUGMENT if args.augment else None,
        curriculum=args.curriculum, early_stop_cer=args.early_stop_cer,
    )
    result = trainer.train_manifest(net, manifest, table, cfg,
                                    out_dir=args.out, kind=kind)
    for name, got, need in result.rejected:
        print(f"rejected (CTC-infeasible): {name} T={got} < {need}",
              file=sys.stderr)
    last = result.metrics[-1] if result.metrics else {}
    print(
        f"trained {result.epochs_run} epochs on {kind} entries; "
        f"final loss {last.get('train_loss', 'n/a')}, "
        f"val CER {last.get('val_cer', 'n/a')}; "
        f"checkpoint at {os.path.join(args.out, 'ckpt_last')}"
    )
    return 0


def cmd_eval(args):
    ckpt = trainer.Checkpoint.load(args.ckpt)
    net, _ = trainer.model_from_checkpoint(ckpt)
    table = ckpt.table
    manifest = data.load_manifest(args.manifest)
    missing = table.missing_symbols(e.transcript for e in manifest.entries)
    if missing:
        print(f"coverage warning: transcripts use symbols the model never "
              f"saw: {missing!r}", file=sys.stderr)
    kind = args.kind or ("page" if net.config.oversample_L > 1 else "line")
    report, _ = trainer.evaluate(net, manifest, table, z=args.z,
                                 split=args.split, kind=kind,
                                 dump_path=args.dump)
    print(report.to_text())
    return 0


def cmd_decode(args):
    ckpt = trainer.Checkpoint.load(args.ckpt)
    net, _ = trainer.model_from_checkpoint(ckpt)
    if args.L is not None:
        net.config = replace(net.config, oversample_L=args.L)
    gray = imageprep.read_gray(args.image)
    img = imageprep.binarize(gray, args.threshold)
    if args.deslant:
        img = imageprep.deslant(img)
    sample = imageprep.resize_page(img, net.config.oversample_L)
    from .autodiff import log_softmax
    from .ctc import best_path_decode
    logits = net.forward(sample, training=False)
    ids = best_path_decode(log_softmax(logits), blank=ckpt.table.blank_id)
    print(ckpt.table.decode(ids))
    return 0


def cmd_sweep(args):
    manifest = data.load_manifest(args.manifest)
    table = _load_table_for(manifest)
    l_values = [int(v) for v in args.L.split(",")]
    cfg = trainer.TrainConfig(
        lr=args.lr, batch_size=args.batch_size, epochs=args.epochs,
        seed=args.seed, z=args.z, early_stop_cer=args.early_stop_cer,
    )

    def factory(l_factor):
        mcfg = model.make_config(args.profile, args.backend, table.n_symbols,
                                 oversample_L=l_factor)
        return model.PageModel(mcfg, np.random.default_rng(args.seed))

    rows = trainer.l_sweep(factory, manifest, table, l_values, cfg,
                           out_dir=args.out)
    print(trainer.sweep_table(rows))
    if args.out:
        with open(os.path.join(args.out, "sweep.json"), "w") as fh:
            json.dump(
                [{"L": l, "height": h, "cer_percent": c, "note": n}
                 for l, h, c, n in rows], fh, indent=2)
    return 0


def cmd_gradcheck(args):
    results = gradcheck.suite(args.seed)
    worst = 0.0
    for op, err in sorted(results.items()):
        status = "OK  " if err < 1e-4 else "FAIL"
        print(f"{status} {op:28s} max rel err {err:.3e}")
        worst = max(worst, err)
    return 0 if worst < 1e-4 else 1


def cmd_clean_pages(args):
    manifest = data.load_manifest(args.manifest)
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    out_entries = []
    failures = []
    for e in manifest.entries:
        try:
            if e.kind == "page":
                if not e.boxes:
                    raise ValueError("page entry carries no line boxes")
                page = imageprep.read_bilevel(manifest.image_path(e))
                crops = [
                    page[b.y : b.y + b.h, b.x : b.x + b.w] for b in e.boxes
                ]
                clean = imageprep.reconstruct_clean_page(
                    page.shape[0], page.shape[1], e.boxes, crops
                )
                imageprep.write_bilevel(os.path.join(args.out, e.image), clean)
            else:
                shutil.copyfile(
                    manifest.image_path(e), os.path.join(args.out, e.image)
                )
            out_entries.append(e)
        except (OSError, ValueError) as err:
            failures.append((e.image, str(err)))
    data.write_split_manifests(args.out, out_entries)
    pages = sum(1 for e in out_entries if e.kind == "page")
    print(f"reconstructed {pages} clean pages into {args.out}")
    for name, err in failures:
        print(f"FAILED {name}: {err}", file=sys.stderr)
    return 1 if failures else 0


def cmd_flatten_1d(args):
    manifest = data.load_manifest(args.manifest)
    os.makedirs(os.path.join(args.out, "images"), exist_ok=True)
    by_page = {}
    for e in manifest.entries:
        if e.kind == "line" and e.page_id:
            by_page.setdefault(e.page_id, []).append(e)
    if not by_page:
        print("no line entries with page ids to flatten", file=sys.stderr)
        return 1
    out_entries = []
    for page_id in sorted(by_page):
        lines = sorted(by_page[page_id], key=lambda e: e.image)
        images = [imageprep.read_bilevel(manifest.image_path(e)) for e in lines]
        flat, transcript = imageprep.flatten_page_1d(
            images, [e.transcript for e in lines]
        )
        rel = f"images/{page_id}_flat.png"
        imageprep.write_bilevel(os.path.join(args.out, rel), flat)
        out_entries.append(data.ManifestEntry(
            image=rel, transcript=transcript, kind="line",
            split=lines[0].split, boxes=None, page_id=page_id,
        ))
    data.write_split_manifests(args.out, out_entries)
    print(f"flattened {len(out_entries)} pages into {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pagerec",
        description="Segmentation-free handwritten page recognition",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic glyph-page corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--pages", type=int, default=200)
    p.add_argument("--lines", type=int, default=4)
    p.add_argument("--chars", type=int, default=8)
    p.add_argument("--layout", choices=("1d", "2d"), default="2d")
    p.add_argument("--noise", action="store_true",
                   help="add page numbers and margin marks outside line boxes")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", help="binarize (and optionally de-slant) a corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=int, default=128)
    p.add_argument("--deslant", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train a line or page model")
    _parse_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="CER of a checkpoint over a manifest split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=data.SPLITS, default="test")
    p.add_argument("--kind", choices=("line", "page"), default=None)
    p.add_argument("--z", type=float, default=DEFAULT_Z)
    p.add_argument("--dump", default=None, help="write per-sample ref/hyp JSONL")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("decode", help="transcribe one image to stdout")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--L", type=int, default=None,
                   help="override the checkpoint's oversample factor")
    p.add_argument("--threshold", type=int, default=128)
    p.add_argument("--deslant", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("sweep", help="train/evaluate across oversample factors")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--L", default="1,4", help="comma-separated L values")
    p.add_argument("--profile", choices=("toy", "paper"), default="toy")
    p.add_argument("--backend", choices=("transformer", "blstm"),
                   default="transformer")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--z", type=float, default=DEFAULT_Z)
    p.add_argument("--early-stop-cer", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", help="finite-difference self-check")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("clean-pages",
                       help="rebuild pages from line boxes onto a blank background")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_clean_pages)

    p = sub.add_parser("flatten-1d",
                       help="concatenate each page's lines into one long line")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_flatten_1d)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
