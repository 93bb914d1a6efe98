"""Command-line entry point.

Exit codes: 0 success, 1 validation failure (bad arguments, config, paths or
data), 2 runtime error. ``FSGFA_THREADS`` caps BLAS threads (default 1).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as C
from . import data as D
from . import evaluation as E
from . import explain as X
from . import networks as N
from . import train as T
from .imaging import to_uint8
from .misalign import apply_margin, crop_by_box, sample_random_margin
from .shapeprior import GroundTruthProvider

log = logging.getLogger("fsgfa")

OK, INVALID, RUNTIME = 0, 1, 2


class UsageError(ValueError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; bad usage is a validation failure here
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# helpers


def parse_margins(text: str) -> list[int]:
    """'1..7', '2' or '1,3,5' -> preset indices."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = (int(v) for v in part.split(".."))
            out.extend(range(lo, hi + 1))
        elif part:
            out.append(int(part))
    if not out or any(not 1 <= m <= 7 for m in out):
        raise UsageError(f"margins must lie in 1..7, got {text!r}")
    return out


def _run_config(args) -> C.RunConfig:
    return C.load(args.config) if getattr(args, "config", None) else C.RunConfig()


def _log_config(rc: C.RunConfig, out_dir: Path | None = None) -> str:
    resolved = rc.resolved()
    digest = C.config_hash(resolved)
    log.info("resolved config %s: %s", digest, json.dumps(resolved, sort_keys=True))
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.json").write_text(json.dumps({"hash": digest, "config": resolved}, indent=2, sort_keys=True) + "\n")
    return digest


def _load_model(path) -> N.ModelBundle:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    bundle, _, _ = N.load_bundle(path)
    return bundle


def _val_samples(data_dir, split="val"):
    manifest = D.DatasetManifest.read(data_dir)
    records = manifest.split(split)
    if not records:
        raise ValueError(f"{data_dir}: split {split!r} is empty")
    return manifest, records, E.load_samples(manifest, records)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    rc = _run_config(args)
    d = rc.data
    seed = args.seed if args.seed is not None else d.seed
    manifest = D.generate_dataset(
        args.out,
        identities=args.identities or d.identities,
        renders=args.renders_per_id or d.renders,
        seed=seed,
        val_identities=d.val_identities if args.val_identities is None else args.val_identities,
        val_renders=args.val_renders or d.val_renders,
        canvas=d.canvas,
        force=args.force,
    )
    print(f"wrote {len(manifest.records)} images to {args.out} (digest {D.tree_digest(args.out)[:16]})")
    return OK


def cmd_train(args) -> int:
    rc = _run_config(args)
    overrides = {k: v for k, v in {"epochs": args.epochs, "seed": args.seed}.items() if v is not None}
    if args.weights:
        overrides["weights"] = [float(v) for v in args.weights.split(",")]
    rc.train.update(overrides)
    tcfg = rc.train_config()
    out = Path(args.out)
    digest = _log_config(rc, out)
    manifest = D.DatasetManifest.read(args.data)
    if args.resume:
        bundle, momentum, start, saved = T.load_checkpoint(args.resume)
        start += 1
    else:
        classes = rc.model.num_classes or manifest.num_classes("train")
        net = N.get_config(rc.model.config, num_classes=classes)
        bundle, momentum, start = N.build(net, tcfg.seed), None, 1
    source = D.PairSource(manifest, "train", out=bundle.config.input_size)
    provider = GroundTruthProvider(eps=rc.noise_eps, seed=tcfg.seed)

    def report(e):
        print(f"epoch {e.epoch:3d} lr {e.lr:.4g} " + " ".join(
            f"{k} {v:.4f}" for k, v in zip(T.LOG_COLUMNS[2:], (e.L_cls, e.L_pa, e.L_fa, e.L_total))), flush=True)

    T.train(bundle, source, provider, tcfg, start_epoch=start, momentum=momentum,
            log_path=out / "loss.csv", checkpoint_path=out / "checkpoint.fsg", on_epoch=report)
    N.write_checkpoint(out / "model_test.fsg", bundle, components=N.TEST_COMPONENTS,
                       meta={"config_hash": digest})
    print(f"checkpoints in {out} (config {digest})")
    return OK


def cmd_eval_verify(args) -> int:
    rc = _run_config(args)
    seed = args.seed if args.seed is not None else rc.eval.seed
    modes = ["optimal"] if args.optimal else []
    if args.margins:
        modes += [f"m{m}" for m in parse_margins(args.margins)]
    if args.random:
        modes.append("random")
    if args.whole:
        modes.append("whole")
    if not modes:
        modes = list(rc.eval.modes)
    parsed = [E.parse_crop_mode(m) for m in modes]
    out = Path(args.out)
    digest = _log_config(rc, out)
    bundle = _load_model(args.checkpoint)
    manifest, records, samples = _val_samples(args.data)
    pairs_path = Path(args.pairs) if args.pairs else out / "pairs.tsv"
    names = [r.image for r in records]
    if pairs_path.exists():
        pairs = E.read_pairs(pairs_path, names)
    else:
        pairs = E.make_pairs([r.label for r in records], rc.eval.pairs, rc.eval.folds, seed)
        E.write_pairs(pairs_path, pairs, names)
    results, curves = {}, {}
    for mode in parsed:
        feats = E.extract_features(bundle, samples, mode, seed)
        dist = pairs.distances(feats)
        results[mode.name] = E.verify_10fold(dist, pairs.same, pairs.fold)
        curves[mode.name] = E.roc_curve(dist, pairs.same, rc.eval.roc_points)
        E.write_roc_csv(out / f"roc_{mode.name}.csv", curves[mode.name])
        E.write_roc_svg(out / f"roc_{mode.name}.svg", {mode.name: curves[mode.name]}, title=f"ROC ({mode.name})")
        r = results[mode.name]
        print(f"{mode.name:>10s}  {100 * r.mean:6.2f} +- {100 * r.std:5.2f}", flush=True)
    E.write_accuracy_csv(out / "accuracy.csv", results)
    E.write_roc_svg(out / "roc.svg", curves, title=f"ROC (config {digest})")
    return OK


def cmd_eval_identify(args) -> int:
    rc = _run_config(args)
    seed = args.seed if args.seed is not None else rc.eval.seed
    bundle = _load_model(args.checkpoint)
    manifest, records, samples = _val_samples(args.data)
    labels = np.array([r.label for r in records])
    ids = np.unique(labels)
    if args.distractor_ids >= len(ids):
        raise ValueError(f"need at least one enrolled identity; {len(ids)} available")
    distract_ids = set(ids[len(ids) - args.distractor_ids:].tolist())
    gallery, probes, distract, seen = [], [], [], set()
    for i, lab in enumerate(labels):
        if lab in distract_ids:
            distract.append(i)
        elif lab not in seen:
            gallery.append(i)
            seen.add(lab)
        else:
            probes.append(i)
    if not probes:
        raise ValueError("no probe images: every identity has a single render")
    mode = E.parse_crop_mode(args.mode)
    feats = E.extract_features(bundle, samples, mode, seed)
    acc = E.identify_rank1(feats[gallery], labels[gallery], feats[probes], labels[probes],
                           feats[distract] if distract else None)
    out = Path(args.out)
    _log_config(rc, out)
    with (out / "identify.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "gallery", "probes", "distractors", "rank1"])
        w.writerow([mode.name, len(gallery), len(probes), len(distract), f"{100 * acc:.2f}"])
    print(f"rank-1 {100 * acc:.2f}% ({len(probes)} probes, {len(gallery)} gallery, {len(distract)} distractors)")
    return OK


def cmd_crop(args) -> int:
    manifest = D.DatasetManifest.read(args.data)
    records = manifest.split(args.split)[: args.limit or None]
    if args.margin is not None:
        vector = args.margin.count(",") == 3
        mode = E.parse_crop_mode(f"margin:{args.margin}" if vector else f"m{int(args.margin)}")
    else:
        mode = E.parse_crop_mode("random" if args.random else "whole" if args.whole else "optimal")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "crops.tsv").open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["image", "mode", "x1", "y1", "x2", "y2", "crop"])
        for r in records:
            img, kps, box = manifest.load(r)
            rng = E.image_rng(args.seed, r.image)
            if mode.kind in ("margin", "random"):
                m = mode.margin if mode.kind == "margin" else sample_random_margin(rng)
                crop_box = apply_margin(box, m)
                crop = crop_by_box(img, crop_box, args.size)
                coords = [f"{v:.6f}" for v in crop_box.as_tuple()]
            else:
                crop = E.eval_crop(img, kps, box, mode, args.size, rng)
                coords = ["", "", "", ""]
            name = r.image.replace("/", "_").rsplit(".", 1)[0] + f"__{mode.name}.png"
            Image.fromarray(to_uint8(crop)).save(out / name)
            w.writerow([r.image, mode.name, *coords, name])
    print(f"wrote {len(records)} crops to {out}")
    return OK


def cmd_gradcam(args) -> int:
    bundle = _load_model(args.checkpoint)
    if bundle.head is None:
        raise ValueError("gradcam needs a full checkpoint (the classifier head is missing)")
    manifest = D.DatasetManifest.read(args.data)
    records = manifest.split(args.split)[: args.limit or None]
    size = bundle.config.input_size
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hits = 0
    with (out / "cam.tsv").open("w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["image", "class", "inside_mean", "outside_mean"])
        for r in records:
            img, kps, box = manifest.load(r)
            crop, m = D.well_aligned_crop(img, kps, box, size, return_transform=True)
            crop = to_uint8(crop)
            x = D.normalize(crop)
            if args.target_class is not None:
                target = args.target_class
            else:  # held-out identities have no class of their own
                target = r.label if args.split == "train" else X.predicted_class(bundle, x)
            cam = X.grad_cam(bundle, x, target)
            X.write_cam(cam, crop, out, r.image.replace("/", "_"))
            inside, outside = X.region_contrast(cam.values, X.face_region(kps, m), size)
            hits += inside > outside
            w.writerow([r.image, target, f"{inside:.6g}", f"{outside:.6g}"])
    print(f"face region hotter than background in {hits}/{len(records)} maps")
    return OK


def cmd_count_params(args) -> int:
    bundle = N.build(N.get_config(args.config), 0)
    counts = N.count_parameters(bundle)
    ref = N.REFERENCE_COUNTS.get(args.config, {})
    bad = 0
    print(f"{'component':<12s}{'count':>12s}{'reference':>12s}")
    for name in (*N.COMPONENTS, "test_total", "train_total"):
        expect = ref.get(name)
        flag = "" if expect is None or expect == counts[name] else "  MISMATCH"
        bad += bool(flag)
        print(f"{name:<12s}{counts[name]:>12,d}{'' if expect is None else f'{expect:,d}':>12s}{flag}")
    if bad:
        print(f"{bad} component(s) differ from the reference table", file=sys.stderr)
        return INVALID
    return OK


# --------------------------------------------------------------------------


def build_parser() -> Parser:
    p = Parser(prog="fsgfa", description="Shape-guided face feature alignment toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    g = sub.add_parser("gen-data", help="render a synthetic face dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--identities", type=int)
    g.add_argument("--renders-per-id", type=int)
    g.add_argument("--val-identities", type=int)
    g.add_argument("--val-renders", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    g.add_argument("--config")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="joint training; writes checkpoints and a loss CSV")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--weights", help="alpha,beta,gamma")
    t.set_defaults(fn=cmd_train)

    v = sub.add_parser("eval-verify", help="10-fold pair verification under crop modes")
    v.add_argument("--data", required=True)
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--margins", help="preset indices, e.g. 1..7")
    v.add_argument("--random", action="store_true")
    v.add_argument("--whole", action="store_true")
    v.add_argument("--optimal", action="store_true", help="keypoint-aligned crops")
    v.add_argument("--pairs", help="pair list TSV (created if missing)")
    v.add_argument("--seed", type=int)
    v.add_argument("--config")
    v.set_defaults(fn=cmd_eval_verify)

    i = sub.add_parser("eval-identify", help="rank-1 identification with distractors")
    i.add_argument("--data", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--mode", default="optimal")
    i.add_argument("--distractor-ids", type=int, default=3)
    i.add_argument("--seed", type=int)
    i.add_argument("--config")
    i.set_defaults(fn=cmd_eval_identify)

    c = sub.add_parser("crop", help="write crops under a misalignment setting")
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--split", default="val")
    grp = c.add_mutually_exclusive_group()
    grp.add_argument("--margin", help="preset index or a,b,c,d margin vector")
    grp.add_argument("--random", action="store_true")
    grp.add_argument("--whole", action="store_true")
    c.add_argument("--size", type=int, default=N.DESK.input_size)
    c.add_argument("--limit", type=int, default=0)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_crop)

    m = sub.add_parser("gradcam", help="class activation maps over the embedding layer")
    m.add_argument("--data", required=True)
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--split", default="val")
    m.add_argument("--target-class", type=int, help="default: own label on train, predicted class otherwise")
    m.add_argument("--limit", type=int, default=0)
    m.set_defaults(fn=cmd_gradcam)

    k = sub.add_parser("count-params", help="per-component parameter table")
    k.add_argument("--config", default="paper", choices=sorted(N.PRESETS))
    k.set_defaults(fn=cmd_count_params)
    return p


def _thread_limit():
    from threadpoolctl import threadpool_limits

    raw = os.environ.get("FSGFA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"FSGFA_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("FSGFA_THREADS must be >= 1")
    return threadpool_limits(limits=n)


VALIDATION_ERRORS = (ValueError, FileNotFoundError, FileExistsError, NotADirectoryError, KeyError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit():
            return args.fn(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INVALID
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME


if __name__ == "__main__":
    sys.exit(main())
