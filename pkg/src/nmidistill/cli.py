"""``nmidistill`` command-line entry point.

Every subcommand reads explicit input paths and writes its outputs atomically
(temp file in the destination directory, then rename). Exit codes: 0 success,
2 usage or invalid argument, 3 unreadable/undecodable input, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np

from nmidistill.attention_metrics import DEFAULT_S, build_report, select_target_layer
from nmidistill.curation import (balanced_subsample, dedup_manifest, grayscale_manifest, interval_sample,
                                 mix_manifests, read_image, similarity_table, to_grayscale, write_image)
from nmidistill.distill import DistillLog, DistillPlan, export_student, run_distillation
from nmidistill.errors import CodecError, NumericError
from nmidistill.io_formats import (decode_attention_dump, decode_checkpoint, decode_feature_dump, dump_manifest,
                                   encode_checkpoint, read_manifest)
from nmidistill.probe import MODES, default_layers, train_probe
from nmidistill.shapes import normalize_images
from nmidistill.similarity import cka_grid
from nmidistill.toy.model import ModelConfig

EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4
SEED_ENV = "NMIDISTILL_SEED"
DEFAULT_SEED = 0


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------------------
# output helpers


def write_atomic(path: str | os.PathLike, data: bytes | str) -> None:
    """Write via a temp file in the same directory and rename over ``path``."""
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        write_atomic(out, text)


def _grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like HxW, got {text!r}") from None
    return h, w


def _named_path(text: str) -> tuple[str, str]:
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected NAME=PATH, got {text!r}")
    return name, path


def _load_embeddings(path: str) -> np.ndarray:
    """[n, D] embeddings from a feature dump holding a single layer."""
    stack = decode_feature_dump(path)
    if stack.layers != 1:
        raise CodecError(f"{path}: embedding dumps must have exactly one layer, found {stack.layers}")
    return stack.data[0]


def _load_json(path: str):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# subcommands


def cmd_nmi(args) -> None:
    stacks = [decode_attention_dump(p) for p in args.input]
    report = build_report(stacks, s=args.s, restrict_to_latter_half=args.half_only, grid=args.grid)
    emit(report.to_json(), args.out)


def _nmi_vector(path: str) -> list[float]:
    obj = _load_json(path)
    if isinstance(obj, dict):
        obj = obj.get("per_layer_nmi")
    if not isinstance(obj, list) or not all(isinstance(v, (int, float)) for v in obj):
        raise CodecError(f"{path}: expected a list of per-layer NMI values or an nmi report")
    return [float(v) for v in obj]


def cmd_select_layer(args) -> None:
    if (args.input is None) == (args.values is None):
        raise ValueError("give exactly one of --input or --values")
    if args.values is not None:
        try:
            values = [float(v) for v in args.values.split(",")]
        except ValueError:
            raise ValueError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    else:
        values = _nmi_vector(args.input)
    layer = select_target_layer(values, args.s, args.half_only)
    emit(to_json({"s": args.s, "restrict_to_latter_half": args.half_only,
                  "per_layer_nmi": values, "target_layer": layer}), args.out)


def cmd_cka(args) -> None:
    feats_a = [decode_feature_dump(p).data for p in args.a]
    feats_b = [decode_feature_dump(p).data for p in args.b]
    grid = cka_grid(feats_a, feats_b, pooled=not args.per_image)
    emit(to_json({"pooled": not args.per_image, "n_images": len(feats_a), "cka": grid.tolist()}), args.out)


def _load_images(manifest_path: str, config: ModelConfig) -> np.ndarray:
    manifest = read_manifest(manifest_path)
    root = Path(manifest_path).parent
    images = []
    for rec in manifest.records:
        path = Path(rec.path)
        img = read_image(path if path.is_absolute() else root / path)
        if rec.modality == "rgb":
            img = to_grayscale(img)
        if img.shape[:2] != tuple(config.image):
            raise ValueError(f"{rec.path}: image is {img.shape[0]}x{img.shape[1]}, "
                             f"model expects {config.image[0]}x{config.image[1]}")
        images.append(img)
    if not images:
        raise ValueError(f"{manifest_path}: manifest is empty")
    return normalize_images(np.stack(images))


def _load_model(path: str) -> tuple[ModelConfig, dict]:
    params, config = decode_checkpoint(path)
    if "model" not in config:
        raise CodecError(f"{path}: checkpoint config has no 'model' entry")
    return ModelConfig.from_dict(config["model"]), params


def cmd_distill(args) -> None:
    plan_obj = _load_json(args.plan)
    if not isinstance(plan_obj, dict):
        raise CodecError(f"{args.plan}: plan must be a JSON object")
    plan_obj = dict(plan_obj)
    student_obj = plan_obj.pop("student", None)
    if student_obj is None:
        raise ValueError(f"{args.plan}: plan needs a 'student' model config")
    plan_obj.setdefault("seed", default_seed())
    plan = DistillPlan.from_dict(plan_obj)
    student_config = ModelConfig.from_dict(student_obj)
    teacher_config, teacher_params = _load_model(args.teacher)
    train = _load_images(args.corpus, teacher_config)
    heldout = _load_images(args.heldout, teacher_config) if args.heldout else train[:0]
    targets = None
    if args.targets:
        targets = np.stack([decode_attention_dump(p).data[0] for p in args.targets])
    result = run_distillation(teacher_config, teacher_params, student_config, train, heldout, plan,
                              teacher_targets=targets)
    params, config = export_student(result.params, result.config)
    write_atomic(args.out, encode_checkpoint(params, {"model": config.to_dict(), "plan": plan.to_dict()}))
    if args.log:
        write_atomic(args.log, result.log.to_jsonl())


def cmd_probe(args) -> None:
    config, params = _load_model(args.backbone)
    if args.mode == "layerwise" and args.layer is None:
        raise ValueError("--mode layerwise requires --layer")
    layers = default_layers(config.depth, args.mode, args.layer)
    try:
        data = np.load(args.data, allow_pickle=False)
        arrays = {k: data[k] for k in ("train_images", "train_labels", "test_images", "test_labels")}
    except KeyError as exc:
        raise CodecError(f"{args.data}: missing array {exc}") from None
    result = train_probe(config, params, normalize_images(arrays["train_images"]), arrays["train_labels"],
                         normalize_images(arrays["test_images"]), arrays["test_labels"],
                         num_classes=args.num_classes, mode=args.mode, layers=layers, epochs=args.epochs,
                         batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    emit(to_json({"mode": args.mode, "layers": layers, **result.report,
                  "final_loss": result.losses[-1] if result.losses else None}), args.out)


def _write_manifest(manifest, args) -> None:
    write_atomic(args.out, dump_manifest(manifest))
    if args.report:
        write_atomic(args.report, to_json({"count": len(manifest), "provenance": manifest.provenance}))


def cmd_curate(args) -> None:
    action = args.action
    if action == "similarity":
        sets = {name: _load_embeddings(path) for name, path in args.set}
        targets = {name: _load_embeddings(path) for name, path in args.target}
        emit(to_json(similarity_table(sets, targets, args.pair_cap, args.seed)), args.out)
        return
    if action == "mix":
        if args.out is None:
            raise ValueError("curate mix requires --out")
        _write_manifest(mix_manifests([(name, read_manifest(path)) for name, path in args.source]), args)
        return
    if args.manifest is None or args.out is None:
        raise ValueError(f"curate {action} requires --manifest and --out")
    manifest = read_manifest(args.manifest)
    if action == "interval":
        result = interval_sample(manifest, args.k)
    elif action == "dedup":
        if args.embeddings is None:
            raise ValueError("curate dedup requires --embeddings")
        result = dedup_manifest(manifest, _load_embeddings(args.embeddings), args.threshold)
    elif action == "grayscale":
        result = grayscale_manifest(manifest)
        if args.image_root and args.image_out:
            for rec in manifest.records:
                if rec.modality == "rgb":
                    dest = Path(args.image_out) / rec.path
                    dest.parent.mkdir(parents=True, exist_ok=True)
                    write_image(dest, to_grayscale(read_image(Path(args.image_root) / rec.path)))
    else:
        result = balanced_subsample(manifest, args.n, args.seed)
    _write_manifest(result, args)


def cmd_report(args) -> None:
    with open(args.log, encoding="utf-8") as fh:
        log = DistillLog.from_jsonl(fh.read())
    final = log.epoch_heldout[-1] if log.epoch_heldout else None
    ratio = final / log.initial_heldout if final is not None and log.initial_heldout else None
    student = log.epoch_student_nmi[-1] if log.epoch_student_nmi else None
    gap = (abs(student - log.teacher_target_nmi)
           if student is not None and log.teacher_target_nmi is not None else None)
    epochs = [{"epoch": 0, "heldout": log.initial_heldout, "student_nmi": log.initial_student_nmi}]
    epochs += [{"epoch": e, "heldout": h, "student_nmi": n}
               for e, (h, n) in enumerate(zip(log.epoch_heldout, log.epoch_student_nmi), start=1)]
    emit(to_json({"metric": log.metric, "target_layers": log.target_layers,
                  "teacher_target_nmi": log.teacher_target_nmi, "steps": len(log.step_loss),
                  "initial_heldout": log.initial_heldout, "final_heldout": final, "heldout_ratio": ratio,
                  "final_student_nmi": student, "student_nmi_gap": gap, "epochs": epochs}), args.out)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nmidistill",
        description="Attention NMI analysis, NMI-guided attention distillation, probing and corpus curation.",
        epilog=f"Exit codes: 0 ok, 2 usage, 3 unreadable input, 4 numeric failure. "
               f"Seeds default to ${SEED_ENV} or {DEFAULT_SEED}.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    seed = default_seed()

    def selection_flags(p):
        p.add_argument("--s", type=float, default=DEFAULT_S,
                       help=f"NMI target; the layer with NMI closest to it is selected (default {DEFAULT_S})")
        p.add_argument("--half-only", action=argparse.BooleanOptionalAction, default=True,
                       help="only consider the latter half of the layers (default on)")

    p = sub.add_parser("nmi", help="per-layer NMI report from attention dumps")
    p.add_argument("--input", action="append", required=True, metavar="ATN",
                   help="attention dump, one per image; repeat to average over images")
    selection_flags(p)
    p.add_argument("--grid", type=_grid, metavar="HxW", help="token grid, enables attention distance")
    p.add_argument("--out", help="report path (default stdout)")
    p.set_defaults(func=cmd_nmi)

    p = sub.add_parser("select-layer", help="pick the distillation target layer from per-layer NMI")
    p.add_argument("--input", help="JSON list of per-layer NMI, or an nmi report")
    p.add_argument("--values", help="comma-separated per-layer NMI")
    selection_flags(p)
    p.add_argument("--out", help="output path (default stdout)")
    p.set_defaults(func=cmd_select_layer)

    p = sub.add_parser("cka", help="layer-by-layer linear CKA between two models")
    p.add_argument("--a", action="append", required=True, metavar="FETD", help="feature dump of model A, per image")
    p.add_argument("--b", action="append", required=True, metavar="FETD", help="feature dump of model B, same images")
    p.add_argument("--per-image", action="store_true", help="average per-image CKA instead of pooling tokens")
    p.add_argument("--out", help="output path (default stdout)")
    p.set_defaults(func=cmd_cka)

    p = sub.add_parser("distill", help="distil teacher attention into a student")
    p.add_argument("--plan", required=True, help="JSON plan: distillation fields plus a 'student' model config")
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--corpus", required=True, help="training manifest (image paths relative to it)")
    p.add_argument("--heldout", help="held-out manifest for per-epoch evaluation")
    p.add_argument("--targets", action="append", metavar="ATN",
                   help="precomputed teacher target attention per corpus image (single-layer dumps)")
    p.add_argument("--out", required=True, help="student checkpoint path")
    p.add_argument("--log", help="JSON-lines training log path")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("probe", help="linear probe / pyramid evaluation of a frozen backbone")
    p.add_argument("--backbone", required=True, help="backbone checkpoint")
    p.add_argument("--data", required=True,
                   help="npz with train_images, train_labels, test_images, test_labels (uint8)")
    p.add_argument("--mode", choices=MODES, default="multi-layer")
    p.add_argument("--layer", type=int, help="1-based layer for --mode layerwise")
    p.add_argument("--num-classes", type=int, required=True)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=seed)
    p.add_argument("--out", help="report path (default stdout)")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("curate", help="corpus curation steps over manifests")
    p.add_argument("action", choices=("interval", "dedup", "grayscale", "balance", "mix", "similarity"))
    p.add_argument("--manifest", help="input manifest")
    p.add_argument("--out", help="output manifest (similarity: table, default stdout)")
    p.add_argument("--report", help="provenance report path")
    p.add_argument("--k", type=int, default=10, help="interval: keep every k-th frame (default 10)")
    p.add_argument("--embeddings", help="dedup: one-layer feature dump of embeddings in manifest order")
    p.add_argument("--threshold", type=float, default=0.9, help="dedup: cosine threshold (default 0.9)")
    p.add_argument("--image-root", help="grayscale: directory holding the source images")
    p.add_argument("--image-out", help="grayscale: directory for converted images")
    p.add_argument("--n", type=int, help="balance: number of records to draw")
    p.add_argument("--source", action="append", type=_named_path, default=[], metavar="NAME=MANIFEST",
                   help="mix: named source manifest, repeat in order")
    p.add_argument("--set", action="append", type=_named_path, default=[], metavar="NAME=FETD",
                   help="similarity: source embedding set (one-layer feature dump)")
    p.add_argument("--target", action="append", type=_named_path, default=[], metavar="NAME=FETD",
                   help="similarity: target embedding set (one-layer feature dump)")
    p.add_argument("--pair-cap", type=int, default=1_000_000,
                   help="similarity: exact below this many pairs, seeded sampling above")
    p.add_argument("--seed", type=int, default=seed)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("report", help="summarize a distillation log as a table")
    p.add_argument("--log", required=True, help="JSON-lines log written by distill")
    p.add_argument("--out", help="output path (default stdout)")
    p.set_defaults(func=cmd_report)
    return parser


def _operation(args) -> str:
    return f"{args.command} {args.action}" if getattr(args, "action", None) else args.command


def main(argv: Sequence[str] | None = None) -> int:
    try:
        parser = build_parser()
    except ValueError as exc:
        print(f"nmidistill: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    op = _operation(args)
    try:
        if args.command == "curate" and args.action == "balance" and args.n is None:
            raise ValueError("curate balance requires --n")
        args.func(args)
    except NumericError as exc:
        print(f"nmidistill {op}: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CodecError, json.JSONDecodeError, OSError) as exc:
        print(f"nmidistill {op}: cannot read input: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ValueError as exc:
        print(f"nmidistill {op}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
