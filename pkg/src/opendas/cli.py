"""Command-line entry point: ``opendas <command> [options]``.

Exit status is 0 on success, 2 on invalid input or configuration and 3 on
any other failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .checkpoint import file_digest, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config, load_config
from .data import (SegmentRecord, crop_record, generate_synthetic, load_manifest,
                   load_segments, save_manifest, split_queries, write_mask, write_rgb)
from .errors import ValidationError
from .metrics import classification_metrics, export_embeddings
from .mining import (NegativeBank, build_instruction_prompt, load_negative_bank,
                     request_negatives)
from .model import DualEncoder, Tokenizer, count_prompt_params
from .trainer import JsonlLog, run_adaptation

log = logging.getLogger("opendas")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
CHECKPOINT_NAME = "model.ckpt"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


# -- shared helpers ----------------------------------------------------------

def _labels(records: Sequence[SegmentRecord]) -> list[str]:
    out: list[str] = []
    for r in records:
        if r.label not in out:
            out.append(r.label)
    return out


def build_vocabulary(train_labels, test_labels, bank: NegativeBank) -> Tokenizer:
    texts = list(train_labels) + list(test_labels)
    texts += [neg for negs in bank.entries.values() for neg in negs]
    return Tokenizer.from_texts(texts)


class RunData:
    """Manifests, bank and query split referenced by a run config."""

    def __init__(self, cfg: RunConfig, need_train: bool = True, need_test: bool = True):
        required = [k for k, need in (("train_manifest", need_train),
                                      ("test_manifest", need_test),
                                      ("negatives", need_train)) if need]
        cfg.validate(require_paths=required)
        self.cfg = cfg
        self.train = load_manifest(cfg.path(cfg.data.train_manifest)) \
            if cfg.data.train_manifest else []
        self.test = load_manifest(cfg.path(cfg.data.test_manifest)) \
            if cfg.data.test_manifest else []
        self.bank = load_negative_bank(cfg.path(cfg.data.negatives)) \
            if cfg.data.negatives else NegativeBank({})
        train_labels, test_labels = _labels(self.train), _labels(self.test)
        if need_train and not train_labels:
            raise ValidationError("training manifest has no records")
        if need_test and not test_labels:
            raise ValidationError("test manifest has no records")
        self.queries = split_queries(train_labels, test_labels) \
            if train_labels and test_labels else None
        self.tokenizer = build_vocabulary(train_labels, test_labels, self.bank)

    def segments(self, records):
        return load_segments(records, self.cfg.model.image_size, self.cfg.data.fill_color,
                             self.cfg.data.pad_fraction)


def _out_dir(cfg: RunConfig, override: Optional[str]) -> Path:
    out = Path(override) if override else cfg.path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _read_queries(args) -> list[str]:
    queries = list(args.query or [])
    if args.queries_file:
        text = Path(args.queries_file).read_text(encoding="utf-8")
        queries += [q.strip() for q in text.splitlines() if q.strip()]
    if not queries:
        raise ValidationError("no queries given (use --query or --queries-file)")
    return queries


# -- commands ----------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    s = cfg.synth
    out = Path(args.out)
    records, bank = generate_synthetic(s.num_classes, s.per_class, s.image_size, cfg.seed, out,
                                       s.novel_fraction, s.test_fraction)
    print(f"wrote {len(records)} segments and {len(bank)} bank entries to {out}")
    return EXIT_OK


def cmd_prepare(cfg: RunConfig, args) -> int:
    """Write mean-filled crops and a manifest that references them."""
    records = load_manifest(args.manifest)
    out = Path(args.out_dir)
    (out / "crops").mkdir(parents=True, exist_ok=True)
    size = cfg.model.image_size
    prepared = []
    for i, rec in enumerate(records):
        try:
            crop = crop_record(rec, cfg.data.fill_color, size, cfg.data.pad_fraction)
        except (FileNotFoundError, ValidationError) as exc:
            raise ValidationError(f"{args.manifest} record {i + 1}: {exc}") from exc
        stem = f"{i:06d}"
        write_rgb(out / "crops" / f"{stem}.png", crop.pixels)
        write_mask(out / "crops" / f"{stem}_mask.png", crop.mask)
        prepared.append(SegmentRecord(str((out / "crops" / f"{stem}.png").resolve()),
                                      str((out / "crops" / f"{stem}_mask.png").resolve()),
                                      rec.label, rec.segment_id, rec.split, prepared=True))
    save_manifest(prepared, out / "manifest.jsonl")
    print(f"prepared {len(prepared)} crops in {out}")
    return EXIT_OK


def cmd_negatives(cfg: RunConfig, args) -> int:
    if args.action == "template":
        queries = _labels(load_manifest(args.manifest)) if args.manifest else _read_queries(args)
        text = build_instruction_prompt(queries)
        if args.out:
            Path(args.out).write_text(text, encoding="utf-8")
        else:
            sys.stdout.write(text)
        return EXIT_OK
    if args.action == "validate":
        bank = load_negative_bank(args.bank)
        sizes = sorted({len(v) for v in bank.entries.values()})
        print(f"OK: {len(bank)} queries, negatives per query {sizes}")
        return EXIT_OK
    if not args.endpoint:
        raise ValidationError("fetch needs an explicit --endpoint; it is disabled by default")
    prompt = Path(args.prompt).read_text(encoding="utf-8")
    out = request_negatives(prompt, args.endpoint, args.out or "negatives_reply.txt",
                            args.timeout)
    print(f"saved raw reply to {out}; convert it to a bank and run 'negatives validate'")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    data = RunData(cfg, need_train=True, need_test=False)
    out = _out_dir(cfg, args.out)
    model = DualEncoder(cfg.model_config(), data.tokenizer)
    train_set = data.segments(data.train)
    sink = JsonlLog(out / "train_log.jsonl")

    def on_stage_end(tag: str, state: DualEncoder) -> None:
        path = save_checkpoint(state, out / f"{CHECKPOINT_NAME}.{tag}")
        log.info("checkpoint %s sha256=%s", path, file_digest(path))

    train_queries = _labels(data.train)
    _, entries = run_adaptation(model, train_set, train_queries, data.bank, cfg.train,
                                cfg.loss, sink=sink, on_stage_end=on_stage_end)
    (out / "config.toml").write_text(dump_config(cfg), encoding="utf-8")
    if not args.no_figures and entries:
        from .plots import plot_training_curves
        plot_training_curves(entries, out / "training_curves.png")
    final = out / f"{CHECKPOINT_NAME}.final"
    print(f"final checkpoint {final} sha256={file_digest(final)}")
    return EXIT_OK


def _load_model(cfg: RunConfig, data: RunData, args) -> tuple[DualEncoder, str]:
    if args.untrained:
        return DualEncoder(cfg.model_config(), data.tokenizer), "untrained"
    ckpt = Path(args.checkpoint) if args.checkpoint else \
        cfg.path(cfg.out_dir) / f"{CHECKPOINT_NAME}.final"
    if not ckpt.exists():
        raise ValidationError(f"checkpoint {ckpt} does not exist")
    return load_checkpoint(ckpt), str(ckpt)


@torch.no_grad()
def evaluate(model: DualEncoder, data: RunData, averaging: str = "weighted"):
    """Predict each test crop over the test queries only; returns (report, preds, truths)."""
    if data.queries is None:
        raise ValidationError("evaluation needs both a training and a test manifest")
    test_set = data.segments(data.test)
    queries = list(data.queries.test_queries)
    text = model.encode_text(queries)
    image = torch.cat([model.encode_image(test_set.images[i:i + 256])
                       for i in range(0, len(test_set), 256)])
    idx = (image @ text.t()).argmax(dim=1).tolist()
    preds = [queries[i] for i in idx]
    report = classification_metrics(preds, test_set.labels, data.queries, averaging)
    return report, preds, test_set.labels


def cmd_eval(cfg: RunConfig, args) -> int:
    data = RunData(cfg, need_train=True, need_test=True)
    model, source = _load_model(cfg, data, args)
    report, preds, truths = evaluate(model, data, cfg.eval.averaging)
    out = Path(args.out) if args.out else cfg.path(cfg.out_dir) / (
        "eval_untrained" if args.untrained else "eval")
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["meta"] = {"model": source, "queries": data.queries.counts(),
                       "base_queries": list(data.queries.base_test),
                       "novel_queries": list(data.queries.novel_test)}
    (out / "report.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    with open(out / "per_class.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label", "role", "precision", "recall", "f1", "support"])
        for label, s in report.per_class.items():
            role = "novel" if label in data.queries.novel_test else "base"
            writer.writerow([label, role, f"{s.precision:.6f}", f"{s.recall:.6f}",
                             f"{s.f1:.6f}", s.support])
    if cfg.eval.figures and not args.no_figures:
        from .plots import plot_confusion, plot_per_class_f1
        plot_confusion(preds, truths, data.queries.test_queries, out / "confusion.png")
        plot_per_class_f1(payload["per_class"], data.queries.novel_test, out / "per_class_f1.png")

    def fmt(x):
        return "n/a" if x is None else f"{x:.4f}"
    print(f"accuracy\t{fmt(report.accuracy)}")
    print(f"weighted_f1\t{fmt(report.weighted_f1)}")
    print(f"base_f1\t{fmt(report.base_f1)}")
    print(f"novel_f1\t{fmt(report.novel_f1)}")
    print(f"report\t{out / 'report.json'}")
    return EXIT_OK


@torch.no_grad()
def cmd_predict(cfg: RunConfig, args) -> int:
    model = load_checkpoint(args.checkpoint)
    queries = _read_queries(args)
    rec = SegmentRecord(str(Path(args.image).resolve()),
                        str(Path(args.mask).resolve()) if args.mask else "",
                        "query", 0, "test")
    if args.mask:
        crop = crop_record(rec, cfg.data.fill_color, model.cfg.image_size,
                           cfg.data.pad_fraction).pixels
    else:
        from .data import read_rgb, resize_bilinear
        crop = resize_bilinear(read_rgb(args.image), model.cfg.image_size)
    image = model.encode_image(torch.from_numpy(np.asarray(crop, dtype=np.float32))[None])
    scores = (image @ model.encode_text(queries).t())[0]
    best = int(torch.argmax(scores))
    print(json.dumps({"label": queries[best],
                      "scores": {q: round(float(s), 6) for q, s in zip(queries, scores)}}))
    return EXIT_OK


def cmd_count_params(cfg: RunConfig, args) -> int:
    mc = cfg.model_config()
    pc = mc.prompt
    visual = pc.depth_v * pc.width_v * mc.vision.width
    textual = pc.depth_t * pc.width_t * mc.text.width
    total = count_prompt_params((mc.vision, mc.text), pc)
    print(total)
    print(f"visual\t{pc.depth_v} x {pc.width_v} x {mc.vision.width} = {visual}")
    print(f"textual\t{pc.depth_t} x {pc.width_t} x {mc.text.width} = {textual}")
    return EXIT_OK


@torch.no_grad()
def cmd_export_embeddings(cfg: RunConfig, args) -> int:
    model = load_checkpoint(args.checkpoint)
    if args.manifest:
        records = load_manifest(args.manifest)
        segs = load_segments(records, model.cfg.image_size, cfg.data.fill_color,
                             cfg.data.pad_fraction)
        emb = torch.cat([model.encode_image(segs.images[i:i + 256])
                         for i in range(0, len(segs), 256)])
        rows = segs.labels
    else:
        rows = _read_queries(args)
        emb = model.encode_text(rows)
    path, sidecar = export_embeddings(emb, rows, args.out)
    print(f"wrote {emb.shape[0]}x{emb.shape[1]} embeddings to {path} (labels in {sidecar})")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "prepare": cmd_prepare, "negatives": cmd_negatives,
    "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
    "count-params": cmd_count_params, "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="TOML run config")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="opendas", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--dump-defaults", action="store_true",
                        help="print the default config and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)

    p = sub.add_parser("prepare", parents=[common], help="write mean-filled segment crops")
    p.add_argument("manifest")
    p.add_argument("out_dir")

    p = sub.add_parser("negatives", parents=[common], help="negative-query bank tooling")
    p.add_argument("action", choices=("template", "validate", "fetch"))
    p.add_argument("bank", nargs="?", help="bank JSON (validate)")
    p.add_argument("--manifest", help="take class names from a manifest (template)")
    p.add_argument("--query", action="append", help="class name (repeatable)")
    p.add_argument("--queries-file", help="one class name per line")
    p.add_argument("--prompt", help="instruction prompt file (fetch)")
    p.add_argument("--endpoint", help="HTTP endpoint to POST the prompt to (fetch)")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--out")

    p = sub.add_parser("train", parents=[common], help="two-stage prompt adaptation")
    p.add_argument("--out", help="output directory (default: config out_dir)")
    p.add_argument("--stage-mode", help="shorthand for --set train.stage_mode=MODE")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="evaluate on the test manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--untrained", action="store_true", help="evaluate the unadapted model")
    p.add_argument("--out")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("predict", parents=[common], help="classify one segment")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask")
    p.add_argument("--query", action="append")
    p.add_argument("--queries-file")

    sub.add_parser("count-params", parents=[common], help="count trainable prompt entries")

    p = sub.add_parser("export-embeddings", parents=[common], help="dump embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="embed the crops of this manifest")
    p.add_argument("--query", action="append")
    p.add_argument("--queries-file")
    p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_defaults:
        sys.stdout.write(dump_config(RunConfig()))
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "stage_mode", None):
        overrides.append(f'train.stage_mode="{args.stage_mode}"')
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
