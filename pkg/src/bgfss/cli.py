"""Command-line entry point: ``bgfss <subcommand> [options]``."""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ToolConfig, load_config
from .evaluation import ConfusionMatrix, EvaluationError, report
from .geometry import GeometryError, project, read_labels, read_scan, write_labels
from .gradcheck import run_all
from .losses import AblationFlags, LossError
from .model import ModelError, load_checkpoint, save_checkpoint
from .protocol import Dataset, ProtocolError, ShotSample, evaluate, finetune, predict, sample_shots, train_base
from .synth import SceneError, write_corpus
from .taxonomy import TaxonomyError

log = logging.getLogger("bgfss")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_DATA = 5
EXIT_CHECK_FAILED = 6


class RunError(RuntimeError):
    pass


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fingerprint_files(paths: Sequence[str]) -> dict[str, str]:
    return {p: _sha256(p) for p in sorted(paths) if os.path.isfile(p)}


class Manifest:
    """<out-dir>/<subcommand>.manifest.json, written before the run and completed after it."""

    def __init__(self, out_dir: str, command: str, argv: Sequence[str], cfg: ToolConfig):
        self.path = os.path.join(out_dir, f"{command}.manifest.json")
        self.doc = {
            "tool": "bgfss",
            "version": __version__,
            "command": command,
            "argv": list(argv),
            "config": cfg.to_ini(),
            "seeds": {"seed": cfg.seeds.seed, "shot_seed": cfg.seeds.shot_seed},
            "inputs": {},
            "outputs": {},
            "status": "started",
        }

    @property
    def name(self) -> str:
        return os.path.basename(self.path)

    def add_inputs(self, paths: Sequence[str]) -> None:
        self.doc["inputs"].update(_fingerprint_files(paths))

    def write(self) -> None:
        with open(self.path, "w") as fh:
            json.dump(self.doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finish(self, outputs: Sequence[str], status: str = "ok", **extra) -> None:
        self.doc["outputs"] = _fingerprint_files(outputs)
        self.doc["status"] = status
        self.doc.update(extra)
        self.write()


def _write_json(path: str, doc) -> str:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _dataset(cfg: ToolConfig, which: str, root: Optional[str]) -> Dataset:
    root = root or cfg.data.root
    if not root:
        raise RunError("no data root: pass --data or set data.root")
    seqs = getattr(cfg.data, which)
    ds = Dataset.from_kitti(root, seqs, split=which)
    if len(ds) == 0:
        raise RunError(f"no scans found under {root} for sequences {list(seqs)}")
    return ds


def _frame_files(ds: Dataset) -> list[str]:
    return [p for f in ds.frames for p in (f.scan, f.labels) if p]


# ------------------------------------------------------------ subcommands

def cmd_project(args, cfg: ToolConfig, manifest: Manifest) -> list[str]:
    manifest.add_inputs([args.scan])
    manifest.write()
    image = project(read_scan(args.scan), cfg.projection.build())
    out = []
    for name, arr in (("channels", image.channels), ("valid", image.valid), ("point_index", image.point_index)):
        path = os.path.join(args.out_dir, f"range_{name}.npy")
        np.save(path, np.ascontiguousarray(arr))
        out.append(path)
    print(f"projected {image.M} pixels into {image.shape[0]}x{image.shape[1]}")
    return out


def cmd_synth_gen(args, cfg: ToolConfig, manifest: Manifest) -> list[str]:
    manifest.write()
    root = args.root or os.path.join(args.out_dir, "corpus")
    synth = cfg.synth if args.seed is None else replace(cfg.synth, seed=args.seed)
    index = write_corpus(root, synth)
    files = sorted(glob.glob(os.path.join(root, "sequences", "*", "*", "*")))
    for split, info in index["splits"].items():
        print(f"{split}: sequence {info['sequence']}, {info['frames']} frames")
    return files + [os.path.join(root, "corpus.json")]


def cmd_train_base(args, cfg: ToolConfig, manifest: Manifest) -> list[str]:
    tax = cfg.build_taxonomy()
    ds = _dataset(cfg, "train", args.data)
    manifest.add_inputs(_frame_files(ds))
    manifest.write()
    params, trace = train_base(ds, tax, cfg.run_config())
    ckpt = os.path.join(args.out_dir, "base.ckpt.json")
    save_checkpoint(ckpt, params, tax.fingerprint())
    tr = _write_json(os.path.join(args.out_dir, "base_trace.json"), [t.to_dict() for t in trace])
    if trace:
        print(f"base training: loss {trace[0].loss:.4f} -> {trace[-1].loss:.4f} over {len(trace)} epochs")
    return [ckpt, tr]


def cmd_sample_shots(args, cfg: ToolConfig, manifest: Manifest) -> list[str]:
    tax = cfg.build_taxonomy()
    ds = _dataset(cfg, "shot_pool", args.data)
    manifest.add_inputs([f.labels for f in ds.frames if f.labels])
    manifest.write()
    n = cfg.finetune.shots if args.n is None else args.n
    shots = sample_shots(ds, tax, n, cfg.seeds.shot_seed)
    path = _write_json(os.path.join(args.out_dir, "shots.json"), shots.to_dict())
    for c, names in shots.frames.items():
        short = f" (shortfall {shots.shortfall[c]})" if c in shots.shortfall else ""
        print(f"{tax.name(c)}: {len(names)} frames{short}")
    return [path]


def _flags_from_args(args, cfg: ToolConfig) -> AblationFlags:
    flags = cfg.ablation.build()
    if args.unbiased_ce is not None:
        flags = replace(flags, ce="unbiased" if args.unbiased_ce else "original")
    if args.ce is not None:
        flags = replace(flags, ce=args.ce)
    if args.kd is not None:
        flags = replace(flags, kd=args.kd)
    if args.lovasz is not None:
        flags = replace(flags, lovasz=args.lovasz)
    if args.ce_variant is not None:
        flags = replace(flags, ce_variant=args.ce_variant)
    return flags


def cmd_finetune(args, cfg: ToolConfig, manifest: Manifest) -> list[str]:
    tax = cfg.build_taxonomy()
    ds = _dataset(cfg, "shot_pool", args.data)
    with open(args.shots) as fh:
        shots = ShotSample.from_dict(json.load(fh))
    wanted = set(shots.frame_names())
    manifest.add_inputs([args.base, args.shots] + _frame_files(Dataset([f for f in ds.frames if f.name in wanted])))
    flags = _flags_from_args(args, cfg)
    manifest.doc["flags"] = {"ce": flags.ce, "kd": flags.kd, "lovasz": flags.lovasz, "ce_variant": flags.ce_variant}
    manifest.write()
    base = load_checkpoint(args.base, tax.fingerprint())
    run = cfg.run_config()
    run.flags = flags
    if args.freeze:
        run.finetune.freeze = args.freeze
    params, trace = finetune(base, shots, ds, tax, run)
    ckpt = os.path.join(args.out_dir, "finetuned.ckpt.json")
    save_checkpoint(ckpt, params, tax.fingerprint())
    tr = _write_json(os.path.join(args.out_dir, "finetune_trace.json"), [t.to_dict() for t in trace])
    if trace:
        print(f"fine-tuning: loss {trace[0].loss:.4f} -> {trace[-1].loss:.4f} over {len(trace)} epochs")
    return [ckpt, tr]


def cmd_predict(args, cfg: ToolConfig, manifest: Manifest) -> list[str]:
    tax = cfg.build_taxonomy()
    params = load_checkpoint(args.checkpoint, tax.fingerprint())
    proj = cfg.projection.build()
    to_raw = tax.class_to_raw()
    lut = {c: to_raw[c] for c in params.class_ids}
    if args.scan:
        scans = [(args.scan, os.path.join(args.out_dir, os.path.splitext(os.path.basename(args.scan))[0] + ".label"))]
    else:
        ds = _dataset(cfg, "eval", args.data)
        scans = []
        for f in ds.frames:
            seq, stem = f.name.split("/")
            d = os.path.join(args.out_dir, "sequences", seq, "predictions")
            os.makedirs(d, exist_ok=True)
            scans.append((f.scan, os.path.join(d, stem + ".label")))
    manifest.add_inputs([args.checkpoint] + [s for s, _ in scans])
    manifest.write()
    out = []
    for scan, dest in scans:
        pred = predict(params, read_scan(scan), proj)
        write_labels(dest, np.vectorize(lut.get, otypes=[np.int64])(pred) if pred.size else pred)
        out.append(dest)
    print(f"wrote {len(out)} prediction file(s)")
    return out


def _emit_report(args, cfg: ToolConfig, conf: ConfusionMatrix, manifest: Manifest, method: str) -> list[str]:
    tax = cfg.build_taxonomy()
    rep = report(conf, tax, cfg.evaluation.include_background, cfg.evaluation.absent, manifest.name)
    js = os.path.join(args.out_dir, "report.json")
    with open(js, "w") as fh:
        fh.write(rep.to_json())
    csv = os.path.join(args.out_dir, "report.csv")
    with open(csv, "w") as fh:
        fh.write(rep.table_per_class(method))
    print(rep.table_summary(method), end="")
    return [js, csv]


def cmd_eval(args, cfg: ToolConfig, manifest: Manifest) -> list[str]:
    tax = cfg.build_taxonomy()
    conf = ConfusionMatrix(tax.classes)
    if args.checkpoint:
        ds = _dataset(cfg, "eval", args.data)
        manifest.add_inputs([args.checkpoint] + _frame_files(ds))
        manifest.write()
        params = load_checkpoint(args.checkpoint, tax.fingerprint())
        conf = evaluate(params, ds, tax, cfg.projection.build())
        return _emit_report(args, cfg, conf, manifest, args.method or os.path.basename(args.checkpoint))
    if not args.pred:
        raise RunError("eval needs --checkpoint or --pred")
    pairs = _label_pairs(args.pred, args.truth or args.data or cfg.data.root, cfg.data.eval if not args.flat else None)
    manifest.add_inputs([p for pair in pairs for p in pair])
    manifest.write()
    known = tax.raw_to_class.keys()
    for pred_path, truth_path in pairs:
        count = os.path.getsize(truth_path) // 4
        truth = tax.map_raw(read_labels(truth_path, count, known))
        pred = tax.map_raw(read_labels(pred_path, count, known))
        conf.accumulate(pred, truth)
    return _emit_report(args, cfg, conf, manifest, args.method or "predictions")


def _label_pairs(pred: str, truth: Optional[str], sequences) -> list[tuple[str, str]]:
    """Match prediction and ground-truth .label files by sequence and stem."""
    if not truth:
        raise RunError("eval needs --truth (or data.root)")
    if os.path.isfile(pred):
        return [(pred, truth)]
    pairs = []
    if sequences is None:
        for p in sorted(glob.glob(os.path.join(pred, "*.label"))):
            pairs.append((p, os.path.join(truth, os.path.basename(p))))
    else:
        for seq in sequences:
            for p in sorted(glob.glob(os.path.join(pred, "sequences", seq, "predictions", "*.label"))):
                pairs.append((p, os.path.join(truth, "sequences", seq, "labels", os.path.basename(p))))
    if not pairs:
        raise RunError(f"no prediction files found under {pred}")
    missing = [t for _, t in pairs if not os.path.isfile(t)]
    if missing:
        raise FileNotFoundError(f"missing ground truth {missing[0]}")
    return pairs


def cmd_gradcheck(args, cfg: ToolConfig, manifest: Manifest) -> list[str]:
    manifest.write()
    seed = cfg.seeds.seed if args.seed is None else args.seed
    results = run_all(args.instances, args.model_instances, seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<64} max rel err {r.max_rel_error:.2e}")
    path = _write_json(os.path.join(args.out_dir, "gradcheck.json"), [
        {"name": r.name, "instances": r.instances, "max_rel_error": r.max_rel_error, "passed": r.passed}
        for r in results
    ])
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CheckFailed(f"{len(failed)} gradient check(s) failed", [path])
    return [path]


class CheckFailed(RuntimeError):
    def __init__(self, msg: str, outputs: list[str]):
        super().__init__(msg)
        self.outputs = outputs


# ------------------------------------------------------------ parser

def _bool_pair(p: argparse.ArgumentParser, name: str, help: str) -> None:
    dest = name.replace("-", "_")
    p.add_argument(f"--{name}", dest=dest, action="store_true", default=None, help=help)
    p.add_argument(f"--no-{name}", dest=dest, action="store_false")


def _common(suppress: bool) -> argparse.ArgumentParser:
    """Global flags; subcommand copies use SUPPRESS so they do not clobber values given earlier."""
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=d(None), help="INI configuration file")
    common.add_argument("--seed", type=int, default=d(None), help="override seeds.seed and seeds.shot_seed")
    common.add_argument("--out-dir", default=d("."), help="directory for outputs and the run manifest")
    common.add_argument("--set", action="append", default=d([]), metavar="SECTION.KEY=VALUE",
                        help="override a configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", default=d(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common(suppress=True)
    parser = argparse.ArgumentParser(prog="bgfss", description=__doc__, parents=[_common(suppress=False)])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("project", parents=[common], help="project one scan to a range image")
    p.add_argument("--scan", required=True)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("synth-gen", parents=[common], help="write a synthetic SemanticKITTI-format corpus")
    p.add_argument("--root", help="corpus directory (default <out-dir>/corpus)")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("train-base", parents=[common], help="train the base model")
    p.add_argument("--data", help="dataset root (default data.root)")
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("sample-shots", parents=[common], help="sample n frames per novel class")
    p.add_argument("--data")
    p.add_argument("--n", type=int, help="shots per class (default finetune.shots)")
    p.set_defaults(func=cmd_sample_shots)

    p = sub.add_parser("finetune", parents=[common], help="extend heads and fine-tune on the shots")
    p.add_argument("--data")
    p.add_argument("--base", required=True, help="base checkpoint")
    p.add_argument("--shots", required=True, help="shots.json from sample-shots")
    _bool_pair(p, "unbiased-ce", "unbiased (on) or original (off) cross-entropy")
    p.add_argument("--ce", choices=("off", "original", "unbiased"))
    p.add_argument("--ce-variant", choices=("paper", "current-model"))
    p.add_argument("--kd", choices=("off", "original", "unbiased"))
    _bool_pair(p, "lovasz", "include the Lovász-Softmax term")
    p.add_argument("--freeze", choices=("none", "backbone", "backbone+base_heads"))
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", parents=[common], help="write per-point predictions as .label files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--scan", help="predict a single scan instead of the eval split")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="mIoU report (overall / base / novel)")
    p.add_argument("--checkpoint", help="evaluate a model on the eval split")
    p.add_argument("--pred", help="prediction .label file or directory")
    p.add_argument("--truth", help="ground-truth .label file or dataset root")
    p.add_argument("--flat", action="store_true", help="--pred/--truth are flat directories of .label files")
    p.add_argument("--data")
    p.add_argument("--method", help="row name in the printed table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--model-instances", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides += [f"seeds.seed={args.seed}", f"seeds.shot_seed={args.seed}"]
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    os.makedirs(args.out_dir, exist_ok=True)
    manifest = Manifest(args.out_dir, args.command, argv, cfg)
    try:
        outputs = args.func(args, cfg, manifest)
    except CheckFailed as exc:
        manifest.finish(exc.outputs, status="failed", error=str(exc))
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    except OSError as exc:
        manifest.finish([], status="failed", error=f"io: {exc}")
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (GeometryError, TaxonomyError, EvaluationError, SceneError, ModelError, LossError) as exc:
        manifest.finish([], status="failed", error=f"data: {exc}")
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RunError, ProtocolError) as exc:
        manifest.finish([], status="failed", error=f"run: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    manifest.finish(outputs)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
