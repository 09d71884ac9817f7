"""Command-line entry point.

Subcommands cover the whole pipeline: phantom generation, two-stage
training, context-combiner training, ensemble prediction with flip
averaging, post-processing to label volumes, and evaluation reports.
Every command writes a manifest recording the command, a deterministic
hash of its effective configuration, the seed, and the files it read and
wrote, so a run can be reproduced from the manifest alone.

Exit codes: 0 success, 1 operational/validation failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

import numpy as np

from . import __version__
from .architecture import ArchConfig, TandemModel, load_model, save_model
from .checkpoint import save_checkpoint
from .errors import ConfigError, TandemsegError, UsageError, ValidationError
from .gradcheck import format_results as _format_gradcheck
from .gradcheck import run_gradcheck
from .inference import PredictionVolume, predict_volume
from .metrics import (MetricsConfig, aggregate, evaluate_case, write_case_csv,
                      write_reports_json, write_summary_csv)
from .phantom import PhantomSpec, gen_phantom_batch
from .postprocess import PostprocessConfig, finalize
from .selftest import format_results as _format_selftest
from .selftest import run_selftest
from .training import TrainConfig, train, train_context_combiner, write_loss_csv
from .volume import SegVolume, Volume, read_volume, write_volume

IMG_SUFFIX = "_img.segv"
LAB_SUFFIX = "_lab.segv"
LIVER_SUFFIX = "_liver.segv"
LESION_SUFFIX = "_lesion.segv"
PRED_SUFFIX = "_pred.segv"


# -- manifest plumbing -----------------------------------------------------------


def _config_hash(obj) -> str:
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _write_manifest(out_dir: str | None, command: str, config_obj, seed,
                    inputs, outputs, started: float) -> str | None:
    manifest = {
        "command": command,
        "config_sha256": _config_hash(config_obj),
        "seed": seed,
        "inputs": sorted(str(p) for p in inputs if p),
        "outputs": sorted(str(p) for p in outputs if p),
        "version": __version__,
        "wall_clock_seconds": round(time.monotonic() - started, 3),
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    if out_dir is None:
        sys.stdout.write(text)
        return None
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)
    return path


def _load_json_file(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def _read_text(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


# -- file discovery --------------------------------------------------------------


def _by_suffix(directory: str, suffix: str) -> dict[str, str]:
    if not os.path.isdir(directory):
        raise ConfigError(f"not a directory: {directory}")
    found = {}
    for name in sorted(os.listdir(directory)):
        if name.endswith(suffix):
            found[name[: -len(suffix)]] = os.path.join(directory, name)
    return found


def _load_dataset(data_dir: str) -> tuple[list[tuple[Volume, SegVolume]], list[str]]:
    imgs = _by_suffix(data_dir, IMG_SUFFIX)
    labs = _by_suffix(data_dir, LAB_SUFFIX)
    stems = sorted(set(imgs) & set(labs))
    if not stems:
        raise ConfigError(
            f"no paired *{IMG_SUFFIX}/*{LAB_SUFFIX} volumes found in {data_dir}")
    unpaired = sorted(set(imgs) ^ set(labs))
    if unpaired:
        raise ConfigError(f"unpaired volumes in {data_dir}: {unpaired}")
    dataset = []
    paths = []
    for stem in stems:
        vol = read_volume(imgs[stem])
        seg = read_volume(labs[stem])
        if not isinstance(vol, Volume):
            raise ValidationError(f"{imgs[stem]}: expected an image volume, found labels")
        if not isinstance(seg, SegVolume):
            raise ValidationError(f"{labs[stem]}: expected a label volume, found an image")
        dataset.append((vol, seg))
        paths += [imgs[stem], labs[stem]]
    return dataset, paths


def _read_image(path: str) -> Volume:
    vol = read_volume(path)
    if not isinstance(vol, Volume):
        raise ValidationError(f"{path}: expected an image volume, found labels")
    return vol


def _read_labels(path: str) -> SegVolume:
    seg = read_volume(path)
    if not isinstance(seg, SegVolume):
        raise ValidationError(f"{path}: expected a label volume, found an image")
    return seg


def _mapper(jobs: int):
    """One code path for serial and parallel execution: parallelism may only
    change scheduling, never results."""
    if jobs < 1:
        raise UsageError(f"--jobs must be >= 1, got {jobs}")
    if jobs == 1:
        return map, None
    pool = ThreadPoolExecutor(max_workers=jobs)
    return pool.map, pool


# -- subcommands -----------------------------------------------------------------


def _cmd_gen_phantom(args) -> int:
    started = time.monotonic()
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    spec = PhantomSpec.from_json(_read_text(args.spec)) if args.spec else PhantomSpec()
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for i, (img, lab) in enumerate(gen_phantom_batch(spec, args.count)):
        img_path = os.path.join(args.out, f"vol{i:03d}{IMG_SUFFIX}")
        lab_path = os.path.join(args.out, f"vol{i:03d}{LAB_SUFFIX}")
        write_volume(img, img_path)
        write_volume(lab, lab_path)
        outputs += [img_path, lab_path]
    _write_manifest(args.out, "gen-phantom", json.loads(spec.to_json()), spec.seed,
                    [args.spec], outputs, started)
    return 0


def _cmd_train(args) -> int:
    started = time.monotonic()
    config = (TrainConfig.from_dict(_load_json_file(args.config))
              if args.config else TrainConfig())
    arch = ArchConfig.from_json(_read_text(args.arch)) if args.arch else ArchConfig()
    dataset, input_paths = _load_dataset(args.data)
    model = TandemModel(arch, seed=config.seed)
    result = train(model, dataset, config)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for ck in result.checkpoints:
        path = os.path.join(args.out, f"stage{ck.stage}_epoch{ck.epoch:03d}.ckpt")
        save_checkpoint(path, ck.arrays, meta={
            "arch_config": ck.arch_config,
            "stage": str(ck.stage),
            "epoch": str(ck.epoch),
            "val_loss": "" if ck.val_loss is None else repr(ck.val_loss),
        })
        outputs.append(path)
    best = result.best
    if best is not None:
        model.load_state(best.arrays)
        best_path = os.path.join(args.out, "model_best.ckpt")
        save_model(model, best_path, meta={
            "stage": str(best.stage),
            "epoch": str(best.epoch),
            "val_loss": "" if best.val_loss is None else repr(best.val_loss),
        })
        outputs.append(best_path)
    csv_path = os.path.join(args.out, "loss.csv")
    write_loss_csv(result.history, csv_path)
    outputs.append(csv_path)
    _write_manifest(args.out, "train",
                    {"train": config.to_dict(), "arch": arch.to_dict()},
                    config.seed, input_paths + [args.config, args.arch],
                    outputs, started)
    return 0


def _cmd_train_context(args) -> int:
    started = time.monotonic()
    config = (TrainConfig.from_dict(_load_json_file(args.config))
              if args.config else TrainConfig())
    dataset, input_paths = _load_dataset(args.data)
    model = load_model(args.model)
    result = train_context_combiner(model, dataset, config)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    best = result.best
    if best is not None:
        by_name = dict(model.context_named_parameters())
        for name, arr in best.arrays.items():
            np.copyto(by_name[name].data, arr.astype(by_name[name].data.dtype))
        combined_path = os.path.join(args.out, "model_context.ckpt")
        save_model(model, combined_path, meta={
            "context_epoch": str(best.epoch),
            "context_val_loss": "" if best.val_loss is None else repr(best.val_loss),
        })
        outputs.append(combined_path)
    csv_path = os.path.join(args.out, "context_loss.csv")
    write_loss_csv(result.history, csv_path)
    outputs.append(csv_path)
    _write_manifest(args.out, "train-context", {"train": config.to_dict()},
                    config.seed, input_paths + [args.config, args.model],
                    outputs, started)
    return 0


def _cmd_predict(args) -> int:
    started = time.monotonic()
    models = [load_model(p) for p in args.model]
    images = _by_suffix(args.input, IMG_SUFFIX)
    if not images:
        raise ConfigError(f"no *{IMG_SUFFIX} volumes found in {args.input}")
    os.makedirs(args.out, exist_ok=True)
    stems = sorted(images)

    def run_one(stem: str) -> PredictionVolume:
        vol = _read_image(images[stem])
        return predict_volume(models if len(models) > 1 else models[0], vol,
                              context=args.context, jobs=1)

    mapper, pool = _mapper(args.jobs)
    try:
        predictions = list(mapper(run_one, stems))
    finally:
        if pool is not None:
            pool.shutdown()
    outputs = []
    for stem, pred in zip(stems, predictions):
        liver_path = os.path.join(args.out, f"{stem}{LIVER_SUFFIX}")
        lesion_path = os.path.join(args.out, f"{stem}{LESION_SUFFIX}")
        write_volume(Volume(pred.liver_prob, pred.spacing), liver_path)
        write_volume(Volume(pred.lesion_prob, pred.spacing), lesion_path)
        outputs += [liver_path, lesion_path]
    _write_manifest(args.out, "predict",
                    {"models": sorted(args.model), "context": bool(args.context)},
                    None, list(images.values()) + list(args.model), outputs, started)
    return 0


def _cmd_postprocess(args) -> int:
    started = time.monotonic()
    config = (PostprocessConfig(**_load_json_file(args.config))
              if args.config else PostprocessConfig())
    config.validate()
    livers = _by_suffix(args.pred, LIVER_SUFFIX)
    lesions = _by_suffix(args.pred, LESION_SUFFIX)
    stems = sorted(set(livers) & set(lesions))
    if not stems:
        raise ConfigError(
            f"no paired *{LIVER_SUFFIX}/*{LESION_SUFFIX} volumes found in {args.pred}")
    os.makedirs(args.out, exist_ok=True)
    outputs, inputs = [], []
    for stem in stems:
        liver = _read_image(livers[stem])
        lesion = _read_image(lesions[stem])
        if liver.spacing != lesion.spacing:
            raise ValidationError(
                f"{stem}: liver/lesion spacing mismatch {liver.spacing} vs {lesion.spacing}")
        pred = PredictionVolume(liver.data, lesion.data, liver.spacing)
        seg = finalize(pred, config)
        out_path = os.path.join(args.out, f"{stem}{PRED_SUFFIX}")
        write_volume(seg, out_path)
        outputs.append(out_path)
        inputs += [livers[stem], lesions[stem]]
    _write_manifest(args.out, "postprocess", asdict(config), None,
                    inputs + [args.config], outputs, started)
    return 0


def _find_label_files(directory: str, prefer: str) -> dict[str, str]:
    """Label volumes for evaluation; ``prefer`` wins when a stem has both
    a *_pred and a *_lab file."""
    other = LAB_SUFFIX if prefer == PRED_SUFFIX else PRED_SUFFIX
    found = _by_suffix(directory, other)
    found.update(_by_suffix(directory, prefer))
    return found


def _cmd_evaluate(args) -> int:
    started = time.monotonic()
    config = MetricsConfig()
    preds = _find_label_files(args.pred, prefer=PRED_SUFFIX)
    gts = _find_label_files(args.gt, prefer=LAB_SUFFIX)
    if not gts:
        raise ConfigError(f"no label volumes found in {args.gt}")
    missing = sorted(set(gts) - set(preds))
    if missing:
        raise ConfigError(f"no prediction for cases: {missing}")
    stems = sorted(gts)

    def run_one(stem: str):
        return evaluate_case(_read_labels(preds[stem]), _read_labels(gts[stem]),
                             config, case_id=stem)

    mapper, pool = _mapper(args.jobs)
    try:
        reports = list(mapper(run_one, stems))
    finally:
        if pool is not None:
            pool.shutdown()
    summary = aggregate(reports)
    os.makedirs(args.out, exist_ok=True)
    case_csv = os.path.join(args.out, "case_metrics.csv")
    summary_csv = os.path.join(args.out, "summary.csv")
    reports_json = os.path.join(args.out, "reports.json")
    write_case_csv(reports, case_csv)
    write_summary_csv(summary, summary_csv)
    write_reports_json(reports, summary, reports_json)
    _write_manifest(args.out, "evaluate", asdict(config), None,
                    [preds[s] for s in stems] + [gts[s] for s in stems],
                    [case_csv, summary_csv, reports_json], started)
    return 0


def _cmd_gradcheck(args) -> int:
    started = time.monotonic()
    results = run_gradcheck()
    text = _format_gradcheck(results)
    overall = max((r.max_rel_error for r in results), default=0.0)
    text += f"\noverall max relative error: {overall:.3e}"
    print(text)
    outputs = []
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report = os.path.join(args.out, "gradcheck.txt")
        with open(report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        outputs.append(report)
    _write_manifest(args.out, "gradcheck", {"cases": [r.name for r in results]},
                    None, [], outputs, started)
    return 0 if all(r.passed for r in results) else 1


def _cmd_selftest(args) -> int:
    started = time.monotonic()
    results = run_selftest()
    text = _format_selftest(results)
    print(text)
    outputs = []
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        report = os.path.join(args.out, "selftest.txt")
        with open(report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
        outputs.append(report)
    _write_manifest(args.out, "selftest", {"checks": [r.name for r in results]},
                    None, [], outputs, started)
    return 0 if all(r.passed for r in results) else 1


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tandemseg",
        description="Cascaded liver/lesion segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantom", help="generate synthetic volume pairs")
    p.add_argument("--spec", default=None, help="phantom spec JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1, help="number of volumes")
    p.set_defaults(func=_cmd_gen_phantom)

    p = sub.add_parser("train", help="run the two-stage training schedule")
    p.add_argument("--data", required=True, help="directory of *_img/*_lab pairs")
    p.add_argument("--config", default=None, help="training config JSON file")
    p.add_argument("--arch", default=None, help="architecture config JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("train-context", help="train the 3-slice context combiner")
    p.add_argument("--data", required=True, help="directory of *_img/*_lab pairs")
    p.add_argument("--model", required=True, help="base model checkpoint")
    p.add_argument("--config", default=None, help="training config JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_train_context)

    p = sub.add_parser("predict", help="write probability volumes")
    p.add_argument("--model", action="append", required=True,
                   help="model checkpoint (repeat for an ensemble)")
    p.add_argument("--input", required=True, help="directory of *_img volumes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--context", action="store_true",
                   help="use the 3-slice context combiner for lesions")
    p.add_argument("--jobs", type=int, default=1, help="volume-level parallelism")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("postprocess", help="threshold probabilities into labels")
    p.add_argument("--pred", required=True, help="directory of *_liver/*_lesion volumes")
    p.add_argument("--config", default=None, help="post-processing config JSON file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_postprocess)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted label volumes")
    p.add_argument("--gt", required=True, help="directory of ground-truth label volumes")
    p.add_argument("--out", required=True, help="output directory for reports")
    p.add_argument("--jobs", type=int, default=1, help="case-level parallelism")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--out", default=None, help="optional report directory")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("selftest", help="run built-in consistency checks")
    p.add_argument("--out", default=None, help="optional report directory")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else int(exc.code)
    try:
        return int(args.func(args) or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TandemsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
