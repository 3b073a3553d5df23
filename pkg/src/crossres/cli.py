"""Command line entry point: ``crossres <command> [options]``.

Every command reads a run config (``--config``; desk profile when omitted),
works under ``--out`` and exits 0 on success. Failures print one line,
``error: <code>: <message>``, to stderr and exit non-zero.

Layout under ``--out``::

    config.ini                  canonical config actually used
    data/{train,val,test}/      datasets (see ``synthdata``)
    data/table.tsv              unification table in use
    denoiser.pt, pretrain.jsonl
    runs/<mode>/checkpoint.pt, runs/<mode>/metrics.jsonl
    predictions/<mode>/<split>/<scene>.npy
    reports/<mode>_<split>.csv
    ablation.csv, ablation.jsonl
"""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .config import MODES, RunConfig, desk_config
from .evaluation import ConfusionMatrix, accumulate, iou_report
from .experiments import SPLITS, dataset_hash, make_split, run_ablation, run_table, write_text
from .inference import predict_image
from .label_space import LabelError, load_table
from .synthdata import DatasetError, read_dataset, write_dataset
from .training import (CheckpointError, Trainer, append_jsonl, load_denoiser, pretrain_denoiser,
                       save_denoiser)

logger = logging.getLogger("crossres")


class CommandError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# helpers ---------------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else desk_config()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "mode", None):
        cfg.train.mode = args.mode
    if getattr(args, "steps", None) is not None:
        cfg.train.max_steps = args.steps
    return cfg.validate()


def _data_root(args) -> Path:
    return Path(args.data) if getattr(args, "data", None) else Path(args.out) / "data"


def _table(args, cfg):
    path = _data_root(args) / "table.tsv"
    if not cfg.data.table and path.is_file():
        return load_table(path)
    return run_table(cfg)


def _split(args, name: str):
    root = _data_root(args) / name
    if not root.exists():
        raise CommandError("missing_dataset", f"no dataset at {root}")
    return read_dataset(root)


def _denoiser_path(args) -> Path:
    return Path(args.denoiser) if args.denoiser else Path(args.out) / "denoiser.pt"


def _load_denoiser(args, cfg):
    path = _denoiser_path(args)
    if not path.is_file():
        raise CommandError("missing_denoiser", f"no denoiser checkpoint at {path}; run pretrain first")
    return load_denoiser(path, cfg)


def _run_dir(args, cfg) -> Path:
    return Path(args.out) / "runs" / cfg.train.mode


def _fresh_file(path: Path, force: bool) -> Path:
    if path.exists():
        if not force:
            raise CommandError("path_exists", f"{path} exists (use --force to overwrite)")
        path.unlink()
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# commands --------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = _config(args)
    root = _data_root(args)
    if root.exists() and any(root.iterdir()):
        if not args.force:
            raise CommandError("path_exists", f"{root} is not empty (use --force to overwrite)")
        shutil.rmtree(root)
    table = run_table(cfg)
    root.mkdir(parents=True, exist_ok=True)
    table.save(root / "table.tsv")
    cfg.save(Path(args.out) / "config.ini")
    for split in SPLITS:
        scenes = make_split(cfg, split, table)
        write_dataset(scenes, root / split)
        print(f"{split}\tscenes={len(scenes)}\thash={dataset_hash(scenes)[:16]}\tpath={root / split}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    scenes = _split(args, "train")
    out = Path(args.out)
    ckpt = _fresh_file(_denoiser_path(args), args.force)
    log_path = _fresh_file(out / "pretrain.jsonl", True)
    net, losses = pretrain_denoiser(cfg, scenes, lambda r: append_jsonl(log_path, r))
    save_denoiser(net, cfg, ckpt, losses)
    first = f"{losses[0]:.6f}" if losses else "nan"
    last = f"{losses[-1]:.6f}" if losses else "nan"
    print(f"pretrain\tsteps={len(losses)}\tfirst_loss={first}\tlast_loss={last}\tcheckpoint={ckpt}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    scenes = _split(args, "train")
    table = _table(args, cfg)
    denoiser = None if cfg.train.mode == "transformer_only" else _load_denoiser(args, cfg)
    run = _run_dir(args, cfg)
    ckpt = run / "checkpoint.pt"
    metrics = run / "metrics.jsonl"
    if args.resume:
        if not ckpt.is_file():
            raise CommandError("missing_checkpoint", f"nothing to resume at {ckpt}")
        trainer = Trainer.load(ckpt, cfg, scenes, table, denoiser)
    else:
        _fresh_file(ckpt, args.force)
        _fresh_file(metrics, True)
        trainer = Trainer(cfg, scenes, table, denoiser)
    records = trainer.run(log=lambda r: append_jsonl(metrics, r))
    trainer.save(ckpt)
    last = records[-1]["loss"] if records else float("nan")
    print(f"train\tmode={cfg.train.mode}\tstep={trainer.step_count}\tloss={last:.6f}\tcheckpoint={ckpt}")
    return 0


def _trainer_from(args, cfg):
    table = _table(args, cfg)
    path = Path(args.checkpoint) if args.checkpoint else _run_dir(args, cfg) / "checkpoint.pt"
    if not path.is_file():
        raise CommandError("missing_checkpoint", f"no training checkpoint at {path}")
    denoiser = None if cfg.train.mode == "transformer_only" else _load_denoiser(args, cfg)
    # the checkpoint carries the weights; scenes are only needed for training
    return Trainer.load(path, cfg, [], table, denoiser), table


def cmd_predict(args) -> int:
    cfg = _config(args)
    trainer, table = _trainer_from(args, cfg)
    window = cfg.train.crop_size
    if args.image:
        image = np.load(args.image, allow_pickle=False)
        if image.ndim != 3 or image.shape[2] != 3:
            raise CommandError("bad_input", f"{args.image}: expected an (H, W, 3) array, got {image.shape}")
        dest = _fresh_file(Path(args.out) / "predictions" / cfg.train.mode / Path(args.image).name, args.force)
        np.save(dest, predict_image(trainer.predict_probs, image.astype(np.float32), window, table))
        print(f"predict\timages=1\tpath={dest}")
        return 0
    scenes = _split(args, args.split)
    dest = Path(args.out) / "predictions" / cfg.train.mode / args.split
    dest.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        np.save(dest / f"{s.scene_id}.npy", predict_image(trainer.predict_probs, s.image, window, table))
    print(f"predict\tmode={cfg.train.mode}\tsplit={args.split}\timages={len(scenes)}\tpath={dest}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    table = _table(args, cfg)
    scenes = _split(args, args.split)
    if not scenes:
        raise CommandError("no_scenes", "no scenes")
    pred_dir = Path(args.predictions) if args.predictions else \
        Path(args.out) / "predictions" / cfg.train.mode / args.split
    cm = ConfusionMatrix(table.target.num_classes)
    skipped = 0
    for s in scenes:
        f = pred_dir / f"{s.scene_id}.npy"
        if not f.is_file():
            print(f"skip\tscene={s.scene_id}\treason=missing prediction {f}", file=sys.stderr)
            skipped += 1
            continue
        pred = np.load(f, allow_pickle=False)
        if pred.shape != s.hr_labels.shape:
            print(f"skip\tscene={s.scene_id}\treason=shape {pred.shape} != {s.hr_labels.shape}", file=sys.stderr)
            skipped += 1
            continue
        cm = accumulate(cm, pred, s.hr_labels, table.target.ignore_id)
    if cm.total == 0:
        raise CommandError("no_scenes", "no scenes could be evaluated")
    report = iou_report(cm)
    dest = Path(args.report) if args.report else Path(args.out) / "reports" / f"{cfg.train.mode}_{args.split}.csv"
    write_text(dest, report.to_csv(table.target.class_names))
    print(f"{report.summary()}\tscenes={len(scenes) - skipped}\tskipped={skipped}\treport={dest}")
    if skipped:
        raise CommandError("skipped_scenes", f"{skipped} scene(s) skipped")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    train, test = _split(args, "train"), _split(args, "test")
    if not test:
        raise CommandError("no_scenes", "no scenes")
    table = _table(args, cfg)
    if _denoiser_path(args).is_file():
        denoiser = _load_denoiser(args, cfg)
    else:
        denoiser, losses = pretrain_denoiser(cfg, train)
        save_denoiser(denoiser, cfg, _denoiser_path(args), losses)
    seeds = args.seeds if args.seeds else list(cfg.train.ablation_seeds)
    out = Path(args.out)
    csv = _fresh_file(out / "ablation.csv", args.force)
    log = _fresh_file(out / "ablation.jsonl", True)
    result = run_ablation(cfg, train, test, table, denoiser, seeds, log=lambda r: append_jsonl(log, r))
    write_text(csv, result.to_csv())
    for r in result.rows:
        print(f"{r.mode}\tmedian_miou={r.median:.6f}\tseeds={len(r.seeds)}")
    print(f"ablation\tpath={csv}")
    return 0


# parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run config (desk profile when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default=".", help="working directory for all artifacts")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--data", help="dataset root (default <out>/data)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="crossres", description="Cross-resolution land-cover segmentation.")
    p.add_argument("--version", action="version", version=f"crossres {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write train/val/test synthetic datasets")

    sp = sub.add_parser("pretrain", parents=[common], help="pretrain and freeze the denoiser")
    sp.add_argument("--denoiser", help="checkpoint path (default <out>/denoiser.pt)")

    sp = sub.add_parser("train", parents=[common], help="train the dual-branch model")
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--steps", type=int, help="override train.max_steps")
    sp.add_argument("--denoiser")
    sp.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")

    sp = sub.add_parser("predict", parents=[common], help="tiled prediction in the target label space")
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--checkpoint", help="training checkpoint (default <out>/runs/<mode>/checkpoint.pt)")
    sp.add_argument("--denoiser")
    sp.add_argument("--split", choices=SPLITS, default="test")
    sp.add_argument("--image", help="single (H, W, 3) .npy image in [0, 1] instead of a split")

    sp = sub.add_parser("evaluate", parents=[common], help="mIoU of saved predictions against a split")
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--split", choices=SPLITS, default="test")
    sp.add_argument("--predictions", help="directory of <scene>.npy predictions")
    sp.add_argument("--report", help="CSV destination")

    sp = sub.add_parser("ablate", parents=[common], help="all four modes over several seeds")
    sp.add_argument("--denoiser")
    sp.add_argument("--seeds", type=int, nargs="+", help="override train.ablation_seeds")
    return p


COMMANDS = {
    "generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train,
    "predict": cmd_predict, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
}


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CommandError as exc:
        code = exc.code
        msg = exc
    except (CheckpointError, DatasetError, LabelError) as exc:
        code, msg = type(exc).__name__.replace("Error", "").lower() + "_error", exc
    except (ValueError, OSError) as exc:
        code, msg = "invalid", exc
    print(f"error: {code}: {_one_line(msg)}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
