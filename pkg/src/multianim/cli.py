"""Command-line entry point.

Subcommands::

    gen-data  --config C [--seed S] [--out DIR]
        Writes the train split and the three test splits under DIR
        (default: [data] root). Each split holds one directory per episode
        (manifest.json, reference.png, mask_k.png, envelope_k.png, gt_fff.png,
        driving.json, subject_k.json) plus index.json; DIR/splits.json lists
        the episode arguments.
    pretrain  --config C [--data DIR] [--seed S] [--out DIR]
        Text-to-video pretraining. Writes DIR/pretrain.ckpt and DIR/train_log.csv.
    train     --config C (--pretrained CKPT | --resume CKPT) [--data DIR] [--out DIR]
        LoRA fine-tuning. Writes DIR/finetune.ckpt and DIR/train_log.csv.
    infer     --config C --episode EP --checkpoint CKPT [--steps N] [--guidance W] [--out DIR]
        Writes DIR/gen_fff.png frames and DIR/preview.gif (ground truth | generated).
    eval      --config C --checkpoint CKPT [--data DIR] [--protocol P] [--out DIR]
        Writes DIR/<protocol>/metrics.csv, subjects.csv and per-episode
        frame grids (*_grid.png) and previews (*.gif).
    ablate    --config C [--data DIR] [--pretrained CKPT] [--out DIR]
        Trains the four variants and writes DIR/ablation.md, ablation.csv,
        summary.json plus each variant's checkpoint and reports.

Every run writes DIR/run_manifest.json first. stdout carries key=value lines
only; logs go to stderr. Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import Config, dump_config, load_config
from .errors import MultianimError

log = logging.getLogger("multianim")

COMMANDS = ("gen-data", "pretrain", "train", "infer", "eval", "ablate")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multianim",
        description=__doc__.split("\n\n")[0],
        epilog=__doc__.split("\n\n", 1)[1],
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")

    def common(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory (all artifacts go here)")
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
        return p

    common("gen-data", "generate the synthetic splits")
    p = common("pretrain", "text-to-video pretraining")
    p.add_argument("--data", help="dataset root (default: [data] root)")
    p = common("train", "LoRA fine-tuning with unbind/rebind")
    p.add_argument("--data", help="dataset root (default: [data] root)")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--pretrained", help="pretrain checkpoint to start from")
    g.add_argument("--resume", help="fine-tune checkpoint to continue")
    p = common("infer", "animate one episode")
    p.add_argument("--episode", required=True, help="episode directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, help="sampling steps")
    p.add_argument("--guidance", type=float, help="guidance scale")
    p = common("eval", "run the test protocols")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root (default: [data] root)")
    p.add_argument("--protocol", choices=("all", "aligned", "misaligned", "single_driver"), default="all")
    p.add_argument("--previews", type=int, help="episodes per protocol with previews (default all)")
    p = common("ablate", "train and compare the four ablation variants")
    p.add_argument("--data", help="dataset root (default: [data] root)")
    p.add_argument("--pretrained", help="reuse this pretrain checkpoint")
    p.add_argument("--probe-pairs", type=int, default=20, help="pairs for the text count probe")
    return parser


def emit(**values) -> None:
    for k, v in values.items():
        if isinstance(v, float):
            v = f"{v:.6f}"
        print(f"{k}={v}", flush=True)


def code_hash(cfg: Config) -> str:
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    h.update(dump_config(cfg).encode())
    return h.hexdigest()


def write_manifest(out: Path, args: argparse.Namespace, argv, cfg: Config) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "seed": cfg.train.seed,
        "config": cfg.to_dict(),
        "content_hash": code_hash(cfg),
        "out": str(out),
        "version": __version__,
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        if path.name == "run_manifest.json":
            continue
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def resolve_config(args) -> Config:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.command == "gen-data":
            cfg = cfg.replace(data={"train_seed": args.seed})
        else:
            cfg = cfg.replace(train={"seed": args.seed})
    return cfg


def out_dir(args, cfg: Config) -> Path:
    if args.out:
        return Path(args.out)
    if args.command == "gen-data":
        return Path(cfg.data.root)
    return Path("runs") / f"{args.command}-seed{cfg.train.seed}"


def _train_store(cfg: Config, data: str | None):
    from .model import EpisodeStore
    from .synthgen import read_dataset

    root = Path(data or cfg.data.root)
    return EpisodeStore(read_dataset(root / "train"))


def cmd_gen_data(args, cfg: Config, out: Path) -> None:
    from .synthgen import write_splits

    paths = write_splits(cfg.data, out, cfg.model.text_len)
    for split, path in paths.items():
        log.info("wrote %s", path)
    emit(data=out, dataset_hash=tree_hash(out))


def cmd_pretrain(args, cfg: Config, out: Path) -> None:
    from .trainer import Trainer, report_loss_drop

    trainer = Trainer(cfg, _train_store(cfg, args.data), "pretrain")
    trainer.run(log_csv=out / "train_log.csv")
    drop = report_loss_drop(trainer.history)
    ckpt = trainer.save(out / "pretrain.ckpt")
    emit(checkpoint=ckpt, steps=trainer.step, final_loss=trainer.history[-1]["loss"] if trainer.history else 0.0,
         loss_drop=drop)


def cmd_train(args, cfg: Config, out: Path) -> None:
    from .trainer import finetune_trainer, param_checksum, resume

    store = _train_store(cfg, args.data)
    trainer = resume(cfg, store, args.resume) if args.resume else finetune_trainer(cfg, store, args.pretrained)
    before = param_checksum(trainer.model.base_parameters())
    trainer.run(log_csv=out / "train_log.csv")
    after = param_checksum(trainer.model.base_parameters())
    if before != after:
        raise MultianimError("frozen base weights changed during fine-tuning")
    ckpt = trainer.save(out / "finetune.ckpt")
    counts = trainer.task_counts
    emit(checkpoint=ckpt, steps=trainer.step, animation_steps=counts["animation"], t2v_steps=counts["t2v"],
         base_checksum=after)


def cmd_infer(args, cfg: Config, out: Path) -> None:
    import numpy as np
    from PIL import Image

    from .evaluation import episode_iou, l1, psnr, sample_episode, ssim, write_gif
    from .synthgen import read_episode, to_uint8
    from .trainer import inference_config, load_model

    cfg = inference_config(cfg, args.checkpoint)
    ep = read_episode(args.episode)
    model = load_model(cfg, args.checkpoint)
    seed = cfg.train.seed
    video = sample_episode(model, ep, cfg, seed=seed, steps=args.steps, guidance=args.guidance)
    for f, frame in enumerate(video):
        Image.fromarray(to_uint8(frame)).save(out / f"gen_{f:03d}.png")
    has_gt = ep.gt_video is not None and ep.gt_video.size > 0
    write_gif(out / "preview.gif", np.concatenate([ep.gt_video, video], axis=2) if has_gt else video)
    emit(frames=len(video), out=out)
    if has_gt:
        emit(psnr_db=psnr(video, ep.gt_video), ssim=ssim(video, ep.gt_video), l1=l1(video, ep.gt_video),
             iou_mean=float(episode_iou(video, ep).mean()))


def cmd_eval(args, cfg: Config, out: Path) -> None:
    from .evaluation import PROTOCOLS, run_protocol
    from .trainer import inference_config

    cfg = inference_config(cfg, args.checkpoint)
    protocols = PROTOCOLS if args.protocol == "all" else (args.protocol,)
    data = Path(args.data or cfg.data.root)
    for p in protocols:
        rep = run_protocol(args.checkpoint, p, cfg, data_root=data, out_dir=out, model_tag=Path(args.checkpoint).stem,
                           seed=cfg.train.seed, previews=args.previews)
        agg = rep.aggregate()
        emit(**{f"{p}.{k}": v for k, v in agg.items() if k not in ("protocol", "model")})


def cmd_ablate(args, cfg: Config, out: Path) -> None:
    from .evaluation import run_ablation

    summary = run_ablation(cfg, data_root=Path(args.data or cfg.data.root), out_dir=out,
                           pretrain_ckpt=args.pretrained, probe_pairs=args.probe_pairs)
    for name, entry in summary["variants"].items():
        for p, agg in entry["protocols"].items():
            emit(**{f"{name}.{p}.psnr_db": agg["psnr_db"], f"{name}.{p}.iou_mean": agg["iou_mean"]})
    emit(report=out / "ablation.md")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        stream=sys.stderr,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        force=True,
    )
    try:
        cfg = resolve_config(args)
        out = out_dir(args, cfg)
        write_manifest(out, args, argv, cfg)
        HANDLERS[args.command](args, cfg, out)
    except MultianimError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level guard
        log.debug("unhandled error", exc_info=True)
        print(f"error: internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
