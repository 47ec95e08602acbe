"""Command-line entry point: ``probfuse {synth,train,cluster,eval,run}``.

Configuration is layered: built-in defaults, then ``--config`` JSON, then
flags.  Every command echoes the result to ``<out>/effective_config.json``.
Failures print one line starting with ``error:`` and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .metrics import PanopticMask, PQResult, uncertainty_stats
from .pipeline import (
    KERNEL_MODES,
    ConfigError,
    RunConfig,
    build_scene,
    cluster_scene,
    dump_json,
    evaluate_scene,
    train_scene,
    write_loss_log,
)
from .raster import RasterError, colorize, read_pgm16, write_pgm16, write_ppm
from .synth import Scene, load_scene, save_scene
from .trainer import load_checkpoint, save_checkpoint

log = logging.getLogger("probfuse")


class CliError(Exception):
    pass


class UsageError(CliError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# flag dest -> RunConfig field (train.* goes into the nested TrainConfig)
_FLAG_FIELDS = {
    "seed": "seed",
    "threads": "threads",
    "kernel": "kernel",
    "fixed_sigma2": "fixed_sigma2",
    "permute_ids": "permute_ids",
    "split_prob": "split_prob",
    "anchors": "anchors",
    "window": "window",
    "threshold": "threshold",
    "instances": "k_instances",
    "views": "n_views",
    "epochs": "train.epochs",
}


def _common(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", type=Path, default=S, help="JSON config file; flags override its values")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--threads", type=int, default=S, help="worker threads for clustering (default 1)")
    p.add_argument("--kernel", choices=KERNEL_MODES, default=S)
    p.add_argument("--fixed-sigma2", type=float, default=S, help="frozen variance of the deterministic arm")
    p.add_argument("--permute-ids", action="store_true", default=S)
    p.add_argument("--split-prob", type=float, default=S)
    p.add_argument("--anchors", type=int, default=S, help="boundary-noise anchors per view")
    p.add_argument("--window", type=int, default=S, help="boundary-noise window width (odd)")
    p.add_argument("--threshold", type=float, default=S, help="fixed prototype suppression threshold")
    p.add_argument("--instances", type=int, default=S)
    p.add_argument("--views", type=int, default=S)
    p.add_argument("--epochs", type=int, default=S)
    p.add_argument("-v", "--verbose", action="store_true", default=False)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="probfuse", description="Multi-view panoptic label fusion with Gaussian embeddings.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    _common(p)
    p = sub.add_parser("train", help="train the embedding table of a scene")
    p.add_argument("scene", type=Path)
    _common(p)
    p = sub.add_parser("cluster", help="extract prototypes and predict panoptic masks")
    p.add_argument("scene", type=Path)
    p.add_argument("checkpoint", type=Path)
    _common(p)
    p = sub.add_parser("eval", help="scene-level panoptic quality of predicted masks")
    p.add_argument("scene", type=Path)
    p.add_argument("predictions", type=Path)
    _common(p)
    p = sub.add_parser("run", help="synth, train, cluster and eval in one go")
    _common(p)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    data: dict = {}
    if "config" in args:
        try:
            data = json.loads(args.config.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"{args.config}: cannot read config ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
    for dest, key in _FLAG_FIELDS.items():
        if dest not in args:
            continue
        if key.startswith("train."):
            data.setdefault("train", {})[key[6:]] = getattr(args, dest)
        else:
            data[key] = getattr(args, dest)
    config = RunConfig.from_dict(data)
    config.validate()
    return config


def _prepare_out(out: Path, config: RunConfig) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        dump_json(config.to_dict(), out / "effective_config.json")
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc.strerror or exc}") from exc


def _save_predictions(masks: list[PanopticMask], scene: Scene, out: Path) -> None:
    for view, m in zip(scene.views, masks):
        write_pgm16(out / f"view_{view.view_id}_pred_inst.pgm", m.instance)
        write_pgm16(out / f"view_{view.view_id}_pred_sem.pgm", m.semantic)


def _load_predictions(scene: Scene, pred_dir: Path) -> list[PanopticMask]:
    masks = []
    for view in scene.views:
        maps = []
        for kind in ("inst", "sem"):
            path = pred_dir / f"view_{view.view_id}_pred_{kind}.pgm"
            if not path.exists():
                raise CliError(f"missing prediction for view {view.view_id}: {path}")
            try:
                arr = read_pgm16(path)
            except (OSError, RasterError) as exc:
                raise CliError(f"{path}: {exc}") from exc
            if arr.shape != (view.height, view.width):
                raise CliError(f"{path}: size does not match view {view.view_id}")
            maps.append(arr)
        masks.append(PanopticMask(semantic=maps[1], instance=maps[0]))
    return masks


def _report_pq(result: PQResult) -> str:
    return f"PQ={result.pq:.4f} SQ={result.sq:.4f} RQ={result.rq:.4f} (TP={result.n_tp} FP={result.n_fp} FN={result.n_fn})"


# --------------------------------------------------------------------------- commands


def cmd_synth(args, config: RunConfig) -> None:
    scene = build_scene(config)
    save_scene(scene, args.out / "scene")
    noise = scene.noise or {"permute": False, "split_prob": 0.0, "n_anchors": 0}
    print(
        f"scene: {scene.n_instances} instances, {len(scene.views)} views, {scene.n_points} points; "
        f"noise: permute={noise['permute']} split_prob={noise['split_prob']} anchors={noise['n_anchors']}"
        + (f" window={noise['window_w']}" if noise["n_anchors"] else "")
    )


def cmd_train(args, config: RunConfig) -> None:
    scene = load_scene(args.scene)
    table, history = train_scene(scene, config)
    save_checkpoint(table, args.out / "checkpoint.json")
    write_loss_log(history, args.out / "loss_log.csv")
    final = history[-1]["total"] if history else float("nan")
    print(f"trained {len(history)} epochs on {table.n_points} points; final total loss {final:.6f}")


def cmd_cluster(args, config: RunConfig) -> None:
    scene = load_scene(args.scene)
    table = load_checkpoint(args.checkpoint)
    protos, masks = cluster_scene(scene, table, config)
    protos.save(args.out / "prototypes.json")
    _save_predictions(masks, scene, args.out)
    print(f"prototypes: {len(protos)}  threshold: {protos.threshold:.6f}")


def cmd_eval(args, config: RunConfig) -> None:
    scene = load_scene(args.scene)
    masks = _load_predictions(scene, args.predictions)
    result = evaluate_scene(scene, masks)
    result.save(args.out / "metrics.json")
    print(_report_pq(result))


def cmd_run(args, config: RunConfig) -> None:
    out = args.out
    stage = "synth"
    try:
        scene = build_scene(config)
        save_scene(scene, out / "scene")
        stage = "train"
        table, history = train_scene(scene, config)
        save_checkpoint(table, out / "checkpoint.json")
        write_loss_log(history, out / "loss_log.csv")
        stage = "cluster"
        protos, masks = cluster_scene(scene, table, config)
        pred_dir = out / "predictions"
        pred_dir.mkdir(exist_ok=True)
        protos.save(out / "prototypes.json")
        _save_predictions(masks, scene, pred_dir)
        stage = "eval"
        result = evaluate_scene(scene, masks)
        result.save(out / "metrics.json")
        stage = "visualize"
        vis = out / "vis"
        vis.mkdir(exist_ok=True)
        for view, m in zip(scene.views, masks):
            write_ppm(vis / f"view_{view.view_id}_pred.ppm", colorize(m.instance))
            write_ppm(vis / f"view_{view.view_id}_gt.ppm", colorize(view.gt_instance_mask))
        if config.band_radius > 0:
            uncertainty_stats(scene, table, config.band_radius).to_csv(out / "uncertainty.csv")
    except CliError:
        raise
    except (ValueError, OSError, KeyError) as exc:
        raise CliError(f"stage {stage}: {exc}") from exc
    print(f"prototypes: {len(protos)}  threshold: {protos.threshold:.6f}")
    print(_report_pq(result))


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "cluster": cmd_cluster, "eval": cmd_eval, "run": cmd_run}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        config = resolve_config(args)
        _prepare_out(args.out, config)
        COMMANDS[args.command](args, config)
    except (CliError, ValueError, OSError, KeyError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
