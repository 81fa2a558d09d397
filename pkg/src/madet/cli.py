"""Command-line entry point: synth, train, predict, evaluate.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import dataset, detection, evaluation, imageio, network
from .config import RunConfig, detect_from_config, load_config
from .errors import (ConfigError, DataError, GeometryError, MadetError,
                     NumericError)
from .training import train_detector


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--threads", type=int, help="worker threads for inference")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration key")
    p.add_argument("--dump-config", action="store_true",
                   help="print the effective configuration and exit")


def build_parser() -> _Parser:
    p = _Parser(prog="madet",
                description="pixel-wise microaneurysm detection toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic annotated corpus")
    sp.add_argument("--n", type=int, help="number of images (synth.count)")
    _add_common(sp)

    tp = sub.add_parser("train", help="train a detector on a labeled corpus")
    tp.add_argument("--manifest", required=True,
                    help="manifest of image,label[,mask] triples")
    _add_common(tp)

    pp = sub.add_parser("predict", help="run detection on one image")
    pp.add_argument("--image", required=True)
    pp.add_argument("--checkpoint", required=True)
    _add_common(pp)

    ep = sub.add_parser("evaluate", help="score a labeled corpus")
    ep.add_argument("--manifest", required=True)
    ep.add_argument("--checkpoint")
    ep.add_argument("--maps-dir",
                    help="reuse probability maps written by predict instead "
                         "of running inference")
    _add_common(ep)
    return p


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        k, _, v = item.partition("=")
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.threads is not None:
        overrides["threads"] = str(args.threads)
    if args.out is not None:
        overrides["out"] = args.out
    if getattr(args, "n", None) is not None:
        overrides["synth.count"] = str(args.n)
    return load_config(args.config, overrides)


def cmd_synth(cfg: RunConfig) -> int:
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    n = cfg["synth.count"]
    lines = []
    for i in range(n):
        img = dataset.synth_generate(dataset.SyntheticConfig(
            cfg["synth.image_size"], cfg["synth.ma_count"],
            cfg["synth.vessel_count"], cfg["synth.hemorrhage_count"],
            cfg["synth.noise_level"], seed=cfg["seed"] + i))
        stem = f"synth_{i:03d}"
        dataset.write_annotated(img,
                                os.path.join(out, f"{stem}.ppm"),
                                os.path.join(out, f"{stem}_label.pgm"),
                                os.path.join(out, f"{stem}_mask.pgm"))
        lines.append(f"{stem}.ppm,{stem}_label.pgm,{stem}_mask.pgm")
    manifest = os.path.join(out, "manifest.txt")
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")
    print(f"wrote {n} synthetic images and {manifest}")
    return 0


def cmd_train(cfg: RunConfig, manifest: str) -> int:
    images = dataset.load_corpus(manifest)
    result = train_detector(cfg, images, cfg["out"])
    print(f"trained {result.batches_run} batches, final loss "
          f"{result.final_loss:.4f}; checkpoint at {result.checkpoint_path}")
    return 0


def cmd_predict(cfg: RunConfig, image_path: str, checkpoint_path: str) -> int:
    spec, state = network.load_checkpoint(checkpoint_path)
    image = imageio.read_image(image_path)
    pmap, regions = detection.detect(image, state, spec, detect_from_config(cfg))
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    stem = os.path.splitext(os.path.basename(image_path))[0]
    map_path = os.path.join(out, f"{stem}.map")
    detection.write_prob_map(map_path, pmap,
                             os.path.join(out, f"{stem}_map.pgm"))
    regions_path = os.path.join(out, f"{stem}.regions.txt")
    detection.write_regions(regions_path, regions, image_path)
    print(f"{len(regions)} region(s) accepted; map at {map_path}")
    return 0


def _metric_table(rows: list[tuple]) -> str:
    header = ("image", "TP", "FP", "FN", "TN", "SE", "SP", "PRED", "AC",
              "decision")
    table = [header] + [tuple(str(c) for c in r) for r in rows]
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
                     for r in table)


def cmd_evaluate(cfg: RunConfig, manifest: str, checkpoint_path: str | None,
                 maps_dir: str | None) -> int:
    if (checkpoint_path is None) == (maps_dir is None):
        raise ConfigError("evaluate needs exactly one of --checkpoint or "
                          "--maps-dir")
    images = dataset.load_corpus(manifest)
    if not images:
        raise DataError(f"manifest {manifest} lists no images")
    dcfg = detect_from_config(cfg)
    state = spec = None
    if checkpoint_path is not None:
        spec, state = network.load_checkpoint(checkpoint_path)

    maps, masks, rows = [], [], []
    pooled = evaluation.ConfusionCounts(0, 0, 0, 0)
    decisions = []
    for img in images:
        if maps_dir is not None:
            stem = os.path.splitext(img.name)[0]
            pmap = detection.read_prob_map(os.path.join(maps_dir, f"{stem}.map"))
            mask = img.fov_mask
            fg = (pmap.prob >= dcfg.post.prob_threshold) & mask
            regions = detection.region_filter(
                detection.connected_components(fg), dcfg.post)
        else:
            pmap, regions = detection.detect(img.rgb, state, spec, dcfg)
            mask = detection.compute_mask(img.rgb, dcfg.mask)
        predicted = np.zeros(mask.shape, dtype=bool)
        for r in regions:
            predicted[r.pixels[:, 0], r.pixels[:, 1]] = True
        counts = evaluation.confusion(predicted, img.labels, mask)
        pooled = pooled + counts
        rep = evaluation.metrics(counts)
        decision = evaluation.image_decision(regions,
                                             cfg["eval.min_regions_for_dr"])
        decisions.append(decision)
        rows.append((img.name, counts.tp, counts.fp, counts.fn, counts.tn,
                     *rep.row(), decision))
        maps.append(pmap)
        masks.append(mask)

    rep = evaluation.metrics(pooled)
    rows.append(("POOLED", pooled.tp, pooled.fp, pooled.fn, pooled.tn,
                 *rep.row(), f"{decisions.count(evaluation.DR)} DR"))
    roc = evaluation.roc_auc_pooled([m.prob for m in maps],
                                    [i.labels for i in images], masks)
    froc = evaluation.froc_sweep(maps, [i.labels for i in images],
                                 cfg["eval.froc_thresholds"], dcfg.post)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    evaluation.write_roc_csv(os.path.join(out, "roc.csv"), roc)
    evaluation.write_froc_csv(os.path.join(out, "froc.csv"), froc)
    table = _metric_table(rows)
    report = (f"{table}\n\npixel AUC (pooled): {roc.auc:.4f}\n")
    with open(os.path.join(out, "metrics.txt"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(report)
    print(report, end="")
    return 0


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _config_from_args(args)
        if args.dump_config:
            print(cfg.dump(), end="")
            return 0
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.manifest)
        if args.command == "predict":
            return cmd_predict(cfg, args.image, args.checkpoint)
        return cmd_evaluate(cfg, args.manifest, args.checkpoint, args.maps_dir)
    except (ConfigError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except MadetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
