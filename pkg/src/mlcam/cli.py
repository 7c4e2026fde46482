"""``mlcam`` command line: synth, train, eval, ablate, render."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from mlcam import ablation, network
from mlcam.checkpoint import load_checkpoint, save_checkpoint
from mlcam.config import RunConfig, build_config, read_config_file
from mlcam.data import SegSample, export_dataset, generate, load_images, read_image, split_by_group
from mlcam.errors import ConfigError, DataError, MLCAMError
from mlcam.fusion import FusionResult, fuse, heatmap_pixels, resolve_threshold, save_fusion
from mlcam.metrics import score, write_metric_rows
from mlcam.network import Network, init_network
from mlcam.trainer import accuracy, train, write_history


# flag -> RunConfig field; every flag is also settable from the config file
FLAGS = {
    "seed": "seed",
    "out": "out",
    "data": "data",
    "mode": "mode",
    "threshold": "threshold",
    "variants": "variants",
    "max_iterations": "max_iterations",
    "features": "features",
    "fractions": "fractions",
    "checkpoint": "checkpoint",
    "image": "image",
    "subset": "subset",
    "head": "head",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mlcam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("synth", "generate a synthetic dataset directory"),
        ("train", "train a network on a dataset directory"),
        ("eval", "segment a dataset split and score it"),
        ("ablate", "benchmark variants M1..M10"),
        ("render", "render heatmap, mask and overlay for one image"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed")
        p.add_argument("--out")
        p.add_argument("--data", help="dataset directory (manifest.csv, images/, masks/)")
        p.add_argument("--mode", help="intermediate or restrictive")
        p.add_argument("--threshold", help="custom threshold in [0, 1]; overrides --mode")
        p.add_argument("--variants", help="comma list, e.g. M2,M7")
        p.add_argument("--max-iterations", dest="max_iterations")
        p.add_argument("--features", help="synthetic feature scale: intermediate or restrictive")
        p.add_argument("--fractions", help="train,val,test group fractions")
        p.add_argument("--checkpoint")
        p.add_argument("--image")
        p.add_argument("--subset", help="train, val, test or all")
        p.add_argument("--head", help="mlcam, mlgap or cam")
        p.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key"
        )
    return parser


def parse_config(args: argparse.Namespace) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip().replace("-", "_")] = value
    for attr, key in FLAGS.items():
        value = getattr(args, attr)
        if value is not None:
            overrides[key] = value
    if args.command == "ablate" and args.mode is not None:
        overrides["modes"] = args.mode
    return build_config(file_values, overrides)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return out


def _require(cfg: RunConfig, *keys: str) -> None:
    for key in keys:
        if not getattr(cfg, key):
            raise ConfigError(f"--{key.replace('_', '-')} is required for this command")


def _dataset(cfg: RunConfig) -> list[SegSample]:
    _require(cfg, "data")
    return load_images(cfg.data, size=(cfg.image_size, cfg.image_size))


def _splits(samples, fractions, seed) -> dict[str, list[SegSample]]:
    train_set, val_set, test_set = split_by_group(samples, fractions, seed)
    return {"train": train_set, "val": val_set, "test": test_set, "all": list(samples)}


def _train_head(cfg: RunConfig, splits, head: str) -> tuple[Network, dict]:
    net = init_network(cfg.network_config(head))
    best, state = train(net, splits["train"], splits["val"], cfg.train_config())
    extra = {
        "best_val_loss": state.best_val_loss,
        "best_iteration": state.best_iteration,
        "split_seed": cfg.seed,
        "fractions": list(cfg.fraction_tuple()),
    }
    return best, {**extra, "history": [list(h) for h in state.loss_history]}


# commands -----------------------------------------------------------------
def cmd_synth(cfg: RunConfig) -> int:
    synth = cfg.synth_config()
    samples = generate(synth)
    out = _out_dir(cfg)
    export_dataset(samples, out)
    n_d = sum(s.label == network.D for s in samples)
    print(f"wrote {len(samples)} samples ({n_d} D, {len(samples) - n_d} ND) to {out}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    samples = _dataset(cfg)
    splits = _splits(samples, cfg.fraction_tuple(), cfg.seed)
    out = _out_dir(cfg)
    best, extra = _train_head(cfg, splits, cfg.head)
    history = extra.pop("history")
    save_checkpoint(best, out / "best.ckpt", extra)
    write_history(out / "losses.csv", history)
    acc = accuracy(best, splits["test"])
    print(
        f"best val loss {extra['best_val_loss']:.6f} at iteration {extra['best_iteration']}; "
        f"test accuracy {acc:.4f}; wrote {out / 'best.ckpt'}"
    )
    return 0


def _checkpoint_splits(cfg: RunConfig, extra: dict, samples) -> dict[str, list[SegSample]]:
    fractions = tuple(extra.get("fractions", cfg.fraction_tuple()))
    return _splits(samples, fractions, int(extra.get("split_seed", cfg.seed)))


def _load_net(path: str, head: str) -> tuple[Network, dict]:
    net, extra = load_checkpoint(path)
    if net.config.head != head:
        raise ConfigError(f"checkpoint {path} has head {net.config.head!r}, variant needs {head!r}")
    return net, extra


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint")
    variants = cfg.variant_list()
    if len(variants) != 1 and cfg.variants != RunConfig.variants:
        raise ConfigError("--variants: eval scores a single variant")
    variant = variants[0] if len(variants) == 1 else "M2"
    net, extra = _load_net(cfg.checkpoint, ablation.head_for(variant))
    samples = _dataset(cfg)
    subset = _checkpoint_splits(cfg, extra, samples)[cfg.subset]
    labels = set(cfg.label_list())
    subset = [s for s in subset if s.label in labels]
    if not subset:
        raise DataError(f"no {'/'.join(sorted(labels))} images in subset {cfg.subset!r}")
    t = resolve_threshold(cfg.mode, cfg.threshold)
    mode_name = cfg.mode if cfg.threshold is None else f"custom({t})"

    out = _out_dir(cfg)
    (out / "heatmaps").mkdir(exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    maps = ablation.collect_maps(net, subset)
    rows = []
    for sample, layer_maps in zip(subset, maps):
        size = sample.image.shape[1:]
        if variant == "M2":
            result = fuse(layer_maps, size, threshold=t)
        else:
            nmap = ablation.variant_map(variant, layer_maps, size)
            result = FusionResult(nmap, [], nmap.values >= t, t, [d.shape for d, _ in layer_maps])
        save_fusion(result, out / "heatmaps" / f"{sample.sample_id}.png", out / "masks" / f"{sample.sample_id}.png")
        if sample.gt_mask is not None:
            rows.append((sample.sample_id, variant, mode_name, score(result.mask, sample.gt_mask)))
    write_metric_rows(out / "metrics.csv", rows)
    if rows:
        mean_iu = float(np.mean([r[3].mean_IU for r in rows]))
        print(f"{variant} {mode_name}: {len(subset)} images, mean_IU {mean_iu:.4f}; wrote {out / 'metrics.csv'}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    variants = cfg.variant_list()
    modes = cfg.mode_list()
    samples = _dataset(cfg)
    splits = _splits(samples, cfg.fraction_tuple(), cfg.seed)
    out = _out_dir(cfg)
    nets: dict[str, Network] = {}
    given = {"mlcam": cfg.checkpoint, "mlgap": cfg.checkpoint_mlgap, "cam": cfg.checkpoint_cam}
    for head in sorted({ablation.head_for(v) for v in variants if v != ablation.GROUND_TRUTH}):
        if given[head]:
            nets[head], _ = _load_net(given[head], head)
        else:
            print(f"training {head} head ({cfg.max_iterations} iterations)")
            nets[head], extra = _train_head(cfg, splits, head)
            extra.pop("history")
            save_checkpoint(nets[head], out / f"best_{head}.ckpt", extra)
    labels = set(cfg.label_list())
    eval_sets = {name: [s for s in splits[name] if s.label in labels] for name in cfg.subset_list()}
    report = ablation.run_ablation(eval_sets, nets, modes, variants)
    report.to_csv(out / "ablation.csv")
    (out / "ablation.txt").write_text(report.to_text(), encoding="utf-8")
    write_metric_rows(
        out / "ablation_rows.csv",
        ((f"{subset}:{sid}", v, m, s) for subset, sid, v, m, s in report.rows),
    )
    print(report.to_text(), end="")
    return 0


def _overlay(gray: np.ndarray, heat: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    base = np.repeat(gray[..., None], 3, axis=2)
    color = np.zeros_like(base)
    color[..., 0] = 1.0
    weight = alpha * heat[..., None]
    return np.rint(255.0 * ((1 - weight) * base + weight * color)).astype(np.uint8)


def cmd_render(cfg: RunConfig) -> int:
    _require(cfg, "checkpoint", "image")
    net, _ = _load_net(cfg.checkpoint, "mlcam")
    with Image.open(cfg.image) as im:
        original = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    size = net.config.input_size
    image = read_image(cfg.image, size)
    maps, _ = network.forward(net, image[None])
    result = fuse(maps, size, cfg.mode, cfg.threshold)
    out = _out_dir(cfg)
    save_fusion(result, out / "fdfm.png", out / "mask.png")
    heat = Image.fromarray(heatmap_pixels(result.fdfm), mode="L")
    if heat.size != (original.shape[1], original.shape[0]):
        heat = heat.resize((original.shape[1], original.shape[0]), Image.BILINEAR)
    Image.fromarray(_overlay(original, np.asarray(heat) / 255.0), mode="RGB").save(out / "overlay.png")
    label, conf = network.classify(maps)
    print(f"{label} ({conf:.3f}); wrote fdfm.png, mask.png, overlay.png to {out}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "render": cmd_render,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = parse_config(args)
        return COMMANDS[args.command](cfg)
    except (MLCAMError, OSError) as exc:
        print(f"mlcam {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
