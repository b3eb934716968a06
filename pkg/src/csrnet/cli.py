"""Command-line entry point: degrade, train, eval, restore, ablate, gradcheck.

Settings come from an optional JSON file (``--config``) whose keys match the
long flag names with dashes replaced by underscores; explicit flags win.

Exit status: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import degrade as dg
from .io import atomic_write, manifest_lines, png_bytes, read_image, read_manifest, write_png
from .metrics import evaluate
from .network import VARIANTS, build_network, count_params, make_variant, restore_plane
from .tensor import grad_check, gradcheck_ops
from .train import (
    CheckpointError,
    NumericalError,
    TrainConfig,
    load_checkpoint,
    network_grad_check,
    save_checkpoint,
    train,
)

log = logging.getLogger("csrnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OP_TOLERANCE = 1e-4
NETWORK_TOLERANCE = 1e-3
DEFAULT_PARAM = {"sr": 2, "denoise": 15, "deblock": 10}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    config: str | None = None
    seed: int = 0
    out: str = "out"
    variant: str | None = None
    task: str = "sr"
    param: float | None = None
    checkpoint: str | None = None
    iterations: int = 1000
    verbose: int = 0
    # degrade
    source: list | None = None
    patch_size: int = 32
    count: int = 100
    stride: int | None = None
    # train / eval / ablate
    data: str | None = None
    val: str | None = None
    blocks: int | None = None
    resblocks: int | None = None
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_interval: int = 100_000
    batch_size: int = 10
    momentum: float = 0.9
    weight_decay: float = 1e-4
    eval_interval: int = 100
    loss: str = "l1"
    clip_norm: float | None = None
    resume: bool = False
    baseline: bool = False
    variants: list | None = None
    # restore
    input: str | None = None
    upsample: bool = False
    # gradcheck
    corrupt_gradient: bool = False
    samples: int = 20

    def spec(self) -> dg.DegradationSpec:
        param = DEFAULT_PARAM[self.task] if self.param is None else self.param
        return dg.DegradationSpec(self.task, param, self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            lr=self.lr,
            lr_decay=self.lr_decay,
            lr_interval=self.lr_interval,
            max_iterations=self.iterations,
            eval_interval=self.eval_interval,
            seed=self.seed,
            loss=self.loss,
            clip_norm=self.clip_norm,
        )

    def net_config(self, name: str | None = None):
        name = name or self.variant or "Dense"
        if name in ("D4R6", "D6R6", "D8R6", "B4R6", "B6R6", "B8R6"):
            return make_variant(name)
        return make_variant(name, blocks=self.blocks, resblocks=self.resblocks)


REQUIRED = {
    "degrade": ("source",),
    "train": ("data",),
    "eval": ("data",),
    "restore": ("input", "checkpoint"),
    "ablate": ("data",),
    "gradcheck": (),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of settings; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (or .png file for restore)")
    common.add_argument("--variant", help=f"network variant: {', '.join(VARIANTS)}")
    common.add_argument("--task", choices=dg.TASKS)
    common.add_argument("--param", type=float, help="Up factor, noise sigma or JPEG quality")
    common.add_argument("--checkpoint", help="checkpoint file path")
    common.add_argument("--iterations", type=int)
    common.add_argument("-v", "--verbose", action="count")

    net = argparse.ArgumentParser(add_help=False)
    net.add_argument("--blocks", type=int, help="override D (cross-scale blocks)")
    net.add_argument("--resblocks", type=int, help="override R (residual units per block)")

    opt = argparse.ArgumentParser(add_help=False)
    opt.add_argument("--data", help="dataset directory written by `degrade`")
    opt.add_argument("--val", help="validation dataset directory")
    opt.add_argument("--lr", type=float)
    opt.add_argument("--lr-decay", type=float)
    opt.add_argument("--lr-interval", type=int)
    opt.add_argument("--batch-size", type=int)
    opt.add_argument("--momentum", type=float)
    opt.add_argument("--weight-decay", type=float)
    opt.add_argument("--eval-interval", type=int)
    opt.add_argument("--loss", choices=("l1", "l2"))
    opt.add_argument("--clip-norm", type=float)

    p = argparse.ArgumentParser(prog="csrnet", description="Cross-scale residual network image restoration")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("degrade", parents=[common], help="build a paired patch dataset from PNG sources")
    d.add_argument("--source", action="append", help="PNG file or directory of PNGs (repeatable)")
    d.add_argument("--patch-size", type=int)
    d.add_argument("--count", type=int, help="total number of patches across all sources")
    d.add_argument("--stride", type=int, help="take patches on a fixed grid instead of at random")

    t = sub.add_parser("train", parents=[common, net, opt], help="train a network on a patch dataset")
    t.add_argument("--resume", action="store_true", default=None, help="continue from --checkpoint")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint (or the degraded inputs) on a dataset")
    e.add_argument("--data")
    e.add_argument("--baseline", action="store_true", default=None, help="score the degraded inputs, no network")

    r = sub.add_parser("restore", parents=[common], help="restore one PNG with a checkpoint")
    r.add_argument("--input")
    r.add_argument("--upsample", action="store_true", default=None, help="bicubic-upsample by the SR factor first")

    a = sub.add_parser("ablate", parents=[common, net, opt], help="train and compare the ablation variants")
    a.add_argument("--variants", nargs="+", help="default: 1S 2S 3S Dense")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--corrupt-gradient", action="store_true", default=None, help=argparse.SUPPRESS)
    g.add_argument("--samples", type=int, help="parameters sampled for the end-to-end check")
    return p


def resolve(argv: list[str] | None) -> RunConfig:
    args = build_parser().parse_args(argv)
    settings: dict = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as f:
                settings = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(settings, dict):
            raise UsageError(f"config file {args.config} must hold a JSON object")
    known = {f.name for f in fields(RunConfig)} - {"command"}
    unknown = sorted(set(settings) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    for k, v in vars(args).items():
        if k != "command" and v is not None:
            settings[k] = v
    cfg = RunConfig(command=args.command, **settings)
    missing = [k for k in REQUIRED[cfg.command] if getattr(cfg, k) in (None, [], "")]
    if missing:
        raise UsageError(f"{cfg.command} requires " + ", ".join("--" + m.replace("_", "-") for m in missing))
    try:
        cfg.spec()
        if cfg.command in ("train", "ablate"):
            cfg.train_config()
        if cfg.variant is not None or cfg.command == "train":
            cfg.net_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


# ---------------------------------------------------------------------------
# datasets on disk


def _sources(paths: list[str]) -> list[Path]:
    out = []
    for s in paths:
        p = Path(s)
        if p.is_dir():
            out.extend(sorted(p.glob("*.png")))
        elif p.is_file():
            out.append(p)
        else:
            raise DataError(f"source not found: {s}")
    if not out:
        raise DataError("no PNG sources found")
    return out


def _replace_dir(tmp: Path, dest: Path):
    if dest.exists():
        old = dest.with_name(f".{dest.name}.old")
        if old.exists():
            shutil.rmtree(old)
        dest.rename(old)
        tmp.rename(dest)
        shutil.rmtree(old)
    else:
        tmp.rename(dest)


def cmd_degrade(cfg: RunConfig) -> int:
    spec = cfg.spec()
    if spec.nonstandard:
        log.warning("%s parameter %g is outside the usual set %s", spec.task, spec.param, dg.LEGAL_PARAMS[spec.task])
    sources = _sources(cfg.source)
    n = len(sources)
    records = []
    files: dict[str, bytes] = {}
    for i, src in enumerate(sources):
        quota = None if cfg.stride is not None and cfg.count is None else cfg.count // n + (1 if i < cfg.count % n else 0)
        try:
            img = read_image(src)
        except OSError as exc:
            raise DataError(f"cannot read source image {src}: {exc}") from exc
        image_seed = dg.derive_seed(cfg.seed, i)
        degraded, clean = dg.degrade(dg.luminance(img), spec, seed=image_seed)
        try:
            pairs = dg.extract_patches(degraded, clean, cfg.patch_size, quota, seed=dg.derive_seed(image_seed, 1), stride=cfg.stride)
        except ValueError as exc:
            raise DataError(f"{src}: {exc}") from exc
        for pair in pairs:
            k = len(records)
            name = f"{k:06d}.png"
            files[f"input/{name}"] = png_bytes(pair.input)
            files[f"target/{name}"] = png_bytes(pair.target)
            records.append(
                {
                    "index": k,
                    "source": str(src),
                    "task": spec.task,
                    "param": spec.to_dict()["param"],
                    "seed": image_seed,
                    "top": pair.top,
                    "left": pair.left,
                    "size": cfg.patch_size,
                    "input": f"input/{name}",
                    "target": f"target/{name}",
                }
            )

    dest = Path(cfg.out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(dir=dest.parent, prefix=f".{dest.name}."))
    try:
        (tmp / "input").mkdir()
        (tmp / "target").mkdir()
        for rel, data in files.items():
            (tmp / rel).write_bytes(data)
        (tmp / "manifest.jsonl").write_text(manifest_lines(records), encoding="utf-8")
        _replace_dir(tmp, dest)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote {len(records)} pairs to {dest}")
    return EXIT_OK


def load_dataset(path: str) -> tuple[list[dg.PatchPair], list[dict]]:
    root = Path(path)
    man = root / "manifest.jsonl"
    if not man.is_file():
        raise DataError(f"dataset not found: {man} does not exist")
    records = read_manifest(man)
    if not records:
        raise DataError(f"dataset {root} is empty")
    pairs = []
    try:
        for r in records:
            pairs.append(dg.PatchPair(read_image(root / r["input"]), read_image(root / r["target"]), r.get("top", 0), r.get("left", 0)))
    except (OSError, KeyError) as exc:
        raise DataError(f"dataset {root} is incomplete: {exc}") from exc
    return pairs, records


def _dataset_task(records: list[dict]) -> dict:
    r = records[0]
    return {"task": r["task"], "param": r["param"]}


# ---------------------------------------------------------------------------


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / "checkpoint.csrn"


def _load_checkpoint(path) :
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except CheckpointError as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_train(cfg: RunConfig) -> int:
    pairs, records = load_dataset(cfg.data)
    val = load_dataset(cfg.val)[0] if cfg.val else None
    tcfg = cfg.train_config()
    ckpt_path = _checkpoint_path(cfg)
    resume = None
    if cfg.resume:
        resume = _load_checkpoint(ckpt_path)
        net = resume.network()
        if cfg.variant is not None and cfg.net_config() != resume.config:
            raise UsageError(f"--variant config {cfg.net_config()} does not match checkpoint config {resume.config}")
    else:
        net = build_network(cfg.net_config(), seed=cfg.seed)
    log.info("training %s (%d parameters) on %d pairs", net.config, count_params(net), len(pairs))
    ckpt, tlog = train(net, pairs, tcfg, validation=val, resume_from=resume, task=_dataset_task(records))
    out = Path(cfg.out)
    atomic_write(out / "train_log.csv", tlog.to_csv())
    save_checkpoint(ckpt, ckpt_path)
    last = tlog.records[-1] if tlog.records else None
    if last:
        print(f"iteration {last.iteration}: train loss {last.train_loss:.4f}" + ("" if last.val_psnr is None else f", val PSNR {last.val_psnr:.3f} dB"))
    print(f"checkpoint written to {ckpt_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    pairs, records = load_dataset(cfg.data)
    data_task = _dataset_task(records)
    spec = dg.DegradationSpec(data_task["task"], data_task["param"])
    notes = [f"dataset: {cfg.data}", f"dataset task: {data_task['task']} {data_task['param']}"]
    if cfg.baseline:
        net = None
        notes.append("mode: baseline (degraded input scored directly)")
    else:
        if not cfg.checkpoint:
            raise UsageError("eval requires --checkpoint unless --baseline is given")
        ckpt = _load_checkpoint(cfg.checkpoint)
        if cfg.variant is not None and cfg.net_config() != ckpt.config:
            raise UsageError(f"requested config {cfg.net_config()} does not match checkpoint config {ckpt.config}")
        net = ckpt.network()
        notes.append(f"checkpoint: {cfg.checkpoint} (iteration {ckpt.iteration})")
        if ckpt.task is not None and (ckpt.task.get("task"), float(ckpt.task.get("param"))) != (data_task["task"], float(data_task["param"])):
            notes.append(
                f"WARNING: task mismatch: checkpoint trained for {ckpt.task['task']} {ckpt.task['param']}, "
                f"dataset is {data_task['task']} {data_task['param']}"
            )
    names = [Path(r["input"]).stem for r in records]
    rep = evaluate(net, pairs, spec, names=names, dataset=Path(cfg.data).name)
    rep.notes = notes
    atomic_write(Path(cfg.out) / "report.csv", rep.to_csv())
    print(f"{rep.dataset} {spec.task} {spec.param:g}: PSNR {rep.avg_psnr:.4f} dB, SSIM {rep.avg_ssim:.4f} over {len(rep.scores)} images")
    return EXIT_OK


def cmd_restore(cfg: RunConfig) -> int:
    ckpt = _load_checkpoint(cfg.checkpoint)
    net = ckpt.network()
    try:
        img = read_image(cfg.input)
    except OSError as exc:
        raise DataError(f"cannot read input image {cfg.input}: {exc}") from exc
    if cfg.upsample:
        if not ckpt.task or ckpt.task.get("task") != "sr":
            raise UsageError("--upsample needs a super-resolution checkpoint")
        up = int(ckpt.task["param"])
        if img.ndim == 2:
            img = dg.bicubic_resize(img, up)
        else:
            img = np.stack([dg.bicubic_resize(img[..., c], up) for c in range(3)], axis=-1)
    h, w = img.shape[:2]
    k = net.config.divisor
    if h % k or w % k:
        log.warning("input %dx%d is not a multiple of %d: edge-padding for the network, cropping back", h, w, k)
    if img.ndim == 2:
        out = np.clip(restore_plane(net, img), 0, 255)
    else:
        y, cb, cr = dg.rgb_to_ycbcr(img)
        out = dg.ycbcr_to_rgb(np.clip(restore_plane(net, y), 0, 255), cb, cr)
    dest = Path(cfg.out)
    if dest.suffix.lower() != ".png":
        dest = dest / f"{Path(cfg.input).stem}_restored.png"
    write_png(dest, out)
    print(f"restored image written to {dest}")
    return EXIT_OK


ABLATION_VARIANTS = ("1S", "2S", "3S", "Dense")
# desk-scale default; Dense only adds parameters over 3S once D >= 3
ABLATION_DEPTH = (3, 2)


def cmd_ablate(cfg: RunConfig) -> int:
    pairs, records = load_dataset(cfg.data)
    val_dir = cfg.val or cfg.data
    val = load_dataset(val_dir)[0] if cfg.val else pairs
    variants = cfg.variants or list(ABLATION_VARIANTS)
    if cfg.blocks is None:
        cfg.blocks = ABLATION_DEPTH[0]
    if cfg.resblocks is None:
        cfg.resblocks = ABLATION_DEPTH[1]
    configs = {}
    for name in variants:
        try:
            configs[name] = cfg.net_config(name)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if "Dense" in configs and configs["Dense"].blocks < 3:
        log.warning("with fewer than 3 blocks the Dense variant has the same parameters as 3S")
    tcfg = cfg.train_config()
    data_task = _dataset_task(records)
    spec = dg.DegradationSpec(data_task["task"], data_task["param"])
    root = Path(cfg.out)
    rows = {"params": [], "psnr": [], "ssim": []}
    for name, ncfg in configs.items():
        net = build_network(ncfg, seed=cfg.seed)
        log.info("ablation variant %s: %d parameters", name, count_params(net))
        ckpt, tlog = train(net, pairs, tcfg, validation=val, task=data_task)
        vdir = root / name
        atomic_write(vdir / "train_log.csv", tlog.to_csv())
        save_checkpoint(ckpt, vdir / "checkpoint.csrn")
        rep = evaluate(ckpt.network(), val, spec, dataset=Path(val_dir).name)
        rep.notes = [f"variant: {name}", f"dataset: {val_dir}"]
        atomic_write(vdir / "report.csv", rep.to_csv())
        rows["params"].append(str(count_params(ncfg)))
        rows["psnr"].append(f"{rep.avg_psnr:.6f}")
        rows["ssim"].append(f"{rep.avg_ssim:.6f}")
        print(f"{name}: {count_params(ncfg)} parameters, PSNR {rep.avg_psnr:.4f} dB")
    ds = Path(val_dir).name
    lines = [
        "metric," + ",".join(f"CSRnet-{n}" for n in configs),
        "params," + ",".join(rows["params"]),
        f"{ds} PSNR," + ",".join(rows["psnr"]),
        f"{ds} SSIM," + ",".join(rows["ssim"]),
    ]
    atomic_write(root / "summary.csv", "\n".join(lines) + "\n")
    print(f"summary written to {root / 'summary.csv'}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    failed = False
    lines = [f"{'check':<20} {'max_rel_err':>12}  result"]
    for op in gradcheck_ops():
        err = grad_check(op, seed=cfg.seed, corrupt=cfg.corrupt_gradient)
        ok = err < OP_TOLERANCE
        failed |= not ok
        lines.append(f"{op:<20} {err:>12.3e}  {'pass' if ok else 'FAIL'}")
    err = network_grad_check(seed=cfg.seed, samples=cfg.samples, corrupt=cfg.corrupt_gradient)
    ok = err < NETWORK_TOLERANCE
    failed |= not ok
    lines.append(f"{'network(D2,R2)':<20} {err:>12.3e}  {'pass' if ok else 'FAIL'}")
    print("\n".join(lines))
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {
    "degrade": cmd_degrade,
    "train": cmd_train,
    "eval": cmd_eval,
    "restore": cmd_restore,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    try:
        cfg = resolve(argv)
    except UsageError as exc:
        print(f"csrnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if cfg.verbose >= 2 else logging.INFO if cfg.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[cfg.command](cfg)
    except UsageError as exc:
        print(f"csrnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"csrnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"csrnet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
