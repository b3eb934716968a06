"""Minibatch SGD with momentum and weight decay, checkpoints, convergence logs."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .io import atomic_write
from .network import NetConfig, Network, build_network, forward, manifest, predict
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    backward,
    finite_difference_error,
    record,
    register_gradcheck,
    verification_mode,
)

log = logging.getLogger(__name__)

__all__ = [
    "NumericalError",
    "CheckpointError",
    "TrainConfig",
    "Checkpoint",
    "LogRecord",
    "TrainLog",
    "l1_loss",
    "l2_loss",
    "sgd_step",
    "learning_rate",
    "batch_indices",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "network_grad_check",
]

MAGIC = b"CSRN"
FORMAT_VERSION = 1


class NumericalError(RuntimeError):
    """NaN/Inf during training."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, truncated or from an unknown format version."""


def _as_target(target, like: Tensor) -> np.ndarray:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=like.dtype)
    if t.shape != like.shape:
        raise ShapeError(f"loss shape mismatch: prediction {like.shape} vs target {t.shape}")
    return t


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; the subgradient at ties is 0."""
    t = _as_target(target, pred)
    diff = pred.data - t
    n = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=pred.dtype).reshape(1, 1, 1, 1)
    return record("l1_loss", out, (pred,), lambda g: (np.sign(diff) * (g.reshape(-1)[0] / n),))


def l2_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error, kept for comparison runs."""
    t = _as_target(target, pred)
    diff = pred.data - t
    n = diff.size
    out = np.asarray(np.square(diff).mean(), dtype=pred.dtype).reshape(1, 1, 1, 1)
    return record("l2_loss", out, (pred,), lambda g: (diff * (2 * g.reshape(-1)[0] / n),))


LOSSES = {"l1": l1_loss, "l2": l2_loss}


@register_gradcheck("l1_loss")
def _gc_l1(rng):
    target = rng.uniform(-1, 1, size=(1, 2, 4, 4))
    offset = rng.uniform(0.1, 1.0, size=target.shape) * rng.choice([-1.0, 1.0], size=target.shape)
    pred = Tensor(target + offset, requires_grad=True)
    return [pred], lambda t: l1_loss(t[0], target)


@register_gradcheck("l2_loss")
def _gc_l2(rng):
    target = rng.uniform(-1, 1, size=(1, 2, 4, 4))
    pred = Tensor(rng.uniform(-1, 1, size=target.shape), requires_grad=True)
    return [pred], lambda t: l2_loss(t[0], target)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_interval: int = 100_000
    max_iterations: int = 1000
    eval_interval: int = 100
    seed: int = 0
    loss: str = "l1"
    clip_norm: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.lr_interval < 1 or self.eval_interval < 1 or self.max_iterations < 0:
            raise ValueError("lr_interval and eval_interval must be >= 1, max_iterations >= 0")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}, got {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    """Step schedule: ``lr * lr_decay ** (iteration // lr_interval)`` (iteration 0-based)."""
    return cfg.lr * cfg.lr_decay ** (iteration // cfg.lr_interval)


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocities: dict[str, np.ndarray],
    cfg: TrainConfig,
    lr: float | None = None,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """v <- momentum*v - lr*(g + weight_decay*w);  w <- w + v.  Returns new dicts."""
    lr = cfg.lr if lr is None else lr
    new_p, new_v = {}, {}
    for name, w in params.items():
        if name not in grads:
            raise KeyError(f"missing gradient for parameter {name}")
        g = grads[name]
        v = velocities.get(name)
        v = np.zeros_like(w) if v is None else v
        v = cfg.momentum * v - lr * (g + cfg.weight_decay * w)
        new_v[name] = v.astype(w.dtype, copy=False)
        new_p[name] = (w + v).astype(w.dtype, copy=False)
    return new_p, new_v


@dataclass
class Checkpoint:
    config: NetConfig
    params: dict[str, np.ndarray]
    velocities: dict[str, np.ndarray]
    iteration: int = 0
    seed: int = 0
    train_config: dict | None = None
    task: dict | None = None

    def network(self) -> Network:
        base = build_network(self.config, seed=0, dtype=np.float32)
        return base.with_params(self.params)


@dataclass(frozen=True)
class LogRecord:
    iteration: int
    train_loss: float
    val_psnr: float | None
    wall_time: float


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)

    HEADER = ("iteration", "train_loss", "val_psnr", "wall_time")

    def append(self, rec: LogRecord):
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError(f"log iterations must increase: {rec.iteration} after {self.records[-1].iteration}")
        self.records.append(rec)

    def primary(self) -> list[tuple]:
        """Every logged number except wall time."""
        return [(r.iteration, r.train_loss, r.val_psnr) for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for r in self.records:
            w.writerow([r.iteration, repr(r.train_loss), "" if r.val_psnr is None else repr(r.val_psnr), f"{r.wall_time:.3f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != cls.HEADER:
            raise ValueError("not a training log: header row missing")
        out = cls()
        for it, loss, psnr, wall in rows[1:]:
            out.append(LogRecord(int(it), float(loss), float(psnr) if psnr else None, float(wall)))
        return out


def batch_indices(n: int, batch_size: int, iteration: int, seed: int) -> np.ndarray:
    """Sample indices for one iteration (0-based), a pure function of its arguments.

    Samples are drawn from a stream of per-epoch permutations; the batch is
    returned sorted so the summation order does not depend on the shuffle.
    """
    b = min(batch_size, n)
    start = iteration * b
    idx = []
    epoch = None
    perm = None
    for k in range(start, start + b):
        e = k // n
        if e != epoch:
            epoch = e
            perm = np.random.default_rng([seed, e]).permutation(n)
        idx.append(perm[k % n])
    return np.sort(np.asarray(idx))


def _stack(pairs) -> tuple[np.ndarray, np.ndarray]:
    xs = np.stack([np.asarray(p.input, dtype=np.float64) for p in pairs])
    ys = np.stack([np.asarray(p.target, dtype=np.float64) for p in pairs])
    return xs, ys


def _validation_psnr(net: Network, val_x: np.ndarray, val_y: np.ndarray) -> float:
    from .metrics import mean_exact, psnr

    scores = []
    for x, y in zip(val_x, val_y):
        out = np.clip(predict(net, x), 0, 255)
        scores.append(psnr(out, y))
    return mean_exact(scores)


def train(
    net: Network,
    dataset: Sequence,
    cfg: TrainConfig,
    validation: Sequence | None = None,
    resume_from: Checkpoint | None = None,
    task: dict | None = None,
) -> tuple[Checkpoint, TrainLog]:
    """Optimize the restoration loss over (input, target) patch pairs on the [0, 255] scale.

    Runs until ``cfg.max_iterations`` total iterations; with ``resume_from``
    the parameters, velocities and iteration counter come from that checkpoint.
    Logged losses are on the [0, 255] scale.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    xs, ys = _stack(dataset)
    if xs.shape != ys.shape:
        raise ShapeError(f"inputs {xs.shape} and targets {ys.shape} differ")
    val = _stack(validation) if validation else None
    loss_fn = LOSSES[cfg.loss]

    names = [name for name, _ in net.manifest()]
    if resume_from is not None:
        if resume_from.config != net.config:
            raise ValueError(f"checkpoint config {resume_from.config} does not match network config {net.config}")
        if resume_from.seed != cfg.seed:
            raise ValueError(f"checkpoint was trained with seed {resume_from.seed}, config asks for {cfg.seed}")
        params = {k: resume_from.params[k].astype(net.dtype) for k in names}
        velocities = {k: resume_from.velocities[k].astype(net.dtype) for k in names}
        start = resume_from.iteration
    else:
        params = {k: net.params[k].data.copy() for k in names}
        velocities = {k: np.zeros_like(params[k]) for k in names}
        start = 0

    train_log = TrainLog()
    t0 = time.perf_counter()
    window: list[float] = []
    current = net.with_params(params)
    for it in range(start, cfg.max_iterations):
        idx = batch_indices(len(xs), cfg.batch_size, it, cfg.seed)
        x = Tensor((xs[idx] / 255.0)[:, None], dtype=current.dtype)
        target = (ys[idx] / 255.0)[:, None].astype(current.dtype)
        with Tape() as tape:
            loss = loss_fn(forward(current, x), target)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericalError(f"non-finite training loss ({value}) at iteration {it + 1}")
        params_t = current.tensors()
        backward(tape, loss, params_t)
        grads = {k: current.params[k].grad for k in names}
        if cfg.clip_norm is not None:
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
            if norm > cfg.clip_norm:
                grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
        params, velocities = sgd_step(params, grads, velocities, cfg, lr=learning_rate(cfg, it))
        current = current.with_params(params)
        # L1 scales linearly; L2 quadratically
        window.append(value * (255.0 if cfg.loss == "l1" else 255.0**2))

        done = it + 1
        if done % cfg.eval_interval == 0 or done == cfg.max_iterations:
            vpsnr = _validation_psnr(current, *val) if val is not None else None
            rec = LogRecord(done, float(np.mean(window)), vpsnr, time.perf_counter() - t0)
            train_log.append(rec)
            log.info("iter %d loss %.4f val_psnr %s", rec.iteration, rec.train_loss, rec.val_psnr)
            window = []

    ckpt = Checkpoint(
        config=net.config,
        params={k: params[k].astype(np.float32) for k in names},
        velocities={k: velocities[k].astype(np.float32) for k in names},
        iteration=max(start, cfg.max_iterations),
        seed=cfg.seed,
        train_config=cfg.to_dict(),
        task=task if task is not None else (resume_from.task if resume_from else None),
    )
    return ckpt, train_log


# ---------------------------------------------------------------------------
# checkpoint files


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def checkpoint_bytes(c: Checkpoint) -> bytes:
    names = [name for name, _ in manifest(c.config)]
    header = {
        "config": c.config.to_dict(),
        "iteration": c.iteration,
        "seed": c.seed,
        "train_config": c.train_config,
        "task": c.task,
        "tensors": 2 * len(names),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(hb)), hb]
    for n in names:
        parts.append(_encode_tensor(n, c.params[n]))
    for n in names:
        parts.append(_encode_tensor("velocity/" + n, c.velocities[n]))
    return b"".join(parts)


def save_checkpoint(c: Checkpoint, path: str | os.PathLike):
    atomic_write(path, checkpoint_bytes(c))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: needed {n} bytes for {what} at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def parse_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic: not a CSRN checkpoint")
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version} (expected {FORMAT_VERSION})")
    try:
        header = json.loads(r.take(r.u32("header length"), "header").decode("utf-8"))
        config = NetConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc

    expected = dict(manifest(config))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(header["tensors"]):
        name = r.take(r.u32("tensor name length"), "tensor name").decode("utf-8")
        ndim = r.u32(f"rank of {name}")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"shape of {name}"))
        base = name.removeprefix("velocity/")
        if expected.get(base) != tuple(shape):
            raise CheckpointError(f"tensor {name} has shape {shape}, config expects {expected.get(base)}")
        count = int(np.prod(shape))
        data = np.frombuffer(r.take(4 * count, f"data of {name}"), dtype="<f4").reshape(shape)
        tensors[name] = data.astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    params = {k: tensors[k] for k in expected}
    velocities = {k: tensors["velocity/" + k] for k in expected}
    return Checkpoint(
        config=config,
        params=params,
        velocities=velocities,
        iteration=header["iteration"],
        seed=header["seed"],
        train_config=header.get("train_config"),
        task=header.get("task"),
    )


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------


def network_grad_check(
    seed: int = 0,
    samples: int = 20,
    blocks: int = 2,
    resblocks: int = 2,
    size: int = 16,
    h: float = 1e-5,
    corrupt: bool = False,
    config: NetConfig | None = None,
) -> float:
    """End-to-end L1-loss gradient check on randomly sampled scalar parameters (float64)."""
    cfg = config or NetConfig(blocks=blocks, resblocks=resblocks)
    rng = np.random.default_rng(seed)
    with verification_mode():
        base = build_network(cfg, seed=seed)
        # jitter so zero-initialized kernels and biases do not mask any path
        net = base.with_params({k: v + 0.05 * rng.standard_normal(v.shape) for k, v in base.arrays().items()})
        x = Tensor(rng.uniform(0, 1, size=(1, 1, size, size)))
        target = rng.uniform(0, 1, size=(1, 1, size, size))
        leaves = net.tensors()
        names = [name for name, _ in net.manifest()]
        sizes = np.array([t.data.size for t in leaves])
        flat = rng.choice(int(sizes.sum()), size=samples, replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        picks: dict[int, list[int]] = {}
        for f in np.sort(flat):
            i = int(np.searchsorted(offsets, f, side="right") - 1)
            picks.setdefault(i, []).append(int(f - offsets[i]))

        def fn(tensors):
            trial = Network(cfg, dict(zip(names, tensors)))
            return l1_loss(forward(trial, x), target)

        return finite_difference_error(
            leaves, fn, h=h, corrupt=corrupt, indices={i: np.array(v) for i, v in picks.items()}
        )
