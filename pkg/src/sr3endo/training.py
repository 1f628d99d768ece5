"""Optimisation loop: Adam, LR milestones, gradient clipping, EMA weights,
periodic validation and a versioned binary checkpoint format."""
from __future__ import annotations

import contextlib
import hashlib
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .diffusion import from_model_range, sample, training_loss
from .metrics import psnr, ssim
from .schedule import NoiseSchedule, respace
from .tensor import Rng

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "loss", "lr", "grad_norm", "val_psnr", "val_ssim")


class TrainingAborted(RuntimeError):
    """Raised when the loss or a gradient becomes non-finite."""


@dataclass
class TrainConfig:
    batch_size: int = 8
    base_lr: float = 3e-6
    lr_milestones: tuple = ()
    lr_factor: float = 1.0
    total_iters: int = 1_000_000
    val_every: int = 10_000
    ema_decay: float | None = None
    clip_max_norm: float | None = None
    p_norm: int = 2
    seed: int = 0
    val_steps: int | None = None
    val_items: int = 4
    clip_x0: bool = False

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_factor <= 1:
            raise ValueError("lr_factor must lie in (0, 1]")
        if self.ema_decay is not None and not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.clip_max_norm is not None and self.clip_max_norm <= 0:
            raise ValueError("clip_max_norm must be positive")
        if self.p_norm not in (1, 2):
            raise ValueError("p_norm must be 1 or 2")
        if self.val_every < 1 or self.total_iters < 0:
            raise ValueError("val_every must be >= 1 and total_iters >= 0")


@dataclass
class TrainState:
    step: int
    params: dict  # name -> ndarray (shared with the model's tensors while training)
    ema_params: dict
    adam_m: dict
    adam_v: dict
    schedule: NoiseSchedule
    rng_state: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    best_val_psnr: float = -math.inf

    @classmethod
    def fresh(cls, params: dict, schedule: NoiseSchedule, config: dict | None = None) -> "TrainState":
        return cls(0, params,
                   {k: v.copy() for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()},
                   schedule, {}, dict(config or {}))


# update rules ---------------------------------------------------------------

def adam_step(state: TrainState, grads: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> TrainState:
    """Bias-corrected Adam, in place.  Increments ``state.step``."""
    if grads.keys() != state.params.keys():
        raise KeyError("gradient names do not match parameter names")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient in {name}")
    t = state.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        m, v, p = state.adam_m[name], state.adam_v[name], state.params[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.step = t
    return state


def global_norm(grads: dict) -> float:
    return math.sqrt(math.fsum(float(np.dot(g.ravel().astype(np.float64), g.ravel().astype(np.float64)))
                               for g in grads.values()))


def clip_grad_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients together so their global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm > max_norm:
        f = max_norm / norm
        for g in grads.values():
            g *= f
    return grads, norm


def ema_update(ema: dict, params: dict, decay: float) -> dict:
    if ema.keys() != params.keys():
        raise KeyError("EMA and parameter names differ")
    for name, p in params.items():
        e = ema[name]
        if e.shape != p.shape:
            raise ValueError(f"EMA shape {e.shape} != parameter shape {p.shape} for {name}")
        e *= decay
        e += (1.0 - decay) * p
    return ema


def lr_at(step: int, cfg: TrainConfig) -> float:
    """base_lr * factor^(number of milestones <= step)."""
    passed = sum(1 for m in cfg.lr_milestones if m <= step)
    return cfg.base_lr * cfg.lr_factor ** passed


# checkpoints ------------------------------------------------------------------------

MAGIC = b"SR3CKPT\x00"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_GROUPS = ("param", "ema", "adam_m", "adam_v")


class CheckpointFormatError(ValueError):
    pass


def _tensor_block(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    dt = np.dtype(arr.dtype).newbyteorder("<")
    if dt not in _DTYPE_CODES:
        raise TypeError(f"cannot store dtype {arr.dtype} for {name}")
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def checkpoint_bytes(state: TrainState) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    header = {"step": state.step, "config": state.config, "rng": state.rng_state,
              "best_val_psnr": None if math.isinf(state.best_val_psnr) else state.best_val_psnr}
    hb = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(hb)))
    buf.write(hb)
    kind = state.schedule.kind.encode()
    buf.write(struct.pack("<H", len(kind)))
    buf.write(kind)
    buf.write(struct.pack("<I", state.schedule.T))
    buf.write(np.ascontiguousarray(state.schedule.beta[1:], dtype="<f8").tobytes())
    groups = dict(zip(_GROUPS, (state.params, state.ema_params, state.adam_m, state.adam_v)))
    buf.write(struct.pack("<I", sum(len(g) for g in groups.values())))
    for gname, tensors in groups.items():
        for name, arr in tensors.items():
            _tensor_block(buf, f"{gname}/{name}", arr)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointFormatError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> TrainState:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: not an SR3 checkpoint (bad magic)")
    if len(data) < len(MAGIC) + 4 + 32:
        raise CheckpointFormatError(f"{path}: checkpoint is truncated")
    body, digest = data[:-32], data[-32:]
    r = _Reader(body)
    r.take(len(MAGIC))
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint format version {version} "
                                    f"(this build reads version {FORMAT_VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointFormatError(f"{path}: checksum mismatch (corrupt or truncated, format v{version})")
    (hlen,) = r.unpack("<I")
    header = json.loads(r.take(hlen).decode())
    (klen,) = r.unpack("<H")
    kind = r.take(klen).decode()
    (steps,) = r.unpack("<I")
    betas = np.frombuffer(r.take(8 * steps), dtype="<f8").astype(np.float64)
    sched = NoiseSchedule.from_betas(kind, betas)
    (count,) = r.unpack("<I")
    groups = {g: {} for g in _GROUPS}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        full = r.take(nlen).decode()
        code, rank = r.unpack("<BB")
        shape = r.unpack(f"<{rank}I")
        dt = _CODE_DTYPES[code]
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        gname, name = full.split("/", 1)
        groups[gname][name] = arr
    if r.pos != len(body):
        raise CheckpointFormatError(f"{path}: trailing bytes after tensor blocks")
    best = header.get("best_val_psnr")
    return TrainState(header["step"], groups["param"], groups["ema"], groups["adam_m"], groups["adam_v"],
                      sched, header["rng"], header["config"], -math.inf if best is None else best)


class CheckpointStore:
    """Directory holding step checkpoints, ``last.ckpt``, ``best.ckpt`` and the metrics log."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.saved: list[Path] = []

    @property
    def log_path(self) -> Path:
        return self.root / "metrics.tsv"

    def save(self, state: TrainState, best: bool = False) -> Path:
        path = self.root / f"step_{state.step:08d}.ckpt"
        save_checkpoint(state, path)
        save_checkpoint(state, self.root / "last.ckpt")
        if best:
            save_checkpoint(state, self.root / "best.ckpt")
        self.saved.append(path)
        return path


# loop ------------------------------------------------------------------------------------

@contextlib.contextmanager
def swapped_weights(model, arrays: dict):
    """Temporarily run ``model`` with other weights (e.g. the EMA copy)."""
    saved = {k: p.data for k, p in model.params.items()}
    try:
        for k, p in model.params.items():
            p.data = arrays[k]
        yield model
    finally:
        for k, p in model.params.items():
            p.data = saved[k]


def evaluate_sr(model, data, sched: NoiseSchedule, ids, seed: int,
                clip_x0: bool = False) -> tuple[float, float, list]:
    """Sample SR images for ``ids`` and score them against HR; returns (mean psnr, mean ssim, images)."""
    batch = data.batch(list(ids))
    sr = from_model_range(sample(model, batch.x_cond, sched, Rng(seed), clip_x0))
    hr = from_model_range(batch.y0)
    imgs = [s.transpose(1, 2, 0).astype(np.float64) for s in sr]
    hrs = [h.transpose(1, 2, 0).astype(np.float64) for h in hr]
    p = [psnr(a, b) for a, b in zip(imgs, hrs)]
    s = [ssim(a, b) for a, b in zip(imgs, hrs)]
    return float(np.mean(p)), float(np.mean(s)), imgs


def _fmt(v) -> str:
    if v is None:
        return ""
    return "inf" if isinstance(v, float) and math.isinf(v) else repr(float(v))


def train_loop(model, data, sched: NoiseSchedule, cfg: TrainConfig, sink: CheckpointStore,
               val_data=None, state: TrainState | None = None, run_config: dict | None = None) -> TrainState:
    """Run ``cfg.total_iters`` optimisation steps (resuming from ``state`` if given).

    Every ``cfg.val_every`` steps the EMA weights are sampled on the first
    ``cfg.val_items`` validation items and a checkpoint is written.
    """
    params = {k: p.data for k, p in model.params.items()}
    if state is None:
        state = TrainState.fresh(params, sched, run_config)
    else:
        for k, p in model.params.items():
            p.data = state.params[k]
        params = state.params
    master = Rng(cfg.seed)
    train_rng, data_rng = master.fork(1), master.fork(2)
    if state.rng_state:
        train_rng.set_state(state.rng_state["train"])
        data_rng.set_state(state.rng_state["data"])
    val_sched = sched
    if cfg.val_steps and cfg.val_steps < sched.T:
        val_sched = respace(sched, cfg.val_steps)
        log.info("validation sampling uses %d of %d steps", val_sched.T, sched.T)
    val_ids = list(val_data.index[:cfg.val_items]) if val_data is not None else []

    new_log = state.step == 0 or not sink.log_path.exists()
    logf = open(sink.log_path, "w" if new_log else "a")
    if new_log:
        logf.write("\t".join(LOG_COLUMNS) + "\n")
    batches = data.batches(cfg.batch_size, data_rng, start=state.step)
    try:
        while state.step < cfg.total_iters:
            batch = next(batches)
            model.zero_grad()
            try:
                loss = training_loss(model, batch, sched, train_rng, cfg.p_norm, training=True)
            except FloatingPointError as exc:
                raise TrainingAborted(f"step {state.step + 1}: {exc}") from exc
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingAborted(f"step {state.step + 1}: loss is {loss_val}")
            loss.backward()
            grads = {k: p.grad for k, p in model.params.items()}
            if cfg.clip_max_norm is not None:
                grads, gnorm = clip_grad_norm(grads, cfg.clip_max_norm)
            else:
                gnorm = global_norm(grads)
            lr = lr_at(state.step, cfg)
            adam_step(state, grads, lr)
            if cfg.ema_decay is not None:
                ema_update(state.ema_params, params, cfg.ema_decay)
            else:
                for k, p in params.items():
                    state.ema_params[k][...] = p
            vp = vs = None
            if state.step % cfg.val_every == 0 or state.step == cfg.total_iters:
                if val_ids:
                    with swapped_weights(model, state.ema_params):
                        vp, vs, _ = evaluate_sr(model, val_data, val_sched, val_ids, cfg.seed + 7, cfg.clip_x0)
                best = vp is not None and vp > state.best_val_psnr
                if best:
                    state.best_val_psnr = vp
                state.rng_state = {"train": train_rng.get_state(), "data": data_rng.get_state()}
                sink.save(state, best=best)
            logf.write("\t".join([str(state.step), _fmt(loss_val), _fmt(lr), _fmt(gnorm), _fmt(vp), _fmt(vs)])
                       + "\n")
            model.zero_grad()
    finally:
        logf.close()
    state.rng_state = {"train": train_rng.get_state(), "data": data_rng.get_state()}
    return state


def read_metrics_log(path) -> list[dict]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    cols = lines[0].split("\t")
    return [dict(zip(cols, ln.split("\t"))) for ln in lines[1:]]
