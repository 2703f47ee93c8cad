"""Training loop, evaluation, checkpoints, and whole-model gradient checks.

A step draws a batch (with replacement, seeded), runs one forward/backward
per sample with the loss scaled by 1/batch so gradients accumulate into a
true batch mean, then applies one optimizer update at the scheduled rate.
Every step appends one metrics record; after the last step a final record
holds per-task means over the whole training split under the final
parameters, which ``evaluate`` reproduces exactly.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from .config import ArchConfig
from .errors import (ConfigurationError, DataError, DimensionError,
                     FormatError, NumericsError)
from .losses import combine_losses, default_specs, per_task_loss
from .model import Model, forward, init_params
from .optim import OptimState, ScheduleSpec, adamw_step, lr_schedule
from .synthetic import dataset_bytes, read_dataset
from .tensor import Tape, Tensor, mul, zero_grad

CKPT_MAGIC = b"MTCK"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {0: np.float64, 1: np.float32}


@dataclass
class RunOptions:
    """Budget and optimizer knobs for one run; defaults fit a desk CPU."""

    steps: int = 2000
    batch_size: int = 4
    seed: int = 0
    peak_lr: float = 5e-5
    warmup_steps: int = 200
    floor_lr: float = 0.0
    weight_decay: float = 0.05
    dtype: str = "float64"
    balance: str = "static"  # static | inverse-ema
    checkpoint_every: int = 0  # 0: only at the end

    def numpy_dtype(self):
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError(f"dtype must be float64 or float32, got {self.dtype!r}")
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class TrainResult:
    model: Model
    optim: OptimState
    metrics: list
    config_hash: str
    budget_hash: str
    wall_time: float


def _load_samples(data):
    if isinstance(data, (str,)) or hasattr(data, "__fspath__"):
        return read_dataset(data)
    return list(data)


def config_hash(cfg: ArchConfig) -> str:
    return hashlib.sha256(cfgmod.to_text(cfg).encode()).hexdigest()


def budget_hash(cfg: ArchConfig, options: RunOptions, samples) -> str:
    """Digest of everything that must match for two runs to be comparable:
    the shared architecture scale, the full training budget, and the data.
    Task subset and attention sharing are deliberately excluded, they are
    the quantities ablations vary."""
    h = hashlib.sha256()
    scale = (cfg.img_size, cfg.patch_size, cfg.base_channels, cfg.stage_depths,
             cfg.encoder_heads, cfg.decoder_heads, cfg.window, cfg.shift,
             cfg.seg_classes, cfg.mlp_ratio, cfg.decoder_mlp_ratio)
    budget = (options.steps, options.batch_size, options.seed, options.peak_lr,
              options.warmup_steps, options.floor_lr, options.weight_decay,
              options.dtype, options.balance)
    h.update(repr(scale).encode())
    h.update(repr(budget).encode())
    h.update(dataset_bytes(samples))
    return h.hexdigest()


def _step_losses(model: Model, sample, specs, ema, batch_scale: float, dt):
    """Forward/backward for one sample; returns float task losses and total."""
    img = Tensor(np.asarray(sample.rgb, dtype=dt))
    with Tape() as tape:
        preds = forward(model, img)
        losses = {t: per_task_loss(t, preds[t], sample.target(t))
                  for t in model.cfg.tasks}
        total, weights = combine_losses(losses, specs, ema)
        tape.backward(mul(total, batch_scale))
    return ({t: float(v.data) for t, v in losses.items()},
            float(total.data), weights)


def train(cfg: ArchConfig, data, options: RunOptions,
          ckpt_path=None, log_path=None) -> TrainResult:
    """Run the full budget; returns the trained model plus per-step metrics.

    ``data`` is a dataset path or an in-memory sample list.  When paths are
    given, the checkpoint holds parameters, optimizer state, step, and the
    config/budget hashes; the metrics log is line-delimited JSON.
    """
    samples = _load_samples(data)
    if not samples:
        raise DataError("training dataset is empty")
    cfgmod.require_valid(cfg)
    if samples[0].size != cfg.img_size:
        raise DimensionError(f"dataset images are {samples[0].size}px, "
                             f"config wants {cfg.img_size}px")
    dt = options.numpy_dtype()
    model = init_params(cfg, seed=options.seed, dtype=dt)
    opt = OptimState(weight_decay=options.weight_decay)
    sched = ScheduleSpec(total_steps=options.steps, peak_lr=options.peak_lr,
                         warmup_steps=min(options.warmup_steps, options.steps),
                         floor_lr=options.floor_lr)
    specs = default_specs(cfg.tasks, balance=options.balance)
    ema = {} if options.balance == "inverse-ema" else None
    rng = np.random.default_rng(options.seed)
    chash = config_hash(cfg)
    bhash = budget_hash(cfg, options, samples)

    metrics = []
    started = time.perf_counter()
    for step in range(options.steps):
        lr = lr_schedule(step, sched)
        zero_grad(model.flat.values())
        picks = rng.integers(0, len(samples), options.batch_size)
        sums = {t: 0.0 for t in cfg.tasks}
        total_sum = 0.0
        weights = {}
        for idx in picks:
            per_task, total, weights = _step_losses(
                model, samples[idx], specs, ema, 1.0 / options.batch_size, dt)
            for t, v in per_task.items():
                sums[t] += v
            total_sum += total
        mean_total = total_sum / options.batch_size
        if not np.isfinite(mean_total):
            raise NumericsError(f"non-finite loss at step {step}")
        grads = {name: p.grad if p.grad is not None else np.zeros_like(p.data)
                 for name, p in model.flat.items()}
        adamw_step(model.flat, grads, opt, lr)
        metrics.append({
            "step": step, "lr": lr, "total": mean_total,
            "losses": {t: sums[t] / options.batch_size for t in cfg.tasks},
            "weights": {t: float(w) for t, w in weights.items()},
        })
        if (ckpt_path and options.checkpoint_every
                and (step + 1) % options.checkpoint_every == 0):
            save_checkpoint(ckpt_path, model, opt, step + 1, bhash)

    final = evaluate(model, samples)
    metrics.append({"final_eval": True, "step": options.steps, "losses": final})
    wall = time.perf_counter() - started

    if ckpt_path:
        save_checkpoint(ckpt_path, model, opt, options.steps, bhash)
    if log_path:
        with open(log_path, "w") as f:
            for rec in metrics:
                f.write(json.dumps(rec) + "\n")
    return TrainResult(model, opt, metrics, chash, bhash, wall)


def evaluate(model_or_ckpt, data) -> dict:
    """Per-task mean losses over a split, tape-free and deterministic."""
    if isinstance(model_or_ckpt, Model):
        model = model_or_ckpt
    else:
        model, _, _, _ = load_checkpoint(model_or_ckpt)
    samples = _load_samples(data)
    if not samples:
        raise DataError("evaluation split is empty")
    if samples[0].size != model.cfg.img_size:
        raise DimensionError(f"dataset images are {samples[0].size}px, "
                             f"config wants {model.cfg.img_size}px")
    dt = next(iter(model.flat.values())).data.dtype
    sums = {t: 0.0 for t in model.cfg.tasks}
    for s in samples:
        preds = forward(model, Tensor(np.asarray(s.rgb, dtype=dt)))
        for t in model.cfg.tasks:
            sums[t] += float(per_task_loss(t, preds[t], s.target(t)).data)
    return {t: sums[t] / len(samples) for t in model.cfg.tasks}


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path, model: Model, opt: OptimState | None,
                    step: int, budget: str = "") -> None:
    dt = next(iter(model.flat.values())).data.dtype
    code = _DTYPE_CODES[np.dtype(dt)]
    cfg_text = cfgmod.to_text(model.cfg).encode()
    budget_b = budget.encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IIQ", CKPT_VERSION, code, step))
        f.write(struct.pack("<I", len(cfg_text)) + cfg_text)
        f.write(struct.pack("<I", len(budget_b)) + budget_b)
        f.write(struct.pack("<I", len(model.flat)))
        for name, p in model.flat.items():
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)) + nb)
            f.write(struct.pack("<B", p.data.ndim))
            f.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            f.write(np.ascontiguousarray(p.data).tobytes())
        if opt is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<ddddQ", opt.beta1, opt.beta2, opt.eps,
                                opt.weight_decay, opt.step))
            for name in model.flat:
                f.write(np.ascontiguousarray(
                    opt.m.get(name, np.zeros_like(model.flat[name].data))).tobytes())
                f.write(np.ascontiguousarray(
                    opt.v.get(name, np.zeros_like(model.flat[name].data))).tobytes())


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise FormatError(f"checkpoint truncated at offset {self.off}, "
                              f"needed {n} more bytes")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    """Returns (model, optimizer state or None, step, budget hash)."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"bad checkpoint magic at offset 0 in {path}")
    version, code, step = r.unpack("<IIQ")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    if code not in _CODE_DTYPES:
        raise FormatError(f"unknown dtype code {code} at offset 8")
    dt = _CODE_DTYPES[code]
    (cfg_len,) = r.unpack("<I")
    cfg = cfgmod.from_text(r.take(cfg_len).decode())
    (budget_len,) = r.unpack("<I")
    budget = r.take(budget_len).decode()
    (count,) = r.unpack("<I")

    model = init_params(cfg, seed=0, dtype=dt)
    if count != len(model.flat):
        raise FormatError(f"checkpoint stores {count} tensors, config builds "
                          f"{len(model.flat)}")
    itemsize = np.dtype(dt).itemsize
    for expected_name, p in model.flat.items():
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        if name != expected_name:
            raise FormatError(f"tensor order mismatch: file has {name!r} where "
                              f"{expected_name!r} belongs")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        if shape != p.data.shape:
            raise FormatError(f"{name} stored as {shape}, config wants {p.data.shape}")
        n = int(np.prod(shape)) if ndim else 1
        p.data = np.frombuffer(r.take(n * itemsize), dtype=dt).reshape(shape).copy()

    (has_opt,) = r.unpack("<B")
    opt = None
    if has_opt:
        b1, b2, eps, wd, ostep = r.unpack("<ddddQ")
        opt = OptimState(beta1=b1, beta2=b2, eps=eps, weight_decay=wd, step=ostep)
        for name, p in model.flat.items():
            n = p.data.size * itemsize
            opt.m[name] = np.frombuffer(r.take(n), dtype=dt).reshape(p.data.shape).copy()
            opt.v[name] = np.frombuffer(r.take(n), dtype=dt).reshape(p.data.shape).copy()
    if r.off != len(r.blob):
        raise FormatError(f"{len(r.blob) - r.off} trailing bytes at offset {r.off}")
    return model, opt, step, budget


# ------------------------------------------------------- gradient checking

def check_model_gradients(model: Model, sample, samples_per_tensor: int = 1,
                          eps: float = 1e-5, seed: int = 0) -> dict:
    """Compare taped gradients of the combined loss against central
    differences at ``samples_per_tensor`` random elements of every parameter.

    Relative error uses max(|analytic|, |numeric|, 1e-5) as denominator: the
    floor absorbs finite-difference noise on near-zero gradients while any
    wrong gradient of consequential size still fails loudly.  Returns
    {"max_rel_err", "worst_tensor", "probes"}.
    """
    specs = default_specs(model.cfg.tasks)
    dt = next(iter(model.flat.values())).data.dtype
    img = np.asarray(sample.rgb, dtype=dt)

    def loss_value() -> float:
        preds = forward(model, Tensor(img))
        losses = {t: per_task_loss(t, preds[t], sample.target(t))
                  for t in model.cfg.tasks}
        total, _ = combine_losses(losses, specs)
        return float(total.data)

    zero_grad(model.flat.values())
    with Tape() as tape:
        preds = forward(model, Tensor(img))
        losses = {t: per_task_loss(t, preds[t], sample.target(t))
                  for t in model.cfg.tasks}
        total, _ = combine_losses(losses, specs)
        tape.backward(total)

    rng = np.random.default_rng(seed)
    worst = 0.0
    worst_name = None
    probes = 0
    for name, p in model.flat.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for flat_idx in rng.choice(p.data.size,
                                   size=min(samples_per_tensor, p.data.size),
                                   replace=False):
            original = flat[flat_idx]
            flat[flat_idx] = original + eps
            hi = loss_value()
            flat[flat_idx] = original - eps
            lo = loss_value()
            flat[flat_idx] = original
            numeric = (hi - lo) / (2.0 * eps)
            analytic = grad.reshape(-1)[flat_idx]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-5)
            probes += 1
            if rel > worst:
                worst, worst_name = rel, name
    zero_grad(model.flat.values())
    return {"max_rel_err": worst, "worst_tensor": worst_name, "probes": probes}
