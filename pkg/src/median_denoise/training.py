"""L2 training loop: Adam/SGD updates, loss logging, checkpointing, resume.

Batches mix noise levels: each step draws clean patches and noise levels with
a generator keyed by (seed, step), so runs are reproducible and a resumed run
continues the exact same sequence without re-tracking any sampler state.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import network
from .metrics import psnr
from .tensor import Tape

__all__ = ["TrainConfig", "TrainingDiverged", "Adam", "SGD", "PatchSet",
           "split_patchset", "make_validation", "train_step", "train_loop"]


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    total_steps: int = 1000
    ckpt_interval: int = 500
    val_interval: int = 100
    seed: int = 0
    noise_levels: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    lr_decay_steps: int | None = None
    lr_decay_factor: float = 0.5

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    def lr_at(self, step: int) -> float:
        if not self.lr_decay_steps:
            return self.lr
        return self.lr * self.lr_decay_factor ** (step // self.lr_decay_steps)


class Adam:
    """Adam with bias correction; moments keyed by parameter name."""

    kind = "adam"

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p in self.params:
            m = self.m[p.name]
            v = self.v[p.name]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad * p.grad
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def meta(self):
        return {"kind": self.kind, "t": self.t, "lr": self.lr,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def tensors(self):
        for p in self.params:
            yield f"adam.m.{p.name}", self.m[p.name]
            yield f"adam.v.{p.name}", self.v[p.name]

    def load_tensors(self, opt_tensors):
        for p in self.params:
            self.m[p.name] = opt_tensors[f"adam.m.{p.name}"].astype(
                p.data.dtype, copy=True)
            self.v[p.name] = opt_tensors[f"adam.v.{p.name}"].astype(
                p.data.dtype, copy=True)


class SGD:
    """Plain gradient descent behind the same contract as Adam."""

    kind = "sgd"

    def __init__(self, params, lr=1e-3, **_unused):
        self.params = list(params)
        self.lr = lr
        self.t = 0

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for p in self.params:
            p.data -= lr * p.grad

    def meta(self):
        return {"kind": self.kind, "t": self.t, "lr": self.lr}

    def tensors(self):
        return ()

    def load_tensors(self, opt_tensors):
        pass


def make_optimizer(model, cfg: TrainConfig):
    cls = Adam if cfg.optimizer == "adam" else SGD
    return cls(model.parameters(), lr=cfg.lr, beta1=cfg.beta1,
               beta2=cfg.beta2, eps=cfg.eps)


class PatchSet:
    """Clean training patches, (N, c, h, w) float32 in [0, 1]."""

    def __init__(self, clean: np.ndarray):
        clean = np.asarray(clean, dtype=np.float32)
        if clean.ndim != 4 or clean.shape[0] == 0:
            raise ValueError(f"expected non-empty (N, c, h, w), got {clean.shape}")
        self.clean = clean

    @classmethod
    def from_images(cls, images, patch_size: int = 70, stride: int | None = None):
        """Cut a non-overlapping patch grid from [0, 1] images."""
        if stride is None:
            stride = patch_size
        patches = []
        for image in images:
            image = np.asarray(image, dtype=np.float32)
            if image.ndim == 2:
                image = image[..., None]
            h, w = image.shape[:2]
            if patch_size > h or patch_size > w:
                raise ValueError(
                    f"patch size {patch_size} exceeds image dimensions {h}x{w}")
            for i in range(0, h - patch_size + 1, stride):
                for j in range(0, w - patch_size + 1, stride):
                    patches.append(
                        image[i:i + patch_size, j:j + patch_size].transpose(2, 0, 1))
        return cls(np.stack(patches))

    def batch(self, seed: int, step: int, batch_size: int, levels):
        """Deterministic (noisy, clean) batch for one training step."""
        rng = np.random.default_rng((seed, step))
        idx = rng.integers(0, self.clean.shape[0], size=batch_size)
        clean = self.clean[idx]
        lvl = rng.choice(np.asarray(levels, dtype=np.float64), size=batch_size)
        r1 = rng.random(clean.shape)
        r2 = rng.random(clean.shape)
        hit = r1 < lvl[:, None, None, None]
        noisy = clean.copy()
        noisy[hit & (r2 < 0.5)] = 0.0
        noisy[hit & (r2 >= 0.5)] = 1.0
        return noisy, clean


def split_patchset(patchset: PatchSet, val_count: int, seed: int = 0):
    """Split off ``val_count`` patches as a held-out set (disjoint from
    training).  Returns ``(train_patchset, heldout_patchset)``."""
    n = patchset.clean.shape[0]
    if not 0 < val_count < n:
        raise ValueError(f"val_count must be in (0, {n}), got {val_count}")
    rng = np.random.default_rng((seed, 0x5EED_0002))
    idx = rng.permutation(n)
    return (PatchSet(patchset.clean[idx[val_count:]]),
            PatchSet(patchset.clean[idx[:val_count]]))


def make_validation(patchset: PatchSet, count: int, level: float, seed: int):
    """Fixed held-out pairs; the same seed always yields the same noise."""
    rng = np.random.default_rng((seed, 0x5EED_0001))
    idx = rng.choice(patchset.clean.shape[0], size=min(count, patchset.clean.shape[0]),
                     replace=False)
    clean = patchset.clean[idx]
    r1 = rng.random(clean.shape)
    r2 = rng.random(clean.shape)
    hit = r1 < level
    noisy = clean.copy()
    noisy[hit & (r2 < 0.5)] = 0.0
    noisy[hit & (r2 >= 0.5)] = 1.0
    return noisy, clean


def validation_psnr(model, val_pairs) -> float:
    noisy, clean = val_pairs
    out = model.predict(noisy, mode="eval")
    scores = [psnr(out[i] * 255.0, clean[i] * 255.0) for i in range(out.shape[0])]
    return float(np.mean(scores))


def train_step(model, optimizer, noisy: np.ndarray, clean: np.ndarray,
               lr: float | None = None) -> float:
    """One forward/backward/update on a (noisy, clean) batch; returns the loss."""
    model.zero_grads()
    tape = Tape()
    pred = network.forward(model, tape.constant(noisy), tape, mode="train")
    loss = tape.mse_loss(pred, tape.constant(clean))
    loss_val = float(loss.data)
    if not math.isfinite(loss_val):
        raise TrainingDiverged(f"non-finite loss {loss_val}")
    tape.backward(loss)
    max_grad = max((float(np.max(np.abs(p.grad))) for p in model.parameters()),
                   default=0.0)
    if not math.isfinite(max_grad):
        raise TrainingDiverged(f"non-finite gradient (loss {loss_val})")
    optimizer.step(lr=lr)
    return loss_val


def _write_config_echo(path, model, cfg: TrainConfig):
    with open(path, "w") as fh:
        for key, value in sorted(asdict(model.config).items()):
            fh.write(f"network.{key}={value}\n")
        for key, value in sorted(asdict(cfg).items()):
            fh.write(f"train.{key}={value}\n")


def _latest_checkpoint(out_dir):
    best = None
    for name in os.listdir(out_dir):
        if name.startswith("ckpt_"):
            try:
                step = int(name.split("_", 1)[1])
            except ValueError:
                continue
            if best is None or step > best[0]:
                best = (step, os.path.join(out_dir, name))
    return best


def train_loop(model, patchset: PatchSet, cfg: TrainConfig, out_dir,
               val_pairs=None, resume: bool = False, log_every: int = 1):
    """Run the configured number of steps, logging and checkpointing.

    Emits ``loss_log.csv`` (header ``step,loss,val_psnr``), ``train_config``
    (flat key=value echo), and ``ckpt_<step>`` files.  With ``resume=True``
    the latest checkpoint in ``out_dir`` is loaded and the log continues
    from the saved step with no gap.
    """
    os.makedirs(out_dir, exist_ok=True)
    log_path = os.path.join(out_dir, "loss_log.csv")
    start_step = 0
    optimizer = make_optimizer(model, cfg)

    if resume:
        latest = _latest_checkpoint(out_dir)
        if latest is not None:
            start_step, path = latest
            model, meta, opt_tensors = network.load_checkpoint(path)
            optimizer = make_optimizer(model, cfg)
            if meta.get("optimizer"):
                optimizer.t = meta["optimizer"].get("t", 0)
                optimizer.load_tensors(opt_tensors)

    _write_config_echo(os.path.join(out_dir, "train_config"), model, cfg)
    mode = "a" if (resume and start_step > 0 and os.path.exists(log_path)) else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss", "val_psnr"])
        if cfg.total_steps == 0 or start_step == 0:
            network.save_checkpoint(model, os.path.join(out_dir, "ckpt_0"),
                                    optimizer_state=optimizer, step=0)
        for step in range(start_step + 1, cfg.total_steps + 1):
            noisy, clean = patchset.batch(cfg.seed, step, cfg.batch_size,
                                          cfg.noise_levels)
            try:
                loss = train_step(model, optimizer, noisy, clean,
                                  lr=cfg.lr_at(step))
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"step {step}: {exc}") from exc
            val = ""
            if val_pairs is not None and cfg.val_interval and \
                    step % cfg.val_interval == 0:
                val = f"{validation_psnr(model, val_pairs):.6f}"
            if step % log_every == 0 or step == cfg.total_steps:
                writer.writerow([step, f"{loss:.8f}", val])
            if (cfg.ckpt_interval and step % cfg.ckpt_interval == 0) or \
                    step == cfg.total_steps:
                network.save_checkpoint(
                    model, os.path.join(out_dir, f"ckpt_{step}"),
                    optimizer_state=optimizer, step=step)
    return model, os.path.join(out_dir, f"ckpt_{cfg.total_steps}")
