"""Toy training loop: adaptive-moment optimizer, deterministic batching, logging."""

from __future__ import annotations

import json
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nm
from .blocks import DynastModel
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config
from .data import ToySample
from .losses import (
    FeatureExtractor,
    PatchDiscriminator,
    discriminator_loss,
    matching_loss,
    supervised_task_loss,
    total_loss,
)
from .numerics import NumericError, ParameterStore, Tensor


class Adam:
    """Adaptive moments over a parameter store; state is checkpointable."""

    def __init__(self, store: ParameterStore, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in store}
        self.v = {p.name: np.zeros_like(p.data) for p in store}

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p in self.store:
            if p.grad is None:
                continue
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * (p.grad * p.grad)
            p.tensor.data = p.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"opt.t": np.array([float(self.t)])}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        if "opt.t" in state:
            self.t = int(state["opt.t"][0])
        for name in self.m:
            if f"opt.m.{name}" in state:
                self.m[name] = np.array(state[f"opt.m.{name}"])
                self.v[name] = np.array(state[f"opt.v.{name}"])


def batch_indices(seed: int, step: int, n_samples: int, batch: int) -> np.ndarray:
    """Deterministic per-step batch choice; resuming at a step reproduces it."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, step))))
    return rng.integers(0, n_samples, size=batch)


def _sample_tensors(sample: ToySample):
    return (
        Tensor(sample.s_tgt),
        Tensor(sample.s_ref),
        Tensor(sample.i_ref),
        Tensor(sample.i_tgt),
    )


def train_step(model: DynastModel, cfg: Config, dataset: list[ToySample],
               extractor, step: int, discriminator=None, disc_opt=None):
    """One optimizer step over a deterministic batch; returns the averaged report."""
    mcfg = cfg.model
    batch = batch_indices(cfg.train.seed, step, len(dataset), cfg.train.batch_size)
    model.store.zero_grad()
    if discriminator is not None:
        _set_trainable(discriminator.store, False)  # generator pass sees D as fixed
    agg = {"total": 0.0, "task": 0.0, "matching": 0.0}
    per_block_acc: dict[tuple[int, int], float] = {}
    inv = 1.0 / len(batch)
    fakes = []
    for si in batch:
        s_tgt, s_ref, i_ref, i_tgt = _sample_tensors(dataset[si])
        try:
            out = model.forward(s_tgt, s_ref, i_ref)
            task, parts = supervised_task_loss(
                out.image, i_tgt, s_tgt, extractor,
                perceptual_weights=mcfg.perceptual_weights,
                discriminator=discriminator,
                adv_weight=mcfg.adv_loss_weight,
            )
            match, per_block = matching_loss(out.blocks, i_ref, i_tgt)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}") from None
        loss, report = total_loss(task, match, mcfg.match_loss_weight, per_block, parts)
        for name, value in (("total", report.total), ("task", report.task),
                            ("matching", report.matching)):
            if not np.isfinite(value):
                raise NumericError(f"step {step}: non-finite {name} loss")
            agg[name] += value * inv
        for scale, idx, val in per_block:
            key = (scale, idx)
            per_block_acc[key] = per_block_acc.get(key, 0.0) + val * inv
        loss.backward(np.array(inv))
        if discriminator is not None:
            fakes.append((s_tgt, i_tgt, out.image.detach()))

    if discriminator is not None and disc_opt is not None:
        _set_trainable(discriminator.store, True)
        discriminator.store.zero_grad()
        for s_tgt, i_tgt, fake in fakes:
            d_loss = discriminator_loss(
                discriminator.forward(s_tgt, i_tgt),
                discriminator.forward(s_tgt, fake),
            )
            d_loss.backward(np.array(inv))
        disc_opt.step()
    return agg, sorted(per_block_acc.items())


def _set_trainable(store: ParameterStore, flag: bool):
    for p in store:
        p.tensor.requires_grad = flag


def log_line(step: int, agg: dict, per_block) -> str:
    record = {
        "step": step,
        "total": agg["total"],
        "task": agg["task"],
        "matching": agg["matching"],
        "per_block_matching": [[s, j, v] for (s, j), v in per_block],
    }
    return json.dumps(record)


def train_toy(cfg: Config, dataset: list[ToySample], steps: int, out_dir,
              start_step: int = 0, model: Optional[DynastModel] = None,
              optimizer: Optional[Adam] = None, echo=None) -> Path:
    """Run the toy objective for `steps` steps; writes log + checkpoint + figure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train
    if model is None:
        model = DynastModel(cfg.model, seed=tcfg.seed)
    if optimizer is None:
        optimizer = Adam(model.store, lr=tcfg.learning_rate,
                         beta1=tcfg.adam_beta1, beta2=tcfg.adam_beta2)
    extractor = FeatureExtractor(in_channels=cfg.model.image_channels,
                                 seed=tcfg.extractor_seed)
    discriminator = disc_opt = None
    if cfg.model.adv_loss_weight > 0:
        discriminator = PatchDiscriminator(cfg.model.semantic_channels,
                                           cfg.model.image_channels,
                                           seed=tcfg.seed + 1)
        disc_opt = Adam(discriminator.store, lr=tcfg.learning_rate)

    log_path = out / "train_log.jsonl"
    mode = "a" if start_step > 0 and log_path.exists() else "w"
    history: list[dict] = []
    with open(log_path, mode, encoding="ascii") as log, nm.single_thread_blas():
        for step in range(start_step + 1, steps + 1):
            t0 = time.perf_counter()
            agg, per_block = train_step(model, cfg, dataset, extractor, step,
                                        discriminator, disc_opt)
            optimizer.step()
            line = log_line(step, agg, per_block)
            log.write(line + "\n")
            history.append({"step": step, **agg})
            if echo is not None:
                ms = (time.perf_counter() - t0) * 1000.0
                echo(f"{line[:-1]}, \"ms\": {ms:.1f}}}")

    ckpt_path = out / "model.ckpt"
    save_checkpoint(ckpt_path, cfg, model.state_arrays(),
                    state=optimizer.state_arrays(), step=steps)
    try:
        render_loss_figure(log_path, out / "loss_curves.png")
    except Exception:
        pass  # figures are a convenience, never a training failure
    return ckpt_path


def resume_model(ckpt_path) -> tuple[DynastModel, Adam, Config, int]:
    cfg, params, state, step = load_checkpoint(ckpt_path)
    model = DynastModel(cfg.model, seed=cfg.train.seed)
    model.load_state(params)
    optimizer = Adam(model.store, lr=cfg.train.learning_rate,
                     beta1=cfg.train.adam_beta1, beta2=cfg.train.adam_beta2)
    optimizer.load_state(state)
    return model, optimizer, cfg, step


def read_log(log_path) -> list[dict]:
    lines = Path(log_path).read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def render_loss_figure(log_path, fig_path):
    """Loss curves (total/task/matching) rendered alongside the log."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = read_log(log_path)
    if not records:
        return
    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for key in ("total", "task", "matching"):
        ax.plot(steps, [r[key] for r in records], label=key)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("training losses")
    fig.tight_layout()
    fig.savefig(fig_path, dpi=110)
    plt.close(fig)
