"""Training loop: Adam over the full parameter set, deterministic given the
seed.

Every random draw comes from a counter-based stream whose counter encodes
its purpose and epoch/step, so training is replayable and resuming from a
checkpoint continues bit-for-bit identically to an uninterrupted run:

* parameter init            counter 0 block
* training scene i          TRAIN_SCENE_BASE + i
* epoch shuffle             SHUFFLE_BASE + epoch
* perturbation noise        NOISE_BASE + epoch * 2^20 + step * 64
* evaluation scene i        EVAL_SCENE_BASE + i  (see evaluate.py)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..numcore import RngStream
from ..styleaug import WaveNPConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .evaluate import evaluate_ap, evaluation_scenes
from .losses import detection_loss, match_batch, objectness_targets
from .model import ModelConfig, init_params, model_backward, model_forward
from .scenes import DomainSpec, generate_scene, standard_domains

TRAIN_SCENE_BASE = 1 << 40
SHUFFLE_BASE = 1 << 42
NOISE_BASE = 1 << 44


class TrainingDivergedError(RuntimeError):
    """Raised when the loss goes non-finite; carries the offending step."""


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    dtype: str = "f64"                  # "f32" or "f64"
    epochs: int = 30
    n_scenes: int = 200
    batch_size: int = 8
    lr: float = 2e-3
    warmup_steps: int = 100       # linear LR ramp from zero
    lr_final_scale: float = 0.1   # cosine decay floor as a fraction of lr
    class_weight: float = 2.0
    box_weight: float = 5.0
    score_weight: float = 0.5
    objectness_weight: float = 1.0
    background_weight: float = 0.15
    wavenp: WaveNPConfig = field(default_factory=lambda: WaveNPConfig(enabled=False))
    style_projection: bool = True
    proj_alpha_infer: float = 1.0
    k: int = 10
    num_classes: int = 3
    resample_each_epoch: bool = True  # fresh scenes per epoch vs a fixed set
    eval_scenes: int = 32
    eval_domains: tuple[str, ...] = ()  # evaluated on the final epoch only
    source_domain: str = "source"

    def model_config(self) -> ModelConfig:
        return ModelConfig(num_classes=self.num_classes, k=self.k,
                           wavenp=self.wavenp,
                           style_projection=self.style_projection,
                           proj_alpha_infer=self.proj_alpha_infer)

    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    metrics: list[dict]


def adam_step(params, grads, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update in place; ``step`` is the 1-based update count."""
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for name, g in grads.items():
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        params[name] -= lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + eps)


def lr_at_step(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Linear warmup then cosine decay to ``lr * lr_final_scale``."""
    if cfg.warmup_steps > 0 and step <= cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = max(1, total_steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    floor = cfg.lr * cfg.lr_final_scale
    return floor + 0.5 * (cfg.lr - floor) * (1.0 + np.cos(np.pi * progress))


def training_scenes(cfg: TrainConfig, domain: DomainSpec, epoch: int = 0) -> list:
    """The scene set for one epoch. With ``resample_each_epoch`` every epoch
    draws fresh scenes from epoch-indexed counters (so resuming reproduces
    them); otherwise the epoch-0 set is reused throughout."""
    dtype = cfg.np_dtype()
    base = TRAIN_SCENE_BASE + (epoch * cfg.n_scenes if cfg.resample_each_epoch else 0)
    return [generate_scene(RngStream(cfg.seed, base + i), domain, dtype=dtype)
            for i in range(cfg.n_scenes)]


def train(cfg: TrainConfig, out_dir: str | Path | None = None,
          resume_from: str | Path | None = None,
          domains: dict[str, DomainSpec] | None = None,
          scene_cache: dict | None = None) -> TrainResult:
    """Train on the source domain only. Emits one metrics record per epoch
    ``{epoch, loss, ap_source, ap_per_domain}``; shifted-domain AP is filled
    in on the final epoch for the configured ``eval_domains``.

    With ``out_dir`` set, writes ``train_metrics.jsonl`` and
    ``checkpoint.dgck`` there. ``resume_from`` restores parameters,
    optimizer moments, and the epoch cursor; the continuation reproduces an
    uninterrupted same-seed run exactly. ``scene_cache`` (epoch -> scenes)
    lets paired runs that share a seed reuse generated scenes; it is
    filled in as epochs are generated.
    """
    domains = domains if domains is not None else standard_domains()
    source = domains[cfg.source_domain]
    mcfg = cfg.model_config()
    dtype = cfg.np_dtype()

    if resume_from is not None:
        params, adam_m, adam_v, step, start_epoch = load_checkpoint(resume_from)
        params = {k: v.astype(dtype) for k, v in params.items()}
        adam_m = {k: v.astype(dtype) for k, v in adam_m.items()}
        adam_v = {k: v.astype(dtype) for k, v in adam_v.items()}
    else:
        params = init_params(mcfg, RngStream(cfg.seed, 0), dtype=dtype)
        adam_m = {k: np.zeros_like(p) for k, p in params.items()}
        adam_v = {k: np.zeros_like(p) for k, p in params.items()}
        step, start_epoch = 0, 0

    metrics: list[dict] = []
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "train_metrics.jsonl"
        if start_epoch == 0 and metrics_path.exists():
            metrics_path.unlink()

    n_batches = (cfg.n_scenes + cfg.batch_size - 1) // cfg.batch_size
    source_eval = evaluation_scenes(cfg.seed, source, cfg.eval_scenes, dtype=dtype)
    dataset = None
    for epoch in range(start_epoch, cfg.epochs):
        if dataset is None or cfg.resample_each_epoch:
            key = epoch if cfg.resample_each_epoch else 0
            if scene_cache is not None and key in scene_cache:
                dataset = scene_cache[key]
            else:
                dataset = training_scenes(cfg, source, epoch)
                if scene_cache is not None:
                    scene_cache[key] = dataset
        order = RngStream(cfg.seed, SHUFFLE_BASE + epoch).permutation(cfg.n_scenes)
        epoch_loss = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch = [dataset[i] for i in idx]
            images = np.concatenate([s.image for s in batch], axis=0)
            targets = [(s.boxes, s.labels) for s in batch]
            rng = RngStream(cfg.seed, NOISE_BASE + (epoch << 20) + b * 64)

            outputs, trace = model_forward(params, mcfg, images, "train", rng)
            matches = match_batch(outputs.class_probs, outputs.boxes, targets)
            obj_targets = objectness_targets(targets, trace["grid_hw"], dtype=dtype)
            loss, ograds = detection_loss(
                outputs.class_probs, outputs.boxes, targets, matches,
                sel_scores=outputs.sel_scores, all_scores=outputs.all_scores,
                obj_targets=obj_targets, class_weight=cfg.class_weight,
                box_weight=cfg.box_weight, score_weight=cfg.score_weight,
                objectness_weight=cfg.objectness_weight,
                background_weight=cfg.background_weight)
            if not np.isfinite(loss.total):
                raise TrainingDivergedError(
                    f"non-finite loss {loss.total} at epoch {epoch} batch {b}")
            grads = model_backward(params, mcfg, trace, ograds.d_class_logits,
                                   ograds.d_box_logits, ograds.d_sel_scores,
                                   d_all_scores=ograds.d_all_scores)
            step += 1
            total_steps = cfg.epochs * n_batches
            adam_step(params, grads, adam_m, adam_v, step,
                      lr_at_step(cfg, step, total_steps))
            epoch_loss += loss.total * len(batch)
        epoch_loss /= cfg.n_scenes

        ap_source = evaluate_ap(params, mcfg, source, cfg.eval_scenes,
                                cfg.seed, dtype=dtype, scenes=source_eval)["mean"]
        ap_per_domain = {}
        if epoch == cfg.epochs - 1:
            for name in cfg.eval_domains:
                ap_per_domain[name] = evaluate_ap(params, mcfg, domains[name],
                                                  cfg.eval_scenes, cfg.seed,
                                                  dtype=dtype)["mean"]
        record = {"epoch": epoch, "loss": epoch_loss, "ap_source": ap_source,
                  "ap_per_domain": ap_per_domain}
        metrics.append(record)
        if metrics_path is not None:
            with open(metrics_path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "checkpoint.dgck", params, adam_m, adam_v,
                        step, cfg.epochs)
    return TrainResult(params=params, adam_m=adam_m, adam_v=adam_v, step=step,
                       metrics=metrics)
