"""
Variable-scale training.

Every step draws one scale factor R from {1 + stride, ..., r_max} and shares
it across the batch: each batch item is a fresh (input, target) pair cut
from a training patch at that R, augmented, pushed through the network and
scored with the compound loss. Gradients of the batch-mean loss are
accumulated item by item in batch order, clipped to a global norm, and
applied with Adam under a cosine-annealed learning rate (one rate for the
meta-subnetwork FC layers, another for everything else).

All randomness flows from one ``np.random.Generator`` whose state is stored
in checkpoints, so a resumed run replays the uninterrupted one exactly.
"""
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import pandas as pd

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .config import Config, ConfigRecord
from .data import DataConfig, DatasetManifest, augment, make_training_pair
from .errors import ConfigError, DataFormatError, NonFiniteLossError
from .loss import LossConfig, compound_loss
from .net import NetConfig, ParamStore, init_params, metapu_forward, scale_set

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["step", "scale", "loss", "rec", "uni", "rep", "grad_norm", "lr_fc", "lr_other", "nonconverged"]


@dataclass
class TrainConfig(ConfigRecord):
    epochs: int = 60
    batch_size: int = 18
    lr_fc: float = 1e-3
    lr_other: float = 1e-4
    lr_floor: float = 1e-5
    r_max: int = 16
    scale_stride: float = 0.1
    # Fixed step budget; None derives it from epochs and the train split size
    steps: Optional[int] = None
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 10
    # 0 saves only the final checkpoint
    checkpoint_every: int = 0
    seed: int = Config.DEFAULT_SEED
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig.from_dict(self.loss)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs and batch_size must be >= 1, got {self.epochs}, {self.batch_size}")
        if self.steps is not None and self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if min(self.lr_fc, self.lr_other, self.lr_floor) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.r_max < 2:
            raise ConfigError(f"r_max must be >= 2, got {self.r_max}")
        if not 0 < self.scale_stride < self.r_max - 1:
            raise ConfigError(f"scale_stride must be in (0, r_max - 1), got {self.scale_stride}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive or null, got {self.clip_norm}")

    def total_steps(self, n_train: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * max(1, math.ceil(n_train / self.batch_size))


@dataclass
class AdamMoments:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros(cls, params: ParamStore) -> "AdamMoments":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
        )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: pd.DataFrame


# ============================================================================
# Optimizer pieces
# ============================================================================

def cosine_lr(step: int, total_steps: int, lr_init: float, lr_floor: float) -> float:
    """lr_floor + (lr_init - lr_floor) * (1 + cos(pi * step / total)) / 2, never below lr_floor."""
    if total_steps <= 0:
        return lr_init
    step = min(max(step, 0), total_steps)
    lr = lr_floor + 0.5 * (lr_init - lr_floor) * (1.0 + math.cos(math.pi * step / total_steps))
    return max(lr, lr_floor)


def learning_rates(params: ParamStore, lr_fc: float, lr_other: float) -> Dict[str, float]:
    """Per-parameter learning rate: lr_fc for meta-subnetwork FC layers, lr_other elsewhere."""
    return {name: lr_fc if ParamStore.is_meta_fc(name) else lr_other for name in params}


def adam_step(params: ParamStore, grads: Dict[str, np.ndarray], moments: AdamMoments,
              lr_map: Dict[str, float], step: int,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """
    One Adam update with bias correction for the 1-based ``step``.

    Raises:
        ConfigError: if a parameter has no gradient
    """
    b1, b2 = betas
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ConfigError(f"missing gradient for parameter {name}")
        m = moments.m.setdefault(name, np.zeros_like(p.data))
        v = moments.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        p.data -= lr_map[name] * m_hat / (np.sqrt(v_hat) + eps)
    moments.t = step


def gradients(params: ParamStore) -> Dict[str, np.ndarray]:
    """Current gradients; parameters the loss never reached get zeros."""
    return {name: p.grad if p.grad is not None else np.zeros_like(p.data) for name, p in params.items()}


def clip_gradients(params: ParamStore, max_norm: Optional[float]) -> float:
    """Scale all gradients in place so their global L2 norm is at most max_norm; returns the norm before."""
    sq = sum(float((p.grad * p.grad).sum()) for _, p in params.items() if p.grad is not None)
    norm = math.sqrt(sq)
    if max_norm is not None and norm > max_norm:
        factor = max_norm / norm
        for _, p in params.items():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


# ============================================================================
# Loop
# ============================================================================

def _dump_batch(dump_dir: Optional[Path], step: int, scale: float, inputs, targets) -> Optional[str]:
    if dump_dir is None:
        return None
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"nonfinite_step{step:06d}.npz"
    arrays = {f"input_{i}": x for i, x in enumerate(inputs)}
    arrays.update({f"target_{i}": y for i, y in enumerate(targets)})
    np.savez(path, scale=np.array(scale), step=np.array(step), **arrays)
    return str(path)


def load_train_patches(manifest: DatasetManifest) -> List[np.ndarray]:
    records = manifest.split("train", kind="patch")
    if not records:
        raise DataFormatError("manifest has no training patches", str(manifest.root))
    return [manifest.load_cloud(r).points for r in records]


def train_loop(manifest: DatasetManifest, net_config: NetConfig, train_config: TrainConfig,
               data_config: Optional[DataConfig] = None,
               resume: Optional[Checkpoint] = None,
               checkpoint_path: Optional[Union[str, Path]] = None,
               run_config: Optional[dict] = None,
               on_step: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """
    Train (or continue training) and return the final checkpoint with the loss trace.

    ``resume`` restores parameters, Adam moments, the step counter and the
    generator state; the returned trace then covers only the new steps.
    Non-finite losses abort with ``NonFiniteLossError`` after dumping the
    batch next to ``checkpoint_path``.
    """
    data_config = data_config or manifest.data_config()
    if net_config.r_max != train_config.r_max:
        raise ConfigError(f"net r_max={net_config.r_max} differs from train r_max={train_config.r_max}")
    patches = load_train_patches(manifest)
    total = train_config.total_steps(len(patches))
    scales = scale_set(train_config.r_max, train_config.scale_stride)
    loss_cfg = train_config.loss
    batch = min(train_config.batch_size, len(patches))
    dump_dir = Path(checkpoint_path).parent if checkpoint_path else None
    run_config = run_config or {}

    rng = np.random.default_rng(train_config.seed)
    if resume is not None:
        if resume.net_config != net_config:
            raise ConfigError("checkpoint network config differs from the requested one")
        params = resume.params
        moments = AdamMoments(m=dict(resume.m), v=dict(resume.v), t=resume.adam_step)
        start = resume.step
        if resume.rng_state is not None:
            rng.bit_generator.state = resume.rng_state
        logger.info("resuming at step %d of %d", start, total)
    else:
        params = init_params(net_config, rng)
        moments = AdamMoments.zeros(params)
        start = 0
    logger.info("training %d steps: %d patches, batch %d, %d scales, %d parameters",
                total - start, len(patches), batch, len(scales), params.count())

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(net_config=net_config, params=params, step=step, adam_step=moments.t,
                          m=moments.m, v=moments.v, rng_state=rng.bit_generator.state,
                          run_config=run_config)

    rows = []
    for step in range(start, total):
        scale = float(scales[rng.integers(len(scales))])
        chosen = rng.choice(len(patches), size=batch, replace=False)
        params.zero_grad()
        row = {"step": step + 1, "scale": scale, "loss": 0.0, "rec": 0.0, "uni": 0.0, "rep": 0.0}
        nonconverged = 0
        inputs, targets = [], []
        for i in chosen:
            pair = make_training_pair(patches[i], scale, data_config.n_max, rng,
                                      sigma=data_config.density_sigma, source_id=str(i))
            pair = augment(pair, rng, data_config.augment)
            inputs.append(pair.input.points)
            targets.append(pair.target.points)
            yp = metapu_forward(pair.input.points, scale, params, net_config)
            terms = compound_loss(pair.target.points, yp, loss_cfg)
            value = terms.total.item()
            if not np.isfinite(value):
                dump = _dump_batch(dump_dir, step + 1, scale, inputs, targets)
                raise NonFiniteLossError(f"non-finite loss {value} at step {step + 1} (R={scale})", dump)
            T.scale(terms.total, 1.0 / batch).backward()
            nonconverged += int(not terms.converged)
            for key in ("rec", "uni", "rep"):
                row[key] += getattr(terms, key) / batch
            row["loss"] += value / batch

        if nonconverged:
            logger.warning("step %d: sinkhorn did not converge for %d of %d items", step + 1, nonconverged, batch)
        grad_norm = clip_gradients(params, train_config.clip_norm)
        if not np.isfinite(grad_norm):
            dump = _dump_batch(dump_dir, step + 1, scale, inputs, targets)
            raise NonFiniteLossError(f"non-finite gradient norm at step {step + 1} (R={scale})", dump)

        lr_fc = cosine_lr(step, total, train_config.lr_fc, train_config.lr_floor)
        lr_other = cosine_lr(step, total, train_config.lr_other, train_config.lr_floor)
        adam_step(params, gradients(params), moments, learning_rates(params, lr_fc, lr_other), moments.t + 1,
                  betas=(train_config.beta1, train_config.beta2), eps=train_config.adam_eps)
        params.zero_grad()

        row.update({"grad_norm": grad_norm, "lr_fc": lr_fc, "lr_other": lr_other, "nonconverged": nonconverged})
        rows.append(row)
        if on_step is not None:
            on_step(row)
        if train_config.log_every and ((step + 1) % train_config.log_every == 0 or step + 1 == total):
            logger.info("step %d/%d R=%.1f loss=%.6g rec=%.6g uni=%.6g rep=%.6g lr=%.3g",
                        step + 1, total, scale, row["loss"], row["rec"], row["uni"], row["rep"], lr_other)
        if checkpoint_path and train_config.checkpoint_every and (step + 1) % train_config.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, snapshot(step + 1))

    final = snapshot(total)
    if checkpoint_path:
        save_checkpoint(checkpoint_path, final)
    return TrainResult(checkpoint=final, trace=pd.DataFrame(rows, columns=TRACE_COLUMNS))


def write_trace(path: Union[str, Path], trace: pd.DataFrame, append: bool = False) -> Path:
    """Write (or append to) the loss-trace CSV, one row per step."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if append and path.exists():
        trace.to_csv(path, mode="a", header=False, index=False)
    else:
        trace.to_csv(path, index=False)
    logger.debug("wrote %d trace rows to %s", len(trace), path)
    return path
