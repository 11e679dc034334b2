"""Loss, Adam, and the epoch loop with early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .metrics import psnr, ssim_tensor
from .model import FusionModel, NumericalError
from .tensor import Parameter, Tensor

log = logging.getLogger(__name__)

SSIM_WEIGHT = 0.2
EARLY_STOP_METRIC = "val_l1"  # stands in for LPIPS, which needs a pretrained network

Pair = tuple[np.ndarray, np.ndarray]


class NaNAbort(ArithmeticError):
    """Training hit a non-finite loss or gradient."""


def loss(pred: Tensor, target: Tensor) -> Tensor:
    """mean|pred - target| + 0.2 * (1 - SSIM(pred, target))."""
    pred, target = T.as_tensor(pred), T.as_tensor(target)
    if pred.shape != target.shape:
        raise T.ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    l1 = T.mean(T.abs_(pred - target))
    return l1 + (1.0 - ssim_tensor(pred, target)) * SSIM_WEIGHT


@dataclass
class AdamConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainState:
    seed: int = 0
    step: int = 0
    epoch: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    best_score: float = math.inf
    bad_epochs: int = 0


def adam_step(state: TrainState, params: Sequence[tuple[str, Parameter]],
              lr: float = 2e-4, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad``.

    All gradients are checked before anything is touched, so a NaN leaves
    parameters and moments as they were.
    """
    for name, p in params:
        if p.grad is None:
            raise ValueError(f"parameter {name} has no gradient")
        if not np.isfinite(p.grad).all():
            raise NaNAbort(f"non-finite gradient in parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params:
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    patience: int = 5
    seed: int = 0
    adam: AdamConfig = field(default_factory=AdamConfig)
    checkpoint: Optional[Path] = None
    history: Optional[Path] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.adam.lr < 0:
            raise ValueError("learning rate must be >= 0")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_l1: float
    val_psnr: float

    def line(self) -> str:
        return (f"epoch={self.epoch} train_loss={self.train_loss!r} "
                f"{EARLY_STOP_METRIC}={self.val_l1!r} val_psnr={self.val_psnr!r}")


@dataclass
class TrainResult:
    history: list[EpochRecord]
    state: TrainState
    best_val_l1: float
    best_val_psnr: float
    stopped_early: bool
    aborted: Optional[str] = None


def _check_pairs(pairs: Sequence[Pair], what: str) -> None:
    if len(pairs) == 0:
        raise ValueError(f"{what} dataset is empty")
    for i, (x, y) in enumerate(pairs):
        if np.shape(x) != np.shape(y):
            raise T.ShapeError(f"{what} pair {i}: degraded {np.shape(x)} vs clean {np.shape(y)}")


def evaluate(model: FusionModel, pairs: Sequence[Pair]) -> tuple[float, float]:
    """Mean L1 and mean PSNR of the model over ``pairs`` (no graph recorded)."""
    l1s, ps = [], []
    with T.no_grad():
        for x, y in pairs:
            out = model(x).data
            l1s.append(float(np.mean(np.abs(out - y))))
            ps.append(psnr(out, y))
    return float(np.mean(l1s)), float(np.mean(ps))


def train_batch(model: FusionModel, batch: Sequence[Pair], named: Sequence[tuple[str, Parameter]]) -> float:
    """Accumulate the mean loss gradient over ``batch``; returns the mean loss."""
    model.zero_grad()
    total = 0.0
    scale = 1.0 / len(batch)
    for x, y in batch:
        l = loss(model(x), Tensor(y))
        if not np.isfinite(l.data).all():
            raise NaNAbort("non-finite training loss")
        T.backward(l * scale, [p for _, p in named])
        total += l.item()
    return total * scale


def train(
    model: FusionModel,
    train_pairs: Sequence[Pair],
    val_pairs: Sequence[Pair],
    config: TrainConfig,
    state: Optional[TrainState] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Train with Adam, early-stopping on validation L1.

    The best checkpoint (by validation L1) is written to
    ``config.checkpoint`` whenever it improves; a NaN abort therefore leaves
    the last good checkpoint on disk.  History lines are appended to
    ``config.history`` as each epoch completes.  On return the model
    holds the best parameters seen, not the last ones.
    """
    from .checkpoint import save_checkpoint

    _check_pairs(train_pairs, "training")
    _check_pairs(val_pairs, "validation")
    state = state or TrainState(seed=config.seed)
    named = list(model.named_parameters())
    rng = np.random.default_rng(config.seed)
    history: list[EpochRecord] = []
    best_psnr = -math.inf
    hist_fh = open(config.history, "w") if config.history is not None else None
    if hist_fh:
        hist_fh.write(f"# early_stopping_metric={EARLY_STOP_METRIC}\n")
    aborted = None
    stopped_early = False
    best_params: Optional[list[np.ndarray]] = None
    try:
        for _ in range(config.epochs):
            order = rng.permutation(len(train_pairs))
            losses = []
            try:
                for s in range(0, len(order), config.batch_size):
                    batch = [train_pairs[i] for i in order[s:s + config.batch_size]]
                    losses.append(train_batch(model, batch, named))
                    a = config.adam
                    adam_step(state, named, a.lr, a.beta1, a.beta2, a.eps)
            except (NaNAbort, NumericalError) as exc:
                aborted = str(exc)
                log.error("aborting: %s", exc)
                break
            state.epoch += 1
            val_l1, val_psnr = evaluate(model, val_pairs)
            rec = EpochRecord(state.epoch, float(np.mean(losses)), val_l1, val_psnr)
            history.append(rec)
            if hist_fh:
                hist_fh.write(rec.line() + "\n")
                hist_fh.flush()
            if val_l1 < state.best_score:
                state.best_score = val_l1
                state.bad_epochs = 0
                best_psnr = val_psnr
                best_params = [p.data.copy() for _, p in named]
                if config.checkpoint is not None:
                    save_checkpoint(model, state, config.checkpoint)
            else:
                state.bad_epochs += 1
            if on_epoch:
                on_epoch(rec)
            if state.bad_epochs >= config.patience:
                stopped_early = True
                break
    finally:
        if hist_fh:
            hist_fh.close()
    if best_params is not None:
        for (_, p), data in zip(named, best_params):
            p.data[...] = data
    return TrainResult(history, state, state.best_score, best_psnr, stopped_early, aborted)


@dataclass
class OverfitTrace:
    losses: list[float]
    psnrs: dict[int, float]

    def first_step_at_psnr(self, target: float) -> Optional[int]:
        hits = [s for s, p in sorted(self.psnrs.items()) if p > target]
        return hits[0] if hits else None


def overfit(model: FusionModel, pair: Pair, steps: int, adam: AdamConfig = AdamConfig(),
            psnr_every: int = 50, stop_psnr: Optional[float] = None) -> OverfitTrace:
    """Repeated Adam steps on a single pair.

    ``losses[k]`` is the loss evaluated before update k+1.  PSNR of the
    current output is recorded every ``psnr_every`` steps (and after the
    last); with ``stop_psnr`` the run ends as soon as it is exceeded.
    """
    x, y = pair
    target = Tensor(y)
    named = list(model.named_parameters())
    state = TrainState()
    trace = OverfitTrace([], {})
    for k in range(1, steps + 1):
        model.zero_grad()
        out = model(x)
        l = loss(out, target)
        if not np.isfinite(l.data).all():
            raise NaNAbort(f"non-finite loss at step {k}")
        T.backward(l, [p for _, p in named])
        trace.losses.append(l.item())
        adam_step(state, named, adam.lr, adam.beta1, adam.beta2, adam.eps)
        if k % psnr_every == 0 or k == steps:
            with T.no_grad():
                trace.psnrs[k] = psnr(model(x).data, y)
            if stop_psnr is not None and trace.psnrs[k] > stop_psnr:
                break
    return trace
