"""
Optimizer and training schedules
AdamW, token-indexed learning-rate and batch-size schedules, noise temperature,
and loss-spike detection with rollback-and-skip recovery
"""

import bisect
import dataclasses
import fnmatch
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from config import GIGATOKEN
from tensor_core import ShapeError, Tensor

logger = logging.getLogger(__name__)

GT = GIGATOKEN


class NonFiniteGradientError(RuntimeError):
    """Gradient contains NaN or inf; handled by the spike manager"""

    def __init__(self, names: Sequence[str]):
        self.names = list(names)
        super().__init__(f"non-finite gradient in {', '.join(self.names)}")


class RollbackError(RuntimeError):
    """No checkpoint available to roll back to"""


@dataclass(frozen=True)
class OptimizerConfig:
    """
    AdamW hyperparameters

    eps_before_switch / eps_switch_tokens express a scheduled epsilon change:
    eps_before_switch is used until tokens_seen reaches eps_switch_tokens,
    eps afterwards.
    """
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    weight_decay: float = 0.1
    eps_before_switch: Optional[float] = None
    eps_switch_tokens: Optional[int] = None
    decay_exclude: Tuple[str, ...] = ("*.gain", "*.bias", "embed")

    def __post_init__(self):
        if not 0 < self.beta1 < self.beta2 < 1:
            raise ValueError(f"need 0 < beta1 < beta2 < 1, got beta1={self.beta1}, beta2={self.beta2}")
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.eps_before_switch is not None and not self.eps_before_switch > 0:
            raise ValueError(f"eps_before_switch must be positive, got {self.eps_before_switch}")
        if self.eps_switch_tokens is not None and self.eps_switch_tokens < 0:
            raise ValueError(f"eps_switch_tokens must be >= 0, got {self.eps_switch_tokens}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        object.__setattr__(self, "decay_exclude", tuple(self.decay_exclude))

    def eps_at(self, tokens_seen: float) -> float:
        if self.eps_before_switch is not None and self.eps_switch_tokens is not None \
                and tokens_seen < self.eps_switch_tokens:
            return self.eps_before_switch
        return self.eps

    def decays(self, name: str) -> bool:
        return not any(fnmatch.fnmatchcase(name, pattern) for pattern in self.decay_exclude)

    def to_dict(self) -> Dict:
        data = dataclasses.asdict(self)
        data["decay_exclude"] = list(self.decay_exclude)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "OptimizerConfig":
        return cls(**data)


@dataclass
class AdamWState:
    """First and second moments per parameter, kept at parameter precision"""
    steps: Dict[str, int] = field(default_factory=dict)
    exp_avg: Dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return max(self.steps.values(), default=0)

    def copy(self) -> "AdamWState":
        return AdamWState(
            steps=dict(self.steps),
            exp_avg={k: v.copy() for k, v in self.exp_avg.items()},
            exp_avg_sq={k: v.copy() for k, v in self.exp_avg_sq.items()},
        )


def adamw_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]], state: AdamWState,
               cfg: OptimizerConfig, eta: float, tokens_seen: float = 0) -> Tuple[Dict[str, Tensor], AdamWState]:
    """
    One AdamW update

    Weight decay is decoupled and applied first: p <- p * (1 - eta * wd),
    then p <- p - eta * m_hat / (sqrt(v_hat) + eps). Parameter arrays are
    replaced, never written in place, so earlier snapshots stay valid.

    Args:
        params: Named parameters to update
        grads: Gradient per parameter name; missing or None counts as zero
        state: Moments from the previous step (not modified)
        cfg: Optimizer hyperparameters
        eta: Learning rate
        tokens_seen: Global token count, selects eps when a switch is scheduled

    Returns:
        (params, new_state)
    """
    if eta < 0:
        raise ValueError(f"learning rate must be >= 0, got {eta}")
    bad = [name for name, g in grads.items() if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise NonFiniteGradientError(bad)

    eps = cfg.eps_at(tokens_seen)
    new_state = AdamWState(steps=dict(state.steps), exp_avg=dict(state.exp_avg), exp_avg_sq=dict(state.exp_avg_sq))
    for name, param in params.items():
        p = param.data
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeError("adamw_step", p.shape, g.shape, detail=f"gradient for {name}")
        g = g.astype(p.dtype, copy=False)

        t = new_state.steps.get(name, 0) + 1
        m = new_state.exp_avg.get(name)
        v = new_state.exp_avg_sq.get(name)
        m = (1 - cfg.beta1) * g if m is None else cfg.beta1 * m + (1 - cfg.beta1) * g
        v = (1 - cfg.beta2) * g * g if v is None else cfg.beta2 * v + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)

        if cfg.weight_decay and cfg.decays(name):
            p = p * (1 - eta * cfg.weight_decay)
        param.data = (p - eta * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype, copy=False)

        new_state.steps[name] = t
        new_state.exp_avg[name] = m.astype(param.dtype, copy=False)
        new_state.exp_avg_sq[name] = v.astype(param.dtype, copy=False)
    return params, new_state


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup, cosine decay, then a constant rate; positions in tokens"""
    warmup_tokens: float
    eta_max: float
    eta_min: float
    cosine_end_tokens: float
    constant_eta: Optional[float] = None

    def __post_init__(self):
        if self.eta_min < 0 or self.eta_max < 0:
            raise ValueError("learning rates must be >= 0")
        if self.eta_min > self.eta_max:
            raise ValueError(f"eta_min ({self.eta_min}) must not exceed eta_max ({self.eta_max})")
        if self.warmup_tokens < 0:
            raise ValueError(f"warmup_tokens must be >= 0, got {self.warmup_tokens}")
        if self.cosine_end_tokens < self.warmup_tokens:
            raise ValueError("cosine_end_tokens must not precede the end of warmup")
        if self.constant_eta is not None and self.constant_eta < 0:
            raise ValueError("constant_eta must be >= 0")

    @classmethod
    def full_scale(cls, scale: float = 1.0) -> "LrSchedule":
        """4 GT warmup to 3.7e-4, cosine to 1.89e-5 at 4500 GT, constant afterwards"""
        return cls(warmup_tokens=4 * GT * scale, eta_max=3.7e-4, eta_min=1.89e-5,
                   cosine_end_tokens=4500 * GT * scale)

    @classmethod
    def constant(cls, eta: float) -> "LrSchedule":
        return cls(warmup_tokens=0, eta_max=eta, eta_min=eta, cosine_end_tokens=0, constant_eta=eta)

    def lr_at(self, tokens_seen: float) -> float:
        if tokens_seen < 0:
            raise ValueError(f"tokens_seen must be >= 0, got {tokens_seen}")
        if tokens_seen < self.warmup_tokens:
            return self.eta_max * tokens_seen / self.warmup_tokens
        if tokens_seen < self.cosine_end_tokens:
            progress = (tokens_seen - self.warmup_tokens) / (self.cosine_end_tokens - self.warmup_tokens)
            return self.eta_min + 0.5 * (self.eta_max - self.eta_min) * (1 + math.cos(math.pi * progress))
        return self.eta_min if self.constant_eta is None else self.constant_eta

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "LrSchedule":
        return cls(**data)


def lr_at(tokens_seen: float, schedule: LrSchedule) -> float:
    return schedule.lr_at(tokens_seen)


@dataclass(frozen=True)
class BatchSchedule:
    """Step function from tokens seen to batch size; each step doubles the size"""
    thresholds: Tuple[float, ...]
    sizes: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if not self.sizes or len(self.thresholds) != len(self.sizes):
            raise ValueError("batch schedule needs one size per threshold")
        if self.thresholds[0] != 0:
            raise ValueError(f"first batch threshold must be 0, got {self.thresholds[0]}")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError(f"batch thresholds must be strictly increasing: {self.thresholds}")
        if self.sizes[0] < 1:
            raise ValueError("batch sizes must be positive")
        if any(b != 2 * a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValueError(f"each batch size must double the previous: {self.sizes}")

    @classmethod
    def full_scale(cls, scale: float = 1.0, divisor: int = 1,
                   doublings_gt: Sequence[float] = (470, 1250, 2000, 2750)) -> "BatchSchedule":
        """2K -> 4K -> 8K -> 16K -> 32K samples; first doubling at 470 GT"""
        if 2048 % divisor:
            raise ValueError(f"divisor must divide 2048, got {divisor}")
        thresholds = (0.0,) + tuple(gt * GT * scale for gt in doublings_gt)
        sizes = tuple((2048 // divisor) * 2 ** i for i in range(len(thresholds)))
        return cls(thresholds, sizes)

    @classmethod
    def constant(cls, size: int) -> "BatchSchedule":
        return cls((0.0,), (size,))

    def batch_size_at(self, tokens_seen: float) -> int:
        if tokens_seen < 0:
            raise ValueError(f"tokens_seen must be >= 0, got {tokens_seen}")
        return self.sizes[bisect.bisect_right(self.thresholds, tokens_seen) - 1]

    @property
    def doubling_points(self) -> Tuple[float, ...]:
        return self.thresholds[1:]

    def to_dict(self) -> Dict:
        return {"thresholds": list(self.thresholds), "sizes": list(self.sizes)}

    @classmethod
    def from_dict(cls, data: Dict) -> "BatchSchedule":
        return cls(tuple(data["thresholds"]), tuple(data["sizes"]))


def batch_size_at(tokens_seen: float, schedule: BatchSchedule) -> int:
    return schedule.batch_size_at(tokens_seen)


def noise_temperature(eta: float, batch_size: float) -> float:
    """T = eta / sqrt(B)"""
    if batch_size <= 0:
        raise ValueError(f"batch size must be positive, got {batch_size}")
    return eta / math.sqrt(batch_size)


@dataclass(frozen=True)
class SpikePolicy:
    """
    Loss-spike detection and recovery settings

    A spike fires when the current loss exceeds `threshold` times the median
    of the previous `window` losses, or on any non-finite loss.
    """
    window: int = 50
    threshold: float = 2.0
    skip_tokens: int = 0
    rollback_to: Optional[str] = None
    max_consecutive_rollbacks: int = 8

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"spike window must be >= 1, got {self.window}")
        if not self.threshold > 0:
            raise ValueError(f"spike threshold must be positive, got {self.threshold}")
        if self.skip_tokens < 0:
            raise ValueError(f"skip span must be >= 0, got {self.skip_tokens}")
        if self.max_consecutive_rollbacks < 1:
            raise ValueError("max_consecutive_rollbacks must be >= 1")

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "SpikePolicy":
        return cls(**data)


@dataclass(frozen=True)
class SpikeEvent:
    loss: float
    median: Optional[float]
    reason: str  # "non-finite" or "loss-jump"
    tokens_seen: int = 0

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)


def spike_detect(loss_history: Sequence[float], policy: SpikePolicy, tokens_seen: int = 0) -> Optional[SpikeEvent]:
    """Check the most recent loss against the window of losses before it"""
    if len(loss_history) == 0:
        raise ValueError("spike_detect: loss history is empty")
    current = float(loss_history[-1])
    if not math.isfinite(current):
        return SpikeEvent(loss=current, median=None, reason="non-finite", tokens_seen=tokens_seen)
    previous = [float(v) for v in loss_history[-policy.window - 1:-1] if math.isfinite(v)]
    if not previous:
        return None
    median = float(np.median(previous))
    if current > policy.threshold * median:
        return SpikeEvent(loss=current, median=median, reason="loss-jump", tokens_seen=tokens_seen)
    return None


def rollback_and_skip(state, checkpoint_store, event: SpikeEvent, policy: SpikePolicy):
    """
    Restore the latest usable checkpoint and move the data cursor past the skip span

    Args:
        state: Current TrainState (its spike count and lineage carry over)
        checkpoint_store: A CheckpointStore
        event: The detected spike
        policy: Spike policy giving the skip span and optional fixed target

    Returns:
        The restored TrainState
    """
    ckpt_id = policy.rollback_to or checkpoint_store.latest_at_or_before(event.tokens_seen)
    if ckpt_id is None:
        raise RollbackError(f"no checkpoint at or before {event.tokens_seen} tokens to roll back to")
    restored = checkpoint_store.load(ckpt_id)
    logger.warning("loss spike (%s, loss=%s) at %d tokens: rolling back to %s and skipping %d tokens",
                   event.reason, event.loss, event.tokens_seen, ckpt_id, policy.skip_tokens)
    return dataclasses.replace(
        restored,
        data_cursor=restored.data_cursor + policy.skip_tokens,
        spike_count=state.spike_count + 1,
        lineage=list(state.lineage) + [f"rollback:{ckpt_id}"],
    )
