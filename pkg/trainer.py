"""
Staged curriculum training
Stage plans, gradient accumulation, the token-driven step loop with spike
rollback, checkpoint and evaluation cadence, and throughput reporting
"""

import json
import logging
import math
import queue
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from checkpointing import CheckpointStore, TrainState, checkpoint_save
from config import DEFAULT_SCALE, GIGATOKEN
from model_core import (
    Z_LOSS_COEF, ConfigError, LmHead, ModelConfig, ParallelLM, get_preset, lm_forward, lm_loss,
)
from optim_schedule import (
    BatchSchedule, LrSchedule, NonFiniteGradientError, OptimizerConfig, RollbackError,
    SpikeEvent, SpikePolicy, adamw_step, noise_temperature, rollback_and_skip, spike_detect,
)
from run_reports import RunReport
from sequence_packing import (
    DataExhaustedError, Document, MixtureSpec, MixtureStream, PackedSample, StreamPacker, stack_samples,
)
from synthetic_data import held_out_samples, synthetic_corpus
from tokenizer import ByteTokenizer

logger = logging.getLogger(__name__)

GT = GIGATOKEN
SECONDS_PER_HOUR = 3600.0


class StageOrderError(ValueError):
    """Stage plans out of order, or a state that does not fit the stage being run"""


# Plans

@dataclass(frozen=True)
class StagePlan:
    """
    One curriculum stage

    token_budget is the stage length in real tokens: budget_gt GT scaled by
    `scale`. The learning-rate and batch schedules are positioned on the
    global token count, already scaled.
    """
    stage_id: int
    budget_gt: float
    context_length: int
    rope_base: float
    tied_embeddings: bool
    mixture: MixtureSpec
    lr: LrSchedule
    batch: BatchSchedule
    scale: float = 1.0

    def __post_init__(self):
        if self.stage_id not in (1, 2, 3, 4):
            raise StageOrderError(f"stage id must be 1-4, got {self.stage_id}")
        if self.budget_gt < 0:
            raise ConfigError(f"stage {self.stage_id}: budget must be >= 0 GT")
        if self.context_length < 2:
            raise ConfigError(f"stage {self.stage_id}: context_length must be >= 2")
        if not self.rope_base > 0:
            raise ConfigError(f"stage {self.stage_id}: rope_base must be positive")
        if not self.scale > 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")

    @property
    def token_budget(self) -> int:
        return int(round(self.budget_gt * GT * self.scale))


@dataclass(frozen=True)
class RunSettings:
    """Optimizer, spike handling and cadences shared by every stage"""
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    spike: SpikePolicy = field(default_factory=SpikePolicy)
    checkpoint_every_tokens: Optional[int] = None
    eval_every_tokens: Optional[int] = None
    z_loss_coef: float = Z_LOSS_COEF
    micro_batch: Optional[int] = None

    def __post_init__(self):
        for name in ("checkpoint_every_tokens", "eval_every_tokens", "micro_batch"):
            value = getattr(self, name)
            if value is not None and value < 1:
                raise ConfigError(f"{name} must be >= 1 when set, got {value}")


def _scaled(gt: Optional[float], scale: float) -> Optional[int]:
    return None if gt is None else max(1, int(round(gt * GT * scale)))


def validate_stage_order(stages: Sequence[StagePlan]):
    if not stages:
        raise StageOrderError("curriculum has no stages")
    ids = [s.stage_id for s in stages]
    if ids != list(range(1, len(ids) + 1)):
        raise StageOrderError(f"stages must run 1, 2, ... in order, got {ids}")
    for prev, cur in zip(stages, stages[1:]):
        if cur.tied_embeddings and not prev.tied_embeddings:
            raise StageOrderError(f"stage {cur.stage_id} re-ties embeddings untied in stage {prev.stage_id}")


@dataclass
class CurriculumPlan:
    """
    A full curriculum: model preset family, stages and shared settings

    Plan files are written in GT units; `scale` maps them to real tokens.
    """
    name: str
    model: str
    scale: float
    stages: List[StagePlan]
    settings: RunSettings
    dtype: str = "float32"
    raw: Dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        validate_stage_order(self.stages)

    @classmethod
    def from_dict(cls, data: Dict, scale: Optional[float] = None) -> "CurriculumPlan":
        try:
            scale = float(data.get("scale", 1.0) if scale is None else scale)
            model = data["model"]
            lr = data["lr"]
            lr_schedule = LrSchedule(warmup_tokens=lr["warmup_gt"] * GT * scale, eta_max=lr["eta_max"],
                                     eta_min=lr["eta_min"], cosine_end_tokens=lr["cosine_end_gt"] * GT * scale,
                                     constant_eta=lr.get("constant_eta"))
            batch = data["batch"]
            thresholds = (0.0,) + tuple(gt * GT * scale for gt in batch["doublings_gt"])
            batch_schedule = BatchSchedule(thresholds, tuple(batch["initial_size"] * 2 ** i
                                                             for i in range(len(thresholds))))
            opt = dict(data.get("optimizer", {}))
            switch_gt = opt.pop("eps_switch_gt", None)
            optimizer = OptimizerConfig(eps_switch_tokens=None if switch_gt is None else switch_gt * GT * scale,
                                        **{k: tuple(v) if isinstance(v, list) else v for k, v in opt.items()})
            spike = dict(data.get("spike", {}))
            skip_gt = spike.pop("skip_gt", 0.0)
            policy = SpikePolicy(skip_tokens=int(round(skip_gt * GT * scale)), **spike)
            settings = RunSettings(optimizer=optimizer, spike=policy,
                                   checkpoint_every_tokens=_scaled(data.get("checkpoint_every_gt"), scale),
                                   eval_every_tokens=_scaled(data.get("eval_every_gt"), scale),
                                   z_loss_coef=data.get("z_loss_coef", Z_LOSS_COEF))
            stages = [
                StagePlan(stage_id=s["stage_id"], budget_gt=s["budget_gt"], context_length=s["context_length"],
                          rope_base=float(s["rope_base"]), tied_embeddings=bool(s["tied_embeddings"]),
                          mixture=(MixtureSpec.from_dict(s["mixture"]) if "mixture" in s
                                   else MixtureSpec.for_stage(s["stage_id"])),
                          lr=lr_schedule, batch=batch_schedule, scale=scale)
                for s in data["stages"]
            ]
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed curriculum plan: {exc!r}") from exc
        return cls(name=data.get("name", "curriculum"), model=model, scale=scale, stages=stages,
                   settings=settings, dtype=data.get("dtype", "float32"), raw=dict(data))

    def to_dict(self) -> Dict:
        return dict(self.raw, scale=self.scale)

    @classmethod
    def from_file(cls, path: str, scale: Optional[float] = None) -> "CurriculumPlan":
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid plan JSON: {exc}") from exc
        return cls.from_dict(data, scale)

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def full_scale_preset(cls, scale: float = 1.0) -> "CurriculumPlan":
        return cls.from_dict(FULL_SCALE_PLAN, scale)

    @classmethod
    def desk_preset(cls, scale: float = DEFAULT_SCALE) -> "CurriculumPlan":
        return cls.from_dict(DESK_PLAN, scale)

    @property
    def total_tokens(self) -> int:
        return sum(s.token_budget for s in self.stages)

    def model_config(self) -> ModelConfig:
        first = self.stages[0]
        return get_preset(f"{self.model}-stage1").replace(
            context_length=first.context_length, rope_base=first.rope_base, tied_embeddings=first.tied_embeddings)

    def initial_model(self, seed: int = 0) -> ParallelLM:
        return ParallelLM.init(self.model_config(), seed=seed, dtype=np.dtype(self.dtype))


def _plan_dict(name: str, model: str, scale: float, contexts: Sequence[int], initial_batch: int,
               eta_max: float, eta_min: float) -> Dict:
    budgets = (4500, 250, 250, 500)
    rope = (5_000_042, 5_000_042, 5_000_042, 500_042)
    return {
        "name": name,
        "model": model,
        "scale": scale,
        "dtype": "float32",
        "optimizer": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-7, "weight_decay": 0.1},
        "lr": {"warmup_gt": 4, "eta_max": eta_max, "eta_min": eta_min, "cosine_end_gt": 4500},
        "batch": {"initial_size": initial_batch, "doublings_gt": [470, 1250, 2000, 2750]},
        "spike": {"window": 50, "threshold": 2.0, "skip_gt": 1.0, "max_consecutive_rollbacks": 8},
        "checkpoint_every_gt": 500,
        "eval_every_gt": 500,
        "stages": [
            {"stage_id": i + 1, "budget_gt": budgets[i], "context_length": contexts[i], "rope_base": rope[i],
             "tied_embeddings": i < 3, "mixture": MixtureSpec.for_stage(i + 1).to_dict()}
            for i in range(4)
        ],
    }


FULL_SCALE_PLAN = _plan_dict("full-scale", "11b", 1.0, (2048, 4096, 8192, 8192), 2048, 3.7e-4, 1.89e-5)
# Batch sizes are the full-scale ones divided by 1024; the desk model tolerates a higher learning rate
DESK_PLAN = _plan_dict("desk", "desk", DEFAULT_SCALE, (128, 256, 512, 512), 2, 2e-3, 1e-4)


# Gradients and evaluation

@dataclass
class BatchGradients:
    grads: Dict[str, Optional[np.ndarray]]
    loss: float
    ce: float
    z: float
    n_targets: int


def next_token_targets(tokens: np.ndarray, loss_mask: np.ndarray, segment_ids: np.ndarray):
    """
    Shift a packed batch into (inputs, input segments, targets, target mask)

    A target counts only when it continues the document its input position
    belongs to, so nothing is predicted across a packing boundary.
    """
    tokens = np.asarray(tokens)
    segments = np.asarray(segment_ids)
    same_doc = (segments[..., 1:] == segments[..., :-1]) & (segments[..., 1:] >= 0)
    mask = (np.asarray(loss_mask)[..., 1:] > 0) & same_doc
    return tokens[..., :-1], segments[..., :-1], tokens[..., 1:], mask.astype(np.int8)


def batch_gradients(model: ParallelLM, tokens: np.ndarray, loss_mask: np.ndarray, segment_ids: np.ndarray,
                    micro_batch: Optional[int] = None, z_loss_coef: float = Z_LOSS_COEF) -> Optional[BatchGradients]:
    """
    Gradients of the token-averaged loss over a packed batch

    Micro-batches share one normalizer (the target count of the whole batch),
    so accumulating them gives the same gradient as a single pass. Returns
    None when the batch has no target tokens.
    """
    inputs, segments, targets, mask = next_token_targets(tokens, loss_mask, segment_ids)
    n_targets = int(mask.sum())
    if n_targets == 0:
        return None
    rows = inputs.shape[0]
    micro = micro_batch or rows
    params = model.parameters()
    model.zero_grad()
    loss = ce = z = 0.0
    for start in range(0, rows, micro):
        part = slice(start, start + micro)
        if not mask[part].any():
            continue
        logits = lm_forward(inputs[part], model, segments[part])
        terms = lm_loss(logits, targets[part], mask[part], z_loss_coef=z_loss_coef, normalizer=n_targets)
        terms.total.backward()
        loss += terms.total.item()
        ce += terms.ce.item()
        z += terms.z.item()
    grads = {name: tensor.grad for name, tensor in params.items()}
    return BatchGradients(grads, loss, ce, z, n_targets)


class EvalHook(ABC):
    """Evaluation run against the current model; returns named metrics"""

    name = "eval"

    @abstractmethod
    def evaluate(self, model: ParallelLM) -> Dict[str, float]:
        pass


class HeldOutPerplexity(EvalHook):
    """exp of the mean next-token cross-entropy over fixed held-out windows"""

    name = "heldout"

    def __init__(self, samples: Sequence[PackedSample], micro_batch: int = 8):
        if not samples:
            raise ValueError("held-out perplexity needs at least one sample")
        self.tokens, self.loss_mask, self.segment_ids = stack_samples(samples)
        self.micro_batch = micro_batch

    def evaluate(self, model: ParallelLM) -> Dict[str, float]:
        frozen = model.detached()
        inputs, segments, targets, mask = next_token_targets(self.tokens, self.loss_mask, self.segment_ids)
        count = int(mask.sum())
        if count == 0:
            raise ValueError("held-out samples contain no target tokens")
        total = 0.0
        for start in range(0, inputs.shape[0], self.micro_batch):
            part = slice(start, start + self.micro_batch)
            if not mask[part].any():
                continue
            logits = lm_forward(inputs[part], frozen, segments[part])
            total += lm_loss(logits, targets[part], mask[part], z_loss_coef=0.0, normalizer=count).ce.item()
        return {"loss": total, "perplexity": float(math.exp(total))}


# Throughput

def training_flops_per_token(config: ModelConfig) -> float:
    """6N for the dense weights plus the attention score and value products"""
    return 6.0 * config.parameter_count() + 12.0 * config.n_layers * config.n_heads * config.head_dim * config.context_length


@dataclass(frozen=True)
class ThroughputReport:
    wall_time_s: float
    tokens: float
    devices: int = 1
    flops_per_token: Optional[float] = None

    def __post_init__(self):
        if not self.wall_time_s > 0:
            raise ValueError(f"wall time must be positive, got {self.wall_time_s}")
        if self.devices < 1:
            raise ValueError(f"device count must be >= 1, got {self.devices}")
        if self.tokens < 0:
            raise ValueError("token count must be >= 0")

    @classmethod
    def from_rate(cls, gt_per_hour: float, devices: int, config: Optional[ModelConfig] = None) -> "ThroughputReport":
        """One hour at the given rate"""
        return cls(SECONDS_PER_HOUR, gt_per_hour * GT, devices,
                   training_flops_per_token(config) if config is not None else None)

    @property
    def gt_per_hour(self) -> float:
        return self.tokens / GT / (self.wall_time_s / SECONDS_PER_HOUR)

    @property
    def nmt_per_hour(self) -> float:
        """Millions of tokens per hour per device"""
        return self.gt_per_hour * 1000.0 / self.devices

    @property
    def tflops_per_device(self) -> Optional[float]:
        if self.flops_per_token is None:
            return None
        return self.flops_per_token * self.tokens / self.wall_time_s / self.devices / 1e12

    def to_dict(self) -> Dict:
        return {"wall_time_s": self.wall_time_s, "tokens": self.tokens, "devices": self.devices,
                "gt_per_hour": self.gt_per_hour, "nmt_per_hour": self.nmt_per_hour,
                "tflops_per_device": self.tflops_per_device}


def throughput_report(tokens: float, wall_time: float, devices: int = 1,
                      config: Optional[ModelConfig] = None) -> ThroughputReport:
    return ThroughputReport(wall_time, tokens, devices, training_flops_per_token(config) if config else None)


# Data

class TrainingData:
    """
    Named document sources plus the packing pad id

    Each stage reads its own mixture stream under the seed the train state
    draws for it; the state's cursor addresses real tokens in that stream.
    """

    def __init__(self, sources: Dict[str, Sequence[Document]], pad_id: int = 0,
                 max_epochs: Optional[int] = None):
        if not sources:
            raise ValueError("training data needs at least one source")
        self.sources = {name: list(docs) for name, docs in sources.items()}
        self.pad_id = pad_id
        self.max_epochs = max_epochs
        self._streams: Dict[Tuple[int, int], MixtureStream] = {}

    @classmethod
    def from_documents(cls, docs: Sequence[Document], **kwargs) -> "TrainingData":
        sources: Dict[str, List[Document]] = {}
        for doc in docs:
            sources.setdefault(doc.source, []).append(doc)
        return cls(sources, **kwargs)

    def stream(self, plan: StagePlan, seed: int) -> MixtureStream:
        key = (plan.stage_id, seed)
        if key not in self._streams:
            self._streams[key] = MixtureStream(self.sources, plan.mixture, seed=seed, max_epochs=self.max_epochs)
        return self._streams[key]

    def packer(self, plan: StagePlan, seed: int) -> StreamPacker:
        return StreamPacker(self.stream(plan, seed), plan.context_length, pad_id=self.pad_id)


@dataclass
class Batch:
    tokens: np.ndarray
    loss_mask: np.ndarray
    segment_ids: np.ndarray
    cursor_after: int
    scheduled_size: int

    @property
    def n_samples(self) -> int:
        return int(self.tokens.shape[0])


_END = object()


class BatchLoader:
    """
    Packs the batches of one stage ahead of the step loop

    Batch sizes follow the schedule from the given position; the last batch
    is cut to the samples still needed to cover the stage budget. With
    prefetch > 0 one producer thread fills a bounded queue; the batch
    sequence is the same either way.
    """

    def __init__(self, packer: StreamPacker, plan: StagePlan, tokens_seen: int, stage_tokens: int, cursor: int,
                 prefetch: int = 2):
        self.packer = packer
        self.plan = plan
        self.start = (tokens_seen, stage_tokens, cursor)
        self.prefetch = prefetch
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(prefetch, 1))
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def _batches(self) -> Iterator[Batch]:
        tokens_seen, stage_tokens, cursor = self.start
        context = self.plan.context_length
        budget = self.plan.token_budget
        while stage_tokens < budget:
            size = self.plan.batch.batch_size_at(tokens_seen)
            n = min(size, math.ceil((budget - stage_tokens) / context))
            samples, cursor = self.packer.pack_at(cursor, n)
            tokens, mask, segments = stack_samples(samples)
            yield Batch(tokens, mask, segments, cursor, size)
            tokens_seen += n * context
            stage_tokens += n * context

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self):
        try:
            for batch in self._batches():
                if not self._put(batch):
                    return
            self._put(_END)
        except Exception as exc:  # handed to the consumer thread
            self._put(exc)

    def __iter__(self) -> Iterator[Batch]:
        if self.prefetch <= 0:
            yield from self._batches()
            return
        self._thread = threading.Thread(target=self._produce, name="batch-loader", daemon=True)
        self._thread.start()
        while True:
            item = self._queue.get()
            if item is _END:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def close(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None


# Training loop

def _crossed(before: int, after: int, every: Optional[int]) -> bool:
    return every is not None and after // every > before // every


class Trainer:
    """
    Runs stages of a curriculum over one TrainState

    Args:
        settings: Optimizer, spike policy and cadences
        data: Training sources
        store: Checkpoint store used for periodic, stage and halt checkpoints
        report: Run report receiving step, stage, eval and spike records
        eval_hooks: Evaluations run at stage starts, stage ends and every eval_every_tokens
        halt_at_tokens: Save a halt checkpoint and stop once this many tokens are seen
        prefetch: Batches packed ahead on the loader thread (0 packs inline)
        loss_probe: Maps (state, loss) to the loss handed to spike detection; testing hook
        progress: Show a tqdm bar per stage
    """

    def __init__(self, settings: RunSettings, data: TrainingData, store: Optional[CheckpointStore] = None,
                 report: Optional[RunReport] = None, eval_hooks: Sequence[EvalHook] = (),
                 halt_at_tokens: Optional[int] = None, prefetch: int = 2,
                 loss_probe: Optional[Callable[[TrainState, float], float]] = None, progress: bool = False):
        self.settings = settings
        self.data = data
        self.store = store or CheckpointStore()
        self.report = report or RunReport()
        self.eval_hooks = list(eval_hooks)
        self.halt_at_tokens = halt_at_tokens
        self.prefetch = prefetch
        self.loss_probe = loss_probe
        self.progress = progress
        self.halted = False
        self._rollback_run = 0
        self._last_spike_tokens = -1

    def _save(self, state: TrainState, kind: str) -> str:
        ckpt_id = checkpoint_save(state, self.store, kind)
        self.report.add("checkpoint", id=ckpt_id, kind=kind, tokens_seen=state.tokens_seen, stage=state.stage_id)
        return ckpt_id

    def evaluate(self, state: TrainState, reason: str) -> Dict[str, Dict[str, float]]:
        results = {}
        for hook in self.eval_hooks:
            metrics = hook.evaluate(state.model)
            results[hook.name] = metrics
            self.report.add("eval", hook=hook.name, reason=reason, tokens_seen=state.tokens_seen,
                            stage=state.stage_id, **metrics)
            logger.info("eval %s at %d tokens (stage %d, %s): %s", hook.name, state.tokens_seen,
                        state.stage_id, reason, {k: round(v, 4) for k, v in metrics.items()})
        return results

    def _check_order(self, plan: StagePlan, state: TrainState):
        if state.stage_id not in (plan.stage_id - 1, plan.stage_id):
            raise StageOrderError(f"cannot run stage {plan.stage_id} from a state in stage {state.stage_id}")

    def enter_stage(self, plan: StagePlan, state: TrainState) -> TrainState:
        """Apply the stage's context length, RoPE base and tying, then checkpoint"""
        model = state.model.with_config(context_length=plan.context_length, rope_base=plan.rope_base)
        if plan.tied_embeddings and not model.config.tied_embeddings:
            raise StageOrderError(f"stage {plan.stage_id} asks for tied embeddings but the model is untied")
        if not plan.tied_embeddings and model.config.tied_embeddings:
            # fresh head object so the previous stage's model keeps its tied head
            model = ParallelLM(model.config, model.blocks, LmHead(model.head.embedding),
                               model.final_ln_gain, model.final_ln_bias).untie()
        before = state.model.config
        state = replace(state, model=model, stage_id=plan.stage_id, stage_tokens=0,
                        lineage=list(state.lineage) + [f"stage:{plan.stage_id}"])
        logger.info("stage %d: context %d -> %d, rope base %s -> %s, tied=%s, budget %d tokens (%s GT)",
                    plan.stage_id, before.context_length, plan.context_length, before.rope_base, plan.rope_base,
                    model.config.tied_embeddings, plan.token_budget, plan.budget_gt)
        self.report.add("stage_start", stage=plan.stage_id, tokens_seen=state.tokens_seen,
                        budget=plan.token_budget, context_length=plan.context_length,
                        rope_base=plan.rope_base, tied_embeddings=model.config.tied_embeddings)
        self._save(state, "stage")
        self.evaluate(state, "stage_start")
        return state

    def _step(self, plan: StagePlan, state: TrainState, batch: Batch):
        """One optimizer step; returns (new_state, spike event or None)"""
        settings = self.settings
        lr = plan.lr.lr_at(state.tokens_seen)
        consumed = batch.n_samples * plan.context_length
        result = batch_gradients(state.model, batch.tokens, batch.loss_mask, batch.segment_ids,
                                 settings.micro_batch, settings.z_loss_coef)
        advanced = dict(tokens_seen=state.tokens_seen + consumed, stage_tokens=state.stage_tokens + consumed,
                        data_cursor=batch.cursor_after)
        if result is None:
            logger.warning("batch at %d tokens has no target tokens; skipping the update", state.tokens_seen)
            return replace(state, **advanced), None

        loss = result.loss
        if self.loss_probe is not None:
            loss = float(self.loss_probe(state, loss))
        history = list(state.loss_window) + [loss]
        event = spike_detect(history, settings.spike, tokens_seen=state.tokens_seen)
        if event is not None:
            return state, event
        try:
            _, optimizer = adamw_step(state.model.parameters(), result.grads, state.optimizer, settings.optimizer,
                                      lr, tokens_seen=state.tokens_seen)
        except NonFiniteGradientError as exc:
            logger.warning("%s", exc)
            return state, SpikeEvent(loss=loss, median=None, reason="non-finite", tokens_seen=state.tokens_seen)

        new_state = replace(state, optimizer=optimizer, step=state.step + 1,
                            loss_window=history[-settings.spike.window:], **advanced)
        self.report.add("step", step=new_state.step, stage=plan.stage_id, tokens_seen=new_state.tokens_seen,
                        loss=loss, ce=result.ce, z=result.z, lr=lr, batch_size=batch.n_samples,
                        noise_temperature=noise_temperature(lr, batch.n_samples) if lr > 0 else 0.0)
        logger.debug("step %d stage %d tokens %d loss %.4f lr %.3g B=%d", new_state.step, plan.stage_id,
                     new_state.tokens_seen, loss, lr, batch.n_samples)

        old_size = plan.batch.batch_size_at(state.tokens_seen)
        new_size = plan.batch.batch_size_at(new_state.tokens_seen)
        if new_size != old_size:
            logger.info("batch size %d -> %d at %d tokens", old_size, new_size, new_state.tokens_seen)
            self.report.add("batch_doubling", tokens_seen=new_state.tokens_seen, batch_size=new_size)
        switch = settings.optimizer.eps_switch_tokens
        if switch is not None and state.tokens_seen < switch <= new_state.tokens_seen:
            logger.info("adam eps %g -> %g at %d tokens", settings.optimizer.eps_at(state.tokens_seen),
                        settings.optimizer.eps_at(new_state.tokens_seen), new_state.tokens_seen)
        return new_state, None

    def _rollback(self, plan: StagePlan, state: TrainState, event: SpikeEvent) -> TrainState:
        policy = self.settings.spike
        self._rollback_run = self._rollback_run + 1 if event.tokens_seen <= self._last_spike_tokens else 1
        self._last_spike_tokens = max(self._last_spike_tokens, event.tokens_seen)
        self.report.add("spike", stage=plan.stage_id, **event.to_dict())
        if self._rollback_run > policy.max_consecutive_rollbacks:
            raise RollbackError(f"{self._rollback_run} rollbacks without getting past {event.tokens_seen} tokens")
        restored = rollback_and_skip(state, self.store, event, policy)
        if restored.stage_id != plan.stage_id:
            raise RollbackError(f"rollback target is in stage {restored.stage_id}, not stage {plan.stage_id}")
        self.report.add("rollback", stage=plan.stage_id, to=restored.lineage[-1].split(":", 1)[1],
                        tokens_seen=restored.tokens_seen, data_cursor=restored.data_cursor,
                        spike_count=restored.spike_count)
        return restored

    def run_stage(self, plan: StagePlan, state: TrainState) -> TrainState:
        """
        Train until the stage budget is consumed

        Entering a new stage applies its settings before the first step; a
        state already in this stage (a resumed run) continues where it stopped.
        """
        self._check_order(plan, state)
        if state.stage_id != plan.stage_id:
            state = self.enter_stage(plan, state)
        budget = plan.token_budget
        packer = self.data.packer(plan, state.stream_seed(plan.stage_id))
        started, tokens_at_start = time.perf_counter(), state.tokens_seen
        bar = tqdm(total=budget, initial=min(state.stage_tokens, budget), unit="tok",
                   desc=f"stage {plan.stage_id}", disable=not self.progress)
        try:
            while state.stage_tokens < budget:
                loader = BatchLoader(packer, plan, state.tokens_seen, state.stage_tokens, state.data_cursor,
                                     self.prefetch)
                try:
                    for batch in loader:
                        before = state
                        state, event = self._step(plan, state, batch)
                        if event is not None:
                            state = self._rollback(plan, state, event)
                            bar.n = min(state.stage_tokens, budget)
                            bar.refresh()
                            break
                        bar.update(state.stage_tokens - before.stage_tokens)
                        running = state.stage_tokens < budget
                        if running and _crossed(before.tokens_seen, state.tokens_seen,
                                                self.settings.checkpoint_every_tokens):
                            self._save(state, "periodic")
                        if running and _crossed(before.tokens_seen, state.tokens_seen,
                                                self.settings.eval_every_tokens):
                            self.evaluate(state, "periodic")
                        if self.halt_at_tokens is not None and state.tokens_seen >= self.halt_at_tokens:
                            self._save(state, "halt")
                            self.halted = True
                            logger.info("halted at %d tokens in stage %d", state.tokens_seen, plan.stage_id)
                            return state
                finally:
                    loader.close()
        except DataExhaustedError as exc:
            message = (f"stage {plan.stage_id}: {exc.reason}; consumed {state.stage_tokens} of {budget} "
                       f"stage tokens ({state.tokens_seen} total)")
            logger.error(message)
            self.report.add("data_exhausted", stage=plan.stage_id, tokens_seen=state.tokens_seen,
                            stage_tokens=state.stage_tokens, budget=budget)
            raise DataExhaustedError(message, delivered=exc.delivered, requested=exc.requested) from exc
        finally:
            bar.close()

        elapsed = time.perf_counter() - started
        self.report.add("stage_end", stage=plan.stage_id, tokens_seen=state.tokens_seen,
                        stage_tokens=state.stage_tokens, budget=budget, overshoot=state.stage_tokens - budget,
                        spike_count=state.spike_count)
        if elapsed > 0 and state.tokens_seen > tokens_at_start:
            throughput = throughput_report(state.tokens_seen - tokens_at_start, elapsed, 1, state.model.config)
            self.report.add("throughput", stage=plan.stage_id, **throughput.to_dict())
            logger.info("stage %d done: %d tokens, %.4f GT/H, %.2f nMT/H", plan.stage_id,
                        state.stage_tokens, throughput.gt_per_hour, throughput.nmt_per_hour)
        self.evaluate(state, "stage_end")
        return state


def run_stage(plan: StagePlan, state: TrainState, data: TrainingData, settings: Optional[RunSettings] = None,
              store: Optional[CheckpointStore] = None, **kwargs) -> TrainState:
    return Trainer(settings or RunSettings(), data, store, **kwargs).run_stage(plan, state)


@dataclass
class CurriculumResult:
    state: TrainState
    report: RunReport
    halted: bool = False

    @property
    def model(self) -> ParallelLM:
        return self.state.model


def run_curriculum(plan: CurriculumPlan, seed: int = 0, data: Optional[TrainingData] = None,
                   store: Optional[CheckpointStore] = None, report: Optional[RunReport] = None,
                   state: Optional[TrainState] = None, eval_hooks: Optional[Sequence[EvalHook]] = None,
                   **trainer_kwargs) -> CurriculumResult:
    """
    Run every stage in order from a fresh model, or from `state` when resuming

    Without `data` the synthetic mixture corpus for `seed` is used, and
    without `eval_hooks` held-out perplexity on the same chains.
    """
    if data is None:
        data = TrainingData(synthetic_corpus(seed=seed), pad_id=ByteTokenizer.PAD)
    if eval_hooks is None:
        eval_hooks = [HeldOutPerplexity(held_out_samples(plan.stages[0].context_length, seed=seed))]
    report = report or RunReport()
    if state is None:
        state = TrainState.fresh(plan.initial_model(seed), seed)
        report.add("run_start", plan=plan.name, scale=plan.scale, seed=seed,
                   parameters=state.model.parameter_count(), total_tokens=plan.total_tokens)
    else:
        report.add("resume", tokens_seen=state.tokens_seen, stage=state.stage_id, step=state.step)
    trainer = Trainer(plan.settings, data, store, report, eval_hooks, **trainer_kwargs)
    for stage in plan.stages:
        if stage.stage_id < state.stage_id:
            continue
        state = trainer.run_stage(stage, state)
        if trainer.halted:
            return CurriculumResult(state, report, halted=True)
    report.add("run_end", tokens_seen=state.tokens_seen, steps=state.step, spike_count=state.spike_count)
    logger.info("curriculum %s finished: %d tokens, %d steps, %d spike(s)", plan.name, state.tokens_seen,
                state.step, state.spike_count)
    return CurriculumResult(state, report)
