"""
Vision-language extension
Frozen stub visual encoder, high-resolution tiling, two-layer multimodal projector,
embedding-space concatenation, and the two-stage freeze schedule
"""

import dataclasses
import hashlib
import io
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from checkpointing import CheckpointLoadError, CheckpointStore, TrainState, read_tensor_bundle, write_tensor_bundle
from model_core import LossTerms, ParallelLM, embed_tokens, lm_forward_embeddings, lm_loss
from optim_schedule import AdamWState, OptimizerConfig, adamw_step
from tensor_core import ShapeError, Tensor, concat, gelu
from tokenizer import ByteTokenizer, Tokenizer

logger = logging.getLogger(__name__)

ImageLike = Union[np.ndarray, Image.Image, str, bytes]

VLM_STAGES = ("pretrain", "finetune")


class ImageError(ValueError):
    """Image cannot be decoded or has unusable dimensions"""


class FrozenParameterError(RuntimeError):
    """A parameter that must stay frozen changed during a training step"""


def load_image(image: ImageLike) -> Image.Image:
    """Decode a path, raw bytes, a PIL image or an HxW / HxWxC uint8 array into an RGB image"""
    try:
        if isinstance(image, Image.Image):
            pil = image
        elif isinstance(image, str):
            pil = Image.open(image)
            pil.load()
        elif isinstance(image, (bytes, bytearray)):
            pil = Image.open(io.BytesIO(image))
            pil.load()
        else:
            array = np.asarray(image)
            if array.ndim == 3 and array.shape[2] == 1:
                array = array[:, :, 0]
            if array.ndim not in (2, 3) or (array.ndim == 3 and array.shape[2] not in (3, 4)):
                raise ImageError(f"expected an HxW or HxWx3 array, got shape {array.shape}")
            if array.dtype != np.uint8:
                if array.size and (np.nanmin(array) < 0 or np.nanmax(array) > 255 or not np.all(np.isfinite(array))):
                    raise ImageError("pixel values must be finite and within [0, 255]")
                array = array.astype(np.uint8)
            pil = Image.fromarray(array)
    except ImageError:
        raise
    except (OSError, ValueError, TypeError) as exc:
        raise ImageError(f"cannot decode image: {exc}") from exc
    if pil.size[0] < 1 or pil.size[1] < 1:
        raise ImageError(f"image has empty dimensions {pil.size}")
    return pil.convert("RGB") if pil.mode != "RGB" else pil


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 224
    patch_size: int = 14
    feature_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.patch_size < 1 or self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} must be a multiple of patch_size {self.patch_size}")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


@dataclass
class PatchFeatures:
    """Per-patch feature grid [rows, cols, dim]"""
    features: np.ndarray

    def __post_init__(self):
        if self.features.ndim != 3:
            raise ShapeError("patch_features", self.features.shape, detail="expected [rows, cols, dim]")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("patch features contain non-finite values")

    @property
    def grid(self) -> Tuple[int, int]:
        return self.features.shape[0], self.features.shape[1]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    def flat(self) -> np.ndarray:
        return self.features.reshape(self.n_patches, self.dim)


class StubVisualEncoder:
    """Seeded patchify plus linear map; its weights never change"""

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        fan_in = config.patch_size * config.patch_size * 3
        self.weight = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, config.feature_dim)).astype(np.float32)
        self.bias = rng.normal(0.0, 0.02, size=config.feature_dim).astype(np.float32)
        self.weight.flags.writeable = False
        self.bias.flags.writeable = False

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"encoder.weight": self.weight, "encoder.bias": self.bias}

    def encode(self, image: ImageLike) -> PatchFeatures:
        cfg = self.config
        pil = load_image(image)
        if pil.size != (cfg.image_size, cfg.image_size):
            pil = pil.resize((cfg.image_size, cfg.image_size), Image.Resampling.BICUBIC)
        pixels = np.asarray(pil, dtype=np.float32) / 255.0
        g, p = cfg.grid, cfg.patch_size
        patches = pixels.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g, g, p * p * 3)
        return PatchFeatures(patches @ self.weight + self.bias)


def encode_image(image: ImageLike, encoder: StubVisualEncoder) -> PatchFeatures:
    return encoder.encode(image)


@dataclass(frozen=True)
class GridPolicy:
    """Allowed (rows, cols) tile grids and the per-tile resolution"""
    base_resolution: int = 224
    grids: Tuple[Tuple[int, int], ...] = ((1, 1), (1, 2), (2, 1), (2, 2))

    def __post_init__(self):
        object.__setattr__(self, "grids", tuple(tuple(g) for g in self.grids))
        if self.base_resolution < 1:
            raise ValueError("base_resolution must be positive")
        if not self.grids or any(r < 1 or c < 1 for r, c in self.grids):
            raise ValueError(f"invalid tile grids {self.grids}")

    def choose_grid(self, width: int, height: int) -> Tuple[int, int]:
        """Grid whose aspect ratio is closest in log space; ties go to more tiles"""
        target = math.log(width / height)
        return min(self.grids, key=lambda g: (round(abs(target - math.log(g[1] / g[0])), 12), -g[0] * g[1]))


@dataclass
class TiledImage:
    global_view: np.ndarray
    tiles: List[np.ndarray]
    grid: Tuple[int, int]
    resized: Optional[np.ndarray] = None

    @property
    def views(self) -> List[np.ndarray]:
        """Global view first, then tiles in row-major order"""
        return [self.global_view] + list(self.tiles)


def tile_high_res(image: ImageLike, policy: GridPolicy = GridPolicy()) -> TiledImage:
    pil = load_image(image)
    base = policy.base_resolution
    global_view = np.asarray(pil.resize((base, base), Image.Resampling.BICUBIC))
    width, height = pil.size
    if width <= base and height <= base:
        return TiledImage(global_view=global_view, tiles=[], grid=(1, 1))
    rows, cols = policy.choose_grid(width, height)
    resized = np.asarray(pil.resize((cols * base, rows * base), Image.Resampling.BICUBIC))
    tiles = [resized[r * base:(r + 1) * base, c * base:(c + 1) * base].copy()
             for r in range(rows) for c in range(cols)]
    return TiledImage(global_view=global_view, tiles=tiles, grid=(rows, cols), resized=resized)


def reassemble_tiles(tiles: Sequence[np.ndarray], grid: Tuple[int, int]) -> np.ndarray:
    rows, cols = grid
    if len(tiles) != rows * cols:
        raise ValueError(f"grid {grid} needs {rows * cols} tiles, got {len(tiles)}")
    return np.concatenate([np.concatenate(tiles[r * cols:(r + 1) * cols], axis=1) for r in range(rows)], axis=0)


@dataclass
class ProjectorWeights:
    """Two affine layers with GELU between, encoder dim -> d_model"""
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, encoder_dim: int, d_model: int, seed: int = 0, hidden: Optional[int] = None,
             dtype=np.float32) -> "ProjectorWeights":
        hidden = hidden or d_model
        rng = np.random.default_rng(seed)
        return cls(
            w1=Tensor(rng.normal(0, 1 / math.sqrt(encoder_dim), (encoder_dim, hidden)).astype(dtype), requires_grad=True),
            b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            w2=Tensor(rng.normal(0, 1 / math.sqrt(hidden), (hidden, d_model)).astype(dtype), requires_grad=True),
            b2=Tensor(np.zeros(d_model, dtype=dtype), requires_grad=True),
        )

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> Dict[str, Tensor]:
        return {"projector.w1": self.w1, "projector.b1": self.b1, "projector.w2": self.w2, "projector.b2": self.b2}

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}


def project(features: Union[PatchFeatures, Tensor, np.ndarray], projector: ProjectorWeights) -> Tensor:
    """Patch features [n_patches, dim] -> embeddings [n_patches, d_model]"""
    if isinstance(features, PatchFeatures):
        features = features.flat()
    if not isinstance(features, Tensor):
        features = Tensor(features, dtype=projector.w1.dtype)
    if features.shape[-1] != projector.w1.shape[0]:
        raise ShapeError("project", features.shape, projector.w1.shape)
    return gelu(features @ projector.w1 + projector.b1) @ projector.w2 + projector.b2


@dataclass(frozen=True)
class Span:
    kind: str  # "image", "instruction" or "response"
    start: int
    end: int

    def __len__(self):
        return self.end - self.start


@dataclass
class MultimodalSequence:
    """
    [H_p ; H_t] along the sequence axis

    token_ids is -1 on image positions; loss_mask is 1 exactly on response
    tokens (the positions the loss predicts).
    """
    embeddings: Tensor
    spans: List[Span]
    token_ids: np.ndarray
    loss_mask: np.ndarray

    def __len__(self):
        return int(self.token_ids.size)

    def span_lengths(self) -> Dict[str, int]:
        totals = {"image": 0, "instruction": 0, "response": 0}
        for span in self.spans:
            totals[span.kind] += len(span)
        return totals


@dataclass
class VlmRecord:
    """One image with one or more (instruction, response) turns"""
    image: Optional[ImageLike]
    turns: List[Tuple[Sequence[int], Sequence[int]]]
    id: str = ""

    @classmethod
    def from_text(cls, image: Optional[ImageLike], turns: Sequence[Tuple[str, str]], tokenizer: Optional[Tokenizer] = None,
                  record_id: str = "") -> "VlmRecord":
        tokenizer = tokenizer or ByteTokenizer()
        return cls(image, [(tokenizer.encode(i), tokenizer.encode(r)) for i, r in turns], record_id)


class VlmState:
    """LLM, frozen encoder, projector and the projector/LLM optimizer state"""

    def __init__(self, model: ParallelLM, encoder: StubVisualEncoder, projector: ProjectorWeights,
                 policy: Optional[GridPolicy] = None, optimizer: Optional[AdamWState] = None, step: int = 0):
        if projector.out_dim != model.config.d_model:
            raise ShapeError("vlm_state", projector.w2.shape, (model.config.d_model,), detail="projector output must equal d_model")
        if projector.w1.shape[0] != encoder.config.feature_dim:
            raise ShapeError("vlm_state", projector.w1.shape, (encoder.config.feature_dim,), detail="projector input must equal encoder dim")
        self.model = model
        self.encoder = encoder
        self.projector = projector
        self.policy = policy or GridPolicy(base_resolution=encoder.config.image_size)
        self.optimizer = optimizer or AdamWState()
        self.step = step
        self.losses: List[float] = []

    @classmethod
    def init(cls, model: ParallelLM, encoder_config: EncoderConfig = EncoderConfig(), seed: int = 0,
             policy: Optional[GridPolicy] = None) -> "VlmState":
        encoder = StubVisualEncoder(encoder_config)
        projector = ProjectorWeights.init(encoder_config.feature_dim, model.config.d_model, seed=seed, dtype=model.dtype)
        return cls(model, encoder, projector, policy)


def image_embeddings(image: Union[ImageLike, PatchFeatures], state: VlmState) -> List[Tensor]:
    """Projected patch embeddings per view (global view first, then tiles)"""
    if isinstance(image, PatchFeatures):
        return [project(image, state.projector)]
    tiled = tile_high_res(image, state.policy)
    return [project(state.encoder.encode(view), state.projector) for view in tiled.views]


def build_multimodal_input(images: Optional[Sequence[Union[ImageLike, PatchFeatures]]], instruction: Sequence[int],
                           state: VlmState, response: Sequence[int] = (),
                           extra_turns: Sequence[Tuple[Sequence[int], Sequence[int]]] = ()) -> MultimodalSequence:
    """
    Lay out [image views ; instruction ; response ; further turns ...] in embedding space

    Args:
        images: Images (or precomputed patch features); None or empty for text only
        instruction: Instruction token ids of the first turn
        state: VLM state holding the LLM, encoder and projector
        response: Response token ids of the first turn
        extra_turns: Further (instruction, response) pairs

    Returns:
        MultimodalSequence whose spans partition the sequence
    """
    turns = [(instruction, response)] + list(extra_turns)
    spans: List[Span] = []
    pieces: List[Tensor] = []
    offset = 0
    for image in images or ():
        for view in image_embeddings(image, state):
            pieces.append(view)
            spans.append(Span("image", offset, offset + view.shape[0]))
            offset += view.shape[0]
    n_image = offset

    text_ids, text_mask = [], []
    for inst, resp in turns:
        inst = np.asarray(inst, dtype=np.int64).reshape(-1)
        resp = np.asarray(resp, dtype=np.int64).reshape(-1)
        for kind, ids in (("instruction", inst), ("response", resp)):
            if ids.size:
                spans.append(Span(kind, offset, offset + ids.size))
                offset += ids.size
                text_ids.append(ids)
                text_mask.append(np.full(ids.size, 1 if kind == "response" else 0, dtype=np.int8))

    if offset > state.model.config.context_length:
        raise ShapeError("build_multimodal_input", (offset,), (state.model.config.context_length,),
                         detail="sequence longer than the model context")
    if offset == 0:
        raise ValueError("multimodal input is empty")
    text = np.concatenate(text_ids) if text_ids else np.zeros(0, dtype=np.int64)
    if text.size:
        pieces.append(embed_tokens(text, state.model))
    embeddings = pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)
    token_ids = np.concatenate([np.full(n_image, -1, dtype=np.int64), text])
    loss_mask = np.concatenate([np.zeros(n_image, dtype=np.int8)] + text_mask)
    return MultimodalSequence(embeddings, spans, token_ids, loss_mask)


def vlm_forward(seq: MultimodalSequence, state: VlmState) -> Tensor:
    return lm_forward_embeddings(seq.embeddings, state.model)


def vlm_loss(seq: MultimodalSequence, state: VlmState, z_loss_coef: float = 1e-4,
             normalizer: Optional[float] = None) -> LossTerms:
    """Next-token loss counted only where the predicted token is a response token"""
    if len(seq) < 2:
        raise ValueError("need at least two positions for a next-token loss")
    logits = vlm_forward(seq, state)
    targets = np.where(seq.token_ids[1:] >= 0, seq.token_ids[1:], 0)
    return lm_loss(logits[:-1], targets, seq.loss_mask[1:], z_loss_coef=z_loss_coef, normalizer=normalizer)


def parameter_checksum(params: Dict[str, Union[Tensor, np.ndarray]]) -> str:
    """sha256 over names, dtypes, shapes and raw bytes, in name order"""
    digest = hashlib.sha256()
    for name in sorted(params):
        value = params[name]
        array = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value)
        digest.update(name.encode("utf-8"))
        digest.update(array.dtype.str.encode("ascii"))
        digest.update(json.dumps(list(array.shape)).encode("ascii"))
        digest.update(array.tobytes())
    return digest.hexdigest()


def _frozen_groups(stage: str, state: VlmState) -> Dict[str, Callable[[], Dict]]:
    groups = {"encoder": state.encoder.parameters}
    if stage == "pretrain":
        groups["llm"] = state.model.parameters
    return groups


def vlm_train_stage(stage: str, data: Sequence[VlmRecord], state: VlmState, steps: int,
                    lr: float = 1e-3, batch_size: int = 1, opt_cfg: Optional[OptimizerConfig] = None,
                    progress_callback: Optional[Callable[[int, float], None]] = None) -> VlmState:
    """
    Train one VLM stage

    pretrain updates the projector only; finetune updates the projector and
    the LLM. The encoder never changes. Frozen groups are checksummed before
    and after every step.

    Args:
        stage: "pretrain" or "finetune"
        data: Records, cycled in order
        state: Current VLM state (updated in place and returned)
        steps: Number of optimizer steps
        lr: Learning rate
        batch_size: Records per step, accumulated with a shared normalizer
        progress_callback: Called with (step, loss) after each step
    """
    if stage not in VLM_STAGES:
        raise ValueError(f"unknown VLM stage '{stage}', choose from {VLM_STAGES}")
    if not data:
        raise ValueError("no VLM training records")
    opt_cfg = opt_cfg or OptimizerConfig(weight_decay=0.0)
    groups = _frozen_groups(stage, state)
    cursor = 0
    for _ in range(steps):
        before = {name: parameter_checksum(get()) for name, get in groups.items()}

        records = [data[(cursor + i) % len(data)] for i in range(batch_size)]
        cursor += batch_size
        forward_state = state
        if stage == "pretrain":
            forward_state = VlmState(state.model.detached(), state.encoder, state.projector, state.policy)
        sequences = [build_multimodal_input([r.image] if r.image is not None else None, r.turns[0][0],
                                            forward_state, r.turns[0][1], r.turns[1:]) for r in records]
        normalizer = float(sum(s.loss_mask[1:].sum() for s in sequences))
        if normalizer == 0:
            raise ValueError("VLM batch has no response tokens")

        trainable = dict(state.projector.parameters())
        if stage == "finetune":
            trainable.update(state.model.parameters())
        for tensor in trainable.values():
            tensor.zero_grad()
        total = 0.0
        for seq in sequences:
            loss = vlm_loss(seq, forward_state, normalizer=normalizer)
            loss.total.backward()
            total += loss.total.item()
        grads = {name: t.grad for name, t in trainable.items()}
        _, state.optimizer = adamw_step(trainable, grads, state.optimizer, opt_cfg, lr)
        state.step += 1
        state.losses.append(total)

        for name, get in groups.items():
            if parameter_checksum(get()) != before[name]:
                raise FrozenParameterError(f"{name} parameters changed during {stage} step {state.step}")
        logger.debug("vlm %s step %d loss %.4f", stage, state.step, total)
        if progress_callback:
            progress_callback(state.step, total)
    logger.info("vlm %s: %d steps, last loss %.4f", stage, steps, state.losses[-1] if state.losses else float("nan"))
    return state


def load_vlm_records(path: str, tokenizer: Optional[Tokenizer] = None) -> List[VlmRecord]:
    """Line-delimited {id, image, instruction, response, turns: [[instruction, response], ...]}"""
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            raw = json.loads(line)
            turns = [(raw.get("instruction", ""), raw.get("response", ""))] if "response" in raw else []
            turns.extend(tuple(t) for t in raw.get("turns", []))
            if not turns:
                raise ValueError(f"{path}:{line_no}: record has no response")
            records.append(VlmRecord.from_text(raw.get("image"), turns, tokenizer, str(raw.get("id", line_no))))
    return records


PROJECTOR_MANIFEST = "projector.json"
PROJECTOR_PAYLOAD = "projector.bin"
LLM_DIR = "llm"


def save_vlm(state: VlmState, out_dir: str) -> str:
    """
    Write the projector bundle plus an LLM checkpoint under out_dir

    The LLM checkpoint also carries the optimizer moments of the projector.
    """
    os.makedirs(out_dir, exist_ok=True)
    index, payload = write_tensor_bundle(state.projector.to_arrays())
    manifest = {
        "encoder": dataclasses.asdict(state.encoder.config),
        "policy": {"base_resolution": state.policy.base_resolution, "grids": [list(g) for g in state.policy.grids]},
        "step": state.step,
        "tensors": index,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    with open(os.path.join(out_dir, PROJECTOR_PAYLOAD), "wb") as f:
        f.write(payload)
    with open(os.path.join(out_dir, PROJECTOR_MANIFEST), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    train_state = TrainState(model=state.model, optimizer=state.optimizer, step=state.step)
    ckpt_id = CheckpointStore(os.path.join(out_dir, LLM_DIR)).save(train_state, kind="stage")
    logger.info("saved VLM state (step %d) to %s", state.step, out_dir)
    return os.path.join(out_dir, LLM_DIR, ckpt_id)


def load_vlm(out_dir: str) -> VlmState:
    try:
        with open(os.path.join(out_dir, PROJECTOR_MANIFEST), "r", encoding="utf-8") as f:
            manifest = json.load(f)
        with open(os.path.join(out_dir, PROJECTOR_PAYLOAD), "rb") as f:
            payload = f.read()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointLoadError(f"cannot read VLM state in {out_dir}: {exc}") from exc
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise CheckpointLoadError(f"projector payload checksum mismatch in {out_dir}")
    arrays = read_tensor_bundle(manifest["tensors"], payload)
    projector = ProjectorWeights(**{name.split(".", 1)[1]: Tensor(a, requires_grad=True, dtype=a.dtype)
                                    for name, a in arrays.items()})
    store = CheckpointStore(os.path.join(out_dir, LLM_DIR))
    ids = store.ids()
    if not ids:
        raise CheckpointLoadError(f"no LLM checkpoint under {out_dir}")
    llm = store.load(ids[-1])
    policy = GridPolicy(manifest["policy"]["base_resolution"], tuple(tuple(g) for g in manifest["policy"]["grids"]))
    return VlmState(llm.model, StubVisualEncoder(EncoderConfig(**manifest["encoder"])), projector, policy,
                    optimizer=llm.optimizer, step=manifest["step"])
