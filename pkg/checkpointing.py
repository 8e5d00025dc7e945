"""
Training state and checkpoint storage
Versioned manifest plus raw little-endian tensor payload, stored on disk or in memory
"""

import hashlib
import json
import logging
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from model_core import ModelConfig, ParallelLM
from optim_schedule import AdamWState
from tensor_core import Tensor

logger = logging.getLogger(__name__)

FORMAT_NAME = "parablock-checkpoint"
FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
PAYLOAD_FILE = "tensors.bin"

CHECKPOINT_KINDS = ("periodic", "stage", "halt")
ROLLBACK_KINDS = ("periodic", "stage")


class CheckpointLoadError(RuntimeError):
    """Checkpoint missing, corrupt or written by an incompatible version"""


def new_rng_state(seed: int) -> Dict:
    return np.random.PCG64(seed).state


def rng_from_state(state: Dict) -> np.random.Generator:
    bit_generator = np.random.PCG64()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


@dataclass
class TrainState:
    """Everything needed to continue a run bit-exactly"""
    model: ParallelLM
    optimizer: AdamWState = field(default_factory=AdamWState)
    tokens_seen: int = 0
    stage_tokens: int = 0
    data_cursor: int = 0
    spike_count: int = 0
    stage_id: int = 0
    step: int = 0
    rng_state: Dict = field(default_factory=lambda: new_rng_state(0))
    loss_window: List[float] = field(default_factory=list)
    lineage: List[str] = field(default_factory=list)

    @classmethod
    def fresh(cls, model: ParallelLM, seed: int = 0) -> "TrainState":
        return cls(model=model, rng_state=new_rng_state(seed))

    def rng(self) -> np.random.Generator:
        return rng_from_state(self.rng_state)

    def stream_seed(self, stage_id: int) -> int:
        """Seed of a stage's mixture stream, drawn from the run RNG without advancing it"""
        if stage_id < 1:
            raise ValueError(f"stage id must be >= 1, got {stage_id}")
        return int(self.rng().integers(0, 2 ** 31, size=stage_id)[-1])

    def scalars(self) -> Dict:
        return {
            "tokens_seen": int(self.tokens_seen),
            "stage_tokens": int(self.stage_tokens),
            "data_cursor": int(self.data_cursor),
            "spike_count": int(self.spike_count),
            "stage_id": int(self.stage_id),
            "step": int(self.step),
            "rng_state": self.rng_state,
            "loss_window": [float(v) for v in self.loss_window],
            "lineage": list(self.lineage),
            "optimizer_steps": dict(sorted(self.optimizer.steps.items())),
        }


def _le_dtype(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def write_tensor_bundle(tensors: Dict[str, np.ndarray]) -> Tuple[List[Dict], bytes]:
    """Serialize arrays into (index, payload); index entries carry name, dtype, shape, offset, nbytes"""
    index = []
    chunks = []
    offset = 0
    for name, array in tensors.items():
        array = np.asarray(array)
        dtype = _le_dtype(array.dtype)
        raw = np.ascontiguousarray(array, dtype=dtype).tobytes()
        index.append({"name": name, "dtype": dtype.str, "shape": list(array.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return index, b"".join(chunks)


def read_tensor_bundle(index: Sequence[Dict], payload: bytes) -> Dict[str, np.ndarray]:
    tensors = {}
    for entry in index:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise CheckpointLoadError(f"tensor '{entry['name']}' runs past the end of the payload")
        array = np.frombuffer(payload[start:start + nbytes], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = array.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]).newbyteorder("="))
    return tensors


def checkpoint_id(tokens_seen: int, kind: str) -> str:
    return f"ckpt-{int(tokens_seen):012d}-{kind}"


def encode_checkpoint(state: TrainState, kind: str = "periodic") -> Tuple[bytes, bytes]:
    """Encode a TrainState as (manifest bytes, payload bytes)"""
    if kind not in CHECKPOINT_KINDS:
        raise ValueError(f"unknown checkpoint kind '{kind}', choose from {CHECKPOINT_KINDS}")
    tensors: Dict[str, np.ndarray] = {}
    for name, tensor in state.model.parameters().items():
        tensors[f"model/{name}"] = tensor.data
    for name in sorted(state.optimizer.exp_avg):
        tensors[f"optim/exp_avg/{name}"] = state.optimizer.exp_avg[name]
        tensors[f"optim/exp_avg_sq/{name}"] = state.optimizer.exp_avg_sq[name]
    index, payload = write_tensor_bundle(tensors)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "id": checkpoint_id(state.tokens_seen, kind),
        "kind": kind,
        "model_config": state.model.config.to_dict(),
        "state": state.scalars(),
        "tensors": index,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    return json.dumps(manifest, sort_keys=True, indent=1).encode("utf-8"), payload


def decode_checkpoint(manifest_bytes: bytes, payload: bytes) -> TrainState:
    try:
        manifest = json.loads(manifest_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointLoadError(f"unreadable checkpoint manifest: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
        raise CheckpointLoadError("not a parablock checkpoint manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise CheckpointLoadError(f"unsupported checkpoint version {manifest.get('version')!r}")
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise CheckpointLoadError(f"payload checksum mismatch for {manifest.get('id')}")
    try:
        config = ModelConfig.from_dict(manifest["model_config"])
        arrays = read_tensor_bundle(manifest["tensors"], payload)
        scalars = manifest["state"]
        params = {name[len("model/"):]: Tensor(array, requires_grad=True, dtype=array.dtype)
                  for name, array in arrays.items() if name.startswith("model/")}
        model = ParallelLM.from_parameters(config, params)
        optimizer = AdamWState(
            steps={k: int(v) for k, v in scalars["optimizer_steps"].items()},
            exp_avg={name[len("optim/exp_avg/"):]: a for name, a in arrays.items()
                     if name.startswith("optim/exp_avg/")},
            exp_avg_sq={name[len("optim/exp_avg_sq/"):]: a for name, a in arrays.items()
                        if name.startswith("optim/exp_avg_sq/")},
        )
        return TrainState(
            model=model, optimizer=optimizer,
            tokens_seen=scalars["tokens_seen"], stage_tokens=scalars["stage_tokens"],
            data_cursor=scalars["data_cursor"], spike_count=scalars["spike_count"],
            stage_id=scalars["stage_id"], step=scalars["step"], rng_state=scalars["rng_state"],
            loss_window=list(scalars["loss_window"]), lineage=list(scalars["lineage"]),
        )
    except CheckpointLoadError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointLoadError(f"malformed checkpoint {manifest.get('id')}: {exc}") from exc


@dataclass(frozen=True)
class CheckpointInfo:
    id: str
    tokens_seen: int
    kind: str
    stage_id: int


class CheckpointStore:
    """
    Checkpoints keyed by id

    With a root directory each checkpoint is a subdirectory holding
    manifest.json and tensors.bin; without one, the encoded bytes are kept in
    memory.
    """

    def __init__(self, root: Optional[str] = None):
        self.root = root
        self._memory: Dict[str, Tuple[bytes, bytes]] = {}
        if root is not None:
            os.makedirs(root, exist_ok=True)

    def save(self, state: TrainState, kind: str = "periodic") -> str:
        manifest, payload = encode_checkpoint(state, kind)
        ckpt_id = checkpoint_id(state.tokens_seen, kind)
        if self.root is None:
            self._memory[ckpt_id] = (manifest, payload)
        else:
            target = os.path.join(self.root, ckpt_id)
            staging = tempfile.mkdtemp(prefix=".tmp-", dir=self.root)
            with open(os.path.join(staging, MANIFEST_FILE), "wb") as f:
                f.write(manifest)
            with open(os.path.join(staging, PAYLOAD_FILE), "wb") as f:
                f.write(payload)
            if os.path.exists(target):
                shutil.rmtree(target)
            os.replace(staging, target)
        logger.info("saved %s checkpoint %s (stage %d)", kind, ckpt_id, state.stage_id)
        return ckpt_id

    def read_bytes(self, ckpt_id: str) -> Tuple[bytes, bytes]:
        if self.root is None:
            if ckpt_id not in self._memory:
                raise CheckpointLoadError(f"no checkpoint '{ckpt_id}' in memory store")
            return self._memory[ckpt_id]
        directory = os.path.join(self.root, ckpt_id)
        try:
            with open(os.path.join(directory, MANIFEST_FILE), "rb") as f:
                manifest = f.read()
            with open(os.path.join(directory, PAYLOAD_FILE), "rb") as f:
                payload = f.read()
        except OSError as exc:
            raise CheckpointLoadError(f"cannot read checkpoint '{ckpt_id}': {exc}") from exc
        return manifest, payload

    def load(self, ckpt_id: str) -> TrainState:
        return decode_checkpoint(*self.read_bytes(ckpt_id))

    def ids(self) -> List[str]:
        if self.root is None:
            names = list(self._memory)
        else:
            names = [name for name in os.listdir(self.root)
                     if name.startswith("ckpt-") and os.path.isfile(os.path.join(self.root, name, MANIFEST_FILE))]
        return sorted(names)

    def list(self) -> List[CheckpointInfo]:
        infos = []
        for ckpt_id in self.ids():
            manifest = json.loads(self.read_bytes(ckpt_id)[0].decode("utf-8"))
            infos.append(CheckpointInfo(ckpt_id, manifest["state"]["tokens_seen"],
                                        manifest["kind"], manifest["state"]["stage_id"]))
        return sorted(infos, key=lambda info: (info.tokens_seen, info.id))

    def latest_at_or_before(self, tokens_seen: float, kinds: Sequence[str] = ROLLBACK_KINDS) -> Optional[str]:
        candidates = [info for info in self.list() if info.kind in kinds and info.tokens_seen <= tokens_seen]
        return candidates[-1].id if candidates else None


def checkpoint_save(state: TrainState, store: CheckpointStore, kind: str = "periodic") -> str:
    return store.save(state, kind)


def checkpoint_load(ckpt: str, store: Optional[CheckpointStore] = None) -> TrainState:
    """Load by id from a store, or by checkpoint directory path when no store is given"""
    if store is None:
        path = os.path.abspath(ckpt.rstrip(os.sep))
        if not os.path.isdir(path):
            raise CheckpointLoadError(f"checkpoint directory not found: {ckpt}")
        store = CheckpointStore(os.path.dirname(path))
        ckpt = os.path.basename(path)
    return store.load(ckpt)
