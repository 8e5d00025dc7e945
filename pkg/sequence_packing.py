"""
Documents, mixture streams and context-window packing
Long-sample splitting, seeded source mixing with an addressable stream position,
greedy packing with document-boundary metadata, and binary pack shards

Source mixing is deficit scheduling, not random draws: the seed only sets each
source's starting credit, and the stream always serves the source furthest
below its weight. Realized fractions therefore track the weights to within a
few document lengths at any stream position.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from tokenizer import ByteTokenizer, Tokenizer

logger = logging.getLogger(__name__)

SHARD_VERSION = 1


class DataExhaustedError(RuntimeError):
    """A source ran out of documents before the requested position"""

    def __init__(self, reason: str, delivered: int = 0, requested: int = 0):
        self.reason = reason
        self.delivered = delivered
        self.requested = requested
        super().__init__(f"{reason} (delivered {delivered} of {requested} tokens)")


@dataclass
class Document:
    tokens: np.ndarray
    source: str = "unknown"
    doc_id: str = ""
    loss_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if self.loss_mask is None:
            self.loss_mask = np.ones(self.tokens.size, dtype=np.int8)
        else:
            self.loss_mask = np.asarray(self.loss_mask, dtype=np.int8).reshape(-1)
        if self.loss_mask.size != self.tokens.size:
            raise ValueError(f"document {self.doc_id}: {self.tokens.size} tokens but {self.loss_mask.size} mask entries")

    def __len__(self):
        return int(self.tokens.size)

    def slice(self, start: int, end: Optional[int] = None, doc_id: Optional[str] = None) -> "Document":
        return Document(self.tokens[start:end], self.source, self.doc_id if doc_id is None else doc_id,
                        self.loss_mask[start:end])


def split_long_samples(doc: Document, max_len: int) -> List[Document]:
    """Order-preserving partition into pieces of at most max_len tokens"""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if len(doc) <= max_len:
        return [doc]
    return [doc.slice(start, start + max_len, f"{doc.doc_id}#{i}")
            for i, start in enumerate(range(0, len(doc), max_len))]


def long_sample_token_fraction(lengths: Iterable[int], threshold: int) -> float:
    """Share of tokens that sit in samples longer than threshold"""
    lengths = np.asarray(list(lengths), dtype=np.int64)
    total = lengths.sum()
    if total == 0:
        return 0.0
    return float(lengths[lengths > threshold].sum() / total)


# Per-stage source shares: english / multilingual / code / others
STAGE_MIXTURES: Dict[int, Dict[str, float]] = {
    1: {"english": 0.691, "multilingual": 0.166, "code": 0.022, "others": 0.121},
    2: {"english": 0.570, "multilingual": 0.158, "code": 0.106, "others": 0.166},
    3: {"english": 0.610, "multilingual": 0.150, "code": 0.105, "others": 0.135},
}


@dataclass(frozen=True)
class MixtureSpec:
    """Sampling weight per source; weights are non-negative and sum to one"""
    weights: Dict[str, float]

    def __post_init__(self):
        if not self.weights:
            raise ValueError("mixture needs at least one source")
        if any(w < 0 for w in self.weights.values()):
            raise ValueError(f"mixture weights must be >= 0: {self.weights}")
        total = sum(self.weights.values())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"mixture weights must sum to 1, got {total}")

    @classmethod
    def for_stage(cls, stage: int) -> "MixtureSpec":
        """Stage 4's mixture is not published; it reuses stage 3's weights"""
        if stage not in (1, 2, 3, 4):
            raise ValueError(f"no mixture for stage {stage}")
        return cls(dict(STAGE_MIXTURES[min(stage, 3)]))

    @property
    def sources(self) -> List[str]:
        return list(self.weights)

    def to_dict(self) -> Dict:
        return dict(self.weights)

    @classmethod
    def from_dict(cls, data: Dict) -> "MixtureSpec":
        return cls({str(k): float(v) for k, v in data.items()})


class MixtureStream:
    """
    Deterministic, position-addressable token stream drawn from several sources

    Documents are scheduled whole: the next document comes from the source
    furthest behind its target share (ties broken by a seeded initial credit).
    Each source is read in order and restarts when exhausted, up to max_epochs.
    """

    def __init__(self, sources: Dict[str, Sequence[Document]], mixture: MixtureSpec, seed: int = 0,
                 max_epochs: Optional[int] = None):
        missing = [name for name in mixture.weights if name not in sources]
        if missing:
            raise ValueError(f"mixture names sources with no documents: {missing}")
        self.sources = {name: list(docs) for name, docs in sources.items()}
        self.mixture = mixture
        self.seed = seed
        self.max_epochs = max_epochs
        self.active = [name for name, w in mixture.weights.items() if w > 0]
        for name in self.active:
            if not any(len(d) for d in self.sources[name]):
                raise ValueError(f"source '{name}' has weight > 0 but no tokens")
        # Seeded head start of up to one mean document length per source
        rng = np.random.default_rng(seed)
        self._credit = {
            name: float(rng.random() * np.mean([len(d) for d in self.sources[name]]))
            for name in self.active
        }
        self._emitted = {name: 0 for name in self.active}
        self._next = {name: (0, 0) for name in self.active}  # (epoch, doc index)
        self._starts: List[int] = []
        self._entries: List[Tuple[str, int]] = []
        self._length = 0

    def _draw(self) -> Tuple[str, int]:
        total = self._length
        name = max(self.active,
                   key=lambda s: self.mixture.weights[s] * total - self._emitted[s] + self._credit[s])
        docs = self.sources[name]
        epoch, index = self._next[name]
        while True:
            if index >= len(docs):
                epoch, index = epoch + 1, 0
                if self.max_epochs is not None and epoch >= self.max_epochs:
                    raise DataExhaustedError(f"source '{name}' exhausted after {epoch} epoch(s)",
                                             delivered=self._length)
            if len(docs[index]):
                break
            index += 1
        self._next[name] = (epoch, index + 1)
        return name, index

    def _extend_to(self, position: int):
        while self._length <= position:
            try:
                name, index = self._draw()
            except DataExhaustedError as exc:
                raise DataExhaustedError(exc.reason, delivered=self._length, requested=position + 1) from None
            self._starts.append(self._length)
            self._entries.append((name, index))
            self._length += len(self.sources[name][index])
            self._emitted[name] += len(self.sources[name][index])

    def doc_at(self, position: int) -> Document:
        """The rest of the document covering `position`"""
        if position < 0:
            raise ValueError(f"stream position must be >= 0, got {position}")
        self._extend_to(position)
        k = int(np.searchsorted(self._starts, position, side="right")) - 1
        name, index = self._entries[k]
        doc = self.sources[name][index]
        offset = position - self._starts[k]
        return doc if offset == 0 else doc.slice(offset)

    def take(self, start: int, n_tokens: int) -> Tuple[np.ndarray, List[str]]:
        """Tokens [start, start + n_tokens) and the source of each token"""
        tokens, sources = [], []
        position, end = start, start + n_tokens
        while position < end:
            doc = self.doc_at(position)
            piece = doc.tokens[:end - position]
            tokens.append(piece)
            sources.extend([self._source_at(position)] * piece.size)
            position += piece.size
        return (np.concatenate(tokens) if tokens else np.zeros(0, dtype=np.int64)), sources

    def _source_at(self, position: int) -> str:
        k = int(np.searchsorted(self._starts, position, side="right")) - 1
        return self._entries[k][0]

    def source_of(self, position: int) -> str:
        self._extend_to(position)
        return self._source_at(position)


@dataclass
class MixtureSample:
    tokens: np.ndarray
    sources: List[str]

    def realized_fractions(self) -> Dict[str, float]:
        if not self.sources:
            return {}
        names, counts = np.unique(np.asarray(self.sources), return_counts=True)
        return {str(n): float(c) / len(self.sources) for n, c in zip(names, counts)}


def compose_mixture(sources: Dict[str, Sequence[Document]], mixture: MixtureSpec, seed: int,
                    n_tokens: int) -> MixtureSample:
    """First n_tokens of the seeded mixture stream"""
    if n_tokens < 0:
        raise ValueError(f"n_tokens must be >= 0, got {n_tokens}")
    stream = MixtureStream(sources, mixture, seed)
    tokens, names = stream.take(0, n_tokens)
    return MixtureSample(tokens=tokens, sources=names)


@dataclass
class PackedSample:
    """
    One context window of packed documents

    segment_ids index the documents inside the window (-1 on padding) and
    drive the block-diagonal attention mask.
    """
    tokens: np.ndarray
    loss_mask: np.ndarray
    segment_ids: np.ndarray
    doc_bounds: List[Tuple[int, int, str]] = field(default_factory=list)
    sources: List[str] = field(default_factory=list)

    def __len__(self):
        return int(self.tokens.size)

    @property
    def n_real_tokens(self) -> int:
        return int((self.segment_ids >= 0).sum())


class _SampleBuilder:
    def __init__(self, context_len: int, pad_id: int):
        self.context_len = context_len
        self.pad_id = pad_id
        self.parts: List[Document] = []
        self.used = 0

    def space(self) -> int:
        return self.context_len - self.used

    def add(self, doc: Document):
        self.parts.append(doc)
        self.used += len(doc)

    def build(self) -> PackedSample:
        tokens = np.full(self.context_len, self.pad_id, dtype=np.int64)
        mask = np.zeros(self.context_len, dtype=np.int8)
        segments = np.full(self.context_len, -1, dtype=np.int32)
        bounds, sources = [], []
        offset = 0
        for seg, doc in enumerate(self.parts):
            end = offset + len(doc)
            tokens[offset:end] = doc.tokens
            mask[offset:end] = doc.loss_mask
            segments[offset:end] = seg
            bounds.append((offset, end, doc.doc_id))
            sources.append(doc.source)
            offset = end
        return PackedSample(tokens, mask, segments, bounds, sources)


def pack_sequences(docs: Iterable[Document], context_len: int, pad_id: int = 0) -> List[PackedSample]:
    """
    Greedy next-fit packing into windows of context_len tokens

    Documents longer than the window are split first; no other document
    crosses a window boundary. Trailing space is padding with loss mask 0.
    """
    if context_len < 1:
        raise ValueError(f"context_len must be >= 1, got {context_len}")
    samples = []
    current = _SampleBuilder(context_len, pad_id)
    for doc in docs:
        for piece in split_long_samples(doc, context_len):
            if len(piece) == 0:
                continue
            if len(piece) > current.space():
                samples.append(current.build())
                current = _SampleBuilder(context_len, pad_id)
            current.add(piece)
    if current.parts:
        samples.append(current.build())
    return samples


class StreamPacker:
    """Packs windows straight from a MixtureStream starting at a cursor"""

    def __init__(self, stream: MixtureStream, context_len: int, pad_id: int = 0):
        if context_len < 1:
            raise ValueError(f"context_len must be >= 1, got {context_len}")
        self.stream = stream
        self.context_len = context_len
        self.pad_id = pad_id

    def next_sample(self, cursor: int) -> Tuple[PackedSample, int]:
        """Build one window; returns the sample and the cursor after it"""
        builder = _SampleBuilder(self.context_len, self.pad_id)
        while builder.space() > 0:
            doc = self.stream.doc_at(cursor)
            if len(doc) > builder.space():
                if builder.parts:
                    break
                doc = doc.slice(0, builder.space())
            builder.add(doc)
            cursor += len(doc)
        return builder.build(), cursor

    def pack_at(self, cursor: int, n_samples: int) -> Tuple[List[PackedSample], int]:
        samples = []
        for _ in range(n_samples):
            sample, cursor = self.next_sample(cursor)
            samples.append(sample)
        return samples, cursor


def stack_samples(samples: Sequence[PackedSample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack into (tokens, loss_mask, segment_ids) arrays of shape [batch, context]"""
    return (np.stack([s.tokens for s in samples]),
            np.stack([s.loss_mask for s in samples]),
            np.stack([s.segment_ids for s in samples]))


def write_pack_shards(samples: Sequence[PackedSample], out_dir: str, shard_size: int = 1024) -> str:
    """
    Write packed samples as binary shards plus a JSON manifest

    Each shard has uint32 tokens, uint8 loss masks and int32 segment ids,
    little-endian, shaped [n_samples, context_len].

    Returns:
        Path of the manifest
    """
    if shard_size < 1:
        raise ValueError("shard_size must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    context_len = len(samples[0]) if samples else 0
    shards, meta = [], []
    for i in range(0, len(samples), shard_size):
        chunk = samples[i:i + shard_size]
        if any(len(s) != context_len for s in chunk):
            raise ValueError("all packed samples in a shard set must share one context length")
        name = f"shard-{i // shard_size:05d}"
        tokens, mask, segments = stack_samples(chunk)
        if tokens.size and (tokens.min() < 0 or tokens.max() > np.iinfo(np.uint32).max):
            raise ValueError("token ids do not fit in uint32")
        tokens.astype("<u4").tofile(os.path.join(out_dir, f"{name}.tokens.bin"))
        mask.astype("u1").tofile(os.path.join(out_dir, f"{name}.mask.bin"))
        segments.astype("<i4").tofile(os.path.join(out_dir, f"{name}.segments.bin"))
        shards.append({"name": name, "n_samples": len(chunk)})
        meta.extend({"doc_bounds": [list(b) for b in s.doc_bounds], "sources": s.sources} for s in chunk)
    manifest = {"version": SHARD_VERSION, "context_len": context_len, "n_samples": len(samples),
                "shards": shards, "samples": meta}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    logger.info("wrote %d packed samples in %d shard(s) to %s", len(samples), len(shards), out_dir)
    return path


def read_pack_shards(out_dir: str) -> List[PackedSample]:
    with open(os.path.join(out_dir, "manifest.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("version") != SHARD_VERSION:
        raise ValueError(f"unsupported pack shard version {manifest.get('version')!r}")
    context_len = manifest["context_len"]
    samples = []
    meta = iter(manifest["samples"])
    for shard in manifest["shards"]:
        shape = (shard["n_samples"], context_len)
        base = os.path.join(out_dir, shard["name"])
        tokens = np.fromfile(f"{base}.tokens.bin", dtype="<u4").reshape(shape).astype(np.int64)
        mask = np.fromfile(f"{base}.mask.bin", dtype="u1").reshape(shape).astype(np.int8)
        segments = np.fromfile(f"{base}.segments.bin", dtype="<i4").reshape(shape).astype(np.int32)
        for row in range(shape[0]):
            info = next(meta)
            samples.append(PackedSample(tokens[row], mask[row], segments[row],
                                        [tuple(b) for b in info["doc_bounds"]], list(info["sources"])))
    return samples


def read_documents(path: str, tokenizer: Optional[Tokenizer] = None, source_field: str = "source") -> List[Document]:
    """Line-delimited records {id, lang, text} or {id, tokens}; source defaults to lang"""
    tokenizer = tokenizer or ByteTokenizer()
    docs = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            record = json.loads(line)
            tokens = record["tokens"] if "tokens" in record else tokenizer.encode(record["text"])
            docs.append(Document(tokens=tokens, source=record.get(source_field, record.get("lang", "unknown")),
                                 doc_id=str(record.get("id", line_no)), loss_mask=record.get("loss_mask")))
    return docs
