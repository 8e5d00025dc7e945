"""
Conversation tree flattening
Expands reply trees into root-to-leaf threads and masks the loss on repeated messages
"""

import json
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from sequence_packing import Document
from tokenizer import ByteTokenizer, Tokenizer

logger = logging.getLogger(__name__)


class TreeValidationError(ValueError):
    """Conversation tree has a cycle, an orphan, duplicate ids or no single root"""


@dataclass
class Message:
    id: str
    role: str
    tokens: np.ndarray
    parent: Optional[str] = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64).reshape(-1)


class ConversationTree:
    """
    A reply tree of messages

    Children keep the order in which they appear in the node list, which fixes
    the depth-first leaf order used for flattening.
    """

    def __init__(self, nodes: Sequence[Message], tree_id: str = "", source: str = "unknown"):
        self.nodes = list(nodes)
        self.tree_id = tree_id
        self.source = source
        self.by_id: Dict[str, Message] = {}
        self.children: Dict[str, List[str]] = defaultdict(list)
        self.root: Optional[str] = None
        self._validate()

    def _validate(self):
        if not self.nodes:
            raise TreeValidationError(f"tree '{self.tree_id}' has no messages")
        for node in self.nodes:
            if node.id in self.by_id:
                raise TreeValidationError(f"tree '{self.tree_id}': duplicate message id '{node.id}'")
            self.by_id[node.id] = node
        roots = [n.id for n in self.nodes if n.parent is None]
        if len(roots) != 1:
            raise TreeValidationError(f"tree '{self.tree_id}': expected one root, found {len(roots)}")
        self.root = roots[0]
        for node in self.nodes:
            if node.parent is None:
                continue
            if node.parent not in self.by_id:
                raise TreeValidationError(f"tree '{self.tree_id}': message '{node.id}' has missing parent '{node.parent}'")
            self.children[node.parent].append(node.id)

        # With a single parent per node, anything unreachable from the root sits on a cycle
        reached = set()
        stack = [self.root]
        while stack:
            current = stack.pop()
            reached.add(current)
            stack.extend(self.children.get(current, ()))
        unreached = [n.id for n in self.nodes if n.id not in reached]
        if unreached:
            raise TreeValidationError(f"tree '{self.tree_id}': cycle through messages {unreached}")

    @classmethod
    def from_record(cls, record: Dict, tokenizer: Optional[Tokenizer] = None) -> "ConversationTree":
        """Build from {"id", "source", "nodes": [{"id", "role", "parent", "text" | "tokens"}]}"""
        tokenizer = tokenizer or ByteTokenizer()
        try:
            nodes = []
            for raw in record["nodes"]:
                tokens = raw["tokens"] if "tokens" in raw else tokenizer.encode(raw["text"])
                nodes.append(Message(id=str(raw["id"]), role=raw.get("role", "user"), tokens=tokens,
                                     parent=None if raw.get("parent") is None else str(raw["parent"])))
        except (KeyError, TypeError) as exc:
            raise TreeValidationError(f"malformed tree record: {exc}") from exc
        return cls(nodes, tree_id=str(record.get("id", "")), source=record.get("source", "unknown"))

    def to_record(self) -> Dict:
        return {
            "id": self.tree_id,
            "source": self.source,
            "nodes": [{"id": n.id, "role": n.role, "parent": n.parent, "tokens": n.tokens.tolist()} for n in self.nodes],
        }

    def leaf_paths(self) -> List[List[str]]:
        """Root-to-leaf id paths, depth-first by child index"""
        paths = []
        stack: List[Tuple[str, List[str]]] = [(self.root, [self.root])]
        while stack:
            node_id, path = stack.pop()
            kids = self.children.get(node_id, [])
            if not kids:
                paths.append(path)
            for child in reversed(kids):
                stack.append((child, path + [child]))
        return paths

    def is_path(self) -> bool:
        return all(len(kids) <= 1 for kids in self.children.values())

    def unique_token_count(self) -> int:
        return int(sum(n.tokens.size for n in self.nodes))


@dataclass
class FlatThread:
    """One root-to-leaf thread; loss_mask is 0 on messages already trained in an earlier thread"""
    tokens: np.ndarray
    loss_mask: np.ndarray
    path: List[str]
    message_spans: List[Tuple[str, int, int]] = field(default_factory=list)
    truncated: bool = False
    cut_message: Optional[str] = None
    tree_id: str = ""
    source: str = "unknown"

    def __post_init__(self):
        if len(self.tokens) != len(self.loss_mask):
            raise ValueError(f"thread has {len(self.tokens)} tokens but {len(self.loss_mask)} mask entries")

    def __len__(self):
        return len(self.tokens)

    def to_document(self, doc_id: str = "") -> Document:
        return Document(tokens=self.tokens, source=self.source, doc_id=doc_id or self.tree_id,
                        loss_mask=self.loss_mask)

    def to_record(self) -> Dict:
        return {
            "tree_id": self.tree_id, "source": self.source, "path": self.path,
            "tokens": self.tokens.tolist(), "loss_mask": self.loss_mask.tolist(),
            "truncated": self.truncated, "cut_message": self.cut_message,
        }


def flatten_conversation_tree(tree: ConversationTree, max_len: Optional[int] = None) -> List[FlatThread]:
    """
    Flatten a tree into all root-to-leaf threads

    Each message is unmasked in the first thread (depth-first leaf order)
    that contains it and masked in every later one. With max_len, threads
    keep their first max_len tokens. A message starts at the same offset in
    every thread that holds it, so a cut message is cut everywhere; its tail
    is counted by untrained_token_count.
    """
    if max_len is not None and max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    trained = set()
    threads = []
    for path in tree.leaf_paths():
        total = sum(tree.by_id[node_id].tokens.size for node_id in path)
        limit = max_len if max_len is not None and total > max_len else None
        token_parts, mask_parts, spans, kept, cut = [], [], [], [], None
        offset = 0
        for node_id in path:
            if limit is not None and offset >= limit:
                break
            tokens = tree.by_id[node_id].tokens
            keep = tokens.size if limit is None else min(tokens.size, limit - offset)
            token_parts.append(tokens[:keep])
            mask_parts.append(np.full(keep, 0 if node_id in trained else 1, dtype=np.int8))
            spans.append((node_id, offset, offset + keep))
            kept.append(node_id)
            offset += keep
            trained.add(node_id)
            if keep < tokens.size:
                cut = node_id
        threads.append(FlatThread(
            tokens=np.concatenate(token_parts).astype(np.int64),
            loss_mask=np.concatenate(mask_parts),
            path=kept, message_spans=spans, truncated=limit is not None, cut_message=cut,
            tree_id=tree.tree_id, source=tree.source,
        ))
    return threads


def repetition_overhead(tree: ConversationTree) -> float:
    """Tokens over all flattened threads divided by unique message tokens, minus one"""
    unique = tree.unique_token_count()
    if unique == 0:
        return 0.0
    flattened = sum(len(t) for t in flatten_conversation_tree(tree))
    return flattened / unique - 1.0


def weighted_overhead(shares: Sequence[float], overheads: Sequence[float]) -> float:
    """
    Overall compute overhead of a mixture where only some sources are flattened trees

    Args:
        shares: Fraction of all training tokens taken by each conversation source
        overheads: Repetition overhead of each source
    """
    if len(shares) != len(overheads):
        raise ValueError("one overhead per share required")
    return float(sum(s * o for s, o in zip(shares, overheads)))


def truncate_thread(thread: FlatThread, max_len: int) -> FlatThread:
    """
    Keep the first max_len tokens of one thread; flag it and name any message cut mid-way

    flatten_conversation_tree(tree, max_len) applies the same cut to every
    thread of a tree.
    """
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if len(thread) <= max_len:
        return thread
    spans, path, cut = [], [], None
    for node_id, start, end in thread.message_spans:
        if start >= max_len:
            break
        if end > max_len:
            cut = node_id
        spans.append((node_id, start, min(end, max_len)))
        path.append(node_id)
    logger.debug("truncated thread of tree %s from %d to %d tokens", thread.tree_id, len(thread), max_len)
    return FlatThread(
        tokens=thread.tokens[:max_len].copy(), loss_mask=thread.loss_mask[:max_len].copy(),
        path=path, message_spans=spans, truncated=True, cut_message=cut,
        tree_id=thread.tree_id, source=thread.source,
    )


def _flatten_one(args) -> List[FlatThread]:
    tree, max_len = args
    return flatten_conversation_tree(tree, max_len)


def flatten_corpus(trees: Iterable[ConversationTree], workers: int = 1,
                   max_len: Optional[int] = None) -> List[FlatThread]:
    """Flatten many trees; output order follows input order for any worker count"""
    jobs = [(tree, max_len) for tree in trees]
    if workers <= 1:
        results = [_flatten_one(job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_flatten_one, jobs))
    return [thread for threads in results for thread in threads]


def untrained_token_count(tree: ConversationTree, threads: Sequence[FlatThread]) -> int:
    """Message tokens left unmasked in no thread (messages always cut or dropped by truncation)"""
    covered: Dict[str, int] = defaultdict(int)
    for thread in threads:
        for node_id, start, end in thread.message_spans:
            if thread.loss_mask[start:end].any():
                covered[node_id] = max(covered[node_id], end - start)
    return int(sum(node.tokens.size - covered[node.id] for node in tree.nodes))


def overhead_summary(trees: Iterable[ConversationTree], max_len: Optional[int] = None) -> Dict[str, Dict[str, float]]:
    """Per-source flattened/unique token totals, overhead fraction and tokens truncation left untrained"""
    totals: Dict[str, List[int]] = defaultdict(lambda: [0, 0, 0, 0])
    for tree in trees:
        threads = flatten_conversation_tree(tree, max_len)
        row = totals[tree.source]
        row[0] += 1
        row[1] += tree.unique_token_count()
        row[2] += sum(len(t) for t in threads)
        row[3] += untrained_token_count(tree, threads)
    return {
        source: {
            "trees": n_trees,
            "unique_tokens": unique,
            "flattened_tokens": flat,
            "overhead": (flat / unique - 1.0) if unique else 0.0,
            "untrained_tokens": untrained,
        }
        for source, (n_trees, unique, flat, untrained) in sorted(totals.items())
    }


def load_trees(path: str, tokenizer: Optional[Tokenizer] = None) -> List[ConversationTree]:
    """Read line-delimited tree records; blank lines are skipped"""
    trees = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TreeValidationError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            tree = record.get("tree", record)
            if isinstance(tree, list):
                tree = {"id": record.get("id", str(line_no)), "source": record.get("source", "unknown"), "nodes": tree}
            trees.append(ConversationTree.from_record(tree, tokenizer))
    return trees
