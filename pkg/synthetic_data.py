"""
Synthetic corpora for desk-scale runs
Markov token sources standing in for the english / multilingual / code / others
mixture, random conversation trees, and colored-image instruction records
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from conversation_trees import ConversationTree, Message
from sequence_packing import Document, PackedSample, pack_sequences
from tokenizer import ByteTokenizer
from vlm_extension import VlmRecord

logger = logging.getLogger(__name__)

# Disjoint byte alphabets so realized mixture shares can be read off the tokens
SOURCE_ALPHABETS: Dict[str, Tuple[int, ...]] = {
    "english": tuple(range(97, 123)) + (32, 46),
    "multilingual": tuple(range(192, 256)),
    "code": tuple(range(33, 47)) + tuple(range(58, 65)) + tuple(range(91, 97)) + (10,),
    "others": tuple(range(48, 58)) + tuple(range(65, 91)),
}


class MarkovSource:
    """First-order Markov chain over a byte alphabet with a sparse Dirichlet transition table"""

    def __init__(self, name: str, alphabet: Sequence[int], seed: int = 0, concentration: float = 0.1,
                 mean_length: float = 96.0, length_sigma: float = 0.6):
        if len(alphabet) < 2:
            raise ValueError(f"source '{name}' needs at least two symbols")
        if mean_length < 1:
            raise ValueError("mean_length must be >= 1")
        self.name = name
        self.alphabet = np.asarray(alphabet, dtype=np.int64)
        self.mean_length = mean_length
        self.length_sigma = length_sigma
        rng = np.random.default_rng(seed)
        k = len(alphabet)
        self.initial = rng.dirichlet(np.full(k, 1.0))
        self.transitions = rng.dirichlet(np.full(k, concentration), size=k)

    def sample_length(self, rng: np.random.Generator) -> int:
        mu = np.log(self.mean_length) - 0.5 * self.length_sigma ** 2
        return max(1, int(round(rng.lognormal(mu, self.length_sigma))))

    def sample(self, length: int, rng: np.random.Generator) -> np.ndarray:
        states = np.empty(length, dtype=np.int64)
        states[0] = rng.choice(len(self.alphabet), p=self.initial)
        draws = rng.random(length)
        cumulative = np.cumsum(self.transitions, axis=1)
        for i in range(1, length):
            states[i] = min(int(np.searchsorted(cumulative[states[i - 1]], draws[i], side="right")),
                            len(self.alphabet) - 1)
        return self.alphabet[states]

    def documents(self, n_docs: int, seed: int = 0) -> List[Document]:
        rng = np.random.default_rng(seed)
        return [Document(self.sample(self.sample_length(rng), rng), source=self.name, doc_id=f"{self.name}-{i}")
                for i in range(n_docs)]


def mixture_sources(seed: int = 0) -> Dict[str, MarkovSource]:
    return {name: MarkovSource(name, alphabet, seed=seed * 101 + i)
            for i, (name, alphabet) in enumerate(SOURCE_ALPHABETS.items())}


def synthetic_corpus(n_docs: int = 256, seed: int = 0, sample_seed: Optional[int] = None) -> Dict[str, List[Document]]:
    """
    Documents per source

    The chains are fixed by `seed`; `sample_seed` picks which documents are
    drawn from them, so a held-out split shares the chains but not the text.
    """
    sample_seed = seed if sample_seed is None else sample_seed
    sources = mixture_sources(seed)
    corpus = {name: source.documents(n_docs, seed=sample_seed * 7919 + i)
              for i, (name, source) in enumerate(sources.items())}
    logger.debug("synthetic corpus: %s", {k: sum(len(d) for d in v) for k, v in corpus.items()})
    return corpus


def held_out_samples(context_len: int, n_samples: int = 8, seed: int = 0,
                     pad_id: int = ByteTokenizer.PAD) -> List[PackedSample]:
    """Packed windows from the same chains as synthetic_corpus(seed) but disjoint draws"""
    corpus = synthetic_corpus(n_docs=max(4, n_samples), seed=seed, sample_seed=seed + 1_000_003)
    interleaved = [doc for group in zip(*corpus.values()) for doc in group]
    samples = pack_sequences(interleaved, context_len, pad_id=pad_id)
    if len(samples) < n_samples:
        raise ValueError(f"held-out split produced {len(samples)} windows, wanted {n_samples}")
    return samples[:n_samples]


def random_conversation_tree(rng: np.random.Generator, max_nodes: int = 15, tree_id: str = "",
                             source: str = "conversations", vocab: int = 256,
                             max_message_len: int = 12) -> ConversationTree:
    """Uniformly attached random reply tree with 1..max_nodes messages"""
    if max_nodes < 1:
        raise ValueError("max_nodes must be >= 1")
    n = int(rng.integers(1, max_nodes + 1))
    nodes = []
    for i in range(n):
        parent = None if i == 0 else f"m{int(rng.integers(0, i))}"
        length = int(rng.integers(1, max_message_len + 1))
        nodes.append(Message(id=f"m{i}", role="user" if i % 2 == 0 else "assistant",
                             tokens=rng.integers(0, vocab, size=length), parent=parent))
    return ConversationTree(nodes, tree_id=tree_id, source=source)


def random_conversation_forest(n_trees: int, seed: int = 0, max_nodes: int = 15,
                               sources: Sequence[str] = ("conversations",)) -> List[ConversationTree]:
    rng = np.random.default_rng(seed)
    return [random_conversation_tree(rng, max_nodes, tree_id=f"t{i}", source=sources[i % len(sources)])
            for i in range(n_trees)]


COLORS: Dict[str, Tuple[int, int, int]] = {
    "red": (220, 30, 30),
    "green": (30, 200, 60),
    "blue": (40, 60, 220),
    "yellow": (235, 220, 40),
    "black": (10, 10, 10),
    "white": (245, 245, 245),
}


def solid_image(color: Tuple[int, int, int], width: int, height: Optional[int] = None) -> Image.Image:
    return Image.new("RGB", (width, height or width), color)


def split_color_image(left: Tuple[int, int, int], right: Tuple[int, int, int], width: int, height: int) -> Image.Image:
    """Left half one color, right half another; used to exercise wide-image tiling"""
    pixels = np.empty((height, width, 3), dtype=np.uint8)
    pixels[:, :width // 2] = left
    pixels[:, width // 2:] = right
    return Image.fromarray(pixels)


def color_caption_records(n_records: int, image_size: int = 56, seed: int = 0,
                          multi_turn: bool = False) -> List[VlmRecord]:
    """Caption/instruction records over solid colors: "what color is this?" -> color name"""
    rng = np.random.default_rng(seed)
    names = list(COLORS)
    records = []
    for i in range(n_records):
        name = names[int(rng.integers(0, len(names)))]
        turns = [("what color is this? ", f"{name}.")]
        if multi_turn:
            turns.append((" is it dark? ", "yes." if name in ("black", "blue") else "no."))
        records.append(VlmRecord.from_text(solid_image(COLORS[name], image_size), turns, record_id=f"color-{i}"))
    return records
