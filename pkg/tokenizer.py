"""
Reversible tokenizers for desk-scale corpora
"""

from abc import ABC, abstractmethod
from typing import List, Sequence

import numpy as np


class Tokenizer(ABC):
    """Base class for tokenizers used by the data pipeline"""

    @property
    @abstractmethod
    def vocab_size(self) -> int:
        pass

    @property
    @abstractmethod
    def pad_id(self) -> int:
        pass

    @property
    @abstractmethod
    def eos_id(self) -> int:
        pass

    @abstractmethod
    def encode(self, text: str) -> np.ndarray:
        pass

    @abstractmethod
    def decode(self, ids: Sequence[int]) -> str:
        pass

    def encode_batch(self, texts: Sequence[str]) -> List[np.ndarray]:
        return [self.encode(t) for t in texts]


class ByteTokenizer(Tokenizer):
    """UTF-8 bytes as ids 0-255, plus padding and end-of-sequence ids"""

    PAD = 256
    EOS = 257

    @property
    def vocab_size(self) -> int:
        return 258

    @property
    def pad_id(self) -> int:
        return self.PAD

    @property
    def eos_id(self) -> int:
        return self.EOS

    def encode(self, text: str) -> np.ndarray:
        return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)

    def decode(self, ids: Sequence[int]) -> str:
        data = bytes(int(i) for i in ids if 0 <= int(i) < 256)
        return data.decode("utf-8", errors="replace")
