"""
Parallel-block decoder architecture
Layer norm, rotary embeddings, grouped-query attention, MLP, parallel and sequential
blocks, the LM head with tied/untied embeddings, and the composite training loss
"""

import dataclasses
import logging
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from tensor_core import (
    ShapeError, Tensor, embedding, gelu, logsumexp, softmax, take_along_last,
)

logger = logging.getLogger(__name__)

Z_LOSS_COEF = 1e-4
LN_EPS = 1e-5
INIT_STD = 0.02


class ConfigError(ValueError):
    """Invalid architecture or training configuration"""


class TokenRangeError(ValueError):
    """Token id outside the vocabulary"""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters"""
    n_layers: int
    d_model: int
    n_heads: int
    head_dim: int
    n_kv: int
    context_length: int
    rope_base: float
    tied_embeddings: bool
    vocab_size: int
    mlp_ratio: int = 4
    ln_eps: float = LN_EPS
    ln_bias: bool = True
    attn_bias: bool = False

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "head_dim", "n_kv", "context_length", "vocab_size", "mlp_ratio"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"{name} must be a positive int, got {value!r}")
        if self.n_heads % self.n_kv != 0:
            raise ConfigError(f"n_heads ({self.n_heads}) must be divisible by n_kv ({self.n_kv})")
        if not self.rope_base > 0:
            raise ConfigError(f"rope_base must be positive, got {self.rope_base}")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary embeddings, got {self.head_dim}")

    @property
    def attention_width(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def kv_width(self) -> int:
        return self.n_kv * self.head_dim

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv

    @property
    def mlp_hidden(self) -> int:
        return self.mlp_ratio * self.d_model

    def block_parameter_count(self) -> int:
        d, a, kv, h = self.d_model, self.attention_width, self.kv_width, self.mlp_hidden
        count = d * a + 2 * d * kv + a * d + 2 * d * h
        count += 2 * d if self.ln_bias else d
        if self.attn_bias:
            count += a + 2 * kv + d
        return count

    def parameter_count(self) -> int:
        """Analytic parameter count (embedding counted once when tied)"""
        final_ln = 2 * self.d_model if self.ln_bias else self.d_model
        head = 0 if self.tied_embeddings else self.vocab_size * self.d_model
        return self.n_layers * self.block_parameter_count() + self.vocab_size * self.d_model + final_ln + head

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)


# Rope bases "5M+42" and "500K+42"
ROPE_BASE_LONG = 5_000_042.0
ROPE_BASE_FINAL = 500_042.0

_11B = dict(n_layers=60, d_model=4096, n_heads=32, head_dim=128, n_kv=8, vocab_size=65024)
_DESK = dict(n_layers=2, d_model=64, n_heads=4, head_dim=16, n_kv=2, vocab_size=258)

MODEL_PRESETS: Dict[str, ModelConfig] = {
    "11b-stage1": ModelConfig(**_11B, context_length=2048, rope_base=ROPE_BASE_LONG, tied_embeddings=True),
    "11b-stage2": ModelConfig(**_11B, context_length=4096, rope_base=ROPE_BASE_LONG, tied_embeddings=True),
    "11b-stage3": ModelConfig(**_11B, context_length=8192, rope_base=ROPE_BASE_LONG, tied_embeddings=True),
    "11b-stage4": ModelConfig(**_11B, context_length=8192, rope_base=ROPE_BASE_FINAL, tied_embeddings=False),
    "desk-stage1": ModelConfig(**_DESK, context_length=128, rope_base=ROPE_BASE_LONG, tied_embeddings=True),
    "desk-stage2": ModelConfig(**_DESK, context_length=256, rope_base=ROPE_BASE_LONG, tied_embeddings=True),
    "desk-stage3": ModelConfig(**_DESK, context_length=512, rope_base=ROPE_BASE_LONG, tied_embeddings=True),
    "desk-stage4": ModelConfig(**_DESK, context_length=512, rope_base=ROPE_BASE_FINAL, tied_embeddings=False),
    "toy": ModelConfig(n_layers=2, d_model=64, n_heads=4, head_dim=16, n_kv=2, vocab_size=97,
                       context_length=128, rope_base=ROPE_BASE_LONG, tied_embeddings=True),
}


def get_preset(name: str) -> ModelConfig:
    try:
        return MODEL_PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown model preset '{name}', choose from {sorted(MODEL_PRESETS)}") from None


@dataclass
class BlockWeights:
    """Parameters of one transformer block"""
    ln_gain: Tensor
    ln_bias: Optional[Tensor]
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    mlp_up: Tensor
    mlp_down: Tensor
    bq: Optional[Tensor] = None
    bk: Optional[Tensor] = None
    bv: Optional[Tensor] = None
    bo: Optional[Tensor] = None
    # Second norm, only used by the sequential (two-LN) form
    ln2_gain: Optional[Tensor] = None
    ln2_bias: Optional[Tensor] = None

    def named(self) -> Dict[str, Tensor]:
        names = {
            "ln.gain": self.ln_gain, "ln.bias": self.ln_bias,
            "attn.wq": self.wq, "attn.wk": self.wk, "attn.wv": self.wv, "attn.wo": self.wo,
            "attn.bq": self.bq, "attn.bk": self.bk, "attn.bv": self.bv, "attn.bo": self.bo,
            "mlp.up": self.mlp_up, "mlp.down": self.mlp_down,
            "ln2.gain": self.ln2_gain, "ln2.bias": self.ln2_bias,
        }
        return {k: v for k, v in names.items() if v is not None}

    @classmethod
    def from_named(cls, named: Dict[str, Tensor]) -> "BlockWeights":
        get = named.get
        return cls(
            ln_gain=named["ln.gain"], ln_bias=get("ln.bias"),
            wq=named["attn.wq"], wk=named["attn.wk"], wv=named["attn.wv"], wo=named["attn.wo"],
            bq=get("attn.bq"), bk=get("attn.bk"), bv=get("attn.bv"), bo=get("attn.bo"),
            mlp_up=named["mlp.up"], mlp_down=named["mlp.down"],
            ln2_gain=get("ln2.gain"), ln2_bias=get("ln2.bias"),
        )

    def validate(self, config: ModelConfig):
        d, a, kv, h = config.d_model, config.attention_width, config.kv_width, config.mlp_hidden
        expected = {
            "ln.gain": (d,), "ln.bias": (d,), "ln2.gain": (d,), "ln2.bias": (d,),
            "attn.wq": (d, a), "attn.wk": (d, kv), "attn.wv": (d, kv), "attn.wo": (a, d),
            "attn.bq": (a,), "attn.bk": (kv,), "attn.bv": (kv,), "attn.bo": (d,),
            "mlp.up": (d, h), "mlp.down": (h, d),
        }
        for name, tensor in self.named().items():
            if tensor.shape != expected[name]:
                raise ShapeError(f"block weight {name}", tensor.shape, expected[name])
            if not np.all(np.isfinite(tensor.data)):
                raise ConfigError(f"block weight {name} contains non-finite values")

    @classmethod
    def init(cls, config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> "BlockWeights":
        d, a, kv, h = config.d_model, config.attention_width, config.kv_width, config.mlp_hidden

        def normal(*shape):
            return Tensor(rng.normal(0.0, INIT_STD, size=shape).astype(dtype), requires_grad=True)

        def const(value, n):
            return Tensor(np.full(n, value, dtype=dtype), requires_grad=True)

        return cls(
            ln_gain=const(1.0, d), ln_bias=const(0.0, d) if config.ln_bias else None,
            wq=normal(d, a), wk=normal(d, kv), wv=normal(d, kv), wo=normal(a, d),
            bq=const(0.0, a) if config.attn_bias else None,
            bk=const(0.0, kv) if config.attn_bias else None,
            bv=const(0.0, kv) if config.attn_bias else None,
            bo=const(0.0, d) if config.attn_bias else None,
            mlp_up=normal(d, h), mlp_down=normal(h, d),
        )


@dataclass
class LmHead:
    """Token embedding and output projection; tied mode shares the embedding storage"""
    embedding: Tensor
    output: Optional[Tensor] = None

    @property
    def tied(self) -> bool:
        return self.output is None

    @property
    def projection(self) -> Tensor:
        return self.embedding if self.output is None else self.output

    def untie(self) -> Tensor:
        """Give the head its own copy of the embedding matrix"""
        if self.output is None:
            self.output = Tensor(self.embedding.data.copy(), requires_grad=self.embedding.requires_grad)
        return self.output


class ParallelLM:
    """Decoder-only language model built from parallel blocks"""

    def __init__(self, config: ModelConfig, blocks: List[BlockWeights], head: LmHead,
                 final_ln_gain: Tensor, final_ln_bias: Optional[Tensor]):
        self.config = config
        self.blocks = blocks
        self.head = head
        self.final_ln_gain = final_ln_gain
        self.final_ln_bias = final_ln_bias
        if len(blocks) != config.n_layers:
            raise ConfigError(f"expected {config.n_layers} blocks, got {len(blocks)}")
        if head.tied != config.tied_embeddings:
            raise ConfigError("head tying does not match config.tied_embeddings")
        for block in blocks:
            block.validate(config)
        if head.embedding.shape != (config.vocab_size, config.d_model):
            raise ShapeError("embedding", head.embedding.shape, (config.vocab_size, config.d_model))

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "ParallelLM":
        rng = np.random.default_rng(seed)
        embed = Tensor(rng.normal(0.0, INIT_STD, size=(config.vocab_size, config.d_model)).astype(dtype),
                       requires_grad=True)
        blocks = [BlockWeights.init(config, rng, dtype) for _ in range(config.n_layers)]
        head = LmHead(embedding=embed)
        if not config.tied_embeddings:
            head.untie()
        gain = Tensor(np.ones(config.d_model, dtype=dtype), requires_grad=True)
        bias = Tensor(np.zeros(config.d_model, dtype=dtype), requires_grad=True) if config.ln_bias else None
        return cls(config, blocks, head, gain, bias)

    @property
    def dtype(self):
        return self.head.embedding.dtype

    def parameters(self) -> Dict[str, Tensor]:
        """Named parameters in a fixed order; a tied head is not listed twice"""
        params: Dict[str, Tensor] = {"embed": self.head.embedding}
        for i, block in enumerate(self.blocks):
            for name, tensor in block.named().items():
                params[f"blocks.{i}.{name}"] = tensor
        params["final_ln.gain"] = self.final_ln_gain
        if self.final_ln_bias is not None:
            params["final_ln.bias"] = self.final_ln_bias
        if not self.head.tied:
            params["lm_head"] = self.head.output
        return params

    def replace_parameters(self, mapping: Dict[str, Tensor], config: Optional[ModelConfig] = None) -> "ParallelLM":
        """New model sharing this one's structure with some tensors substituted"""
        params = dict(self.parameters())
        params.update(mapping)
        return self.from_parameters(config or self.config, params)

    @classmethod
    def from_parameters(cls, config: ModelConfig, params: Dict[str, Tensor]) -> "ParallelLM":
        blocks = []
        for i in range(config.n_layers):
            prefix = f"blocks.{i}."
            blocks.append(BlockWeights.from_named(
                {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}))
        head = LmHead(embedding=params["embed"], output=params.get("lm_head"))
        return cls(config, blocks, head, params["final_ln.gain"], params.get("final_ln.bias"))

    def detached(self) -> "ParallelLM":
        """Same weights, no gradient tracking"""
        return self.replace_parameters({k: v.detach() for k, v in self.parameters().items()})

    def with_config(self, **changes) -> "ParallelLM":
        """Same weight objects under a changed config (context length, rope base)"""
        return ParallelLM(self.config.replace(**changes), self.blocks, self.head,
                          self.final_ln_gain, self.final_ln_bias)

    def untie(self) -> "ParallelLM":
        self.head.untie()
        self.config = self.config.replace(tied_embeddings=False)
        logger.info("untied embeddings: +%d parameters", self.config.vocab_size * self.config.d_model)
        return self

    def parameter_count(self) -> int:
        return int(sum(t.size for t in self.parameters().values()))

    def zero_grad(self):
        for tensor in self.parameters().values():
            tensor.zero_grad()


# Operations

def layer_norm(x: Tensor, gain: Tensor, bias: Optional[Tensor], eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply the affine map"""
    if x.shape[-1] < 1:
        raise ShapeError("layer_norm", x.shape, detail="zero-length feature dim")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    out = centered * (var + eps) ** -0.5 * gain
    return out + bias if bias is not None else out


def _rotate_half_matrix(head_dim: int, dtype) -> np.ndarray:
    # x @ R == concat(-x[half:], x[:half])
    half = head_dim // 2
    r = np.zeros((head_dim, head_dim), dtype=dtype)
    r[half:, :half] = -np.eye(half, dtype=dtype)
    r[:half, half:] = np.eye(half, dtype=dtype)
    return r


def rope_tables(positions: Sequence[int], head_dim: int, rope_base: float, dtype=np.float32) -> Tuple[np.ndarray, np.ndarray]:
    """cos/sin tables of shape [seq, 1, head_dim] for frequencies rope_base^(-2i/head_dim)"""
    if head_dim % 2 != 0:
        raise ShapeError("rope_apply", (head_dim,), detail="head_dim must be even")
    pos = np.asarray(positions, dtype=np.float64)
    inv_freq = rope_base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = pos[:, None] * inv_freq[None, :]
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles)[:, None, :].astype(dtype), np.sin(angles)[:, None, :].astype(dtype)


def rope_apply(x: Tensor, positions: Sequence[int], rope_base: float) -> Tensor:
    """
    Rotate query/key features by position

    Args:
        x: Tensor [..., seq, heads, head_dim]
        positions: Integer position of each sequence element
        rope_base: Frequency base

    Returns:
        Tensor of the same shape
    """
    head_dim = x.shape[-1]
    if head_dim % 2 != 0:
        raise ShapeError("rope_apply", x.shape, detail="head_dim must be even")
    if len(positions) != x.shape[-3]:
        raise ShapeError("rope_apply", x.shape, (len(positions),), detail="one position per sequence element")
    cos, sin = rope_tables(positions, head_dim, rope_base, x.dtype)
    rotated = x @ Tensor(_rotate_half_matrix(head_dim, x.dtype))
    return x * cos + rotated * sin


def attention_mask(seq_len: int, segment_ids: Optional[np.ndarray] = None) -> np.ndarray:
    """Causal mask, block-diagonal over document segments when ids are given (True = may attend)"""
    causal = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    if segment_ids is None:
        return causal
    seg = np.asarray(segment_ids)
    if seg.shape[-1] != seq_len:
        raise ShapeError("attention_mask", seg.shape, (seq_len,))
    same = seg[..., :, None] == seg[..., None, :]
    return causal & same


def attention_gqa(x_norm: Tensor, weights: BlockWeights, causal_mask: np.ndarray, config: ModelConfig,
                  positions: Optional[Sequence[int]] = None) -> Tensor:
    """
    Grouped-query attention: each run of n_heads/n_kv consecutive query heads shares one k/v head

    Args:
        x_norm: Tensor [..., seq, d_model]
        weights: Block weights holding wq, wk, wv, wo
        causal_mask: Boolean [seq, seq] or [..., seq, seq]; True where attention is allowed
        config: Model configuration

    Returns:
        Tensor [..., seq, d_model]
    """
    seq = x_norm.shape[-2]
    lead = x_norm.shape[:-2]
    mask = np.asarray(causal_mask, dtype=bool)
    if mask.shape[-2:] != (seq, seq):
        raise ShapeError("attention_gqa", x_norm.shape, mask.shape, detail="mask/sequence length mismatch")
    if seq > config.context_length:
        raise ShapeError("attention_gqa", x_norm.shape, detail=f"sequence longer than context_length {config.context_length}")
    if config.n_heads % config.n_kv != 0:
        raise ConfigError(f"n_heads ({config.n_heads}) must be divisible by n_kv ({config.n_kv})")
    if positions is None:
        positions = np.arange(seq)
    n_kv, group, hd = config.n_kv, config.group_size, config.head_dim

    q = x_norm @ weights.wq
    k = x_norm @ weights.wk
    v = x_norm @ weights.wv
    if weights.bq is not None:
        q, k, v = q + weights.bq, k + weights.bk, v + weights.bv

    q = rope_apply(q.reshape(*lead, seq, config.n_heads, hd), positions, config.rope_base)
    k = rope_apply(k.reshape(*lead, seq, n_kv, hd), positions, config.rope_base)
    v = v.reshape(*lead, seq, n_kv, hd)

    nl = len(lead)
    lead_axes = tuple(range(nl))
    # [..., n_kv, group, seq, hd] against [..., n_kv, 1, seq, hd]
    q = q.reshape(*lead, seq, n_kv, group, hd).transpose(lead_axes + (nl + 1, nl + 2, nl, nl + 3))
    k = k.reshape(*lead, seq, n_kv, 1, hd).transpose(lead_axes + (nl + 1, nl + 2, nl, nl + 3))
    v = v.reshape(*lead, seq, n_kv, 1, hd).transpose(lead_axes + (nl + 1, nl + 2, nl, nl + 3))

    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd))
    bias = np.where(mask, 0.0, -np.inf).astype(x_norm.dtype)
    bias = bias.reshape(bias.shape[:-2] + (1, 1) + bias.shape[-2:])
    probs = softmax(scores + bias, axis=-1)
    out = probs @ v
    out = out.transpose(lead_axes + (nl + 2, nl, nl + 1, nl + 3)).reshape(*lead, seq, config.attention_width)
    out = out @ weights.wo
    return out + weights.bo if weights.bo is not None else out


def mlp(x_norm: Tensor, weights: BlockWeights) -> Tensor:
    return gelu(x_norm @ weights.mlp_up) @ weights.mlp_down


def parallel_block(x: Tensor, weights: BlockWeights, config: ModelConfig, mask: Optional[np.ndarray] = None,
                   positions: Optional[Sequence[int]] = None, branch_order: Tuple[str, str] = ("mlp", "attn")) -> Tensor:
    """x + (MLP(LN(x)) + Attention(LN(x))) with one shared layer norm"""
    if mask is None:
        mask = attention_mask(x.shape[-2])
    x_norm = layer_norm(x, weights.ln_gain, weights.ln_bias, config.ln_eps)
    branches = {
        "mlp": mlp(x_norm, weights),
        "attn": attention_gqa(x_norm, weights, mask, config, positions),
    }
    first, second = branch_order
    return x + (branches[first] + branches[second])


def sequential_block(x: Tensor, weights: BlockWeights, config: ModelConfig, mask: Optional[np.ndarray] = None,
                     positions: Optional[Sequence[int]] = None) -> Tensor:
    """Two-norm sequential form, kept for differential testing against parallel_block"""
    if mask is None:
        mask = attention_mask(x.shape[-2])
    gain2 = weights.ln2_gain if weights.ln2_gain is not None else weights.ln_gain
    bias2 = weights.ln2_bias if weights.ln2_gain is not None else weights.ln_bias
    x_attn = layer_norm(x + attention_gqa(x, weights, mask, config, positions),
                        weights.ln_gain, weights.ln_bias, config.ln_eps)
    return layer_norm(x_attn + mlp(x_attn, weights), gain2, bias2, config.ln_eps)


def _check_tokens(tokens: np.ndarray, config: ModelConfig) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.dtype.kind not in "iu":
        raise TokenRangeError(f"token ids must be integers, got dtype {tokens.dtype}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        bad = tokens[(tokens < 0) | (tokens >= config.vocab_size)]
        raise TokenRangeError(f"token id {int(bad[0])} outside vocabulary of size {config.vocab_size}")
    return tokens.astype(np.int64)


def embed_tokens(tokens: np.ndarray, model: ParallelLM) -> Tensor:
    return embedding(model.head.embedding, _check_tokens(tokens, model.config))


def lm_forward_embeddings(h: Tensor, model: ParallelLM, segment_ids: Optional[np.ndarray] = None,
                          block=parallel_block) -> Tensor:
    """Run input embeddings [..., seq, d_model] through the blocks, final norm and head"""
    seq = h.shape[-2]
    if seq > model.config.context_length:
        raise ShapeError("lm_forward", h.shape, detail=f"sequence longer than context_length {model.config.context_length}")
    mask = attention_mask(seq, segment_ids)
    positions = np.arange(seq)
    for weights in model.blocks:
        h = block(h, weights, model.config, mask, positions)
    h = layer_norm(h, model.final_ln_gain, model.final_ln_bias, model.config.ln_eps)
    return h @ model.head.projection.T


def lm_forward(tokens: np.ndarray, model: ParallelLM, segment_ids: Optional[np.ndarray] = None,
               block=parallel_block) -> Tensor:
    """
    Logits for a token sequence

    Args:
        tokens: Integer ids [seq] or [batch, seq]
        model: The language model
        segment_ids: Optional document id per position for packed samples

    Returns:
        Tensor [..., seq, vocab_size]
    """
    return lm_forward_embeddings(embed_tokens(tokens, model), model, segment_ids, block)


class LossTerms(NamedTuple):
    total: Tensor
    ce: Tensor
    z: Tensor


def lm_loss(logits: Tensor, targets: np.ndarray, loss_mask: np.ndarray, z_loss_coef: float = Z_LOSS_COEF,
            normalizer: Optional[float] = None) -> LossTerms:
    """
    Masked cross-entropy plus z-loss c_z * log^2(Z)

    Args:
        logits: Tensor [..., seq, vocab]
        targets: Integer ids [..., seq]; ignored where the mask is 0
        loss_mask: 0/1 weights [..., seq]
        normalizer: Token count to average over; defaults to the number of
            unmasked positions (pass the full-batch count when accumulating
            micro-batches)
    """
    mask = np.asarray(loss_mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("lm_loss: loss_mask must contain only 0 and 1")
    targets = np.asarray(targets)
    if mask.shape != logits.shape[:-1] or targets.shape != logits.shape[:-1]:
        raise ShapeError("lm_loss", logits.shape, targets.shape, mask.shape)
    count = float(mask.sum())
    if normalizer is None:
        if count == 0:
            raise ValueError("lm_loss: every position is masked; drop this batch")
        normalizer = count
    safe_targets = np.where(mask > 0, targets, 0).astype(np.int64)
    weight = Tensor(mask.astype(logits.dtype) / normalizer, dtype=logits.dtype)
    lse = logsumexp(logits, axis=-1)
    picked = take_along_last(logits, safe_targets)
    ce = ((lse - picked) * weight).sum()
    z = ((lse * lse) * weight).sum() * z_loss_coef
    return LossTerms(total=ce + z, ce=ce, z=z)
