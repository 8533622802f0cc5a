"""Small differentiable Siamese encoders with layer hook points.

Layer indexing: layer 0 is the input representation (token embedding plus
learned position embedding); layer ``l`` is the output of block ``l``.
``encode_suffix(encode_prefix(seq, l), l) == encode(seq)`` for every ``l``.
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from xjac.errors import DataError, NumericalError, UsageError

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
DTYPE = torch.float64
ARCHITECTURES = ("linear", "mlp", "transformer")
ACTIVATIONS = ("gelu", "tanh")
CHECKPOINT_FORMAT = 1


@dataclass
class Vocabulary:
    tokens: list[str]
    lowercase: bool = True
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise DataError("vocabulary must start with <pad>, <unk>")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __getitem__(self, token: str) -> int:
        return self.index.get(token, UNK)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    text: str = ""

    def __post_init__(self):
        if len(self.ids) == 0:
            raise DataError("token sequence must be nonempty")

    def __len__(self) -> int:
        return len(self.ids)


def _split(text: str, lowercase: bool) -> list[str]:
    return (text.lower() if lowercase else text).split()


def build_vocab(corpus: Sequence[str], min_count: int = 1, lowercase: bool = True) -> Vocabulary:
    """Vocabulary ordered by frequency (descending), ties broken lexicographically."""
    if not corpus:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts = Counter(tok for text in corpus for tok in _split(text, lowercase))
    for reserved in (PAD_TOKEN, UNK_TOKEN):
        counts.pop(reserved, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary([PAD_TOKEN, UNK_TOKEN, *kept], lowercase=lowercase)


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    words = _split(text, vocab.lowercase)
    if not words:
        raise DataError(f"text has no tokens: {text!r}")
    return TokenSequence(tuple(vocab[w] for w in words), text)


def reference_for(seq: TokenSequence) -> TokenSequence:
    """All-padding sequence of the same length as ``seq``."""
    return TokenSequence((PAD,) * len(seq), " ".join([PAD_TOKEN] * len(seq)))


@dataclass
class EncoderConfig:
    architecture: str = "transformer"
    vocab_size: int = 2
    dim: int = 32
    emb_dim: int = 32
    layers: int = 3
    heads: int = 4
    ff_dim: int = 64
    max_len: int = 32
    activation: str = "gelu"
    pooling: str = "mean"
    adjusted: bool = True

    def validate(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise UsageError(f"unknown architecture {self.architecture!r}")
        if self.activation not in ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")
        if self.pooling != "mean":
            raise UsageError("only mean pooling is supported")
        if self.layers < 1 or self.emb_dim < 1 or self.dim < 1 or self.max_len < 1:
            raise UsageError("layers, dim, emb_dim and max_len must be >= 1")
        if self.architecture == "transformer" and self.dim % self.heads:
            raise UsageError(f"dim {self.dim} not divisible by heads {self.heads}")


def _activation(name: str):
    if name == "gelu":
        return lambda x: F.gelu(x, approximate="tanh")
    return torch.tanh


class LinearBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.dim, cfg.dim, dtype=DTYPE)

    def forward(self, x):
        return self.proj(x)


class MLPBlock(nn.Module):
    """Token-wise residual MLP."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.fc_in = nn.Linear(cfg.dim, cfg.ff_dim, dtype=DTYPE)
        self.fc_out = nn.Linear(cfg.ff_dim, cfg.dim, dtype=DTYPE)
        self.act = _activation(cfg.activation)

    def forward(self, x):
        return x + self.fc_out(self.act(self.fc_in(x)))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block. No attention mask: pads are ordinary positions."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        d = cfg.dim
        self.heads = cfg.heads
        self.norm_attn = nn.LayerNorm(d, dtype=DTYPE)
        self.q = nn.Linear(d, d, dtype=DTYPE)
        self.k = nn.Linear(d, d, dtype=DTYPE)
        self.v = nn.Linear(d, d, dtype=DTYPE)
        self.o = nn.Linear(d, d, dtype=DTYPE)
        self.norm_ff = nn.LayerNorm(d, dtype=DTYPE)
        self.fc_in = nn.Linear(d, cfg.ff_dim, dtype=DTYPE)
        self.fc_out = nn.Linear(cfg.ff_dim, d, dtype=DTYPE)
        self.act = _activation(cfg.activation)

    def attention(self, x):
        *batch, s, d = x.shape
        hd = d // self.heads

        def split(t):
            return t.reshape(*batch, s, self.heads, hd).transpose(-3, -2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        out = (weights @ v).transpose(-3, -2).reshape(*batch, s, d)
        return self.o(out)

    def forward(self, x):
        x = x + self.attention(self.norm_attn(x))
        return x + self.fc_out(self.act(self.fc_in(self.norm_ff(x))))


_BLOCKS = {"linear": LinearBlock, "mlp": MLPBlock, "transformer": TransformerBlock}


class SiameseEncoder(nn.Module):
    """Shared-weight encoder scored by a dot product of (optionally shifted) embeddings.

    All parameters are float64. Forward passes accept arbitrary leading batch
    dimensions, which is what the batched Jacobian code relies on.
    """

    def __init__(self, config: EncoderConfig, vocab: Vocabulary, seed: int = 0):
        super().__init__()
        config.vocab_size = len(vocab)
        config.validate()
        self.config = config
        self.vocab = vocab
        self.token_embedding = nn.Parameter(torch.empty(len(vocab), config.dim, dtype=DTYPE))
        self.position_embedding = nn.Parameter(torch.empty(config.max_len, config.dim, dtype=DTYPE))
        self.blocks = nn.ModuleList(_BLOCKS[config.architecture](config) for _ in range(config.layers))
        self.head = nn.Linear(config.dim, config.emb_dim, dtype=DTYPE)
        self.reset_parameters(seed)

    @torch.no_grad()
    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.startswith("token_embedding"):
                p.copy_(torch.randn(p.shape, generator=gen, dtype=DTYPE) / math.sqrt(p.shape[1]))
                # a zero pad row keeps the shift from adding one shared offset to every embedding
                p[PAD].zero_()
            elif name.startswith("position_embedding"):
                p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=DTYPE))
            elif "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                bound = 1.0 / math.sqrt(p.shape[1])
                p.copy_((2 * torch.rand(p.shape, generator=gen, dtype=DTYPE) - 1) * bound)

    @property
    def num_layers(self) -> int:
        return self.config.layers

    def tokenize(self, text: str) -> TokenSequence:
        return tokenize(text, self.vocab)

    def tokens(self, seq: TokenSequence) -> list[str]:
        return [self.vocab.tokens[i] for i in seq.ids]

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer <= self.num_layers:
            raise UsageError(f"layer {layer} out of range 0..{self.num_layers}")

    def _ids(self, seq) -> torch.Tensor:
        ids = torch.as_tensor(seq.ids if isinstance(seq, TokenSequence) else seq, dtype=torch.long)
        if ids.shape[-1] > self.config.max_len:
            raise DataError(f"sequence length {ids.shape[-1]} exceeds max_len {self.config.max_len}")
        if ids.numel() and (ids.min() < 0 or ids.max() >= len(self.vocab)):
            raise DataError("token id outside vocabulary")
        return ids

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        s = ids.shape[-1]
        return self.token_embedding[ids] + self.position_embedding[:s]

    def run_layers(self, x: torch.Tensor, start: int, stop: int) -> torch.Tensor:
        for block in self.blocks[start:stop]:
            x = block(x)
        return x

    def pool_project(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(x.mean(dim=-2))

    def encode_prefix(self, seq, layer: int) -> torch.Tensor:
        """Representation (S, D) of ``seq`` at ``layer``; also accepts a (B, S) id tensor."""
        self._check_layer(layer)
        return self.run_layers(self.embed(self._ids(seq)), 0, layer)

    def encode_suffix(self, rep: torch.Tensor, layer: int) -> torch.Tensor:
        """Unshifted embedding from a representation at ``layer``."""
        self._check_layer(layer)
        if rep.shape[-1] != self.config.dim:
            raise DataError(f"representation width {rep.shape[-1]} != model dim {self.config.dim}")
        return self.pool_project(self.run_layers(rep, layer, self.num_layers))

    def tail(self, layer: int):
        """The function ``rep -> encode_suffix(rep, layer)`` for differentiation."""
        self._check_layer(layer)
        return lambda rep: self.encode_suffix(rep, layer)

    def encode(self, seq) -> torch.Tensor:
        return self.pool_project(self.run_layers(self.embed(self._ids(seq)), 0, self.num_layers))

    def encode_shifted(self, seq) -> torch.Tensor:
        ref = reference_for(seq) if isinstance(seq, TokenSequence) else torch.zeros_like(self._ids(seq))
        return self.encode(seq) - self.encode(ref)

    def embedding(self, seq, shifted: bool | None = None) -> torch.Tensor:
        """Embedding as used for scoring; ``shifted`` defaults to ``config.adjusted``."""
        if shifted is None:
            shifted = self.config.adjusted
        return self.encode_shifted(seq) if shifted else self.encode(seq)

    def encode_batch(self, seqs: Sequence[TokenSequence], shifted: bool = False) -> torch.Tensor:
        """Embeddings (len(seqs), D_emb), grouping equal lengths into one forward pass."""
        out = [None] * len(seqs)
        by_len: dict[int, list[int]] = {}
        for i, seq in enumerate(seqs):
            by_len.setdefault(len(seq), []).append(i)
        for length, idx in sorted(by_len.items()):
            ids = torch.stack([self._ids(seqs[i]) for i in idx])
            emb = self.encode(ids)
            if shifted:
                emb = emb - self.encode(torch.full((length,), PAD, dtype=torch.long))
            for row, i in enumerate(idx):
                out[i] = emb[row]
        return torch.stack(out)


def similarity(u: torch.Tensor, v: torch.Tensor, mode: str = "dot") -> torch.Tensor:
    """Dot or cosine similarity over the last axis."""
    dot = (u * v).sum(-1)
    if mode == "dot":
        return dot
    if mode != "cosine":
        raise UsageError(f"unknown similarity mode {mode!r}")
    norms = u.norm(dim=-1) * v.norm(dim=-1)
    if bool((norms == 0).any()):
        # the shifted reference embedding is exactly zero; its cosine is undefined
        raise NumericalError("cosine similarity of a zero-norm embedding is undefined")
    return dot / norms


def score(model: SiameseEncoder, a: TokenSequence, b: TokenSequence, mode: str = "dot",
          shifted: bool | None = None) -> float:
    with torch.no_grad():
        ea, eb = model.embedding(a, shifted), model.embedding(b, shifted)
        return float(similarity(ea, eb, mode))


# -- checkpoints -------------------------------------------------------------

def _atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_dict(model: SiameseEncoder) -> dict:
    """Serializable form. Tensors appear in ``named_parameters`` order:
    token_embedding, position_embedding, blocks.{i}.*, head.weight, head.bias."""
    params = {}
    for name, p in model.named_parameters():
        t = p.detach()
        params[name] = {"shape": list(t.shape), "data": t.reshape(-1).tolist()}
    return {
        "format_version": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "vocab": list(model.vocab.tokens),
        "lowercase": model.vocab.lowercase,
        "params": params,
    }


def save_checkpoint(model: SiameseEncoder, path) -> None:
    _atomic_write_text(Path(path), json.dumps(checkpoint_dict(model)) + "\n")


def model_from_dict(data: dict) -> SiameseEncoder:
    if data.get("format_version") != CHECKPOINT_FORMAT:
        raise DataError(f"unsupported checkpoint format {data.get('format_version')!r}")
    try:
        config = EncoderConfig(**data["config"])
        vocab = Vocabulary(list(data["vocab"]), lowercase=data.get("lowercase", True))
        model = SiameseEncoder(config, vocab)
        own = dict(model.named_parameters())
        if set(own) != set(data["params"]):
            raise DataError("checkpoint tensors do not match the configured architecture")
        with torch.no_grad():
            for name, p in own.items():
                entry = data["params"][name]
                if list(entry["shape"]) != list(p.shape):
                    raise DataError(f"tensor {name}: shape {entry['shape']} != {list(p.shape)}")
                t = torch.tensor(entry["data"], dtype=DTYPE).reshape(p.shape)
                if not torch.isfinite(t).all():
                    raise DataError(f"tensor {name} has non-finite entries")
                p.copy_(t)
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed checkpoint: {exc}") from exc
    return model


def load_checkpoint(path) -> SiameseEncoder:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    return model_from_dict(data)

