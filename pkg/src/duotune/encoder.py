"""A small BERT-layout text encoder with HuggingFace-style parameter names.

The parameter tree is a plain ordered dict of numpy arrays keyed by names
like `encoder.layer.3.output.dense.weight`, so freezing specs and layer
diagnostics can address the exact entries they talk about. Forward passes
run through the autodiff tape in `tensor.py`; evaluation passes just never
call backward.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, asdict
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from . import tensor as T

PAD_ID = 0
UNK_ID = 1
ATTENTION_MASK_BIAS = -1e9

ParamTree = Dict[str, np.ndarray]


class EncoderError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 512
    hidden: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    intermediate: int = 256
    max_positions: int = 64
    n_token_types: int = 2

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise EncoderError("hidden must be divisible by n_heads")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def param_shapes(config: EncoderConfig) -> Dict[str, tuple]:
    """Name -> shape, in stable iteration order."""
    h, inter = config.hidden, config.intermediate
    shapes: Dict[str, tuple] = {
        "embeddings.word_embeddings.weight": (config.vocab_size, h),
        "embeddings.position_embeddings.weight": (config.max_positions, h),
        "embeddings.token_type_embeddings.weight": (config.n_token_types, h),
        "embeddings.LayerNorm.weight": (h,),
        "embeddings.LayerNorm.bias": (h,),
    }
    for i in range(config.n_blocks):
        p = f"encoder.layer.{i}."
        for proj in ("query", "key", "value"):
            shapes[p + f"attention.self.{proj}.weight"] = (h, h)
            shapes[p + f"attention.self.{proj}.bias"] = (h,)
        shapes[p + "attention.output.dense.weight"] = (h, h)
        shapes[p + "attention.output.dense.bias"] = (h,)
        shapes[p + "attention.output.LayerNorm.weight"] = (h,)
        shapes[p + "attention.output.LayerNorm.bias"] = (h,)
        shapes[p + "intermediate.dense.weight"] = (inter, h)
        shapes[p + "intermediate.dense.bias"] = (inter,)
        shapes[p + "output.dense.weight"] = (h, inter)
        shapes[p + "output.dense.bias"] = (h,)
        shapes[p + "output.LayerNorm.weight"] = (h,)
        shapes[p + "output.LayerNorm.bias"] = (h,)
    return shapes


def init_params(config: EncoderConfig, rng: T.Rng, dtype=np.float32) -> ParamTree:
    """Truncated-normal weights (sigma 0.02), zero biases, identity LayerNorm."""
    tree: ParamTree = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("LayerNorm.weight"):
            tree[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            tree[name] = np.zeros(shape, dtype=dtype)
        else:
            tree[name] = rng.truncated_normal(shape, sigma=0.02, dtype=dtype)
    return tree


def copy_tree(tree: ParamTree) -> ParamTree:
    return {k: v.copy() for k, v in tree.items()}


def trees_equal(a: ParamTree, b: ParamTree) -> bool:
    return set(a) == set(b) and all(np.array_equal(a[k], b[k]) for k in a)


def _linear(x: T.Tensor, w: T.Tensor, b: T.Tensor) -> T.Tensor:
    # HF convention: weight is (out, in), y = x @ w.T + b
    wt = T.transpose(w, (1, 0))
    return T.add(T.matmul(x, wt), b)


def encode_batch(params: Dict[str, T.Tensor], token_ids: np.ndarray,
                 config: EncoderConfig) -> T.Tensor:
    """Encode a (B, L) batch of token ids into unit-norm (B, hidden) embeddings.

    `params` holds tape leaves (see `wrap_params`). Pad positions (id 0) are
    masked out of attention keys and excluded from mean pooling.
    """
    ids = np.asarray(token_ids)
    if ids.ndim != 2:
        raise EncoderError("token_ids must be (batch, length)")
    B, L = ids.shape
    if L > config.max_positions:
        raise EncoderError(f"sequence length {L} exceeds max_positions {config.max_positions}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise EncoderError("token id out of vocabulary range")
    mask = (ids != PAD_ID)
    if not mask.any(axis=1).all():
        raise EncoderError("a sequence with no non-pad tokens cannot be encoded")

    some = next(iter(params.values()))
    dtype = some.dtype
    tape = some.tape

    x = T.embedding(params["embeddings.word_embeddings.weight"], ids)
    pos = T.embedding(params["embeddings.position_embeddings.weight"],
                      np.broadcast_to(np.arange(L), (B, L)))
    typ = T.embedding(params["embeddings.token_type_embeddings.weight"],
                      np.zeros((B, L), dtype=np.int64))
    x = T.add(T.add(x, pos), typ)
    x = T.layer_norm(x, params["embeddings.LayerNorm.weight"], params["embeddings.LayerNorm.bias"])

    bias_np = np.where(mask, 0.0, ATTENTION_MASK_BIAS).astype(dtype)
    att_bias = T.Tensor(bias_np[:, None, None, :], tape, requires_grad=False)

    h, nh, dh = config.hidden, config.n_heads, config.head_dim
    inv_sqrt_dh = 1.0 / np.sqrt(dh)

    for i in range(config.n_blocks):
        p = f"encoder.layer.{i}."

        def heads(t: T.Tensor) -> T.Tensor:
            t = T.reshape(t, (B, L, nh, dh))
            return T.transpose(t, (0, 2, 1, 3))

        q = heads(_linear(x, params[p + "attention.self.query.weight"],
                          params[p + "attention.self.query.bias"]))
        k = heads(_linear(x, params[p + "attention.self.key.weight"],
                          params[p + "attention.self.key.bias"]))
        v = heads(_linear(x, params[p + "attention.self.value.weight"],
                          params[p + "attention.self.value.bias"]))

        scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), inv_sqrt_dh)
        scores = T.add(scores, att_bias)
        ctx = T.matmul(T.softmax(scores), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, h))

        att_out = _linear(ctx, params[p + "attention.output.dense.weight"],
                          params[p + "attention.output.dense.bias"])
        x = T.layer_norm(T.add(x, att_out),
                         params[p + "attention.output.LayerNorm.weight"],
                         params[p + "attention.output.LayerNorm.bias"])

        inter = T.gelu(_linear(x, params[p + "intermediate.dense.weight"],
                               params[p + "intermediate.dense.bias"]))
        out = _linear(inter, params[p + "output.dense.weight"],
                      params[p + "output.dense.bias"])
        x = T.layer_norm(T.add(x, out),
                         params[p + "output.LayerNorm.weight"],
                         params[p + "output.LayerNorm.bias"])

    # mean over non-pad positions, then L2 normalize
    fmask = T.Tensor(mask[:, :, None].astype(dtype), tape, requires_grad=False)
    inv_counts = (1.0 / mask.sum(axis=1, keepdims=True)).astype(dtype)
    pooled = T.tsum(T.mul(x, fmask), axis=1)
    pooled = T.mul(pooled, T.Tensor(inv_counts, tape, requires_grad=False))
    return T.l2_normalize(pooled)


def wrap_params(tape: T.Tape, tree: ParamTree,
                trainable: Optional[Iterable[str]] = None,
                prefix: str = "") -> Dict[str, T.Tensor]:
    """Wrap raw arrays into tape leaves; only `trainable` names get gradients."""
    train = set(trainable) if trainable is not None else set()
    return {name: tape.leaf(arr, param=(prefix + name) in train or name in train)
            for name, arr in tree.items()}


def encode(params: ParamTree, tokens: Sequence[int], config: EncoderConfig) -> np.ndarray:
    """Evaluation-mode encode of a single token sequence; returns (hidden,)."""
    tape = T.Tape()
    leaves = wrap_params(tape, params)
    out = encode_batch(leaves, np.asarray(tokens)[None, :], config)
    return out.data[0]


def encode_many(params: ParamTree, token_lists: Sequence[Sequence[int]],
                config: EncoderConfig, batch_size: int = 256) -> np.ndarray:
    """Evaluation-mode batched encode with right-padding; returns (N, hidden)."""
    if not token_lists:
        return np.zeros((0, config.hidden), dtype=np.float32)
    out = []
    for start in range(0, len(token_lists), batch_size):
        chunk = token_lists[start:start + batch_size]
        L = max(len(t) for t in chunk)
        ids = np.full((len(chunk), L), PAD_ID, dtype=np.int64)
        for r, toks in enumerate(chunk):
            ids[r, :len(toks)] = toks
        tape = T.Tape()
        leaves = wrap_params(tape, params)
        out.append(encode_batch(leaves, ids, config).data)
    return np.concatenate(out, axis=0)


def similarity(a: np.ndarray, b: np.ndarray, measure: str) -> float:
    """Greater = more similar for both measures (euclidean is negated distance)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for v in (a, b):
        if abs(np.linalg.norm(v) - 1.0) > 1e-4:
            raise EncoderError("similarity expects unit-norm embeddings")
    if measure == "cosine":
        return float(a @ b)
    if measure == "euclidean":
        return -float(np.linalg.norm(a - b))
    raise EncoderError(f"unknown measure {measure!r}")


def similarity_matrix(A: np.ndarray, B: np.ndarray, measure: str) -> np.ndarray:
    """Pairwise similarities for unit-norm rows; (len(A), len(B))."""
    dots = A.astype(np.float64) @ B.astype(np.float64).T
    if measure == "cosine":
        return dots
    if measure == "euclidean":
        return -np.sqrt(np.maximum(2.0 - 2.0 * dots, 0.0))
    raise EncoderError(f"unknown measure {measure!r}")


class Vocab:
    """Whitespace tokenizer over a fixed vocabulary with pad/unk slots."""

    PAD_TOKEN = "<pad>"
    UNK_TOKEN = "<unk>"

    def __init__(self, tokens: Sequence[str]):
        self.tokens = [self.PAD_TOKEN, self.UNK_TOKEN] + [
            t for t in tokens if t not in (self.PAD_TOKEN, self.UNK_TOKEN)]
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str, max_len: Optional[int] = None) -> list[int]:
        ids = [self.index.get(tok, UNK_ID) for tok in text.split()]
        if max_len is not None:
            ids = ids[:max_len]
        if not ids:
            raise EncoderError("cannot tokenize empty text")
        return ids

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self.tokens[2:]:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])


@dataclass
class DualEncoder:
    """Query/text twin: identical name sets, optionally divergent values."""

    config: EncoderConfig
    query_params: ParamTree
    text_params: ParamTree
    mode: str = "query-only"  # or "both-tuned"

    @classmethod
    def twin_init(cls, config: EncoderConfig, rng: T.Rng, mode: str = "query-only") -> "DualEncoder":
        base = init_params(config, rng)
        return cls(config, copy_tree(base), copy_tree(base), mode)

    def copy(self) -> "DualEncoder":
        return DualEncoder(self.config, copy_tree(self.query_params),
                           copy_tree(self.text_params), self.mode)


# --- checkpoint container ------------------------------------------------
#
# Line-oriented text format, byte-stable across runs:
#   line 1: JSON header (sorted keys) with format tag, config, dtype, mode
#   then one line per tensor: "<section>.<name>\t<shape json>\t<base64 raw LE bytes>"

CHECKPOINT_FORMAT = "duotune-dual-encoder"
CHECKPOINT_VERSION = 1


def _tensor_line(name: str, arr: np.ndarray) -> str:
    raw = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return "\t".join([name, json.dumps(list(arr.shape)), base64.b64encode(raw).decode("ascii")])


def save_dual(model: DualEncoder, path) -> None:
    dtype = next(iter(model.query_params.values())).dtype
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "dtype": dtype.name,
        "mode": model.mode,
        "config": model.config.to_dict(),
    }
    lines = [json.dumps(header, sort_keys=True)]
    for section, tree in (("query", model.query_params), ("text", model.text_params)):
        for name, arr in tree.items():
            lines.append(_tensor_line(f"{section}.{name}", arr))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dual(path) -> DualEncoder:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    header = json.loads(lines[0])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise EncoderError(f"{path}: not a dual-encoder checkpoint")
    dtype = np.dtype(header["dtype"])
    config = EncoderConfig.from_dict(header["config"])
    trees: dict[str, ParamTree] = {"query": {}, "text": {}}
    for line in lines[1:]:
        name, shape_json, data64 = line.split("\t")
        section, pname = name.split(".", 1)
        arr = np.frombuffer(base64.b64decode(data64), dtype=dtype.newbyteorder("<"))
        trees[section][pname] = arr.astype(dtype).reshape(json.loads(shape_json))
    model = DualEncoder(config, trees["query"], trees["text"], header["mode"])
    expected = set(param_shapes(config))
    if set(model.query_params) != expected or set(model.text_params) != expected:
        raise EncoderError(f"{path}: checkpoint names do not match its config")
    return model
