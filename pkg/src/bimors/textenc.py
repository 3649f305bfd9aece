"""Frozen causal transformer text encoder and the named-tensor container.

The encoder is the standard contrastive-pretrained family: learned token +
position embeddings, pre-layernorm blocks (multi-head causal self-attention,
then a 4x-width quick-gelu MLP), a final layernorm, and a linear projection
of the end-token row. Weights are frozen; gradients flow through them into
whatever differentiable rows were injected into the prompt.

Container format ("BMTW"): magic, u32 version=1, u32 tensor count, then per
tensor u32 name length + UTF-8 name, u32 rank, u32 dims[], f32-LE data.
Head checkpoints reuse the same container with "head."-prefixed names.

Tokenization happens at export time; this module only consumes precomputed
token ids. Start/end token ids follow the backbone-family convention:
vocab_size-2 / vocab_size-1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tc
from .errors import FormatError, PromptLengthError, TruncationError, WeightsError
from .tensor import Tensor

MAGIC = b"BMTW"
VERSION = 1
LN_EPS = 1e-5


@dataclass
class TextEncoderConfig:
    vocab_size: int
    context_length: int = 77
    width: int = 512
    heads: int = 8
    layers: int = 12
    embed_out_dim: int = 512

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise WeightsError(f"width {self.width} not divisible by heads {self.heads}")

    @property
    def sot_id(self) -> int:
        return self.vocab_size - 2

    @property
    def eot_id(self) -> int:
        return self.vocab_size - 1

    @property
    def mlp_dim(self) -> int:
        return 4 * self.width


# ---------------------------------------------------------------------------
# named-tensor container


def write_tensor_container(path, tensors: dict[str, np.ndarray]) -> None:
    """Serialize name -> f32 array pairs in insertion order."""
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded)) + encoded
        out += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<I", dim)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def read_tensor_container(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise TruncationError(f"{path}: container shorter than its header")
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    at = 12
    tensors: dict[str, np.ndarray] = {}

    def need(nbytes: int, what: str):
        if at + nbytes > len(blob):
            raise TruncationError(f"{path}: container truncated reading {what}")

    for _ in range(count):
        need(4, "name length")
        (name_len,) = struct.unpack_from("<I", blob, at)
        at += 4
        need(name_len, "name")
        name = blob[at : at + name_len].decode("utf-8")
        at += name_len
        need(4, f"rank of {name}")
        (rank,) = struct.unpack_from("<I", blob, at)
        at += 4
        need(4 * rank, f"dims of {name}")
        dims = struct.unpack_from(f"<{rank}I", blob, at) if rank else ()
        at += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(4 * size, f"data of {name}")
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=at).reshape(dims).copy()
        at += 4 * size
        tensors[name] = arr
    return tensors


# ---------------------------------------------------------------------------
# weights


def expected_tensor_shapes(config: TextEncoderConfig) -> dict[str, tuple]:
    w, c = config.width, config.context_length
    shapes: dict[str, tuple] = {
        "token_embedding": (config.vocab_size, w),
        "positional_embedding": (c, w),
    }
    for i in range(config.layers):
        p = f"layers.{i}."
        shapes[p + "ln_1.gain"] = (w,)
        shapes[p + "ln_1.bias"] = (w,)
        for proj in ("q", "k", "v", "out"):
            shapes[p + f"attn.{proj}_w"] = (w, w)
            shapes[p + f"attn.{proj}_b"] = (w,)
        shapes[p + "ln_2.gain"] = (w,)
        shapes[p + "ln_2.bias"] = (w,)
        shapes[p + "mlp.fc_w"] = (w, config.mlp_dim)
        shapes[p + "mlp.fc_b"] = (config.mlp_dim,)
        shapes[p + "mlp.proj_w"] = (config.mlp_dim, w)
        shapes[p + "mlp.proj_b"] = (w,)
    shapes["ln_final.gain"] = (w,)
    shapes["ln_final.bias"] = (w,)
    shapes["text_projection"] = (w, config.embed_out_dim)
    return shapes


class TextEncoderWeights:
    """Frozen parameter set; every tensor has requires_grad False."""

    def __init__(self, tensors: dict[str, Tensor], config: TextEncoderConfig):
        self.tensors = tensors
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def token_embedding(self) -> Tensor:
        return self.tensors["token_embedding"]


def weights_from_arrays(arrays: dict[str, np.ndarray], config: TextEncoderConfig) -> TextEncoderWeights:
    """Validate names/shapes against the config and freeze the tensors."""
    expected = expected_tensor_shapes(config)
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing:
        raise WeightsError(f"missing tensor(s): {', '.join(missing[:4])}")
    if extra:
        raise WeightsError(f"unexpected tensor(s): {', '.join(extra[:4])}")
    tensors = {}
    for name, shape in expected.items():
        arr = arrays[name]
        if tuple(arr.shape) != shape:
            raise WeightsError(f"tensor {name} has shape {tuple(arr.shape)}, expected {shape}")
        tensors[name] = Tensor(arr)
    return TextEncoderWeights(tensors, config)


def load_weights(path, config: TextEncoderConfig) -> TextEncoderWeights:
    return weights_from_arrays(read_tensor_container(path), config)


def save_weights(weights: TextEncoderWeights, path) -> None:
    write_tensor_container(path, {k: v.data for k, v in weights.tensors.items()})


def random_weights(config: TextEncoderConfig, seed: int = 0, scale: float = 0.05) -> TextEncoderWeights:
    """Synthetic frozen weights for desk-scale tests; deterministic in seed."""
    rng = np.random.default_rng(seed)
    arrays = {
        name: (rng.standard_normal(shape) * scale).astype(np.float32)
        for name, shape in expected_tensor_shapes(config).items()
    }
    # identity layernorms keep activations in a sane range
    for name in list(arrays):
        if name.endswith(".gain"):
            arrays[name] = np.ones_like(arrays[name])
        elif name.endswith("ln_1.bias") or name.endswith("ln_2.bias") or name == "ln_final.bias":
            arrays[name] = np.zeros_like(arrays[name])
    return weights_from_arrays(arrays, config)


# ---------------------------------------------------------------------------
# prompt assembly and encoding


@dataclass
class AssembledPrompt:
    """Positioned embedding sequence [context_length, width] plus the
    index of the end token the encoder pools from."""

    embeddings: Tensor
    eos_index: int


def assemble_prompt(
    class_token_ids: list[int],
    context_vectors: Tensor | None,
    weights: TextEncoderWeights,
    config: TextEncoderConfig,
) -> AssembledPrompt:
    """Build <sot> [m context rows] [class tokens] <eot> <pad...> + positions.

    ``context_vectors`` ([m, width]) enter the graph as-is, so trainable
    rows stay trainable; pass None (or an empty tensor) for m = 0. Padding
    reuses the end-token embedding, the backbone family's convention.
    """
    m = 0 if context_vectors is None else int(context_vectors.shape[0])
    n_cls = len(class_token_ids)
    used = 1 + m + n_cls + 1
    if used > config.context_length:
        raise PromptLengthError(
            f"prompt needs {used} positions, context window is {config.context_length}"
        )
    for tok in class_token_ids:
        if not 0 <= int(tok) < config.vocab_size:
            raise IndexError(f"class token id {tok} out of vocabulary")
    table = weights.token_embedding
    pad = config.context_length - used
    prefix = tc.select_rows(table, [config.sot_id])
    suffix_ids = [int(t) for t in class_token_ids] + [config.eot_id] * (1 + pad)
    suffix = tc.select_rows(table, suffix_ids)
    if m:
        seq = tc.concat_rows([prefix, context_vectors, suffix])
    else:
        seq = tc.concat_rows([prefix, suffix])
    seq = tc.add(seq, weights["positional_embedding"])
    return AssembledPrompt(embeddings=seq, eos_index=1 + m + n_cls)


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    rows = int(x.shape[0])
    bias_row = tc.reshape(b, (1, int(b.shape[0])))
    return tc.add(tc.matmul(x, w), tc.broadcast_rows(bias_row, rows))


def _self_attention(x: Tensor, prefix: str, weights: TextEncoderWeights, config: TextEncoderConfig) -> Tensor:
    rows = int(x.shape[0])
    w, h = config.width, config.heads
    dh = w // h
    q = _linear(x, weights[prefix + "attn.q_w"], weights[prefix + "attn.q_b"])
    k = _linear(x, weights[prefix + "attn.k_w"], weights[prefix + "attn.k_b"])
    v = _linear(x, weights[prefix + "attn.v_w"], weights[prefix + "attn.v_b"])
    q = tc.scale(q, 1.0 / np.sqrt(dh))

    def heads_first(t: Tensor) -> Tensor:
        return tc.permute(tc.reshape(t, (rows, h, dh)), (1, 0, 2))

    qh, kh, vh = heads_first(q), heads_first(k), heads_first(v)
    scores = tc.matmul(qh, tc.permute(kh, (0, 2, 1)))
    mask = np.triu(np.full((rows, rows), -1e9, dtype=np.float32), k=1)
    scores = tc.add(scores, Tensor(np.broadcast_to(mask, (h, rows, rows)).copy()))
    att = tc.softmax_lastdim(scores)
    mixed = tc.matmul(att, vh)
    merged = tc.reshape(tc.permute(mixed, (1, 0, 2)), (rows, w))
    return _linear(merged, weights[prefix + "attn.out_w"], weights[prefix + "attn.out_b"])


def encode(prompt: AssembledPrompt, weights: TextEncoderWeights, config: TextEncoderConfig) -> Tensor:
    """Causal forward pass; returns the projected end-token embedding.

    Only rows 0..eos_index are computed: the causal mask makes later rows
    unable to influence the pooled output, so dropping them changes nothing.
    """
    rows = prompt.eos_index + 1
    x = tc.select_rows(prompt.embeddings, list(range(rows)))
    for i in range(config.layers):
        p = f"layers.{i}."
        normed = tc.layernorm(x, weights[p + "ln_1.gain"], weights[p + "ln_1.bias"], LN_EPS)
        x = tc.add(x, _self_attention(normed, p, weights, config))
        normed = tc.layernorm(x, weights[p + "ln_2.gain"], weights[p + "ln_2.bias"], LN_EPS)
        hidden = tc.gelu_quick(_linear(normed, weights[p + "mlp.fc_w"], weights[p + "mlp.fc_b"]))
        x = tc.add(x, _linear(hidden, weights[p + "mlp.proj_w"], weights[p + "mlp.proj_b"]))
    x = tc.layernorm(x, weights["ln_final.gain"], weights["ln_final.bias"], LN_EPS)
    pooled = tc.select_rows(x, [prompt.eos_index])
    projected = tc.matmul(pooled, weights["text_projection"])
    return tc.reshape(projected, (config.embed_out_dim,))
