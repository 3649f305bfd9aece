"""The trainable prompt-generation head.

Two projection heads pool and map the caption token embeddings and the
visual token grid into a shared d-dimensional space; their two rows form
the bi-modal context. Learnable query tokens attend over that context
through multi-head cross-attention (residual), followed by a residual
LayerNorm-ReLU-Linear feedforward. The result is the per-image context
injected into the text prompt.

Ablation modes restrict the context the queries see: ``full`` uses both
rows, ``visual_only``/``text_only`` a single row, and ``no_ca`` skips the
attention block entirely (queries plus the broadcast visual row).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from . import textenc
from .errors import ShapeError, WeightsError
from .featio import FeatureRecord
from .rng import Rng
from .tensor import Tensor

MODES = ("full", "visual_only", "text_only", "no_ca")
LN_EPS = 1e-5


@dataclass
class PromptHeadConfig:
    d_vis: int = 768
    d_cap: int = 768
    d: int = 512
    heads: int = 4
    m: int = 4

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ShapeError(f"d={self.d} not divisible by heads={self.heads}")


# checkpoint tensor names, in serialization order
_FIELDS = (
    "w_pv", "b_pv", "w_pt", "b_pt",
    "w_q", "w_k", "w_v", "w_o",
    "ffn_norm_gain", "ffn_norm_bias", "w_ffn", "b_ffn",
    "query_tokens",
)


class PromptHead:
    """All trainable tensors plus the dimension config."""

    def __init__(self, config: PromptHeadConfig, tensors: dict[str, Tensor]):
        self.config = config
        for name in _FIELDS:
            setattr(self, name, tensors[name])

    def named_tensors(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in _FIELDS}

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.named_tensors().items() if t.requires_grad]


def expected_head_shapes(config: PromptHeadConfig) -> dict[str, tuple]:
    d, dv, dc, m = config.d, config.d_vis, config.d_cap, config.m
    return {
        "w_pv": (dv, d), "b_pv": (d,), "w_pt": (dc, d), "b_pt": (d,),
        "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
        "ffn_norm_gain": (d,), "ffn_norm_bias": (d,), "w_ffn": (d, d), "b_ffn": (d,),
        "query_tokens": (m, d),
    }


def _uniform(rng: Rng, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    flat = np.array([rng.uniform() for _ in range(int(np.prod(shape)))], dtype=np.float32)
    return ((flat * 2.0 - 1.0) * bound).reshape(shape).astype(np.float32)


def init_head(config: PromptHeadConfig, seed: int, query_init: np.ndarray | None = None) -> PromptHead:
    """Deterministic head init: 1/sqrt(fan_in)-scaled uniforms, identity
    feedforward layernorm, query tokens from ``query_init`` when given."""
    d, dv, dc, m = config.d, config.d_vis, config.d_cap, config.m
    rng = Rng(seed, stream=101)
    arrays = {
        "w_pv": _uniform(rng, (dv, d), dv),
        "b_pv": _uniform(rng, (d,), dv),
        "w_pt": _uniform(rng, (dc, d), dc),
        "b_pt": _uniform(rng, (d,), dc),
        "w_q": _uniform(rng, (d, d), d),
        "w_k": _uniform(rng, (d, d), d),
        "w_v": _uniform(rng, (d, d), d),
        "w_o": _uniform(rng, (d, d), d),
        "ffn_norm_gain": np.ones(d, dtype=np.float32),
        "ffn_norm_bias": np.zeros(d, dtype=np.float32),
        "w_ffn": _uniform(rng, (d, d), d),
        "b_ffn": _uniform(rng, (d,), d),
    }
    if query_init is None:
        arrays["query_tokens"] = _uniform(rng, (m, d), d)
    else:
        query_init = np.asarray(query_init, dtype=np.float32)
        if query_init.shape != (m, d):
            raise ShapeError(f"query_init shape {query_init.shape}, expected {(m, d)}")
        arrays["query_tokens"] = query_init.copy()
    tensors = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return PromptHead(config, tensors)


def init_query_tokens(weights: textenc.TextEncoderWeights, template_token_ids: list[int]) -> Tensor:
    """Trainable [m, d] tensor copying embedding-table rows of the template ids."""
    table = weights.token_embedding.data
    for tok in template_token_ids:
        if not 0 <= int(tok) < table.shape[0]:
            raise IndexError(f"template token id {tok} out of vocabulary")
    rows = table[np.asarray(template_token_ids, dtype=np.int64)].copy()
    return Tensor(rows, requires_grad=True)


def project_visual(visual_tokens: Tensor, head: PromptHead) -> Tensor:
    """Mean over the token grid, then the visual linear map -> [1, d]."""
    if int(visual_tokens.shape[1]) != head.config.d_vis:
        raise ShapeError(
            f"visual tokens width {visual_tokens.shape[1]} vs head d_vis {head.config.d_vis}"
        )
    pooled = tc.mean_rows(visual_tokens)
    bias = tc.reshape(head.b_pv, (1, head.config.d))
    return tc.add(tc.matmul(pooled, head.w_pv), bias)


def project_caption(caption_token_embeds: Tensor, head: PromptHead) -> Tensor:
    """Mean over caption token rows, then the text linear map -> [1, d]."""
    if int(caption_token_embeds.shape[1]) != head.config.d_cap:
        raise ShapeError(
            f"caption embeds width {caption_token_embeds.shape[1]} vs head d_cap {head.config.d_cap}"
        )
    pooled = tc.mean_rows(caption_token_embeds)
    bias = tc.reshape(head.b_pt, (1, head.config.d))
    return tc.add(tc.matmul(pooled, head.w_pt), bias)


def cross_attend(queries: Tensor, bimodal: Tensor, head: PromptHead) -> Tensor:
    """Multi-head attention of queries over the bi-modal rows, residual,
    then the residual LayerNorm-ReLU-Linear feedforward."""
    cfg = head.config
    m = int(queries.shape[0])
    n = int(bimodal.shape[0])
    h, d = cfg.heads, cfg.d
    dh = d // h

    def heads_first(t: Tensor, rows: int) -> Tensor:
        return tc.permute(tc.reshape(t, (rows, h, dh)), (1, 0, 2))

    q = heads_first(tc.scale(tc.matmul(queries, head.w_q), 1.0 / np.sqrt(dh)), m)
    k = heads_first(tc.matmul(bimodal, head.w_k), n)
    v = heads_first(tc.matmul(bimodal, head.w_v), n)
    att = tc.softmax_lastdim(tc.matmul(q, tc.permute(k, (0, 2, 1))))
    mixed = tc.reshape(tc.permute(tc.matmul(att, v), (1, 0, 2)), (m, d))
    x = tc.add(tc.matmul(mixed, head.w_o), queries)
    normed = tc.layernorm(x, head.ffn_norm_gain, head.ffn_norm_bias, LN_EPS)
    y = tc.matmul(tc.relu(normed), head.w_ffn)
    y = tc.add(y, tc.broadcast_rows(tc.reshape(head.b_ffn, (1, d)), m))
    return tc.add(x, y)


def attention_weights(queries: Tensor, bimodal: Tensor, head: PromptHead) -> np.ndarray:
    """Forward-only [heads, m, n] attention map (diagnostics and tests)."""
    cfg = head.config
    m, n = int(queries.shape[0]), int(bimodal.shape[0])
    dh = cfg.d // cfg.heads

    def heads_first(t: Tensor, rows: int) -> Tensor:
        return tc.permute(tc.reshape(t, (rows, cfg.heads, dh)), (1, 0, 2))

    q = heads_first(tc.scale(tc.matmul(queries, head.w_q), 1.0 / np.sqrt(dh)), m)
    k = heads_first(tc.matmul(bimodal, head.w_k), n)
    return tc.softmax_lastdim(tc.matmul(q, tc.permute(k, (0, 2, 1)))).data


def generate_context(record: FeatureRecord, head: PromptHead, mode: str = "full") -> Tensor:
    """Per-image context vectors [m, d] under the given ablation mode."""
    if mode not in MODES:
        raise ShapeError(f"unknown mode {mode!r}, expected one of {MODES}")
    queries = head.query_tokens
    if mode == "no_ca":
        v = project_visual(Tensor(record.visual_tokens), head)
        return tc.add(queries, tc.broadcast_rows(v, head.config.m))
    if mode == "visual_only":
        bimodal = project_visual(Tensor(record.visual_tokens), head)
    elif mode == "text_only":
        bimodal = project_caption(Tensor(record.caption_token_embeds), head)
    else:
        a = project_caption(Tensor(record.caption_token_embeds), head)
        v = project_visual(Tensor(record.visual_tokens), head)
        bimodal = tc.concat_rows([a, v])
    return cross_attend(queries, bimodal, head)


def parameter_count(head: PromptHead) -> int:
    """Exact count of trainable scalars."""
    return sum(t.size for _, t in head.trainable())


def gradient_active_fields(mode: str) -> set[str]:
    """Head tensors that can receive gradients under each ablation mode."""
    if mode == "no_ca":
        return {"w_pv", "b_pv", "query_tokens"}
    common = {"w_q", "w_k", "w_v", "w_o", "ffn_norm_gain", "ffn_norm_bias",
              "w_ffn", "b_ffn", "query_tokens"}
    if mode == "visual_only":
        return common | {"w_pv", "b_pv"}
    if mode == "text_only":
        return common | {"w_pt", "b_pt"}
    return common | {"w_pv", "b_pv", "w_pt", "b_pt"}


# ---------------------------------------------------------------------------
# checkpoints (same container format as the encoder, names prefixed "head.")


def save_head(head: PromptHead, path) -> None:
    arrays = {f"head.{name}": t.data for name, t in head.named_tensors().items()}
    arrays["head.meta"] = np.array([head.config.heads], dtype=np.float32)
    textenc.write_tensor_container(path, arrays)


def load_head(path) -> PromptHead:
    arrays = textenc.read_tensor_container(path)
    expected = {f"head.{name}" for name in _FIELDS} | {"head.meta"}
    missing = sorted(expected - set(arrays))
    extra = sorted(set(arrays) - expected)
    if missing:
        raise WeightsError(f"head checkpoint missing tensor(s): {', '.join(missing[:4])}")
    if extra:
        raise WeightsError(f"head checkpoint has unexpected tensor(s): {', '.join(extra[:4])}")
    d_vis, d = arrays["head.w_pv"].shape
    d_cap = arrays["head.w_pt"].shape[0]
    m = arrays["head.query_tokens"].shape[0]
    config = PromptHeadConfig(
        d_vis=int(d_vis), d_cap=int(d_cap), d=int(d),
        heads=int(arrays["head.meta"][0]), m=int(m),
    )
    shapes = expected_head_shapes(config)
    for name in _FIELDS:
        got = tuple(arrays[f"head.{name}"].shape)
        if got != shapes[name]:
            raise WeightsError(f"head.{name} has shape {got}, expected {shapes[name]}")
    tensors = {name: Tensor(arrays[f"head.{name}"], requires_grad=True) for name in _FIELDS}
    return PromptHead(config, tensors)
