"""Frozen backbone construction.

Identifiers starting with "tiny" build a coherent synthetic family offline:
a word-level contrastive tokenizer whose vocabulary is shared with the
captioner's WordPiece vocab, a small vision tower, a small captioner, and a
small text encoder, all deterministically initialized from the config seed.
Any other identifier is passed to ``from_pretrained`` (usable when the real
checkpoints are available locally).

The contrastive tokenizer places the start/end tokens at vocab_size-2 and
vocab_size-1, matching the backbone-family convention the consumer assumes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import torch

# words shared by every synthetic vocabulary: template + class names + filler
WORLD_WORDS = [
    "unk", "a", "photo", "of", "the", "scene", "aerial", "view", "with",
    "airport", "beach", "bridge", "farmland", "forest", "harbor", "island",
    "meadow", "mountain", "parking", "river", "runway", "stadium", "storage",
    "urban", "water", "field", "dense", "sparse", "large", "small", "many",
    "lined", "open", "land", "area", "surface", "terrain", "pattern", "cover",
    "site",
]


def normalize_words(text: str) -> list[str]:
    return [w for w in re.split(r"[^a-z0-9]+", text.lower()) if w]


class WordTokenizer:
    """Word-level stand-in for the contrastive backbone's BPE tokenizer."""

    def __init__(self, words: list[str]):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        self.vocab_size = len(self.words) + 2  # + start, end

    @property
    def sot_id(self) -> int:
        return self.vocab_size - 2

    @property
    def eot_id(self) -> int:
        return self.vocab_size - 1

    def encode_words(self, text: str) -> list[int]:
        unk = self.index["unk"]
        return [self.index.get(w, unk) for w in normalize_words(text)]


@dataclass
class TextBackbone:
    model: "torch.nn.Module"
    tokenizer: WordTokenizer
    context_length: int
    width: int
    heads: int
    layers: int
    embed_out_dim: int


@dataclass
class CaptionEmbedder:
    tokenizer: object  # BertTokenizerFast
    table: np.ndarray  # [vocab, d_cap] input-embedding lookups
    name: str

    def embed(self, caption: str) -> np.ndarray:
        ids = self.tokenizer(caption, add_special_tokens=True)["input_ids"]
        if not ids:
            ids = [self.tokenizer.unk_token_id]
        return self.table[np.asarray(ids, dtype=np.int64)]


def _bert_vocab_file(tmp_dir) -> str:
    path = tmp_dir / "vocab.txt"
    tokens = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", *WORLD_WORDS]
    path.write_text("\n".join(tokens) + "\n", encoding="utf-8")
    return str(path)


def _tiny_params(identifier: str, defaults: dict) -> dict:
    """Parse "tiny" or "tiny:key=value,..." overrides (layers, width, ...)."""
    params = dict(defaults)
    if ":" in identifier:
        for pair in identifier.split(":", 1)[1].split(","):
            key, value = pair.split("=", 1)
            if key not in params:
                raise ValueError(f"unknown tiny parameter {key!r}")
            params[key] = int(value)
    return params


def build_text_backbone(identifier: str, seed: int, device: str = "cpu") -> TextBackbone:
    from transformers import CLIPTextConfig, CLIPTextModelWithProjection

    if not identifier.startswith("tiny"):
        raise NotImplementedError(
            "pretrained contrastive checkpoints need their tokenizer merge "
            f"tables fetched; this environment builds the synthetic family only (got {identifier!r})"
        )
    tokenizer = WordTokenizer(WORLD_WORDS)
    params = _tiny_params(
        identifier, dict(width=32, heads=2, layers=2, context=24, out_dim=24)
    )
    width, heads, layers, context, out_dim = (
        params["width"], params["heads"], params["layers"],
        params["context"], params["out_dim"],
    )
    config = CLIPTextConfig(
        vocab_size=tokenizer.vocab_size,
        hidden_size=width,
        intermediate_size=4 * width,
        num_hidden_layers=layers,
        num_attention_heads=heads,
        max_position_embeddings=context,
        projection_dim=out_dim,
        bos_token_id=tokenizer.sot_id,
        eos_token_id=tokenizer.eot_id,
    )
    torch.manual_seed(seed)
    model = CLIPTextModelWithProjection(config).to(device).eval()
    return TextBackbone(
        model=model, tokenizer=tokenizer, context_length=context,
        width=width, heads=heads, layers=layers, embed_out_dim=out_dim,
    )


def build_image_encoder(identifier: str, seed: int, projection_dim: int, device: str = "cpu"):
    from transformers import CLIPVisionConfig, CLIPVisionModelWithProjection

    if not identifier.startswith("tiny"):
        return CLIPVisionModelWithProjection.from_pretrained(identifier).to(device).eval()
    config = CLIPVisionConfig(
        hidden_size=32,
        intermediate_size=128,
        num_hidden_layers=3,
        num_attention_heads=2,
        image_size=32,
        patch_size=8,
        projection_dim=projection_dim,
    )
    torch.manual_seed(seed + 1)
    return CLIPVisionModelWithProjection(config).to(device).eval()


def build_captioner(identifier: str, seed: int, tmp_dir, device: str = "cpu"):
    from transformers import BertTokenizerFast, BlipConfig, BlipForConditionalGeneration

    if not identifier.startswith("tiny"):
        model = BlipForConditionalGeneration.from_pretrained(identifier).to(device).eval()
        from transformers import AutoProcessor

        return model, AutoProcessor.from_pretrained(identifier)
    vocab_file = _bert_vocab_file(tmp_dir)
    tokenizer = BertTokenizerFast(vocab_file, do_lower_case=True)
    config = BlipConfig(
        text_config=dict(
            vocab_size=tokenizer.vocab_size, hidden_size=16, intermediate_size=32,
            num_hidden_layers=1, num_attention_heads=2, max_position_embeddings=32,
            bos_token_id=tokenizer.cls_token_id, eos_token_id=tokenizer.sep_token_id,
            pad_token_id=tokenizer.pad_token_id, sep_token_id=tokenizer.sep_token_id,
            encoder_hidden_size=16,
        ),
        vision_config=dict(
            hidden_size=16, intermediate_size=32, num_hidden_layers=1,
            num_attention_heads=2, image_size=32, patch_size=8,
        ),
    )
    torch.manual_seed(seed + 2)
    model = BlipForConditionalGeneration(config).to(device).eval()
    return model, tokenizer


def build_caption_embedder(identifier: str, seed: int, d_cap: int, tmp_dir) -> CaptionEmbedder:
    from transformers import BertTokenizerFast

    if not identifier.startswith("tiny"):
        from transformers import AutoModel, AutoTokenizer

        tokenizer = AutoTokenizer.from_pretrained(identifier)
        model = AutoModel.from_pretrained(identifier)
        table = model.get_input_embeddings().weight.detach().cpu().numpy().astype(np.float32)
        return CaptionEmbedder(tokenizer=tokenizer, table=table, name=identifier)
    vocab_file = _bert_vocab_file(tmp_dir)
    tokenizer = BertTokenizerFast(vocab_file, do_lower_case=True)
    rng = np.random.default_rng(seed + 3)
    table = rng.standard_normal((tokenizer.vocab_size, d_cap)).astype(np.float32)
    return CaptionEmbedder(tokenizer=tokenizer, table=table, name=identifier)


def contrastive_caption_embedder(text_backbone: TextBackbone) -> "ContrastiveEmbedder":
    """Alternate caption path: the contrastive backbone's own tokenizer and
    token-embedding table (d_cap becomes the text width)."""
    table = (
        text_backbone.model.text_model.embeddings.token_embedding.weight.detach()
        .cpu().numpy().astype(np.float32)
    )
    return ContrastiveEmbedder(text_backbone.tokenizer, table)


@dataclass
class ContrastiveEmbedder:
    tokenizer: WordTokenizer
    table: np.ndarray
    name: str = "contrastive-tokenizer"

    def embed(self, caption: str) -> np.ndarray:
        ids = self.tokenizer.encode_words(caption)
        if not ids:
            ids = [self.tokenizer.index["unk"]]
        return self.table[np.asarray(ids, dtype=np.int64)]
