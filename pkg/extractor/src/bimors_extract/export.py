"""Feature, weight, and reference-activation export.

``export_features`` runs the frozen image encoder (penultimate-layer patch
tokens plus the projected global embedding), the captioner (greedy
decoding), and the caption embedder (input-embedding table lookups) over an
image corpus, then serializes records, manifest, class token ids, and the
prompt-template token ids. ``export_text_encoder`` maps the text tower's
parameters into the weight container (linear weights transposed to
right-multiply layout) next to an encoder-config file and a reference
container holding ten prompts' token ids and embeddings for parity checks.
"""

from __future__ import annotations

import logging
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import backbones, formats, images

log = logging.getLogger("bimors_extract")

TEMPLATE_TEXT = "a photo of a"
REFERENCE_WORDS = [
    "airport", "beach", "bridge", "forest", "harbor",
    "island", "meadow", "river", "runway", "stadium",
]


@dataclass
class ExtractionConfig:
    dataset_root: str
    out_dir: str
    dataset_name: str = "extracted"
    image_encoder: str = "tiny-vision"
    captioner: str = "tiny-captioner"
    caption_embedder: str = "tiny-bert"
    text_encoder: str = "tiny-text"
    caption_source: str = "bert"  # bert | contrastive (alternate export)
    caption_max_length: int = 10
    batch_size: int = 8
    device: str = "cpu"
    seed: int = 0
    shared_class_names: list[str] = field(default_factory=list)

    expected_d_vis: int | None = None
    expected_d_clip: int | None = None
    expected_d_cap: int | None = None


def _check_dim(name: str, got: int, expected: int | None) -> None:
    if expected is not None and got != expected:
        raise ValueError(f"{name} dimension {got} does not match declared {expected}")


class Extractor:
    """Holds the frozen backbones for one extraction run."""

    def __init__(self, config: ExtractionConfig):
        self.config = config
        self._tmp = tempfile.TemporaryDirectory(prefix="bimors_extract_")
        tmp_dir = Path(self._tmp.name)
        self.text = backbones.build_text_backbone(config.text_encoder, config.seed, config.device)
        self.vision = backbones.build_image_encoder(
            config.image_encoder, config.seed, self.text.embed_out_dim, config.device
        )
        self.captioner, self.caption_tokenizer = backbones.build_captioner(
            config.captioner, config.seed, tmp_dir, config.device
        )
        if config.caption_source == "contrastive":
            self.embedder = backbones.contrastive_caption_embedder(self.text)
        else:
            self.embedder = backbones.build_caption_embedder(
                config.caption_embedder, config.seed, d_cap=48, tmp_dir=tmp_dir
            )
        self.image_size = int(self.vision.config.image_size)

    # ------------------------------------------------------------------
    # features

    def caption(self, pixel_values: torch.Tensor) -> str:
        with torch.no_grad():
            ids = self.captioner.generate(
                pixel_values=pixel_values,
                max_length=self.config.caption_max_length,
                num_beams=1,
                do_sample=False,
            )
        return self.caption_tokenizer.decode(ids[0], skip_special_tokens=True).strip()

    def encode_image(self, pixel_values: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
        with torch.no_grad():
            out = self.vision(pixel_values=pixel_values, output_hidden_states=True)
        # penultimate layer, patch tokens only (position 0 is the class token)
        grid = out.hidden_states[-2][0, 1:].cpu().numpy().astype(np.float32)
        embed = out.image_embeds[0].cpu().numpy().astype(np.float32)
        return grid, embed

    def export_features(self) -> Path:
        config = self.config
        triples = images.iter_corpus(config.dataset_root)
        class_names = sorted({name for name, _, _ in triples})
        tokenizer = self.text.tokenizer
        class_token_ids = [tokenizer.encode_words(name) for name in class_names]
        template_ids = tokenizer.encode_words(TEMPLATE_TEXT)

        records: list[formats.RecordOut] = []
        d_vis = d_clip = d_cap = None
        for class_name, class_id, path in triples:
            try:
                pixels = images.load_pixels(path, self.image_size)
            except OSError as exc:
                log.warning("skipping unreadable image %s: %s", path, exc)
                continue
            pixel_values = torch.from_numpy(pixels[None]).to(config.device)
            grid, embed = self.encode_image(pixel_values)
            caption = self.caption(pixel_values)
            caption_embeds = self.embedder.embed(caption).astype(np.float32)
            if d_vis is None:
                d_vis, d_clip, d_cap = grid.shape[1], embed.shape[0], caption_embeds.shape[1]
                _check_dim("d_vis", d_vis, config.expected_d_vis)
                _check_dim("d_clip", d_clip, config.expected_d_clip)
                _check_dim("d_cap", d_cap, config.expected_d_cap)
            elif (grid.shape[1], embed.shape[0], caption_embeds.shape[1]) != (d_vis, d_clip, d_cap):
                raise ValueError(f"inconsistent feature dims at {path}")
            records.append(
                formats.RecordOut(
                    image_id=f"{class_name}/{path.name}",
                    class_id=class_id,
                    visual_tokens=grid,
                    global_embed=embed,
                    caption_text=caption,
                    caption_token_embeds=caption_embeds,
                )
            )
        if not records:
            raise FileNotFoundError(f"no readable images under {config.dataset_root}")
        manifest = formats.ManifestOut(
            dataset_name=config.dataset_name,
            class_names=class_names,
            d_vis=d_vis,
            d_clip=d_clip,
            d_cap=d_cap,
            context_length=self.text.context_length,
            class_token_ids=class_token_ids,
            template_token_ids=template_ids,
            shared_class_names=config.shared_class_names,
        )
        out = formats.write_dataset(manifest, records, config.out_dir)
        log.info("wrote %d records to %s", len(records), out)
        return out

    # ------------------------------------------------------------------
    # text encoder weights + references

    def text_tensor_map(self) -> dict[str, np.ndarray]:
        """Container names -> arrays; linear weights transposed to x @ W."""
        state = {k: v.detach().cpu() for k, v in self.text.model.named_parameters()}
        out: dict[str, np.ndarray] = {}

        def put(name: str, tensor: torch.Tensor, transpose: bool = False):
            arr = tensor.numpy().astype(np.float32)
            out[name] = arr.T.copy() if transpose else arr.copy()

        put("token_embedding", state["text_model.embeddings.token_embedding.weight"])
        put("positional_embedding", state["text_model.embeddings.position_embedding.weight"])
        for i in range(self.text.layers):
            hf = f"text_model.encoder.layers.{i}."
            mine = f"layers.{i}."
            put(mine + "ln_1.gain", state[hf + "layer_norm1.weight"])
            put(mine + "ln_1.bias", state[hf + "layer_norm1.bias"])
            for proj in ("q", "k", "v", "out"):
                put(mine + f"attn.{proj}_w", state[hf + f"self_attn.{proj}_proj.weight"], transpose=True)
                put(mine + f"attn.{proj}_b", state[hf + f"self_attn.{proj}_proj.bias"])
            put(mine + "ln_2.gain", state[hf + "layer_norm2.weight"])
            put(mine + "ln_2.bias", state[hf + "layer_norm2.bias"])
            put(mine + "mlp.fc_w", state[hf + "mlp.fc1.weight"], transpose=True)
            put(mine + "mlp.fc_b", state[hf + "mlp.fc1.bias"])
            put(mine + "mlp.proj_w", state[hf + "mlp.fc2.weight"], transpose=True)
            put(mine + "mlp.proj_b", state[hf + "mlp.fc2.bias"])
        put("ln_final.gain", state["text_model.final_layer_norm.weight"])
        put("ln_final.bias", state["text_model.final_layer_norm.bias"])
        put("text_projection", state["text_projection.weight"], transpose=True)

        mapped = len(out)
        total = len(state)
        if mapped != total:
            missing = set(state) - set()
            raise ValueError(
                f"architecture mismatch: mapped {mapped} tensors but the "
                f"backbone holds {total} ({sorted(missing)[:3]}...)"
            )
        return out

    def reference_prompt_ids(self, word: str) -> list[int]:
        return self.text.tokenizer.encode_words(f"{TEMPLATE_TEXT} {word}")

    def embed_prompt(self, middle_ids: list[int]) -> np.ndarray:
        """Full-sequence forward: start + ids + end, padded with end tokens."""
        tok = self.text.tokenizer
        ids = [tok.sot_id, *middle_ids, tok.eot_id]
        ids += [tok.eot_id] * (self.text.context_length - len(ids))
        with torch.no_grad():
            out = self.text.model(input_ids=torch.tensor([ids], dtype=torch.long))
        return out.text_embeds[0].cpu().numpy().astype(np.float32)

    def export_text_encoder(self) -> tuple[Path, Path, Path]:
        out_dir = Path(self.config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        tensors = self.text_tensor_map()
        weights_path = formats.write_weights(out_dir / "text_encoder.bmtw", tensors)
        reread = formats.read_weights(weights_path)
        for name, arr in tensors.items():
            if not np.array_equal(reread[name], arr):
                raise ValueError(f"round-trip mismatch for {name}")

        config_path = out_dir / "text_encoder.kv"
        config_path.write_text(
            formats.encoder_config_text(
                self.text.tokenizer.vocab_size, self.text.context_length,
                self.text.width, self.text.heads, self.text.layers,
                self.text.embed_out_dim,
            ),
            encoding="utf-8",
        )

        reference: dict[str, np.ndarray] = {}
        for i, word in enumerate(REFERENCE_WORDS):
            ids = self.reference_prompt_ids(word)
            embed = self.embed_prompt(ids)
            reference[f"reference.{i}.token_ids"] = np.asarray(ids, dtype=np.float32)
            reference[f"reference.{i}.embedding"] = embed
            reference[f"reference.{i}.norm"] = np.asarray(
                [float(np.linalg.norm(embed))], dtype=np.float32
            )
        reference_path = formats.write_weights(out_dir / "reference.bmtw", reference)
        log.info("wrote %s, %s, %s", weights_path, config_path, reference_path)
        return weights_path, config_path, reference_path


def run_export(config: ExtractionConfig, features: bool = True, text_encoder: bool = True):
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    extractor = Extractor(config)
    results = {}
    if text_encoder:
        results["text_encoder"] = extractor.export_text_encoder()
    if features:
        results["features"] = extractor.export_features()
    return results
