"""Encoder registry: pretrained vision/text models plus a toy paired encoder.

Real encoders run through `transformers` (imported lazily so the toy
path works without torch installed). The toy pair embeds images by color
statistics and captions by color words into the same 8-dim space; it
exists for offline smoke tests of the caption/image scoring plumbing.

Default checkpoints are pinned here and recorded in the manifest emitted
next to every embedding file, so a result can always be traced back to
the exact encoder and preprocessing that produced it.
"""

from __future__ import annotations

import hashlib
import json
import re

import numpy as np
from PIL import Image

DEFAULT_CHECKPOINTS = {
    "clip": "openai/clip-vit-base-patch32",
    "siglip": "google/siglip-base-patch16-224",
    "dinov2": "facebook/dinov2-base",
    "text": "openai/clip-vit-base-patch32",
}

IMAGE_FAMILIES = ("clip", "siglip", "dinov2", "toy-image")
TEXT_FAMILIES = ("text", "toy-text")
SUPPORTED_FAMILIES = IMAGE_FAMILIES + TEXT_FAMILIES


class EncoderError(RuntimeError):
    pass


def preprocessing_fingerprint(desc: dict) -> str:
    return hashlib.sha256(
        json.dumps(desc, sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()


# ---------------------------------------------------------------------------
# toy paired encoders (numpy + Pillow only)

_LUMA = np.array([0.299, 0.587, 0.114])

# word -> direction in the shared space:
# [mean R, mean G, mean B, std R, std G, std B, luminance, x-variation]
_TOY_WORDS = {
    "red": [1, 0, 0, 0, 0, 0, 0.299, 0],
    "green": [0, 1, 0, 0, 0, 0, 0.587, 0],
    "blue": [0, 0, 1, 0, 0, 0, 0.114, 0],
    "yellow": [1, 1, 0, 0, 0, 0, 0.886, 0],
    "white": [1, 1, 1, 0, 0, 0, 1.0, 0],
    "gray": [0.5, 0.5, 0.5, 0, 0, 0, 0.5, 0],
    "grey": [0.5, 0.5, 0.5, 0, 0, 0, 0.5, 0],
    "bright": [0, 0, 0, 0, 0, 0, 1.0, 0],
    "striped": [0, 0, 0, 0.5, 0.5, 0.5, 0, 1.0],
    "textured": [0, 0, 0, 0.5, 0.5, 0.5, 0, 0.7],
    "colorful": [0, 0, 0, 1, 1, 1, 0, 0.2],
}
TOY_DIM = 8


class ToyImageEncoder:
    """Color-statistics image features; the image half of the toy pair."""

    family = "toy-image"
    checkpoint = "builtin-toy-v1"
    preprocess_desc = {"kind": "toy-image", "version": 1, "dim": TOY_DIM}

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        out = np.zeros((len(images), TOY_DIM), dtype=np.float64)
        for i, image in enumerate(images):
            rgb = np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0
            luma = rgb @ _LUMA
            out[i, 0:3] = rgb.mean(axis=(0, 1))
            out[i, 3:6] = rgb.std(axis=(0, 1))
            out[i, 6] = luma.mean()
            if luma.shape[1] > 1:
                out[i, 7] = np.abs(np.diff(luma, axis=1)).mean()
        return out.astype(np.float32)


class ToyTextEncoder:
    """Bag of color/structure words; the text half of the toy pair."""

    family = "toy-text"
    checkpoint = "builtin-toy-v1"
    preprocess_desc = {"kind": "toy-text", "version": 1, "dim": TOY_DIM}

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), TOY_DIM), dtype=np.float64)
        for i, text in enumerate(texts):
            for word in re.findall(r"[a-z]+", text.lower()):
                vec = _TOY_WORDS.get(word)
                if vec is not None:
                    out[i] += vec
        return out.astype(np.float32)


# ---------------------------------------------------------------------------
# transformers-backed encoders


def _features_to_array(features) -> np.ndarray:
    # transformers >= 5 returns a ModelOutput whose pooler_output holds the
    # projected features; older versions return the tensor directly
    if hasattr(features, "pooler_output"):
        features = features.pooler_output
    return features.detach().cpu().numpy().astype(np.float32)


class TransformersImageEncoder:
    """Shared preprocess->forward->pool path for the vision families."""

    def __init__(self, family, model, processor, forward, checkpoint, device="cpu"):
        import torch

        self.family = family
        self.model = model.eval().to(device)
        self.processor = processor
        self.forward = forward
        self.checkpoint = checkpoint
        self.device = device
        self.preprocess_desc = _processor_desc(processor)
        self._torch = torch

    def encode_images(self, images: list[Image.Image]) -> np.ndarray:
        batch = self.processor(images=images, return_tensors="pt").to(self.device)
        with self._torch.no_grad():
            return _features_to_array(self.forward(self.model, batch))


class TransformersTextEncoder:
    def __init__(self, family, model, tokenizer, forward, checkpoint, device="cpu"):
        import torch

        self.family = family
        self.model = model.eval().to(device)
        self.tokenizer = tokenizer
        self.forward = forward
        self.checkpoint = checkpoint
        self.device = device
        self.preprocess_desc = {"tokenizer": type(tokenizer).__name__, "checkpoint": checkpoint}
        self._torch = torch

    def encode_texts(self, texts: list[str]) -> np.ndarray:
        batch = self.tokenizer(
            texts, padding=True, truncation=True, return_tensors="pt"
        ).to(self.device)
        with self._torch.no_grad():
            return _features_to_array(self.forward(self.model, batch))


def _processor_desc(processor) -> dict:
    if hasattr(processor, "to_dict"):
        return processor.to_dict()
    return {"processor": type(processor).__name__}


def clip_image_forward(model, batch):
    return model.get_image_features(pixel_values=batch["pixel_values"])


def siglip_image_forward(model, batch):
    return model.get_image_features(pixel_values=batch["pixel_values"])


def dinov2_class_token_forward(model, batch):
    # global image feature = the class token of the last layer
    return model(pixel_values=batch["pixel_values"]).last_hidden_state[:, 0]


def siglip_vision_pooled_forward(model, batch):
    return model(pixel_values=batch["pixel_values"]).pooler_output


def clip_text_forward(model, batch):
    return model.get_text_features(
        input_ids=batch["input_ids"], attention_mask=batch.get("attention_mask")
    )


def load_encoder(family: str, checkpoint: str | None = None, device: str = "cpu"):
    """Build an encoder for one model family.

    Toy families need nothing beyond numpy/Pillow; the rest download (or
    read from the local cache) their pinned checkpoint via transformers.
    """
    if family == "toy-image":
        return ToyImageEncoder()
    if family == "toy-text":
        return ToyTextEncoder()
    if family not in DEFAULT_CHECKPOINTS:
        raise EncoderError(f"unknown model family: {family!r}")
    checkpoint = checkpoint or DEFAULT_CHECKPOINTS[family]
    try:
        import transformers
    except ImportError as exc:  # pragma: no cover - env without the extra
        raise EncoderError(
            f"model family {family!r} needs the [models] extra (torch + transformers)"
        ) from exc

    try:
        if family == "clip":
            model = transformers.CLIPModel.from_pretrained(checkpoint)
            processor = transformers.CLIPImageProcessor.from_pretrained(checkpoint)
            return TransformersImageEncoder(
                family, model, processor, clip_image_forward, checkpoint, device
            )
        if family == "siglip":
            model = transformers.SiglipModel.from_pretrained(checkpoint)
            processor = transformers.SiglipImageProcessor.from_pretrained(checkpoint)
            return TransformersImageEncoder(
                family, model, processor, siglip_image_forward, checkpoint, device
            )
        if family == "dinov2":
            model = transformers.Dinov2Model.from_pretrained(checkpoint)
            processor = transformers.AutoImageProcessor.from_pretrained(checkpoint)
            return TransformersImageEncoder(
                family, model, processor, dinov2_class_token_forward, checkpoint, device
            )
        if family == "text":
            model = transformers.CLIPModel.from_pretrained(checkpoint)
            tokenizer = transformers.AutoTokenizer.from_pretrained(checkpoint)
            return TransformersTextEncoder(
                family, model, tokenizer, clip_text_forward, checkpoint, device
            )
    except OSError as exc:
        raise EncoderError(f"checkpoint {checkpoint!r} unavailable: {exc}") from exc
    raise EncoderError(f"unknown model family: {family!r}")
