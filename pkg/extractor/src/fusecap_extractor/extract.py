"""Batch extraction jobs: images or texts in, one embedding file out.

Ids are file stems (or record ids) and always come out lexicographically
sorted, matching the engine's tie-break order. Inputs that cannot be
embedded are skipped with a warning and recorded in the sidecar manifest
rather than failing the whole job; producing nothing at all is an error.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from fusecap_extractor.binfmt import write_embedding_file
from fusecap_extractor.encoders import (
    IMAGE_FAMILIES,
    SUPPORTED_FAMILIES,
    TEXT_FAMILIES,
    load_encoder,
    preprocessing_fingerprint,
)

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".webp", ".bmp", ".gif"}


class ExtractionError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExtractorJob:
    model_name: str
    input_path: str
    output_path: str
    batch_size: int = 16
    device: str = "cpu"
    normalize: bool = False
    checkpoint: str | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ExtractionError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.model_name not in SUPPORTED_FAMILIES:
            raise ExtractionError(
                f"model {self.model_name!r} not in supported set {SUPPORTED_FAMILIES}"
            )


@dataclass(frozen=True)
class ExtractResult:
    output_path: str
    manifest_path: str
    count: int
    dim: int
    skipped: tuple[dict, ...] = field(default_factory=tuple)


def _write_manifest(job: ExtractorJob, encoder, count, dim, skipped) -> str:
    manifest_path = f"{job.output_path}.manifest.json"
    manifest = {
        "model_name": job.model_name,
        "checkpoint": encoder.checkpoint,
        "preprocessing_sha256": preprocessing_fingerprint(encoder.preprocess_desc),
        "normalize": job.normalize,
        "count": count,
        "dim": dim,
        "skipped": list(skipped),
    }
    tmp = f"{manifest_path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, manifest_path)
    return manifest_path


def _finalize(job: ExtractorJob, encoder, ids, rows, skipped) -> ExtractResult:
    if job.normalize and ids:
        norms = np.linalg.norm(rows.astype(np.float64), axis=1)
        zero = norms == 0.0
        if zero.any():
            for idx in np.where(zero)[0]:
                log.warning("skipping %s: zero-norm embedding cannot be normalized", ids[idx])
                skipped.append({"id": ids[idx], "reason": "zero-norm embedding"})
            keep = ~zero
            ids = [doc_id for doc_id, k in zip(ids, keep) if k]
            rows, norms = rows[keep], norms[keep]
        rows = (rows.astype(np.float64) / norms[:, None]).astype(np.float32)
    if not ids:
        raise ExtractionError("no inputs could be embedded")
    write_embedding_file(
        job.output_path, job.model_name, ids, rows, normalized=job.normalize
    )
    manifest_path = _write_manifest(job, encoder, len(ids), rows.shape[1], skipped)
    return ExtractResult(
        output_path=job.output_path,
        manifest_path=manifest_path,
        count=len(ids),
        dim=int(rows.shape[1]),
        skipped=tuple(skipped),
    )


def _encode_batched(encode, items, batch_size) -> np.ndarray:
    chunks = [
        encode(items[start : start + batch_size])
        for start in range(0, len(items), batch_size)
    ]
    return np.concatenate(chunks, axis=0)


def extract_images(job: ExtractorJob, encoder=None) -> ExtractResult:
    """Embed every decodable image in the input directory, sorted by stem."""
    if job.model_name not in IMAGE_FAMILIES:
        raise ExtractionError(f"{job.model_name!r} is not an image model")
    encoder = encoder or load_encoder(job.model_name, job.checkpoint, job.device)
    if not os.path.isdir(job.input_path):
        raise ExtractionError(f"input is not a directory: {job.input_path}")
    by_stem: dict[str, str] = {}
    for name in sorted(os.listdir(job.input_path)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in IMAGE_EXTENSIONS:
            continue
        if stem in by_stem:
            raise ExtractionError(f"duplicate image id {stem!r} ({name} vs existing)")
        by_stem[stem] = os.path.join(job.input_path, name)

    ids: list[str] = []
    images: list[Image.Image] = []
    skipped: list[dict] = []
    for stem in sorted(by_stem):
        try:
            with Image.open(by_stem[stem]) as img:
                images.append(img.convert("RGB"))
            ids.append(stem)
        except Exception as exc:  # undecodable image: skip, do not abort
            log.warning("skipping %s: %s", stem, exc)
            skipped.append({"id": stem, "reason": f"{type(exc).__name__}: {exc}"})
    if not ids:
        raise ExtractionError("no inputs could be embedded")
    rows = _encode_batched(encoder.encode_images, images, job.batch_size)
    return _finalize(job, encoder, ids, rows, skipped)


def extract_texts(job: ExtractorJob, encoder=None) -> ExtractResult:
    """Embed (id, text) JSONL records, sorted by id; blank texts are skipped."""
    if job.model_name not in TEXT_FAMILIES:
        raise ExtractionError(f"{job.model_name!r} is not a text model")
    encoder = encoder or load_encoder(job.model_name, job.checkpoint, job.device)
    records: dict[str, str] = {}
    with open(job.input_path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                record_id, text = obj["id"], obj["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ExtractionError(f"{job.input_path}:{lineno}: {exc}") from exc
            if record_id in records:
                raise ExtractionError(f"duplicate text id {record_id!r}")
            records[record_id] = text

    ids: list[str] = []
    texts: list[str] = []
    skipped: list[dict] = []
    for record_id in sorted(records):
        if not records[record_id].strip():
            log.warning("skipping %s: empty text", record_id)
            skipped.append({"id": record_id, "reason": "empty text"})
            continue
        ids.append(record_id)
        texts.append(records[record_id])
    if not ids:
        raise ExtractionError("no inputs could be embedded")
    rows = _encode_batched(encoder.encode_texts, texts, job.batch_size)
    return _finalize(job, encoder, ids, rows, skipped)


def run_job(job: ExtractorJob, encoder=None) -> ExtractResult:
    if job.model_name in TEXT_FAMILIES:
        return extract_texts(job, encoder)
    return extract_images(job, encoder)
