"""Image-to-article catalog: the linkage that turns image retrieval into
article retrieval.

Canonical ingestion formats (UTF-8 JSON Lines):

    articles:  {"article_id": ..., "title": ..., "body": ...}
    mapping:   {"image_id": ..., "article_id": ...}

Each image maps to exactly one article; a dataset where an image appears
in several articles must be disambiguated by the converter before ingest,
and duplicates are rejected here so that choice is always explicit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Mapping

from fusecap.search import RankedList


class CatalogError(ValueError):
    """Malformed or inconsistent catalog data."""


@dataclass(frozen=True)
class Article:
    article_id: str
    title: str
    body: str


@dataclass(frozen=True)
class ArticleCatalog:
    articles: Mapping[str, Article]
    image_to_article: Mapping[str, str]

    def __post_init__(self) -> None:
        for image_id, article_id in self.image_to_article.items():
            if article_id not in self.articles:
                raise CatalogError(f"dangling article_id: {article_id} (image {image_id!r})")

    def article_for_image(self, image_id: str) -> Article:
        article_id = self.image_to_article.get(image_id)
        if article_id is None:
            raise CatalogError(f"image not in catalog: {image_id!r}")
        return self.articles[article_id]


def _read_jsonl(path: str | os.PathLike[str]):
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise CatalogError(f"{path}:{lineno}: invalid JSON: {exc}") from exc


def load_catalog(
    articles_path: str | os.PathLike[str],
    mapping_path: str | os.PathLike[str],
) -> ArticleCatalog:
    """Load and cross-check the two catalog files."""
    articles: dict[str, Article] = {}
    for lineno, obj in _read_jsonl(articles_path):
        try:
            article = Article(
                article_id=obj["article_id"],
                title=obj.get("title", ""),
                body=obj["body"],
            )
        except (KeyError, TypeError) as exc:
            raise CatalogError(f"{articles_path}:{lineno}: {exc}") from exc
        if article.article_id in articles:
            raise CatalogError(f"duplicate article_id: {article.article_id}")
        articles[article.article_id] = article

    mapping: dict[str, str] = {}
    for lineno, obj in _read_jsonl(mapping_path):
        try:
            image_id = obj["image_id"]
            article_id = obj["article_id"]
        except (KeyError, TypeError) as exc:
            raise CatalogError(f"{mapping_path}:{lineno}: {exc}") from exc
        if image_id in mapping:
            raise CatalogError(f"duplicate image_id: {image_id}")
        if article_id not in articles:
            raise CatalogError(f"dangling article_id: {article_id} (image {image_id!r})")
        mapping[image_id] = article_id

    return ArticleCatalog(articles=articles, image_to_article=mapping)


def resolve_context(ranked: RankedList, catalog: ArticleCatalog) -> tuple[str, str, str]:
    """Article of the rank-1 retrieved image: (article_id, body, image_id).

    Only the top entry matters; the rest of the list never changes the
    resolved context.
    """
    if not ranked.entries:
        raise CatalogError(f"query {ranked.query_id!r}: empty ranked list")
    image_id = ranked.entries[0].doc_id
    article_id = catalog.image_to_article.get(image_id)
    if article_id is None:
        raise CatalogError(f"rank-1 image unmapped: {image_id!r}")
    return article_id, catalog.articles[article_id].body, image_id
