"""Prompt-guided caption generation through an external multimodal LLM.

The engineered prompt is a versioned immutable asset shipped with the
package; its SHA-256 is pinned so any drift in the prompt text is caught
by tests rather than silently changing the method. Requests carry the
triplet (query image, retrieved article, prompt). The endpoint speaks a
chat-completion style HTTP JSON API with one image attachment and one
text part, so any compatible multimodal server can be plugged in; a
deterministic stub client stands in for it during tests and fixtures.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib.resources import files as resource_files
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import requests

from fusecap.catalog import ArticleCatalog, resolve_context
from fusecap.search import RankedList

PROMPT_ASSET = "caption_prompt_v1.txt"
PROMPT_SHA256 = "ad4f8c4448b917ae818984ec81e1085205b7fb652890b516139e750c21b79b42"
DEFAULT_ARTICLE_BUDGET = 20000

# Everything the prompt must still contain to count as intact.
_REQUIRED_PROMPT_MARKERS = (
    "1. Contextualize the Image through the Article First:",
    "2. Describe the Image in Service of the Article's Narrative:",
    "3. Clearly Articulate the Significance and Connection:",
    "4. Professional and Informative Style:",
    "Do not include any introductory phrases",
)

_PREAMBLE_PATTERNS = ("here is the caption:", "the caption is:", "caption:")
_QUOTE_PAIRS = (('"', '"'), ("'", "'"), ("“", "”"), ("‘", "’"))


class PromptAssetError(ValueError):
    """The stored prompt asset is missing, altered, or incomplete."""


class TransportError(RuntimeError):
    """The endpoint could not be reached or kept failing after retries."""

    def __init__(self, message: str, status: int | None = None, retries: int = 0):
        super().__init__(message)
        self.status = status
        self.retries = retries


class ProtocolError(RuntimeError):
    """The endpoint answered with a body this client cannot interpret."""


class EmptyCaptionError(ValueError):
    """Post-processing stripped the caption down to nothing."""


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    text: str
    version: int

    def __post_init__(self) -> None:
        missing = [m for m in _REQUIRED_PROMPT_MARKERS if m not in self.text]
        if missing:
            raise PromptAssetError(f"prompt template missing sections: {missing}")

    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


def load_prompt_template(path: str | os.PathLike[str] | None = None) -> PromptTemplate:
    """Load the packaged prompt asset (or an explicit override file).

    The packaged asset must hash to the pinned digest; overrides are
    exempt so alternative prompts can be experimented with deliberately.
    """
    if path is None:
        text = resource_files("fusecap").joinpath("assets", PROMPT_ASSET).read_text("utf-8")
        template = PromptTemplate(template_id=PROMPT_ASSET, text=text, version=1)
        if template.sha256() != PROMPT_SHA256:
            raise PromptAssetError(
                f"prompt asset digest mismatch: expected {PROMPT_SHA256}, "
                f"got {template.sha256()}"
            )
        return template
    with open(path, "r", encoding="utf-8") as fh:
        return PromptTemplate(template_id=os.path.basename(os.fspath(path)), text=fh.read(), version=1)


@dataclass(frozen=True)
class DecodingParams:
    """Greedy by default: evaluation favors reproducible captions."""

    max_tokens: int = 512
    temperature: float = 0.0
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.max_tokens < 32:
            raise ValueError(f"max_tokens must be >= 32, got {self.max_tokens}")


@dataclass(frozen=True)
class GenerationRequest:
    query_id: str
    image_ref: str
    article_text: str
    prompt: PromptTemplate
    decoding: DecodingParams
    truncated: bool = False

    def message_text(self) -> str:
        """The single text part: engineered prompt, then the article."""
        return f"{self.prompt.text}\n\nARTICLE:\n{self.article_text}"

    def serialized(self) -> bytes:
        """Canonical byte form; identical inputs serialize identically."""
        obj = {
            "query_id": self.query_id,
            "image_ref": self.image_ref,
            "text": self.message_text(),
            "truncated": self.truncated,
            "max_tokens": self.decoding.max_tokens,
            "temperature": self.decoding.temperature,
            "seed": self.decoding.seed,
        }
        return json.dumps(obj, sort_keys=True, ensure_ascii=False).encode("utf-8")


def _truncate_on_whitespace(article: str, budget: int) -> str:
    cut = article[:budget]
    for i in range(len(cut) - 1, -1, -1):
        if cut[i].isspace():
            return cut[:i].rstrip()
    return cut  # no whitespace inside the budget; hard cut


def build_request(
    query_id: str,
    image_ref: str,
    article_text: str,
    template: PromptTemplate,
    decoding: DecodingParams | None = None,
    article_budget: int = DEFAULT_ARTICLE_BUDGET,
) -> GenerationRequest:
    """Assemble the (image, article, prompt) triplet.

    The article is embedded verbatim up to ``article_budget`` characters;
    longer articles are cut at a whitespace boundary and the request is
    flagged as truncated.
    """
    if not article_text.strip():
        raise ValueError(f"query {query_id!r}: empty article")
    if article_budget < 1:
        raise ValueError(f"article_budget must be >= 1, got {article_budget}")
    truncated = False
    if len(article_text) > article_budget:
        article_text = _truncate_on_whitespace(article_text, article_budget)
        truncated = True
    return GenerationRequest(
        query_id=query_id,
        image_ref=image_ref,
        article_text=article_text,
        prompt=template,
        decoding=decoding or DecodingParams(),
        truncated=truncated,
    )


@dataclass(frozen=True)
class LlmEndpointConfig:
    """Where and how to call the captioning endpoint.

    ``kind`` is "http" for a real chat-completion server or "stub" for
    the built-in deterministic test double. The auth token is read from
    the environment variable named by ``auth_env`` and attached as a
    Bearer header when present.
    """

    kind: str = "http"
    base_url: str = ""
    model_name: str = ""
    auth_env: str = "FUSECAP_API_TOKEN"
    timeout: float = 60.0
    max_retries: int = 3
    max_concurrent: int = 4
    retry_base_delay: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("http", "stub"):
            raise ValueError(f"unknown endpoint kind: {self.kind!r}")
        if self.timeout <= 0:
            raise ValueError(f"timeout must be > 0, got {self.timeout}")
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.max_concurrent < 1:
            raise ValueError(f"max_concurrent must be >= 1, got {self.max_concurrent}")
        if self.kind == "http" and not self.base_url:
            raise ValueError("http endpoint requires base_url")

    @classmethod
    def from_json_obj(cls, obj: Mapping) -> "LlmEndpointConfig":
        known = {
            "kind", "base_url", "model_name", "auth_env", "timeout",
            "max_retries", "max_concurrent", "retry_base_delay",
        }
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown endpoint config fields: {sorted(unknown)}")
        return cls(**{k: obj[k] for k in obj})

    def auth_token(self) -> str:
        return os.environ.get(self.auth_env, "")


def load_endpoint_config(path: str | os.PathLike[str]) -> LlmEndpointConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return LlmEndpointConfig.from_json_obj(json.load(fh))


@dataclass(frozen=True)
class LlmResponse:
    text: str
    retries: int = 0


class LlmClient(Protocol):
    def generate(self, request: GenerationRequest) -> LlmResponse: ...


_MIME_BY_SUFFIX = {
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
    ".png": "image/png",
    ".gif": "image/gif",
    ".webp": "image/webp",
}


def _image_part(image_ref: str) -> dict:
    """URL refs pass through; local files are inlined as data URLs."""
    if image_ref.startswith(("http://", "https://", "data:")):
        url = image_ref
    elif os.path.exists(image_ref):
        suffix = os.path.splitext(image_ref)[1].lower()
        mime = _MIME_BY_SUFFIX.get(suffix, "application/octet-stream")
        with open(image_ref, "rb") as fh:
            payload = base64.b64encode(fh.read()).decode("ascii")
        url = f"data:{mime};base64,{payload}"
    else:
        raise ValueError(f"image_ref is neither a URL nor an existing file: {image_ref!r}")
    return {"type": "image_url", "image_url": {"url": url}}


class HttpLlmClient:
    """Chat-completion HTTP client with retry on transient failures.

    Retries network errors, 5xx, and 429 with exponential backoff; all
    other 4xx are permanent and fail immediately.
    """

    def __init__(self, config: LlmEndpointConfig, session: requests.Session | None = None):
        self.config = config
        self.session = session or requests.Session()

    def _url(self) -> str:
        return self.config.base_url.rstrip("/") + "/v1/chat/completions"

    def _body(self, request: GenerationRequest) -> dict:
        body = {
            "model": self.config.model_name,
            "messages": [
                {
                    "role": "user",
                    "content": [
                        _image_part(request.image_ref),
                        {"type": "text", "text": request.message_text()},
                    ],
                }
            ],
            "max_tokens": request.decoding.max_tokens,
            "temperature": request.decoding.temperature,
        }
        if request.decoding.seed is not None:
            body["seed"] = request.decoding.seed
        return body

    def generate(self, request: GenerationRequest) -> LlmResponse:
        headers = {"Content-Type": "application/json"}
        token = self.config.auth_token()
        if token:
            headers["Authorization"] = f"Bearer {token}"
        body = self._body(request)
        attempts = self.config.max_retries + 1
        last_status: int | None = None
        last_error = "no attempt made"
        for attempt in range(attempts):
            if attempt:
                time.sleep(self.config.retry_base_delay * 2 ** (attempt - 1))
            try:
                resp = self.session.post(
                    self._url(), json=body, headers=headers, timeout=self.config.timeout
                )
            except requests.RequestException as exc:
                last_status, last_error = None, f"network error: {exc}"
                continue
            if resp.status_code == 200:
                return LlmResponse(text=_extract_text(resp), retries=attempt)
            last_status = resp.status_code
            last_error = f"HTTP {resp.status_code}"
            if resp.status_code != 429 and 400 <= resp.status_code < 500:
                raise TransportError(
                    f"endpoint rejected request: {last_error}",
                    status=last_status, retries=attempt,
                )
        raise TransportError(
            f"retries exhausted after {attempts} attempts: {last_error}",
            status=last_status, retries=attempts - 1,
        )


def _extract_text(resp) -> str:
    try:
        payload = resp.json()
    except ValueError as exc:
        raise ProtocolError(f"response body is not JSON: {exc}") from exc
    try:
        text = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise ProtocolError(f"response body missing completion text: {exc}") from exc
    if not isinstance(text, str):
        raise ProtocolError(f"completion text has type {type(text).__name__}")
    return text


def _default_stub_caption(request: GenerationRequest) -> str:
    lead = " ".join(request.article_text.split()[:12])
    return f"Here is the caption: {lead} (image {request.query_id})."


class StubLlmClient:
    """Deterministic offline endpoint double.

    Emits a caption derived only from the request (prefixed with a
    preamble on purpose, so post-processing is exercised end to end).
    """

    def __init__(self, caption_fn: Callable[[GenerationRequest], str] | None = None):
        self.caption_fn = caption_fn or _default_stub_caption

    def generate(self, request: GenerationRequest) -> LlmResponse:
        return LlmResponse(text=self.caption_fn(request), retries=0)


def make_client(config: LlmEndpointConfig, session: requests.Session | None = None) -> LlmClient:
    if config.kind == "stub":
        return StubLlmClient()
    return HttpLlmClient(config, session=session)


def generate_caption(
    request: GenerationRequest,
    endpoint: LlmEndpointConfig,
    session: requests.Session | None = None,
) -> str:
    """One-shot convenience wrapper around the configured client."""
    return make_client(endpoint, session=session).generate(request).text


def postprocess(raw: str) -> str:
    """Normalize a raw completion into a bare caption.

    Collapses newlines to spaces, then repeatedly strips whitespace,
    unwraps a fully quoted caption, and removes leading preamble phrases
    until a fixed point, which makes the whole transform idempotent.
    """
    text = _collapse_newlines(raw)
    prev: str | None = None
    while text != prev:
        prev = text
        text = text.strip()
        if len(text) >= 2:
            for open_q, close_q in _QUOTE_PAIRS:
                if text.startswith(open_q) and text.endswith(close_q):
                    text = text[1:-1]
                    break
        lowered = text.lower()
        for pattern in _PREAMBLE_PATTERNS:
            if lowered.startswith(pattern):
                text = text[len(pattern):]
                break
    if not text:
        raise EmptyCaptionError("caption empty after stripping")
    return text


def _collapse_newlines(text: str) -> str:
    # Any whitespace run containing a newline becomes a single space.
    return re.sub(r"\s*[\r\n]\s*", " ", text)


@dataclass(frozen=True)
class CaptionOutput:
    query_id: str
    caption: str
    article_id: str
    retrieved_image_id: str
    truncated: bool

    def to_json_obj(self) -> dict:
        return {
            "query_id": self.query_id,
            "caption": self.caption,
            "article_id": self.article_id,
            "retrieved_image_id": self.retrieved_image_id,
            "truncated": self.truncated,
        }


@dataclass(frozen=True)
class CaptionFailure:
    query_id: str
    error: str

    def to_json_obj(self) -> dict:
        return {"query_id": self.query_id, "error": self.error}


def run_caption_stage(
    queries: Sequence[tuple[str, str]],
    run: Iterable[RankedList],
    catalog: ArticleCatalog,
    template: PromptTemplate,
    client: LlmClient,
    decoding: DecodingParams | None = None,
    article_budget: int = DEFAULT_ARTICLE_BUDGET,
    max_concurrent: int = 1,
) -> tuple[list[CaptionOutput], list[CaptionFailure]]:
    """Caption every query: resolve article, build request, call, post-process.

    Per-query failures are recorded and never abort the batch. Outputs
    and failures each preserve the input query order, whatever order the
    concurrent endpoint calls complete in.
    """
    lists_by_query: dict[str, RankedList] = {}
    for ranked in run:
        lists_by_query[ranked.query_id] = ranked
    decoding = decoding or DecodingParams()

    def one(item: tuple[str, str]) -> CaptionOutput | CaptionFailure:
        query_id, image_ref = item
        try:
            ranked = lists_by_query.get(query_id)
            if ranked is None:
                raise ValueError("no ranked list for query")
            article_id, article_text, image_id = resolve_context(ranked, catalog)
            request = build_request(
                query_id, image_ref, article_text, template,
                decoding=decoding, article_budget=article_budget,
            )
            raw = client.generate(request).text
            caption = postprocess(raw)
            return CaptionOutput(
                query_id=query_id,
                caption=caption,
                article_id=article_id,
                retrieved_image_id=image_id,
                truncated=request.truncated,
            )
        except Exception as exc:  # noqa: BLE001 - failures are data here
            return CaptionFailure(query_id=query_id, error=f"{type(exc).__name__}: {exc}")

    if max_concurrent <= 1 or len(queries) <= 1:
        results = [one(item) for item in queries]
    else:
        with ThreadPoolExecutor(max_workers=max_concurrent) as pool:
            results = list(pool.map(one, queries))

    outputs = [r for r in results if isinstance(r, CaptionOutput)]
    failures = [r for r in results if isinstance(r, CaptionFailure)]
    return outputs, failures
