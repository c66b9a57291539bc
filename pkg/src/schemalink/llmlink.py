"""Database-level linking and SQL generation through a chat-completions LLM."""

from __future__ import annotations

import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import httpx

from ._http import RemoteError, bearer_headers, post_json
from .catalog import SchemaCatalog, SchemaElementId, SchemaSet, serialize_schema, subset_catalog
from .data import Instance
from .sqlast import SqlParseError, parse_sql

log = logging.getLogger(__name__)


class LlmClientError(RuntimeError):
    def __init__(self, message: str, retryable: bool = False):
        super().__init__(message)
        self.retryable = retryable


class UnparseableResponseError(ValueError):
    pass


class LlmClient(Protocol):
    def complete(self, prompt: str) -> str: ...


@dataclass(frozen=True)
class LlmClientConfig:
    url: str = "http://localhost:8000/v1/chat/completions"
    model: str = "default"
    temperature: float = 0.0
    max_tokens: int = 512
    timeout: float = 60.0
    retries: int = 3
    backoff: float = 0.5
    token_env: str = "LLM_API_KEY"
    concurrency: int = 4

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")


class HttpLlmClient:
    """Chat-completions client; at most ``config.concurrency`` requests in flight."""

    def __init__(self, config: LlmClientConfig, client: httpx.Client | None = None, sleep=time.sleep):
        self.config = config
        self.client = client or httpx.Client()
        self._gate = threading.BoundedSemaphore(config.concurrency)
        self._sleep = sleep

    def complete(self, prompt: str) -> str:
        cfg = self.config
        payload = {
            "model": cfg.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        }
        with self._gate:
            try:
                body = post_json(
                    self.client, cfg.url, payload, headers=bearer_headers(cfg.token_env),
                    retries=cfg.retries, backoff=cfg.backoff, timeout=cfg.timeout, sleep=self._sleep,
                )
            except RemoteError as exc:
                raise LlmClientError(str(exc), retryable=exc.retryable) from exc
        try:
            content = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise LlmClientError(f"malformed completion from {cfg.url}") from exc
        if not isinstance(content, str):
            raise LlmClientError(f"completion content from {cfg.url} is not a string")
        return content


class MockLlmClient:
    """Scripted offline client.

    Script JSON may be a list of responses (by request ordinal), an object
    mapping ordinals ("0", "1", ...) to responses, or an object with
    ``"rules"``: ``[{"contains": str | [str], "responses": [...]}, ...]`` and
    an optional ``"default"``.  A rule matches when the prompt contains every
    listed string; its responses are consumed in order per distinct prompt,
    the last one repeating.  Rules are checked before ordinals.
    """

    def __init__(self, script: dict | list):
        if isinstance(script, list):
            script = {str(i): r for i, r in enumerate(script)}
        self.rules = [
            ([r["contains"]] if isinstance(r["contains"], str) else list(r["contains"]), list(r["responses"]))
            for r in script.get("rules", [])
        ]
        self.ordinals = {int(k): v for k, v in script.items() if k.isdigit()}
        self.default = script.get("default")
        self._lock = threading.Lock()
        self._count = 0
        self._seen: dict[tuple[int, str], int] = {}
        self.prompts: list[str] = []

    @classmethod
    def from_file(cls, path: str | Path) -> MockLlmClient:
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def complete(self, prompt: str) -> str:
        with self._lock:
            ordinal = self._count
            self._count += 1
            self.prompts.append(prompt)
            for i, (needles, responses) in enumerate(self.rules):
                if all(n in prompt for n in needles):
                    k = self._seen.get((i, prompt), 0)
                    self._seen[(i, prompt)] = k + 1
                    return responses[min(k, len(responses) - 1)]
        if ordinal in self.ordinals:
            return self.ordinals[ordinal]
        if self.default is not None:
            return self.default
        raise LlmClientError(f"mock script has no response for request {ordinal}")


# ----------------------------------------------------------------------------
# database-level linking

LINK_INSTRUCTION = (
    "You are given a SQLite database schema and a question. "
    "Select the tables and columns needed to write a SQL query that answers the question."
)
LINK_CONTRACT = (
    "Answer with one JSON object and nothing else. Each key is a table name and each value is "
    'the list of that table\'s column names you selected, e.g. {"table": ["col", ...], ...}.'
)


@dataclass(frozen=True)
class LinkInstruction:
    text: str


def build_link_instruction(catalog: SchemaCatalog, k: str, q: str) -> LinkInstruction:
    parts = [LINK_INSTRUCTION, "### Schema\n" + serialize_schema(catalog, "ddl")]
    if k.strip():
        parts.append("### Evidence\n" + k.strip())
    parts.append("### Question\n" + q.strip())
    parts.append("### Output\n" + LINK_CONTRACT)
    return LinkInstruction("\n\n".join(parts) + "\n")


_FENCE = re.compile(r"```[a-zA-Z]*\s*\n?(.*?)```", re.DOTALL)


def _first_json_object(text: str):
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


@dataclass(frozen=True)
class ParsedLink:
    schema: SchemaSet
    dropped: int


def parse_link_response(text: str, catalog: SchemaCatalog) -> ParsedLink:
    """Resolve the first JSON object (fenced blocks first) against ``catalog``.

    Unknown tables and columns are dropped and counted.
    """
    obj = None
    for block in _FENCE.findall(text):
        obj = _first_json_object(block)
        if obj is not None:
            break
    if obj is None:
        obj = _first_json_object(text)
    if obj is None:
        raise UnparseableResponseError("no JSON object in LLM response")

    tables = {t.name.lower(): t for t in catalog.tables}
    keep, dropped = [], 0
    for tname, cols in obj.items():
        table = tables.get(str(tname).strip().lower())
        if table is None:
            dropped += 1
            continue
        keep.append(SchemaElementId(table.name))
        if isinstance(cols, str):
            cols = [cols]
        if not isinstance(cols, list):
            continue
        for c in cols:
            c = str(c).strip()
            if c.lower().startswith(table.name.lower() + "."):
                c = c[len(table.name) + 1 :]
            if c == "*":
                continue
            if table.has_column(c):
                keep.append(SchemaElementId(table.name, table.column(c).name))
            else:
                dropped += 1
    if dropped:
        log.warning("dropped %d unknown schema names from LLM response", dropped)
    return ParsedLink(SchemaSet(keep), dropped)


@dataclass
class DatabaseLink:
    schema: SchemaSet
    attempts: int
    dropped: int = 0
    annotation: str | None = None


def link_database_level(client: LlmClient, instance: Instance, catalog: SchemaCatalog, retries: int = 2) -> DatabaseLink:
    """Ask the LLM for the needed schema; re-ask on unparseable answers.

    After ``retries`` re-asks the result is empty with an annotation.
    Transport failures propagate as ``LlmClientError``.
    """
    prompt = build_link_instruction(catalog, instance.evidence, instance.question).text
    for attempt in range(1, retries + 2):
        raw = client.complete(prompt)
        try:
            parsed = parse_link_response(raw, catalog)
        except UnparseableResponseError:
            continue
        return DatabaseLink(parsed.schema, attempt, parsed.dropped)
    return DatabaseLink(SchemaSet(), retries + 1, 0, f"unparseable LLM response after {retries + 1} attempts")


# ----------------------------------------------------------------------------
# SQL generation

GEN_INSTRUCTION = (
    "You are given a SQLite database schema and a question. "
    "Write one SQLite SELECT query that answers the question."
)
GEN_CONTRACT = "Return only the SQL query inside a ```sql code block."


@dataclass
class GenerationResult:
    sql_text: str
    raw_response: str
    unparseable: bool = False
    elapsed_s: float = 0.0
    meta: dict = field(default_factory=dict)


def build_generation_prompt(d_f: SchemaSet, catalog: SchemaCatalog, k: str, q: str) -> str:
    if not d_f:
        raise ValueError("generation needs a non-empty schema set")
    sub = subset_catalog(catalog, d_f)
    parts = [GEN_INSTRUCTION, "### Schema\n" + serialize_schema(sub, "ddl")]
    if k.strip():
        parts.append("### Evidence\n" + k.strip())
    parts.append("### Question\n" + q.strip())
    parts.append("### Output\n" + GEN_CONTRACT)
    return "\n\n".join(parts) + "\n"


_SELECT = re.compile(r"\b(select|with)\b", re.IGNORECASE)


def extract_sql(text: str) -> str | None:
    """SQL from the first code fence, else from the first SELECT to the end."""
    blocks = [b.strip() for b in _FENCE.findall(text) if b.strip()]
    if blocks:
        sql = blocks[0]
    else:
        m = _SELECT.search(text)
        if m is None:
            return None
        sql = text[m.start() :].strip()
    return sql.rstrip().rstrip(";").rstrip()


def generate_sql(client: LlmClient, instance: Instance, d_f: SchemaSet, catalog: SchemaCatalog) -> GenerationResult:
    prompt = build_generation_prompt(d_f, catalog, instance.evidence, instance.question)
    start = time.perf_counter()
    raw = client.complete(prompt)
    elapsed = time.perf_counter() - start
    sql = extract_sql(raw)
    if sql is None:
        return GenerationResult("", raw, True, elapsed)
    try:
        parse_sql(sql)
    except SqlParseError:
        return GenerationResult(sql, raw, True, elapsed)
    return GenerationResult(sql, raw, False, elapsed)
