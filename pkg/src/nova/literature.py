"""Paper search and text embedding clients, plus the vector math they share.

Two backends exist for each contract: an HTTP client for live use and a
deterministic offline variant (hash-to-sphere embedder, JSON corpus directory)
for desk-scale and replay runs. All embeddings are unit-normalized at write
time so cosine similarity reduces to a dot product.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Protocol

import numpy as np

from .domain import RetrievedDoc, SeedPaper
from .gateway import ChatRequest, Gateway, TransientBackendError
from .prompts import PromptLibrary

logger = logging.getLogger(__name__)

SEARCH_API_KEY_ENV = "NOVA_SEARCH_API_KEY"
EMBED_API_KEY_ENV = "NOVA_EMBED_API_KEY"

DEFAULT_EMBED_MODEL = "sentence-transformers/all-MiniLM-L6-v2"

DEFAULT_TREND_PAPER_COUNT = 20


class LiteratureError(Exception):
    pass


def normalize(values) -> np.ndarray:
    """Unit-normalize a vector; rejects zero and non-finite input."""
    vec = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(vec)):
        raise LiteratureError("embedding entries must be finite")
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        raise LiteratureError("cannot normalize the zero vector")
    return vec / norm


def cosine(a, b) -> float:
    """Dot product of two unit-norm vectors of equal dimension."""
    va = np.asarray(a, dtype=np.float64)
    vb = np.asarray(b, dtype=np.float64)
    if va.shape != vb.shape:
        raise LiteratureError(f"dimension mismatch: {va.shape} vs {vb.shape}")
    return float(va @ vb)


@dataclass(frozen=True)
class SearchQuery:
    text: str
    categories: tuple[str, ...] = ()
    date_from: date | None = None
    date_to: date | None = None
    limit: int = 10

    def __post_init__(self):
        if self.limit < 1:
            raise ValueError("SearchQuery.limit must be >= 1")
        if self.date_from and self.date_to and self.date_from > self.date_to:
            raise ValueError("SearchQuery: date_from must be <= date_to")


class Embedder(Protocol):
    def embed(self, texts: list[str]) -> list[np.ndarray]: ...


class SearchBackend(Protocol):
    def search(self, query: SearchQuery) -> list[RetrievedDoc]: ...


class HashEmbedder:
    """Seeded hash-to-sphere mock embedder.

    Each text maps to a unit vector drawn from a PRNG keyed by (seed, text),
    so batched calls equal per-item calls and reruns are byte-identical.
    """

    def __init__(self, dim: int = 32, seed: int = 0):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self.dim = dim
        self.seed = seed

    def _one(self, text: str) -> np.ndarray:
        digest = hashlib.blake2b(
            f"{self.seed}\x1f{text}".encode("utf-8"), digest_size=8
        ).digest()
        rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "big")))
        return normalize(rng.standard_normal(self.dim))

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        if not texts:
            raise LiteratureError("embed requires at least one text")
        return [self._one(t) for t in texts]


class HttpEmbedder:
    """Embeddings HTTP contract: POST {model, input: [texts]} -> {data: [{embedding}]}."""

    def __init__(self, endpoint: str, model: str = DEFAULT_EMBED_MODEL, post=None,
                 timeout: float = 60.0):
        self._endpoint = endpoint
        self._model = model
        self._timeout = timeout
        if post is None:
            import requests

            post = requests.post
        self._post = post

    def embed(self, texts: list[str]) -> list[np.ndarray]:
        if not texts:
            raise LiteratureError("embed requires at least one text")
        api_key = os.environ.get(EMBED_API_KEY_ENV, "")
        try:
            resp = self._post(
                self._endpoint,
                json={"model": self._model, "input": list(texts)},
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self._timeout,
            )
        except OSError as exc:
            raise TransientBackendError(f"embedding transport failure: {exc}") from exc
        if resp.status_code != 200:
            raise TransientBackendError(f"embedding HTTP {resp.status_code}")
        rows = resp.json()["data"]
        if len(rows) != len(texts):
            raise LiteratureError("embedding response length mismatch")
        return [normalize(row["embedding"]) for row in rows]


class OfflineCorpus:
    """Directory of *.json docs; retrieval ranks by embedding cosine.

    Each doc file holds {"title", "abstract"} and optionally "embedding",
    "categories", and "date" (ISO-8601). Docs without a stored embedding are
    embedded from "<title>\\n<abstract>" at load time.
    """

    def __init__(self, corpus_dir: str | Path, embedder: Embedder):
        self._embedder = embedder
        self._docs: list[dict] = []
        corpus_dir = Path(corpus_dir)
        if not corpus_dir.is_dir():
            raise LiteratureError(f"corpus directory {corpus_dir} does not exist")
        for path in sorted(corpus_dir.glob("*.json")):
            raw = json.loads(path.read_text(encoding="utf-8"))
            if not raw.get("title"):
                raise LiteratureError(f"corpus doc {path.name} has no title")
            self._docs.append(raw)
        todo = [d for d in self._docs if "embedding" not in d]
        if todo:
            vectors = self._embedder.embed(
                [f"{d['title']}\n{d.get('abstract', '')}" for d in todo]
            )
            for doc, vec in zip(todo, vectors):
                doc["embedding"] = vec
        for doc in self._docs:
            doc["embedding"] = normalize(doc["embedding"])

    def __len__(self) -> int:
        return len(self._docs)

    def _matches(self, doc: dict, query: SearchQuery) -> bool:
        if query.categories:
            have = set(doc.get("categories", []))
            if not have & set(query.categories):
                return False
        raw_date = doc.get("date")
        if raw_date is not None:
            doc_date = date.fromisoformat(raw_date)
            if query.date_from and doc_date < query.date_from:
                return False
            if query.date_to and doc_date > query.date_to:
                return False
        return True

    def _ranked(self, qvec: np.ndarray, docs: list[dict], k: int, source_query: str
                ) -> list[RetrievedDoc]:
        scored = [(cosine(qvec, d["embedding"]), d) for d in docs]
        scored.sort(key=lambda pair: (-pair[0], pair[1]["title"]))
        return [
            RetrievedDoc(
                title=d["title"],
                abstract=d.get("abstract", ""),
                source_query=source_query,
                score=sim,
                embedding=tuple(float(v) for v in d["embedding"]),
            )
            for sim, d in scored[:k]
        ]

    def search(self, query: SearchQuery) -> list[RetrievedDoc]:
        docs = [d for d in self._docs if self._matches(d, query)]
        if not docs:
            return []
        qvec = self._embedder.embed([query.text])[0]
        return self._ranked(qvec, docs, query.limit, query.text)

    def nearest(self, embedding, k: int) -> list[RetrievedDoc]:
        """Top-k docs by cosine to an existing embedding (no query text)."""
        if not self._docs:
            return []
        return self._ranked(np.asarray(embedding, dtype=np.float64), self._docs, k, "")


class HttpSearchClient:
    """Paper-search HTTP contract: query text, categories, ISO dates, limit."""

    def __init__(self, endpoint: str, embedder: Embedder | None = None, post=None,
                 timeout: float = 60.0):
        self._endpoint = endpoint
        self._embedder = embedder
        self._timeout = timeout
        if post is None:
            import requests

            post = requests.post
        self._post = post

    def search(self, query: SearchQuery) -> list[RetrievedDoc]:
        api_key = os.environ.get(SEARCH_API_KEY_ENV, "")
        payload = {
            "query": query.text,
            "categories": list(query.categories),
            "date_from": query.date_from.isoformat() if query.date_from else None,
            "date_to": query.date_to.isoformat() if query.date_to else None,
            "limit": query.limit,
        }
        try:
            resp = self._post(
                self._endpoint,
                json=payload,
                headers={"Authorization": f"Bearer {api_key}"},
                timeout=self._timeout,
            )
        except OSError as exc:
            raise TransientBackendError(f"search transport failure: {exc}") from exc
        if resp.status_code != 200:
            raise TransientBackendError(f"search HTTP {resp.status_code}")
        rows = resp.json().get("results", [])[: query.limit]
        docs = []
        for row in rows:
            embedding = None
            if self._embedder is not None:
                embedding = tuple(
                    float(v)
                    for v in self._embedder.embed(
                        [f"{row['title']}\n{row.get('abstract', '')}"]
                    )[0]
                )
            docs.append(
                RetrievedDoc(
                    title=row["title"],
                    abstract=row.get("abstract", ""),
                    source_query=query.text,
                    score=float(row.get("score", 0.0)),
                    embedding=embedding,
                )
            )
        return docs


# ---------------------------------------------------------------------------
# Trend report
# ---------------------------------------------------------------------------


def engagement_score(paper: SeedPaper) -> int:
    """Unweighted sum of engagement counts (likes + comments + reposts + ...)."""
    if not paper.source_meta:
        return 0
    return sum(paper.source_meta.values())


def rank_by_engagement(recent: list[SeedPaper]) -> list[SeedPaper]:
    return sorted(recent, key=lambda p: (-engagement_score(p), p.title))


def format_paper_list(papers: list[SeedPaper]) -> str:
    lines = []
    for n, p in enumerate(papers, 1):
        lines.append(f"{n}. Title: {p.title}\n   Abstract: {p.abstract}")
    return "\n".join(lines)


def build_trend_report(
    recent: list[SeedPaper],
    gateway: Gateway,
    library: PromptLibrary,
    model_id: str,
    top_n: int = DEFAULT_TREND_PAPER_COUNT,
) -> str:
    """Summarize the highest-engagement recent papers into a trend report."""
    if not recent:
        raise LiteratureError("trend report requires at least one recent paper")
    for p in recent:
        if not p.source_meta:
            raise LiteratureError(f"paper {p.id} has no engagement metrics")
    ranked = rank_by_engagement(recent)[:top_n]
    prompt = library.render(
        "trend_report", {"popular_paper_list": format_paper_list(ranked)}
    )
    response = gateway.complete(ChatRequest(model_id=model_id, prompt=prompt))
    return response.text
