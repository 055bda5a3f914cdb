"""Concept lifecycle: retrieval (LLM endpoint or procedural fallback),
validity filtering by activation score, category similarity, and negative
concept sampling strategies."""

import json
import os
import re
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import AttributeVocab
from .embedder import ConceptPhrase, JointEmbedder, Tokenizer, activation_score, build_vocabulary
from .errors import ArgumentError, FormatError, TransportError

# ---------------------------------------------------------------------------
# procedural retrieval

SHAPE_TEMPLATES = {
    "circle": (
        "perfectly circular outline",
        "smooth round disc silhouette",
        "curved edge with no corners",
        "evenly round filled body",
    ),
    "square": (
        "four equal straight sides",
        "sharp right angle corners",
        "boxy square outline",
        "flat edged block body",
    ),
    "triangle": (
        "three pointed corners",
        "triangular wedge silhouette",
        "slanted edges meeting at a peak",
        "pointed apex over a flat base",
    ),
    "cross": (
        "four rectangular arms meeting at the center",
        "plus shaped body",
        "crossed horizontal and vertical bars",
        "notched corners between the arms",
    ),
}

HUE_TEMPLATES = (
    "vivid {v} body",
    "{v} colored fill",
    "uniform {v} surface",
    "strong {v} tint against the backdrop",
)

SIZE_TEMPLATES = {
    "small": (
        "small compact figure",
        "covers a small part of the frame",
        "narrow overall extent",
        "tiny centered mark",
    ),
    "large": (
        "large figure filling much of the frame",
        "broad overall extent",
        "thick prominent mass",
        "big centered figure",
    ),
}

GENERIC_TEMPLATES = (
    "{v} {a} appearance",
    "distinct {v} {a}",
    "clearly {v} {a}",
    "{a} reads as {v}",
)


def _templates_for(axis, value):
    if axis == "shape" and value in SHAPE_TEMPLATES:
        return SHAPE_TEMPLATES[value]
    if axis == "hue":
        return tuple(t.format(v=value) for t in HUE_TEMPLATES)
    if axis == "size" and value in SIZE_TEMPLATES:
        return SIZE_TEMPLATES[value]
    return tuple(t.format(a=axis, v=value) for t in GENERIC_TEMPLATES)


def template_words():
    words = []
    pools = list(SHAPE_TEMPLATES.values()) + list(SIZE_TEMPLATES.values())
    pools.append(tuple(t.format(v=v) for t in HUE_TEMPLATES for v in
                       ("red", "green", "blue", "yellow")))
    for pool in pools:
        for phrase in pool:
            words.extend(phrase.split())
    return tuple(dict.fromkeys(words))


def retrieve_concepts_procedural(category, vocab: AttributeVocab, categories, n=10,
                                 tokenizer=None):
    """Deterministic phrases from templates over the category's attributes.

    Attributes shared with the fewest other categories come first, so the
    most class-distinctive phrases survive truncation to n.
    """
    vocab.check_bundle(category.bundle)
    tokenizer = tokenizer or Tokenizer(build_vocabulary(vocab, template_words()))
    share = {}
    for axis, value in category.bundle.items():
        share[(axis, value)] = sum(
            1 for c in categories if c.id != category.id and c.bundle.get(axis) == value
        )
    axis_order = [a for a, _ in vocab.axes]
    ordered = sorted(
        category.bundle.items(),
        key=lambda kv: (share[(kv[0], kv[1])], axis_order.index(kv[0])),
    )
    texts = []
    for axis, value in ordered:
        texts.extend(_templates_for(axis, value))
    if len(texts) < n:
        raise ArgumentError(f"only {len(texts)} template phrases available, need {n}")
    return [tokenizer.phrase(t, category_id=category.id) for t in texts[:n]]


# ---------------------------------------------------------------------------
# LLM retrieval

PROMPT_TEMPLATE = (
    "You are an expert in computer vision and image analysis. Here is the task: "
    "<task>I want to use some visual descriptions to identify different categories "
    "in ImageNet dataset. Please first consider whether there exist categories with "
    "similar appearance to {name}. Then please give {n} short descriptions describing "
    "the appearance features that the {name} has and can be used to distinguish it "
    "from other classes. The phrases should only focus on visual appearance of body "
    "parts or components instead of functioning. Each phrase should be detailed but "
    "also shorter than 128 characters. Each phrase starts with non-capitalized "
    'characters.</task> Give the answer in the form of <answer>["$class_name", '
    '["phrase1", "phrase2", "phrase3", "phrase4", "phrase5", "phrase6", "phrase7", '
    '"phrase8", "phrase9", "phase10"]]</answer>.'
)


@dataclass(frozen=True)
class LlmEndpointConfig:
    base_url: str
    model: str
    auth_env: str = "CONCEPTDIFF_LLM_TOKEN"
    timeout: float = 30.0
    max_retries: int = 3

    def __post_init__(self):
        if self.timeout <= 0:
            raise ArgumentError("timeout must be positive")


def build_prompt(class_name: str, n=10) -> str:
    return PROMPT_TEMPLATE.format(name=class_name, n=n)


_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)


def parse_answer(text: str, expected_n: int):
    """Extract the mandated <answer>[name, [phrases]]</answer> payload."""
    m = _ANSWER_RE.search(text)
    if not m:
        raise FormatError("response has no <answer>...</answer> block", raw=text)
    inner = m.group(1).strip()
    for fancy, plain in (("“", '"'), ("”", '"'), ("‘", "'"), ("’", "'")):
        inner = inner.replace(fancy, plain)
    try:
        payload = json.loads(inner)
    except json.JSONDecodeError as exc:
        raise FormatError(f"answer block is not valid JSON: {exc}", raw=text) from exc
    if (
        not isinstance(payload, list)
        or len(payload) != 2
        or not isinstance(payload[1], list)
        or not all(isinstance(p, str) and p.strip() for p in payload[1])
    ):
        raise FormatError("answer payload is not [name, [phrases]]", raw=text)
    phrases = [p.strip() for p in payload[1]]
    if len(phrases) != expected_n:
        raise FormatError(f"expected {expected_n} phrases, got {len(phrases)}", raw=text)
    return phrases


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-") or "category"


def _cache_path(cache_dir, model, category_name):
    return os.path.join(cache_dir, _slug(model), _slug(category_name) + ".json")


def retrieve_concepts_llm(category, cfg: LlmEndpointConfig, n=10, cache_dir=None,
                          tokenizer=None, transport=None):
    """Retrieve phrases from a chat-completion endpoint.

    Raw responses are cached on disk keyed by (category, model); a cached
    response is replayed without touching the network.
    """
    if not category.name:
        raise ArgumentError("category has no name")
    tokenizer = tokenizer or Tokenizer(build_vocabulary(AttributeVocab()))
    raw = None
    cpath = _cache_path(cache_dir, cfg.model, category.name) if cache_dir else None
    if cpath and os.path.exists(cpath):
        with open(cpath) as fh:
            raw = json.load(fh)["raw"]
    if raw is None:
        raw = _post_chat(build_prompt(category.name, n), cfg, transport)
        if cpath:
            os.makedirs(os.path.dirname(cpath), exist_ok=True)
            with open(cpath, "w") as fh:
                json.dump({"category": category.name, "model": cfg.model, "raw": raw}, fh)
    phrases = parse_answer(raw, n)
    return [tokenizer.phrase(p, category_id=category.id) for p in phrases]


def _post_chat(prompt: str, cfg: LlmEndpointConfig, transport=None) -> str:
    """POST one chat request, returning the assistant message content."""
    body = {"model": cfg.model, "messages": [{"role": "user", "content": prompt}]}
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(cfg.auth_env, "")
    if token:
        headers["Authorization"] = f"Bearer {token}"
    last_exc = None
    for attempt in range(cfg.max_retries):
        try:
            if transport is not None:
                payload = transport(cfg.base_url, body, headers, cfg.timeout)
            else:
                import requests

                resp = requests.post(cfg.base_url, json=body, headers=headers,
                                     timeout=cfg.timeout)
                if resp.status_code >= 400:
                    raise TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                payload = resp.json()
            try:
                return payload["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError) as exc:
                raise FormatError("malformed chat-completion payload",
                                  raw=json.dumps(payload)) from exc
        except FormatError:
            raise
        except TransportError as exc:
            last_exc = exc
        except Exception as exc:  # connection/timeout errors from the HTTP layer
            last_exc = TransportError(f"request failed: {exc}")
        time.sleep(0.5 * 2**attempt if transport is None else 0)
    raise last_exc


def retrieve_all_llm(categories, cfg: LlmEndpointConfig, n=10, cache_dir=None,
                     tokenizer=None, transport=None, max_workers=4):
    """Retrieve every category with at most 4 concurrent requests."""
    results = {}
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futs = {
            pool.submit(retrieve_concepts_llm, c, cfg, n, cache_dir, tokenizer, transport): c
            for c in categories
        }
        for fut, cat in futs.items():
            results[cat.id] = fut.result()
    return results


# ---------------------------------------------------------------------------
# concept bank


@dataclass
class CategoryConcepts:
    id: int
    name: str
    retrieved: list
    scores: list = field(default_factory=list)
    selected: list = field(default_factory=list)


@dataclass
class ConceptBank:
    categories: list
    similarity: np.ndarray = None
    embedder_checksum: str = ""

    def category(self, category_id) -> CategoryConcepts:
        for c in self.categories:
            if c.id == category_id:
                return c
        raise ArgumentError(f"category {category_id} not in bank")

    def to_json(self):
        return {
            "categories": [
                {
                    "id": c.id,
                    "name": c.name,
                    "retrieved": list(c.retrieved),
                    "scores": [float(s) for s in c.scores],
                    "selected": list(c.selected),
                }
                for c in self.categories
            ],
            "similarity": [] if self.similarity is None else self.similarity.tolist(),
            "embedder_checksum": self.embedder_checksum,
        }

    @classmethod
    def from_json(cls, obj):
        cats = [
            CategoryConcepts(
                id=c["id"],
                name=c["name"],
                retrieved=list(c["retrieved"]),
                scores=list(c["scores"]),
                selected=list(c["selected"]),
            )
            for c in obj["categories"]
        ]
        sim = np.asarray(obj["similarity"], dtype=np.float64) if obj["similarity"] else None
        return cls(categories=cats, similarity=sim,
                   embedder_checksum=obj.get("embedder_checksum", ""))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    def checksum(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode("utf-8")
        return f"{zlib.crc32(blob):08x}"


def bank_from_retrieval(categories, phrases_by_category) -> ConceptBank:
    cats = []
    for c in categories:
        phrases = phrases_by_category[c.id]
        texts = [p.text if isinstance(p, ConceptPhrase) else p for p in phrases]
        cats.append(CategoryConcepts(id=c.id, name=c.name, retrieved=texts))
    return ConceptBank(categories=cats)


def select_valid_concepts(bank: ConceptBank, embedder: JointEmbedder, images_by_category,
                          k=5) -> ConceptBank:
    """Keep the k highest-activation phrases per category, ties broken by
    retrieval order."""
    if k < 1:
        raise ArgumentError("k must be >= 1")
    out = []
    for cat in bank.categories:
        images = images_by_category.get(cat.id)
        if images is None or len(images) == 0:
            raise ArgumentError(f"category {cat.id} has no real images")
        if not cat.retrieved:
            raise ArgumentError(f"category {cat.id} has no retrieved phrases")
        scores = [
            activation_score(embedder, images, embedder.tokenizer.phrase(t))
            for t in cat.retrieved
        ]
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        chosen = [cat.retrieved[i] for i in order[: min(k, len(scores))]]
        out.append(
            CategoryConcepts(id=cat.id, name=cat.name, retrieved=list(cat.retrieved),
                             scores=scores, selected=chosen)
        )
    return ConceptBank(categories=out, similarity=bank.similarity,
                       embedder_checksum=bank.embedder_checksum)


def category_similarity(embedder: JointEmbedder, categories) -> np.ndarray:
    """Cosine similarity between category-name embeddings, from the concept
    tower; exactly symmetric with a unit diagonal."""
    if len(categories) < 2:
        raise ArgumentError("need at least 2 categories")
    names = [embedder.tokenizer.phrase(c.name) for c in categories]
    embs = embedder.embed_concepts(names).astype(np.float64)
    n = len(categories)
    sim = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            v = float(np.clip(np.dot(embs[i], embs[j]), -1.0, 1.0))
            sim[i, j] = v
            sim[j, i] = v
    return sim


# ---------------------------------------------------------------------------
# negative sampling

WEIGHT_FLOOR = 1e-3


@dataclass(frozen=True)
class NegativeStrategy:
    kind: str  # "random" | "similar" | "weighted"
    k: int = 0  # for "similar"

    def __post_init__(self):
        if self.kind not in ("random", "similar", "weighted"):
            raise ArgumentError(f"unknown strategy {self.kind!r}")
        if self.kind == "similar" and self.k < 1:
            raise ArgumentError("similar strategy needs k >= 1")

    @classmethod
    def parse(cls, text):
        if text == "random":
            return cls("random")
        if text == "weighted":
            return cls("weighted")
        if text.startswith("similar:"):
            return cls("similar", k=int(text.split(":", 1)[1]))
        raise ArgumentError(f"cannot parse strategy {text!r}")

    def __str__(self):
        return f"similar:{self.k}" if self.kind == "similar" else self.kind


def negative_weights(bank: ConceptBank, target_id: int, donor_ids, strategy: NegativeStrategy):
    """Per-donor sampling probabilities for a target category."""
    n = len(donor_ids)
    if strategy.kind == "random":
        return np.full(n, 1.0 / n)
    if bank.similarity is None:
        raise ArgumentError(f"{strategy.kind} strategy needs a similarity matrix")
    ids = [c.id for c in bank.categories]
    row = {cid: bank.similarity[ids.index(target_id), ids.index(cid)] for cid in donor_ids}
    if strategy.kind == "similar":
        if not 1 <= strategy.k < len(bank.categories):
            raise ArgumentError("similar-k requires 1 <= k < number of categories")
        kk = min(strategy.k, n)
        top = sorted(donor_ids, key=lambda cid: (-row[cid], cid))[:kk]
        return np.array([1.0 / kk if cid in top else 0.0 for cid in donor_ids])
    w = np.array([max(row[cid], WEIGHT_FLOOR) for cid in donor_ids], dtype=np.float64)
    return w / w.sum()


def sample_negative_concepts(bank: ConceptBank, target_id: int, n: int,
                             strategy: NegativeStrategy, rng, tokenizer: Tokenizer):
    """Draw n negative phrases (with replacement) from non-target categories."""
    if n < 0:
        raise ArgumentError("n must be >= 0")
    if n == 0:
        return []
    donors = [c for c in bank.categories if c.id != target_id and c.selected]
    if not donors:
        raise ArgumentError("no eligible donor categories with selected concepts")
    donor_ids = [c.id for c in donors]
    probs = negative_weights(bank, target_id, donor_ids, strategy)
    picks = rng.choice(len(donors), size=n, p=probs)
    out = []
    for pi in picks:
        donor = donors[int(pi)]
        text = donor.selected[int(rng.integers(0, len(donor.selected)))]
        out.append(tokenizer.phrase(text, category_id=donor.id))
    return out
