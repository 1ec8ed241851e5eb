"""Scoring of model outputs against a QA evaluation set.

Four scorers: MCQ accuracy (with optional category grouping), binary
yes/no accuracy, similarity-based label matching through a pluggable
embedding endpoint, and exact-match METEOR for captions.  Free-form model
text is mapped to answers by fixed, documented rules: MCQ extraction
tries a standalone option letter first and falls back to the longest
option substring; binary extraction takes the first standalone yes/no
token.  Fragments from different tasks merge into one report that can
also express each task as a percentage of a baseline report.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from hashlib import blake2b
from typing import Iterable, Mapping, Optional, Protocol, Sequence

import requests

from .errors import MusicQaError
from .rulegen import QAFormat, QAItem

__all__ = [
    "ModelOutput",
    "EmbeddingVector",
    "MeteorBreakdown",
    "TaskScores",
    "EvalReport",
    "UnknownQaIdError",
    "EmbedderError",
    "DimMismatchError",
    "OverlapError",
    "extract_mcq_answer",
    "extract_binary_answer",
    "score_mcq",
    "score_binary",
    "score_label_match",
    "score_captions",
    "match_label_by_similarity",
    "meteor_exact",
    "aggregate_report",
    "relative_percent",
    "HttpEmbedder",
    "TrigramEmbedder",
    "EmbedderConfig",
]


class UnknownQaIdError(MusicQaError):
    """An output references a qa_id absent from the evaluation set."""


class EmbedderError(MusicQaError):
    """The embedding endpoint failed or returned a malformed payload."""


class DimMismatchError(MusicQaError):
    """Embedding vectors in one comparison have different dimensions."""


class OverlapError(MusicQaError):
    """Two report fragments claim the same task."""


@dataclass(frozen=True)
class ModelOutput:
    qa_id: str
    text: str


def load_outputs_jsonl(raw: str) -> list[ModelOutput]:
    """Parse {"qa_id","text"} JSONL; blank lines are skipped."""
    from .errors import ParseError

    outputs = []
    for line_no, line in enumerate(raw.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}", line_no=line_no) from exc
        if not isinstance(obj, dict) or "qa_id" not in obj or "text" not in obj:
            raise ParseError("expected an object with qa_id and text", line_no=line_no)
        outputs.append(ModelOutput(qa_id=str(obj["qa_id"]), text=str(obj["text"])))
    return outputs


# ---------------------------------------------------------------------------
# Answer extraction

_STANDALONE_LETTER = re.compile(r"(?<![A-Za-z0-9])([A-Za-z])(?![A-Za-z0-9])")
_STANDALONE_YESNO = re.compile(r"(?<![A-Za-z0-9])(yes|no)(?![A-Za-z0-9])", re.IGNORECASE)


def extract_mcq_answer(output: ModelOutput | str, options: Sequence[str]) -> Optional[int]:
    """Map free-form output text to an option index, or None.

    Resolution order: (1) first standalone letter naming a valid option,
    any case; (2) longest option whose case-folded text occurs in the
    output, earlier option winning length ties; (3) None.
    """
    if not options:
        raise ValueError("options must be non-empty")
    text = output.text if isinstance(output, ModelOutput) else output
    for match in _STANDALONE_LETTER.finditer(text):
        index = ord(match.group(1).upper()) - ord("A")
        if 0 <= index < len(options):
            return index
    folded = text.casefold()
    best_index = None
    best_len = 0
    for i, option in enumerate(options):
        needle = option.casefold()
        if needle and needle in folded and len(needle) > best_len:
            best_index = i
            best_len = len(needle)
    return best_index


def extract_binary_answer(text: str) -> Optional[str]:
    """First standalone yes/no token, canonicalized; None if absent."""
    match = _STANDALONE_YESNO.search(text)
    if match is None:
        return None
    return "Yes" if match.group(1).casefold() == "yes" else "No"


# ---------------------------------------------------------------------------
# Score containers


@dataclass
class CategoryScores:
    total: int = 0
    score_sum: float = 0.0

    @property
    def mean(self) -> float:
        return self.score_sum / self.total if self.total else 0.0


@dataclass
class TaskScores:
    """One task's aggregate: mean of per-item scores in [0, 1]."""

    task: str
    total: int = 0
    score_sum: float = 0.0
    missing: int = 0
    unparseable: int = 0
    per_category: dict[str, CategoryScores] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return self.score_sum / self.total if self.total else 0.0

    def add(self, score: float, category: Optional[str] = None) -> None:
        self.total += 1
        self.score_sum += score
        if category is not None:
            bucket = self.per_category.setdefault(category, CategoryScores())
            bucket.total += 1
            bucket.score_sum += score

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "mean": self.mean,
            "missing": self.missing,
            "unparseable": self.unparseable,
            "per_category": {
                name: {"total": c.total, "mean": c.mean}
                for name, c in sorted(self.per_category.items())
            },
        }


@dataclass
class EvalReport:
    tasks: dict[str, TaskScores] = field(default_factory=dict)
    relative: Optional[dict[str, float]] = None

    @property
    def overall_mean(self) -> float:
        total = sum(t.total for t in self.tasks.values())
        if not total:
            return 0.0
        return sum(t.score_sum for t in self.tasks.values()) / total

    def to_dict(self) -> dict:
        out = {
            "tasks": {name: scores.to_dict() for name, scores in sorted(self.tasks.items())},
            "overall": {
                "total": sum(t.total for t in self.tasks.values()),
                "mean": self.overall_mean,
            },
            "bertscore": None,
        }
        if self.relative is not None:
            out["relative_to_baseline"] = self.relative
        return out


def relative_percent(value: float, baseline: float) -> float:
    """Score as a percentage of a baseline score, one decimal."""
    if baseline == 0:
        raise ValueError("baseline must be nonzero")
    return round(100.0 * value / baseline, 1)


def aggregate_report(
    fragments: Iterable[TaskScores], baseline: Optional[EvalReport] = None
) -> EvalReport:
    """Merge disjoint task fragments; optionally add baseline-relative figures."""
    report = EvalReport()
    for fragment in fragments:
        if fragment.task in report.tasks:
            raise OverlapError(f"duplicate task {fragment.task!r} in report fragments")
        report.tasks[fragment.task] = fragment
    if baseline is not None:
        relative = {}
        for name, scores in report.tasks.items():
            base = baseline.tasks.get(name)
            if base is not None and base.mean > 0:
                relative[name] = relative_percent(scores.mean, base.mean)
        report.relative = relative
    return report


# ---------------------------------------------------------------------------
# Accuracy scorers


def _outputs_by_id(
    items: Sequence[QAItem], outputs: Sequence[ModelOutput]
) -> dict[str, ModelOutput]:
    known = {item.qa_id for item in items}
    by_id: dict[str, ModelOutput] = {}
    for output in outputs:
        if output.qa_id not in known:
            raise UnknownQaIdError(f"output references unknown qa_id {output.qa_id!r}")
        by_id[output.qa_id] = output
    return by_id


def score_mcq(
    items: Sequence[QAItem],
    outputs: Sequence[ModelOutput],
    category_map: Optional[Mapping[str, str]] = None,
) -> TaskScores:
    """Accuracy over MCQ items; missing or unextractable outputs count wrong."""
    for item in items:
        if item.format != QAFormat.MCQ:
            raise ValueError(f"score_mcq got a {item.format.value} item ({item.qa_id})")
    by_id = _outputs_by_id(items, outputs)
    scores = TaskScores(task="mcq")
    for item in items:
        if category_map is not None:
            category = category_map.get(item.qa_id, "(uncategorized)")
        else:
            category = item.category or "(uncategorized)"
        output = by_id.get(item.qa_id)
        if output is None:
            scores.missing += 1
            scores.add(0.0, category)
            continue
        index = extract_mcq_answer(output, item.options)
        if index is None:
            scores.unparseable += 1
            scores.add(0.0, category)
            continue
        scores.add(1.0 if index == item.answer_index else 0.0, category)
    return scores


def score_binary(items: Sequence[QAItem], outputs: Sequence[ModelOutput]) -> TaskScores:
    """Accuracy over yes/no items; outputs without a yes/no token count wrong."""
    for item in items:
        if item.format != QAFormat.BINARY:
            raise ValueError(f"score_binary got a {item.format.value} item ({item.qa_id})")
    by_id = _outputs_by_id(items, outputs)
    scores = TaskScores(task="binary")
    for item in items:
        category = item.category or "(uncategorized)"
        output = by_id.get(item.qa_id)
        if output is None:
            scores.missing += 1
            scores.add(0.0, category)
            continue
        answer = extract_binary_answer(output.text)
        if answer is None:
            scores.unparseable += 1
            scores.add(0.0, category)
            continue
        scores.add(1.0 if answer.casefold() == item.answer.casefold() else 0.0, category)
    return scores


# ---------------------------------------------------------------------------
# Embedding-based label matching


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.values)

    def __post_init__(self):
        if not self.values:
            raise ValueError("embedding must have positive dimension")


class Embedder(Protocol):
    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


@dataclass(frozen=True)
class EmbedderConfig:
    url: str
    api_key_env: str = "MUSICQA_EMBED_API_KEY"
    timeout_s: float = 60.0
    batch_size: int = 64


class HttpEmbedder:
    """Client for a POST {"texts": [...]} -> {"embeddings": [[...]]} service.

    Embeddings are cached per instance, so repeated label lookups within a
    run hit the network once.
    """

    def __init__(self, config: EmbedderConfig, session: Optional[requests.Session] = None):
        self.config = config
        self._session = session or requests.Session()
        self._cache: dict[str, EmbeddingVector] = {}

    def _headers(self) -> dict:
        import os

        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.api_key_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        misses = []
        for text in texts:
            if text not in self._cache and text not in misses:
                misses.append(text)
        for start in range(0, len(misses), self.config.batch_size):
            batch = misses[start : start + self.config.batch_size]
            try:
                resp = self._session.post(
                    self.config.url,
                    json={"texts": batch},
                    headers=self._headers(),
                    timeout=self.config.timeout_s,
                )
            except requests.RequestException as exc:
                raise EmbedderError(f"embedding request failed: {exc}") from exc
            if resp.status_code != 200:
                raise EmbedderError(f"embedding service returned HTTP {resp.status_code}")
            try:
                vectors = resp.json()["embeddings"]
                parsed = [EmbeddingVector(tuple(float(x) for x in vec)) for vec in vectors]
            except (ValueError, KeyError, TypeError) as exc:
                raise EmbedderError(f"malformed embedding response: {exc}") from exc
            if len(parsed) != len(batch):
                raise EmbedderError(
                    f"embedding count mismatch: sent {len(batch)}, got {len(parsed)}"
                )
            for text, vector in zip(batch, parsed):
                self._cache[text] = vector
        return [self._cache[text] for text in texts]


class TrigramEmbedder:
    """Deterministic offline embedder: hashed character-trigram counts.

    L2-normalized counts of case-folded character trigrams, hashed into a
    fixed number of buckets.  Identical texts embed identically; texts
    sharing substrings score high cosine similarity.  Serves as the test
    double and an offline stand-in for a real text encoder.
    """

    def __init__(self, dim: int = 256):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim

    def _bucket(self, trigram: str) -> int:
        digest = blake2b(trigram.encode("utf-8"), digest_size=4).digest()
        return int.from_bytes(digest, "big") % self.dim

    def embed(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        out = []
        for text in texts:
            padded = f"  {text.casefold()}  "
            counts = [0.0] * self.dim
            for i in range(len(padded) - 2):
                counts[self._bucket(padded[i : i + 3])] += 1.0
            norm = math.sqrt(sum(c * c for c in counts))
            if norm > 0:
                counts = [c / norm for c in counts]
            out.append(EmbeddingVector(tuple(counts)))
        return out


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dim != b.dim:
        raise DimMismatchError(f"embedding dims differ: {a.dim} vs {b.dim}")
    dot = sum(x * y for x, y in zip(a.values, b.values))
    norm_a = math.sqrt(sum(x * x for x in a.values))
    norm_b = math.sqrt(sum(y * y for y in b.values))
    if norm_a == 0.0 or norm_b == 0.0:
        return 0.0
    return dot / (norm_a * norm_b)


def match_label_by_similarity(
    output_text: str, candidate_labels: Sequence[str], embedder: Embedder
) -> str:
    """Candidate label with the highest cosine similarity to the output.

    Ties keep the earliest candidate.  Invariant to any positive rescaling
    of the embeddings.
    """
    if len(candidate_labels) < 2:
        raise ValueError("need at least 2 candidate labels")
    vectors = embedder.embed([output_text, *candidate_labels])
    query, label_vectors = vectors[0], vectors[1:]
    best_label = candidate_labels[0]
    best_sim = -math.inf
    for label, vector in zip(candidate_labels, label_vectors):
        sim = cosine_similarity(query, vector)
        if sim > best_sim:
            best_label = label
            best_sim = sim
    return best_label


def score_label_match(
    items: Sequence[QAItem],
    outputs: Sequence[ModelOutput],
    embedder: Embedder,
    candidate_labels: Optional[Sequence[str]] = None,
) -> TaskScores:
    """Open-ended answers scored as classification over a label vocabulary.

    The vocabulary defaults to the distinct gold answers of the items.
    """
    by_id = _outputs_by_id(items, outputs)
    if candidate_labels is None:
        candidate_labels = sorted({item.answer for item in items})
    scores = TaskScores(task="label_match")
    for item in items:
        category = item.category or "(uncategorized)"
        output = by_id.get(item.qa_id)
        if output is None:
            scores.missing += 1
            scores.add(0.0, category)
            continue
        chosen = match_label_by_similarity(output.text, candidate_labels, embedder)
        scores.add(1.0 if chosen == item.answer else 0.0, category)
    return scores


# ---------------------------------------------------------------------------
# Exact-match METEOR


@dataclass(frozen=True)
class MeteorBreakdown:
    m: int
    precision: float
    recall: float
    fmean: float
    chunks: int
    penalty: float
    score: float


_WORD_CLEANER = re.compile(r"[^\w\s]+", re.UNICODE)


def _tokenize(text: str) -> list[str]:
    return _WORD_CLEANER.sub(" ", text.casefold()).split()


class _Budget(Exception):
    pass


def _min_chunks_exact(cand: list[str], ref: list[str], quota: dict[str, int], budget: int) -> int:
    """Minimal chunk count over all maximum one-to-one alignments.

    Backtracks over which occurrences align, memoized on (candidate
    position, used reference positions, chunk-continuation state); raises
    _Budget when the search space exceeds the node budget.
    """
    ref_positions: dict[str, list[int]] = {}
    for j, word in enumerate(ref):
        ref_positions.setdefault(word, []).append(j)
    # remaining candidate occurrences of each word from position i onward
    suffix_counts: list[dict[str, int]] = [dict() for _ in range(len(cand) + 1)]
    for i in range(len(cand) - 1, -1, -1):
        counts = dict(suffix_counts[i + 1])
        counts[cand[i]] = counts.get(cand[i], 0) + 1
        suffix_counts[i] = counts

    memo: dict[tuple, int] = {}
    nodes = 0

    def solve(i: int, used: int, rem: tuple[tuple[str, int], ...], cont_ref: int) -> int:
        # cont_ref: reference index that would continue the current chunk,
        # or -1 when the previous candidate position was not aligned
        nonlocal nodes
        nodes += 1
        if nodes > budget:
            raise _Budget
        rem_map = dict(rem)
        if not any(rem_map.values()):
            return 0
        if i >= len(cand):
            return math.inf  # quota unmet; pruned by skip guard, defensive
        key = (i, used, rem, cont_ref)
        hit = memo.get(key)
        if hit is not None:
            return hit
        word = cand[i]
        best = math.inf
        need = rem_map.get(word, 0)
        # skip this occurrence only if later occurrences can still fill the quota
        if need == 0 or suffix_counts[i + 1].get(word, 0) >= need:
            best = solve(i + 1, used, rem, -1)
        if need > 0:
            new_rem = tuple(
                (w, c - 1 if w == word else c) for w, c in rem if not (w == word and c == 1)
            )
            for j in ref_positions.get(word, ()):
                if used & (1 << j):
                    continue
                cost = 0 if j == cont_ref else 1
                sub = solve(i + 1, used | (1 << j), new_rem, j + 1)
                if cost + sub < best:
                    best = cost + sub
        memo[key] = best
        return best

    rem0 = tuple(sorted((w, c) for w, c in quota.items() if c > 0))
    result = solve(0, 0, rem0, -1)
    if result is math.inf:
        raise _Budget
    return int(result)


def _min_chunks_greedy(cand: list[str], ref: list[str], quota: dict[str, int]) -> int:
    """Left-to-right alignment preferring chunk continuation; not optimal."""
    ref_positions: dict[str, list[int]] = {}
    for j, word in enumerate(ref):
        ref_positions.setdefault(word, []).append(j)
    used: set[int] = set()
    rem = dict(quota)
    chunks = 0
    cont_ref = -1
    for word in cand:
        if rem.get(word, 0) <= 0:
            cont_ref = -1
            continue
        positions = [j for j in ref_positions.get(word, ()) if j not in used]
        if not positions:
            cont_ref = -1
            continue
        if cont_ref in positions:
            j = cont_ref
        else:
            j = positions[0]
            chunks += 1
        used.add(j)
        rem[word] -= 1
        cont_ref = j + 1
    return chunks


_CHUNK_SEARCH_BUDGET = 200_000


def meteor_exact(candidate: str, reference: str) -> MeteorBreakdown:
    """Exact-unigram METEOR: fmean = 10PR/(R+9P), penalty = 0.5(chunks/m)^3.

    Tokens are case-folded, punctuation-stripped, whitespace-split.  The
    alignment maximizes matches, then minimizes chunks (exhaustively up to
    a search budget, greedily past it).  No stemming or synonymy: scores
    are not comparable to full METEOR.
    """
    cand = _tokenize(candidate)
    ref = _tokenize(reference)
    if not cand or not ref:
        return MeteorBreakdown(0, 0.0, 0.0, 0.0, 0, 0.0, 0.0)
    cand_counts: dict[str, int] = {}
    for word in cand:
        cand_counts[word] = cand_counts.get(word, 0) + 1
    ref_counts: dict[str, int] = {}
    for word in ref:
        ref_counts[word] = ref_counts.get(word, 0) + 1
    quota = {
        word: min(count, ref_counts[word])
        for word, count in cand_counts.items()
        if word in ref_counts
    }
    m = sum(quota.values())
    if m == 0:
        return MeteorBreakdown(0, 0.0, 0.0, 0.0, 0, 0.0, 0.0)
    precision = m / len(cand)
    recall = m / len(ref)
    fmean = 10.0 * precision * recall / (recall + 9.0 * precision)
    try:
        chunks = _min_chunks_exact(cand, ref, quota, _CHUNK_SEARCH_BUDGET)
    except _Budget:
        chunks = _min_chunks_greedy(cand, ref, quota)
    penalty = 0.5 * (chunks / m) ** 3
    score = fmean * (1.0 - penalty)
    return MeteorBreakdown(m, precision, recall, fmean, chunks, penalty, score)


def score_captions(items: Sequence[QAItem], outputs: Sequence[ModelOutput]) -> TaskScores:
    """Mean meteor_exact of outputs against gold captions; missing scores 0."""
    by_id = _outputs_by_id(items, outputs)
    scores = TaskScores(task="caption")
    for item in items:
        category = item.category or "(uncategorized)"
        output = by_id.get(item.qa_id)
        if output is None:
            scores.missing += 1
            scores.add(0.0, category)
            continue
        scores.add(meteor_exact(output.text, item.answer).score, category)
    return scores
