"""Dataset assembly: merge, deduplicate, split, shard, and count.

QAItems from any generator (rule-based, LLM, imported) meet here.  The
JSONL schema is bit-exact and versioned by field order:

    {"qa_id","audio_id","source","format","question","options","answer",
     "answer_index","category","method","template_id","seed"}

Splits are decided per audio id by seeded hashing so every item of a clip
lands in the same split and adding new clips never reassigns old ones.
Stats mirror the per-source, per-task table layout (Audio Sources x
Captioning/QA/MCQ/Binary) and merge associatively.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from hashlib import blake2b, sha256
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .corpus import Source, parse_source
from .errors import MusicQaError, ParseError
from .llmgen import normalize_binary_answer, validate_qa_item
from .rulegen import Method, QAFormat, QAItem

CAPTION_INSTRUCTION = "Describe the music in detail."

_MASK64 = (1 << 64) - 1


class BadRatioError(MusicQaError):
    """Split ratios must be positive and sum to 1."""


class IoError(MusicQaError):
    """Filesystem failure while writing or reading shards."""


class DigestMismatchError(MusicQaError):
    """A shard's bytes do not match the digest recorded in the manifest."""


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


# ---------------------------------------------------------------------------
# QAItem JSONL serialization


def item_to_dict(item: QAItem) -> dict:
    return {
        "qa_id": item.qa_id,
        "audio_id": item.audio_id,
        "source": item.source.value,
        "format": item.format.value,
        "question": item.question,
        "options": list(item.options),
        "answer": item.answer,
        "answer_index": item.answer_index,
        "category": item.category,
        "method": item.method.value,
        "template_id": item.template_id,
        "seed": item.seed,
    }


def item_to_json(item: QAItem) -> str:
    return json.dumps(item_to_dict(item), ensure_ascii=False, separators=(",", ":"))


def item_from_dict(obj: dict, line_no: Optional[int] = None) -> QAItem:
    try:
        options = obj.get("options") or []
        if not isinstance(options, list):
            raise ParseError("options must be a list", line_no=line_no)
        answer_index = obj.get("answer_index")
        if answer_index is not None and not isinstance(answer_index, int):
            raise ParseError("answer_index must be an integer or null", line_no=line_no)
        return QAItem(
            qa_id=str(obj["qa_id"]),
            audio_id=str(obj["audio_id"]),
            source=parse_source(str(obj["source"])),
            format=QAFormat(obj["format"]),
            question=str(obj["question"]),
            options=tuple(str(o) for o in options),
            answer=str(obj["answer"]),
            answer_index=answer_index,
            category=str(obj.get("category", "")),
            method=Method(obj["method"]),
            template_id=(None if obj.get("template_id") is None else str(obj["template_id"])),
            seed=int(obj.get("seed", 0)),
        )
    except KeyError as exc:
        raise ParseError(f"missing field {exc.args[0]!r}", line_no=line_no) from None
    except ValueError as exc:
        raise ParseError(str(exc), line_no=line_no) from None


def write_items_jsonl(items: Iterable[QAItem], path: str | Path) -> None:
    """Atomic whole-file write: readers never observe a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for item in items:
                fh.write(item_to_json(item))
                fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def read_items_jsonl(path: str | Path) -> list[QAItem]:
    items = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc}", line_no=line_no) from exc
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", line_no=line_no)
            items.append(item_from_dict(obj, line_no=line_no))
    return items


# ---------------------------------------------------------------------------
# Dedup


def _question_key(question: str) -> str:
    return " ".join(question.split()).casefold()


def deduplicate(items: Sequence[QAItem]) -> list[QAItem]:
    """One survivor per (audio_id, normalized question): smallest qa_id wins.

    Answers are deliberately not part of the key; two items asking the
    same string of the same clip are redundant supervision even if their
    answers differ in form.  Output sorted by qa_id.
    """
    best: dict[tuple[str, str], QAItem] = {}
    for item in items:
        key = (item.audio_id, _question_key(item.question))
        held = best.get(key)
        if held is None or item.qa_id < held.qa_id:
            best[key] = item
    out = list(best.values())
    out.sort(key=lambda item: item.qa_id)
    return out


# ---------------------------------------------------------------------------
# Splits


@dataclass(frozen=True)
class SplitAssignment:
    split_of: dict[str, Split]

    def items_for(self, items: Sequence[QAItem], split: Split) -> list[QAItem]:
        return [item for item in items if self.split_of[item.audio_id] == split]


def split_fraction(audio_id: str, global_seed: int) -> float:
    """Stable position of an audio id in [0, 1) under the given seed."""
    aid = audio_id.encode("utf-8")
    h = blake2b(digest_size=8)
    h.update(struct.pack(">Q", global_seed & _MASK64))
    h.update(aid)
    return int.from_bytes(h.digest(), "big") / 2**64


def split_by_audio(
    items: Sequence[QAItem], ratios: tuple[float, float, float], global_seed: int
) -> SplitAssignment:
    """Assign every audio id to train/val/test by hash thresholding.

    Membership depends only on (audio_id, global_seed, ratios), so growing
    the dataset never moves an existing clip to another split.
    """
    train, val, test = ratios
    if min(train, val, test) <= 0 or abs(train + val + test - 1.0) > 1e-9:
        raise BadRatioError(f"ratios must be positive and sum to 1, got {ratios}")
    assignment: dict[str, Split] = {}
    for audio_id in sorted({item.audio_id for item in items}):
        u = split_fraction(audio_id, global_seed)
        if u < train:
            assignment[audio_id] = Split.TRAIN
        elif u < train + val:
            assignment[audio_id] = Split.VAL
        else:
            assignment[audio_id] = Split.TEST
    return SplitAssignment(split_of=assignment)


# ---------------------------------------------------------------------------
# Sharding

_MANIFEST_NAME = "manifest.json"


def _file_digest(path: Path) -> str:
    h = sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return f"sha256:{h.hexdigest()}"


def write_shards(items: Sequence[QAItem], shard_size: int, out_dir: str | Path) -> dict:
    """Write qa_id-ordered JSONL shards plus a digest manifest.

    Identical input reproduces identical bytes, shard names, and digests.
    """
    if shard_size < 1:
        raise ValueError("shard_size must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        ordered = sorted(items, key=lambda item: item.qa_id)
        shards = []
        for start in range(0, len(ordered), shard_size):
            chunk = ordered[start : start + shard_size]
            name = f"shard-{start // shard_size:05d}.jsonl"
            path = out / name
            write_items_jsonl(chunk, path)
            shards.append({"path": name, "items": len(chunk), "digest": _file_digest(path)})
        manifest = {"total_items": len(ordered), "shard_size": shard_size, "shards": shards}
        fd, tmp = tempfile.mkstemp(dir=out, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
        os.replace(tmp, out / _MANIFEST_NAME)
    except OSError as exc:
        raise IoError(f"failed writing shards to {out}: {exc}") from exc
    return manifest


def read_shards(out_dir: str | Path, verify: bool = True) -> list[QAItem]:
    """Read a sharded dataset back, checking digests unless told otherwise."""
    out = Path(out_dir)
    try:
        with open(out / _MANIFEST_NAME, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read manifest in {out}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid manifest JSON: {exc}") from exc
    items: list[QAItem] = []
    for shard in manifest.get("shards", []):
        path = out / shard["path"]
        if verify and _file_digest(path) != shard["digest"]:
            raise DigestMismatchError(f"digest mismatch for {path}")
        items.extend(read_items_jsonl(path))
    return items


# ---------------------------------------------------------------------------
# Statistics

TASKS = ("Captioning", "QA", "MCQ", "Binary")

_TASK_OF_FORMAT = {
    QAFormat.CAPTION: "Captioning",
    QAFormat.OPEN: "QA",
    QAFormat.MCQ: "MCQ",
    QAFormat.BINARY: "Binary",
}

_CANONICAL_ROWS = (
    Source.MUSICCAPS.value,
    Source.MAGNATAGATUNE.value,
    Source.FMA.value,
    Source.AUDIOSET.value,
)

TABLE_COLUMNS = ("Audio Sources", "Audios", *TASKS, "Total")


@dataclass
class DatasetStats:
    """Per-source task counts with enough state to merge associatively."""

    per_source_task: dict[tuple[str, str], int] = field(default_factory=dict)
    audio_ids: dict[str, set[str]] = field(default_factory=dict)

    @property
    def per_source_audios(self) -> dict[str, int]:
        return {source: len(ids) for source, ids in self.audio_ids.items()}

    def source_total(self, source: str) -> int:
        return sum(self.per_source_task.get((source, task), 0) for task in TASKS)

    def task_total(self, task: str) -> int:
        return sum(count for (_, t), count in self.per_source_task.items() if t == task)

    @property
    def grand_total(self) -> int:
        return sum(self.per_source_task.values())

    def __add__(self, other: "DatasetStats") -> "DatasetStats":
        merged = DatasetStats(
            per_source_task=dict(self.per_source_task),
            audio_ids={source: set(ids) for source, ids in self.audio_ids.items()},
        )
        for key, count in other.per_source_task.items():
            merged.per_source_task[key] = merged.per_source_task.get(key, 0) + count
        for source, ids in other.audio_ids.items():
            merged.audio_ids.setdefault(source, set()).update(ids)
        return merged

    def _sources(self) -> list[str]:
        present = set(self.audio_ids) | {source for source, _ in self.per_source_task}
        rows = [s for s in _CANONICAL_ROWS]
        rows.extend(sorted(present - set(_CANONICAL_ROWS)))
        return rows

    def to_table(self) -> dict:
        """Rows per source plus Total, in the published table layout."""
        audios = self.per_source_audios
        rows = []
        for source in self._sources():
            rows.append(
                [
                    source,
                    audios.get(source, 0),
                    *(self.per_source_task.get((source, task), 0) for task in TASKS),
                    self.source_total(source),
                ]
            )
        rows.append(
            [
                "Total",
                sum(audios.values()),
                *(self.task_total(task) for task in TASKS),
                self.grand_total,
            ]
        )
        return {"columns": list(TABLE_COLUMNS), "rows": rows}

    def to_dict(self) -> dict:
        return {
            "table": self.to_table(),
            "per_source_task": {
                f"{source}/{task}": count
                for (source, task), count in sorted(self.per_source_task.items())
            },
            "per_source_audios": dict(sorted(self.per_source_audios.items())),
            "grand_total": self.grand_total,
        }


def compute_stats(items: Iterable[QAItem]) -> DatasetStats:
    stats = DatasetStats()
    for item in items:
        source = item.source.value
        task = _TASK_OF_FORMAT[item.format]
        key = (source, task)
        stats.per_source_task[key] = stats.per_source_task.get(key, 0) + 1
        stats.audio_ids.setdefault(source, set()).add(item.audio_id)
    return stats


def filter_formats(items: Iterable[QAItem], keep: set[QAFormat]) -> list[QAItem]:
    """Keep only the given formats; the ablation datasets drop one each."""
    return [item for item in items if item.format in keep]


# ---------------------------------------------------------------------------
# External imports


def _imported_qa_id(audio_id: str, fmt: QAFormat, question: str, answer: str) -> str:
    h = blake2b(digest_size=8)
    for part in (audio_id, fmt.value, question, answer):
        data = part.encode("utf-8")
        h.update(len(data).to_bytes(4, "big"))
        h.update(data)
    return h.hexdigest()


def import_external(raw: bytes | str, source: Source | str) -> list[QAItem]:
    """Convert external caption or QA JSONL into QAItems.

    Caption lines ({"audio_id", "caption"}) become Caption items with the
    fixed instruction question; QA lines need audio_id, question and
    answer, with an optional format field defaulting to open.
    """
    if isinstance(raw, bytes):
        raw = raw.decode("utf-8")
    src = source if isinstance(source, Source) else parse_source(source)
    items = []
    for line_no, line in enumerate(raw.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}", line_no=line_no) from exc
        if not isinstance(obj, dict):
            raise ParseError("expected a JSON object", line_no=line_no)
        audio_id = obj.get("audio_id")
        if not isinstance(audio_id, str) or not audio_id:
            raise ParseError("missing audio_id", line_no=line_no)
        if "caption" in obj:
            caption = obj["caption"]
            if not isinstance(caption, str) or not caption.strip():
                raise ParseError("caption must be a non-empty string", line_no=line_no)
            question, answer, fmt = CAPTION_INSTRUCTION, caption.strip(), QAFormat.CAPTION
            options: tuple[str, ...] = ()
            answer_index = None
            category = "caption"
        else:
            question = obj.get("question")
            answer = obj.get("answer")
            if not isinstance(question, str) or not question.strip():
                raise ParseError("missing question", line_no=line_no)
            if not isinstance(answer, str) or not answer.strip():
                raise ParseError("missing answer", line_no=line_no)
            question, answer = question.strip(), answer.strip()
            try:
                fmt = QAFormat(obj.get("format", "open"))
            except ValueError:
                raise ParseError(f"unknown format {obj.get('format')!r}", line_no=line_no) from None
            if fmt == QAFormat.BINARY:
                normalized = normalize_binary_answer(answer)
                if normalized is None:
                    raise ParseError("binary answer must normalize to Yes/No", line_no=line_no)
                answer = normalized
            raw_options = obj.get("options") or []
            options = tuple(str(o) for o in raw_options)
            answer_index = obj.get("answer_index")
            if fmt == QAFormat.MCQ and answer_index is None and answer in options:
                answer_index = options.index(answer)
            category = str(obj.get("category", ""))
        item = QAItem(
            qa_id=_imported_qa_id(audio_id, fmt, question, answer),
            audio_id=audio_id,
            source=src,
            format=fmt,
            question=question,
            options=options,
            answer=answer,
            answer_index=answer_index,
            category=category,
            method=Method.IMPORTED,
            template_id=None,
            seed=0,
        )
        violations = validate_qa_item(item)
        if violations and fmt != QAFormat.CAPTION:
            raise ParseError("; ".join(violations), line_no=line_no)
        items.append(item)
    return items
