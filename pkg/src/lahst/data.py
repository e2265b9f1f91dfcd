"""Stay/note/chunk data model, preprocessing rules and cutoff machinery.

A corpus is a list of :class:`PatientStay` records, each a time-ordered
list of typed notes ending in exactly one discharge summary, plus the gold
label set describing the whole stay. Notes are tokenized into fixed-size
chunks, the model's temporal axis. Serialization is one JSON object per
stay, LF-terminated UTF-8 lines.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from datetime import date, datetime, timedelta

import numpy as np

log = logging.getLogger(__name__)

CATEGORIES = (
    "DischargeSummary",
    "ECG",
    "Echo",
    "Nursing",
    "Physician",
    "Radiology",
    "Respiratory",
    "Other",
)
CATEGORY_INDEX = {c: i for i, c in enumerate(CATEGORIES)}
DISCHARGE = "DischargeSummary"

DIAGNOSTIC_CATEGORIES = ("ECG", "Echo", "Radiology")


class ValidationError(ValueError):
    """Corpus record that violates the data contract."""


class StayRejected(ValidationError):
    """Stay excluded by a preprocessing rule; carries a reason code."""

    def __init__(self, stay_id: str, reason: str):
        super().__init__(f"stay {stay_id} rejected: {reason}")
        self.stay_id = stay_id
        self.reason = reason


@dataclass(frozen=True)
class Note:
    note_id: str
    category: str
    timestamp: datetime | date | None
    tokens: tuple

    def has_full_timestamp(self) -> bool:
        return isinstance(self.timestamp, datetime)


@dataclass(frozen=True)
class PatientStay:
    stay_id: str
    admission_time: datetime
    notes: tuple
    labels: frozenset

    def __len__(self) -> int:
        return len(self.notes)


@dataclass(frozen=True)
class Chunk:
    tokens: np.ndarray  # int64, 1..T entries
    note_id: str
    category: str
    timestamp: datetime


@dataclass
class ChunkSequence:
    """Ordered fixed-size token windows; position index is list order."""

    stay_id: str
    admission_time: datetime
    chunks: list

    def __len__(self) -> int:
        return len(self.chunks)

    def subset(self, indices) -> "ChunkSequence":
        return ChunkSequence(
            self.stay_id, self.admission_time, [self.chunks[i] for i in indices]
        )

    def window(self, start: int, stop: int) -> "ChunkSequence":
        return ChunkSequence(self.stay_id, self.admission_time, self.chunks[start:stop])

    def categories(self) -> list:
        return [c.category for c in self.chunks]

    def note_final_positions(self) -> list:
        """Index of the last chunk of each note, in note order."""
        out = []
        for i, chunk in enumerate(self.chunks):
            if i + 1 == len(self.chunks) or self.chunks[i + 1].note_id != chunk.note_id:
                out.append(i)
        return out


@dataclass(frozen=True)
class CutoffSpec:
    """Input-availability rule: hours since admission, pre-discharge, or all."""

    kind: str  # "hours" | "exclude_discharge" | "full"
    hours: float | None = None

    def __post_init__(self):
        if self.kind not in ("hours", "exclude_discharge", "full"):
            raise ValidationError(f"unknown cutoff kind {self.kind!r}")
        if self.kind == "hours":
            if self.hours is None or not self.hours > 0:
                raise ValidationError("hours cutoff requires hours > 0")

    @classmethod
    def hours_since_admission(cls, h: float) -> "CutoffSpec":
        return cls("hours", float(h))

    @classmethod
    def exclude_discharge(cls) -> "CutoffSpec":
        return cls("exclude_discharge")

    @classmethod
    def full_sequence(cls) -> "CutoffSpec":
        return cls("full")

    @classmethod
    def parse(cls, text: str) -> "CutoffSpec":
        t = text.strip().lower()
        if t in ("full", "full-sequence"):
            return cls.full_sequence()
        if t in ("excl-ds", "exclude-discharge", "excl_ds"):
            return cls.exclude_discharge()
        try:
            return cls.hours_since_admission(float(t))
        except ValueError:
            raise ValidationError(f"cannot parse cutoff {text!r}") from None

    @property
    def label(self) -> str:
        if self.kind == "hours":
            h = self.hours
            return f"{h:g}h"
        return "excl-ds" if self.kind == "exclude_discharge" else "full"


# ---------------------------------------------------------------------------
# preprocessing rules
# ---------------------------------------------------------------------------


def normalize_timestamps(stay: PatientStay) -> PatientStay:
    """Give every note a full datetime; date-only entries become 12:00:00.

    Notes with no date at all are a hard validation error naming the note.
    """
    fixed = []
    for note in stay.notes:
        ts = note.timestamp
        if isinstance(ts, datetime):
            fixed.append(note)
        elif isinstance(ts, date):
            fixed.append(replace(note, timestamp=datetime(ts.year, ts.month, ts.day, 12, 0, 0)))
        else:
            raise ValidationError(
                f"stay {stay.stay_id}: note {note.note_id} has no timestamp"
            )
    return replace(stay, notes=tuple(fixed))


def sort_notes(stay: PatientStay) -> PatientStay:
    """Ascending by timestamp; simultaneous notes ordered by note id."""
    ordered = sorted(stay.notes, key=lambda n: (n.timestamp, n.note_id))
    return replace(stay, notes=tuple(ordered))


def enforce_terminal_discharge(stay: PatientStay) -> PatientStay:
    """Drop notes after the first discharge summary; reject degenerate stays.

    Raises :class:`StayRejected` with reason "no-discharge-summary" when the
    stay has none, or "discharge-only" when nothing else remains.
    """
    ds_positions = [i for i, n in enumerate(stay.notes) if n.category == DISCHARGE]
    if not ds_positions:
        raise StayRejected(stay.stay_id, "no-discharge-summary")
    kept = stay.notes[: ds_positions[0] + 1]
    if len(kept) < 2:
        raise StayRejected(stay.stay_id, "discharge-only")
    return replace(stay, notes=tuple(kept))


def preprocess_stay(stay: PatientStay) -> PatientStay:
    """normalize -> sort -> terminal-discharge rule, in that order."""
    return enforce_terminal_discharge(sort_notes(normalize_timestamps(stay)))


def validate_stay(stay: PatientStay, vocab_size: int | None = None) -> None:
    """Assert the post-preprocessing invariants; raise ValidationError if broken."""
    if not stay.notes:
        raise ValidationError(f"stay {stay.stay_id}: no notes")
    keys = [(n.timestamp, n.note_id) for n in stay.notes]
    if keys != sorted(keys):
        raise ValidationError(f"stay {stay.stay_id}: notes out of order")
    for n in stay.notes:
        if not n.has_full_timestamp():
            raise ValidationError(f"stay {stay.stay_id}: note {n.note_id} lacks a full timestamp")
        if n.category not in CATEGORY_INDEX:
            raise ValidationError(f"stay {stay.stay_id}: unknown category {n.category!r}")
        if vocab_size is not None:
            for t in n.tokens:
                if not 0 <= t < vocab_size:
                    raise ValidationError(
                        f"stay {stay.stay_id}: token id {t} outside vocabulary of size {vocab_size}"
                    )
    ds = [n for n in stay.notes if n.category == DISCHARGE]
    if len(ds) != 1:
        raise ValidationError(f"stay {stay.stay_id}: expected exactly one discharge summary, got {len(ds)}")
    if stay.notes[-1].category != DISCHARGE:
        raise ValidationError(f"stay {stay.stay_id}: discharge summary is not the final note")
    if len(stay.notes) < 2:
        raise ValidationError(f"stay {stay.stay_id}: discharge summary is the only note")


# ---------------------------------------------------------------------------
# chunking and cutoffs
# ---------------------------------------------------------------------------


def chunk_stay(stay: PatientStay, chunk_tokens: int) -> ChunkSequence:
    """Split each note into ceil(len/T) windows of at most T tokens.

    Window order preserves note order and, within a note, token order.
    Empty notes contribute no chunks.
    """
    if chunk_tokens < 8:
        raise ValidationError(f"chunk size must be >= 8 tokens, got {chunk_tokens}")
    chunks = []
    for note in stay.notes:
        toks = np.asarray(note.tokens, dtype=np.int64)
        if toks.size == 0:
            log.debug("stay %s: note %s is empty, no chunks", stay.stay_id, note.note_id)
            continue
        for start in range(0, toks.size, chunk_tokens):
            chunks.append(
                Chunk(
                    tokens=toks[start : start + chunk_tokens],
                    note_id=note.note_id,
                    category=note.category,
                    timestamp=note.timestamp,
                )
            )
    return ChunkSequence(stay.stay_id, stay.admission_time, chunks)


def truncate_to_cutoff(seq: ChunkSequence, cutoff: CutoffSpec) -> ChunkSequence:
    """Restrict a chunk sequence to what the cutoff makes available."""
    if cutoff.kind == "full":
        return seq
    if cutoff.kind == "exclude_discharge":
        kept = [c for c in seq.chunks if c.category != DISCHARGE]
    else:
        limit = seq.admission_time + timedelta(hours=cutoff.hours)
        kept = [c for c in seq.chunks if c.timestamp <= limit]
    return ChunkSequence(seq.stay_id, seq.admission_time, kept)


def volume_percentile_cutoffs(stays, fractions, weight_by_words: bool = False):
    """Hours since admission below which a given fraction of all notes falls.

    Pools every note's elapsed time across the corpus and takes the linear
    interpolation between order statistics. With ``weight_by_words`` each
    note counts proportionally to its token count instead of once.
    """
    if not stays:
        raise ValidationError("empty corpus")
    for f in fractions:
        if not 0.0 < f < 1.0:
            raise ValidationError(f"percentile fraction {f} outside (0, 1)")
    elapsed = []
    weights = []
    for stay in stays:
        for note in stay.notes:
            dt = (note.timestamp - stay.admission_time).total_seconds() / 3600.0
            elapsed.append(dt)
            weights.append(len(note.tokens))
    elapsed = np.asarray(elapsed, dtype=np.float64)
    if not weight_by_words:
        return [float(np.quantile(elapsed, f, method="linear")) for f in fractions]

    w = np.asarray(weights, dtype=np.float64)
    order = np.argsort(elapsed, kind="stable")
    x = elapsed[order]
    cw = np.cumsum(w[order])
    total = cw[-1]
    # cumulative-weight positions of the order statistics, normalized like
    # the unweighted linear method (0 at the first point, 1 at the last)
    pos = (cw - w[order]) / max(total - w[order][-1], 1e-300)
    out = []
    for f in fractions:
        out.append(float(np.interp(f, pos, x)))
    return out


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------


def stay_to_record(stay: PatientStay) -> dict:
    return {
        "stay_id": stay.stay_id,
        "admission_time": stay.admission_time.isoformat(),
        "labels": sorted(int(l) for l in stay.labels),
        "notes": [
            {
                "note_id": n.note_id,
                "category": n.category,
                "timestamp": n.timestamp.isoformat() if n.timestamp is not None else None,
                "tokens": [int(t) for t in n.tokens],
            }
            for n in stay.notes
        ],
    }


def _parse_timestamp(raw):
    if raw is None:
        return None
    if len(raw) == 10:  # date-only ISO form
        return date.fromisoformat(raw)
    return datetime.fromisoformat(raw)


def stay_from_record(rec: dict) -> PatientStay:
    notes = tuple(
        Note(
            note_id=n["note_id"],
            category=n["category"],
            timestamp=_parse_timestamp(n.get("timestamp")),
            tokens=tuple(int(t) for t in n["tokens"]),
        )
        for n in rec["notes"]
    )
    return PatientStay(
        stay_id=rec["stay_id"],
        admission_time=datetime.fromisoformat(rec["admission_time"]),
        notes=notes,
        labels=frozenset(int(l) for l in rec["labels"]),
    )


def write_corpus(stays, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for stay in stays:
            f.write(json.dumps(stay_to_record(stay), sort_keys=True))
            f.write("\n")


def load_corpus(path, preprocess: bool = True):
    """Read a JSONL corpus; returns (stays, rejections).

    With ``preprocess`` the timestamp-defaulting and terminal-discharge
    rules are applied; rejected stays are returned as (stay_id, reason)
    pairs instead of raising.
    """
    stays = []
    rejections = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            stay = stay_from_record(json.loads(line))
            if preprocess:
                try:
                    stay = preprocess_stay(stay)
                except StayRejected as exc:
                    rejections.append((exc.stay_id, exc.reason))
                    continue
            stays.append(stay)
    return stays, rejections
