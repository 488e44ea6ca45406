"""Triplet data model and JSONL manifest I/O.

A manifest is UTF-8 JSONL, one triplet per line, fixed key order, so that
serialize(parse(line)) == line for canonical input and equal records always
produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

INSTRUCTION_ORIGINS = ("real-user", "synthetic", "inverted", "composite", "template")
TRIPLET_PROVENANCES = ("mined", "inverted", "composite", "augmented", "identity", "external")


class ManifestError(ValueError):
    """Malformed manifest content; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        super().__init__(where + message)


@dataclass(frozen=True)
class AssessorScore:
    """Two-criterion grade on [0, 5]: how well the edit follows the
    instruction, and how the result looks."""

    instruction_adherence: float
    aesthetic: float

    def __post_init__(self):
        for name, value in (
            ("instruction_adherence", self.instruction_adherence),
            ("aesthetic", self.aesthetic),
        ):
            v = float(value)
            if not (0.0 <= v <= 5.0):
                raise ValueError(f"{name} must be in [0, 5], got {value}")
            object.__setattr__(self, name, v)


@dataclass(frozen=True)
class InstructionRecord:
    id: str
    text: str
    origin: str = "synthetic"
    usage_count: int = 0

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("instruction text is empty")
        if self.origin not in INSTRUCTION_ORIGINS:
            raise ValueError(f"unknown instruction origin {self.origin!r}")
        if self.usage_count < 0:
            raise ValueError("usage_count must be non-negative")


@dataclass(frozen=True)
class TripletRecord:
    """One (source image, instruction, target image) unit with provenance."""

    id: str
    source_ref: str
    instruction: InstructionRecord
    target_ref: str
    provenance: str = "mined"
    scores: AssessorScore | None = None
    lineage: tuple[str, ...] = ()

    def __post_init__(self):
        if self.provenance not in TRIPLET_PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "lineage", tuple(self.lineage))

    def with_scores(self, scores: AssessorScore) -> "TripletRecord":
        return replace(self, scores=scores)


def triplet_id(source_ref: str, instruction_text: str, target_ref: str, provenance: str) -> str:
    """Stable 16-hex id derived from a triplet's identity fields."""
    h = hashlib.blake2b(digest_size=8)
    for part in (source_ref, instruction_text, target_ref, provenance):
        h.update(part.encode("utf-8"))
        h.update(b"\x1f")
    return h.hexdigest()


def make_triplet(
    source_ref: str,
    instruction: InstructionRecord,
    target_ref: str,
    provenance: str = "mined",
    scores: AssessorScore | None = None,
    lineage: tuple[str, ...] = (),
) -> TripletRecord:
    """TripletRecord with the id derived from its identity fields."""
    tid = triplet_id(source_ref, instruction.text, target_ref, provenance)
    return TripletRecord(tid, source_ref, instruction, target_ref, provenance, scores, lineage)


# --- validation --------------------------------------------------------------

def validate_triplet(
    record: TripletRecord, registry: dict[str, TripletRecord] | None = None
) -> list[str]:
    """List of invariant violations; empty iff the record is well formed.

    With a `registry` (id -> record) the lineage graph is walked and cycles
    through this record are reported; without one only self-reference is
    checkable.
    """
    violations = []
    if not record.instruction.text.strip():
        violations.append("instruction text empty")
    if record.instruction.origin not in INSTRUCTION_ORIGINS:
        violations.append(f"unknown instruction origin {record.instruction.origin!r}")
    if record.instruction.usage_count < 0:
        violations.append("usage_count negative")
    if record.provenance not in TRIPLET_PROVENANCES:
        violations.append(f"unknown provenance {record.provenance!r}")
    if record.source_ref == record.target_ref and record.provenance != "identity":
        violations.append("source_ref equals target_ref for non-identity provenance")
    if record.scores is not None:
        for name, value in (
            ("instruction_adherence", record.scores.instruction_adherence),
            ("aesthetic", record.scores.aesthetic),
        ):
            if not (0.0 <= value <= 5.0):
                violations.append(f"{name} out of range: {value}")

    if record.id in record.lineage:
        violations.append("lineage cycle: record lists itself as a parent")
    elif registry is not None:
        # depth-first walk through known parents
        seen = {record.id}
        stack = list(record.lineage)
        while stack:
            pid = stack.pop()
            if pid == record.id:
                violations.append("lineage cycle detected through ancestors")
                break
            if pid in seen:
                continue
            seen.add(pid)
            parent = registry.get(pid)
            if parent is not None:
                stack.extend(parent.lineage)
    return violations


# --- serialization ------------------------------------------------------------

def record_to_dict(record: TripletRecord) -> dict:
    d = {
        "id": record.id,
        "source_ref": record.source_ref,
        "instruction": {
            "id": record.instruction.id,
            "text": record.instruction.text,
            "origin": record.instruction.origin,
            "usage_count": record.instruction.usage_count,
        },
        "target_ref": record.target_ref,
        "provenance": record.provenance,
        "scores": None,
        "lineage": list(record.lineage),
    }
    if record.scores is not None:
        d["scores"] = {
            "instruction_adherence": record.scores.instruction_adherence,
            "aesthetic": record.scores.aesthetic,
        }
    return d


def record_from_dict(d: dict) -> TripletRecord:
    for key in ("id", "source_ref", "instruction", "target_ref", "provenance"):
        if key not in d:
            raise KeyError(key)
    instr = d["instruction"]
    for key in ("id", "text"):
        if key not in instr:
            raise KeyError(f"instruction.{key}")
    scores = None
    if d.get("scores") is not None:
        scores = AssessorScore(
            float(d["scores"]["instruction_adherence"]), float(d["scores"]["aesthetic"])
        )
    return TripletRecord(
        id=str(d["id"]),
        source_ref=str(d["source_ref"]),
        instruction=InstructionRecord(
            id=str(instr["id"]),
            text=str(instr["text"]),
            origin=str(instr.get("origin", "synthetic")),
            usage_count=int(instr.get("usage_count", 0)),
        ),
        target_ref=str(d["target_ref"]),
        provenance=str(d["provenance"]),
        scores=scores,
        lineage=tuple(str(p) for p in d.get("lineage", [])),
    )


def serialize_record(record: TripletRecord) -> str:
    return json.dumps(record_to_dict(record), ensure_ascii=False, separators=(",", ":"))


def read_manifest(path: str | Path) -> list[TripletRecord]:
    """Parse a JSONL manifest in file order; errors carry the line number."""
    records = []
    path = str(path)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"malformed JSON ({exc.msg})", lineno, path) from exc
            if not isinstance(payload, dict):
                raise ManifestError("line is not a JSON object", lineno, path)
            try:
                records.append(record_from_dict(payload))
            except KeyError as exc:
                raise ManifestError(f"missing required field {exc.args[0]!r}", lineno, path) from exc
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"invalid field value: {exc}", lineno, path) from exc
    return records


def write_manifest(records, path: str | Path) -> None:
    """Write records as canonical JSONL, atomically (temp file + rename)."""
    path = Path(path)
    payload = "".join(serialize_record(r) + "\n" for r in records)
    write_atomic_text(payload, path)


def write_atomic_text(text: str, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (global seed, ids, indices)."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "big") >> 1
