"""Config-driven pipeline stages with atomic outputs and resumability.

A pipeline is an ordered list of named stages; each stage reads manifests,
applies one operation, and writes its output manifest atomically (temp file
plus rename). Reruns with identical config and inputs are byte-identical;
`resume` skips stages whose recorded input fingerprints still match.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import augment, bootstrap, filters, grounding, preference
from .images import DirectoryStore
from .records import (
    AssessorScore,
    InstructionRecord,
    ManifestError,
    TripletRecord,
    derive_seed,
    read_manifest,
    serialize_record,
    validate_triplet,
    write_atomic_text,
)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid pipeline configuration."""


class StageError(RuntimeError):
    """A stage failed; completed outputs are preserved."""


@dataclass(frozen=True)
class StageSpec:
    name: str
    operation: str
    parameters: dict = field(default_factory=dict)
    inputs: tuple[str, ...] = ()
    output: str = ""


@dataclass(frozen=True)
class PipelineConfig:
    stages: tuple[StageSpec, ...]
    global_seed: int = 0
    parallelism: int = 1

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls.from_dict(doc)

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        stages = tuple(
            StageSpec(
                name=str(s["name"]),
                operation=str(s["operation"]),
                parameters=dict(s.get("parameters", {})),
                inputs=tuple(str(i) for i in s.get("inputs", [])),
                output=str(s.get("output", "")),
            )
            for s in doc.get("stages", [])
        )
        return cls(
            stages=stages,
            global_seed=int(doc.get("global_seed", 0)),
            parallelism=int(doc.get("parallelism", 1)),
        )


def validate_config(config: PipelineConfig) -> None:
    names = [s.name for s in config.stages]
    if len(set(names)) != len(names):
        raise ConfigError("stage names must be unique")
    produced: set[str] = set()
    later_outputs = {s.output for s in config.stages if s.output}
    for stage in config.stages:
        if stage.operation not in STAGE_OPS:
            raise ConfigError(f"stage {stage.name!r}: unknown operation {stage.operation!r}")
        if not stage.output:
            raise ConfigError(f"stage {stage.name!r} has no output path")
        later_outputs.discard(stage.output)
        for inp in stage.inputs:
            if inp in produced:
                continue
            if inp in later_outputs or inp == stage.output:
                raise ConfigError(
                    f"stage {stage.name!r} input {inp!r} is produced by a later stage (cycle)"
                )
            if not Path(inp).exists():
                raise ConfigError(f"stage {stage.name!r} input {inp!r} does not exist")
        produced.add(stage.output)


@dataclass
class StageReport:
    name: str
    counts: dict = field(default_factory=lambda: {"in": 0, "kept": 0, "removed": 0, "errored": 0})
    emitted: int = 0
    wall_time: float = 0.0
    reasons: dict = field(default_factory=dict)
    skipped: bool = False

    def check(self):
        c = self.counts
        assert c["in"] == c["kept"] + c["removed"] + c["errored"], "count invariant broken"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "counts": dict(self.counts),
            "emitted": self.emitted,
            "wall_time": self.wall_time,
            "reasons": dict(self.reasons),
            "skipped": self.skipped,
        }


@dataclass
class StageContext:
    spec: StageSpec
    seed: int
    workers: int


@dataclass
class StageOutcome:
    lines: list[str]
    counts: dict
    reasons: Counter
    emitted: int


def _map_records(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _outcome_from_records(records, counts, reasons) -> StageOutcome:
    lines = [serialize_record(r) for r in records]
    return StageOutcome(lines, counts, reasons, len(records))


# --- stage operations -----------------------------------------------------------

def _load_instruction_corpus(path) -> list[InstructionRecord]:
    corpus = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                corpus.append(
                    InstructionRecord(
                        str(row["id"]), str(row["text"]), str(row.get("origin", "real-user"))
                    )
                )
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise ManifestError(f"bad corpus row: {exc}", lineno, str(path)) from exc
    return corpus


def _stage_ground(ctx: StageContext) -> StageOutcome:
    params = ctx.spec.parameters
    records = read_manifest(ctx.spec.inputs[0])
    corpus = _load_instruction_corpus(ctx.spec.inputs[1])
    dim = int(params.get("dim", grounding.DEFAULT_DIM))
    sidecar = params.get("embeddings")
    embedder = None
    if sidecar:
        # sidecar vectors replace the trigram stand-in; it must cover both
        # the corpus ids and the query instruction ids
        vectors: dict[str, np.ndarray] = {}
        with open(sidecar, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    vectors[str(row["id"])] = np.asarray(row["vector"], dtype=np.float64)
        missing = [c.id for c in corpus if c.id not in vectors]
        if missing:
            raise ConfigError(f"embedding sidecar lacks corpus ids: {missing[:5]}")
        index = grounding.VectorIndex([(c.id, vectors[c.id]) for c in corpus])
        embedder = lambda record: vectors[record.id]
    else:
        index = grounding.VectorIndex.from_texts(corpus, dim)
    corpus_by_id = {c.id: c for c in corpus}

    artificial = [r.instruction for r in records]
    results, dropped = grounding.ground_stream(
        artificial,
        index,
        embedder=embedder,
        topk=int(params.get("topk", grounding.DEFAULT_TOPK)),
        tau_sim=float(params.get("tau_sim", grounding.DEFAULT_TAU_SIM)),
        cap=int(params.get("cap", grounding.DEFAULT_CAP)),
        seed=ctx.seed,
    )
    by_artificial = {res.artificial_id: res for res in results}
    drop_reasons = dict(dropped)

    usage: Counter = Counter()
    out, reasons = [], Counter()
    kept = removed = 0
    for record in records:
        res = by_artificial.get(record.instruction.id)
        if res is None:
            removed += 1
            reasons[drop_reasons.get(record.instruction.id, "ungrounded")] += 1
            continue
        user = corpus_by_id[res.chosen_user_id]
        usage[user.id] += 1
        out.append(
            replace(
                record,
                instruction=InstructionRecord(
                    user.id, user.text, "real-user", usage_count=usage[user.id]
                ),
            )
        )
        kept += 1
    counts = {"in": len(records), "kept": kept, "removed": removed, "errored": 0}
    return _outcome_from_records(out, counts, reasons)


def _stage_bootstrap(ctx: StageContext) -> StageOutcome:
    params = ctx.spec.parameters
    records = read_manifest(ctx.spec.inputs[0])
    include_base = bool(params.get("include_base", True))
    do_invert = bool(params.get("invert", True))
    do_composite = bool(params.get("composite", True))

    groups: dict[str, list[TripletRecord]] = {}
    for record in records:
        groups.setdefault(record.source_ref, []).append(record)

    out = list(records) if include_base else []
    reasons: Counter = Counter()
    errored = 0
    for source_ref, group in groups.items():
        try:
            edit_set = bootstrap.EditSet(
                source_ref, tuple((r.instruction, r.target_ref) for r in group)
            )
        except ValueError as exc:
            errored += len(group)
            reasons[f"bad-edit-set: {exc}"] += 1
            continue
        if do_invert:
            out.extend(bootstrap.invert_triplets(edit_set))
        if do_composite:
            out.extend(bootstrap.composite_transitions(edit_set))
    counts = {
        "in": len(records),
        "kept": len(records) - errored,
        "removed": 0,
        "errored": errored,
    }
    return _outcome_from_records(out, counts, reasons)


def stub_scores(record_id: str, seed: int) -> AssessorScore:
    """Deterministic assessor stand-in keyed on (seed, record id)."""
    rng = np.random.default_rng(derive_seed(seed, "score", record_id))
    return AssessorScore(
        round(float(rng.uniform(3.0, 5.0)), 2), round(float(rng.uniform(3.0, 5.0)), 2)
    )


def _stage_filter_assessor(ctx: StageContext) -> StageOutcome:
    params = ctx.spec.parameters
    records = read_manifest(ctx.spec.inputs[0])
    if params.get("scorer") == "stub":
        records = [
            r if r.scores is not None else r.with_scores(stub_scores(r.id, ctx.seed))
            for r in records
        ]
    tau = float(params.get("tau", filters.DEFAULT_ASSESSOR_THRESHOLD))
    floor = params.get("aesthetic_floor")
    kept, removed = filters.assessor_threshold_filter(
        records, tau, None if floor is None else float(floor)
    )
    reasons = Counter(reason for _, reason in removed)
    counts = {"in": len(records), "kept": len(kept), "removed": len(removed), "errored": 0}
    return _outcome_from_records(kept, counts, reasons)


def _load_face_sidecar(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return {
        ref: [filters.BoundingBox(*map(float, box)) for box in boxes]
        for ref, boxes in doc.items()
    }


def _stage_filter_face_iou(ctx: StageContext) -> StageOutcome:
    params = ctx.spec.parameters
    records = read_manifest(ctx.spec.inputs[0])
    faces = _load_face_sidecar(params["faces"])
    threshold = float(params.get("threshold", filters.DEFAULT_FACE_IOU_THRESHOLD))
    kept, reasons = [], Counter()
    removed = 0
    for record in records:
        verdict = filters.face_iou_filter(
            faces.get(record.source_ref, []), faces.get(record.target_ref, []), threshold
        )
        if verdict.keep:
            kept.append(record)
        else:
            removed += 1
            reasons[verdict.detail] += 1
    counts = {"in": len(records), "kept": len(kept), "removed": removed, "errored": 0}
    return _outcome_from_records(kept, counts, reasons)


def _stage_augment_mirror(ctx: StageContext) -> StageOutcome:
    params = ctx.spec.parameters
    records = read_manifest(ctx.spec.inputs[0])
    store = DirectoryStore(params["images_root"], params.get("format", "png"))
    blocklist = (
        augment.DirectionalBlocklist(tuple(params["blocklist"]))
        if params.get("blocklist")
        else augment.DirectionalBlocklist()
    )
    keep_originals = bool(params.get("keep_originals", True))

    def mirror_one(record):
        try:
            return augment.conditional_mirror(record, blocklist, store)
        except KeyError as exc:
            return exc

    mirrored = _map_records(mirror_one, records, ctx.workers)
    out = list(records) if keep_originals else []
    reasons: Counter = Counter()
    errored = 0
    for result in mirrored:
        if isinstance(result, KeyError):
            errored += 1
            reasons["missing-image"] += 1
        elif result is None:
            reasons["directional-prompt"] += 1
        else:
            out.append(result)
    counts = {
        "in": len(records),
        "kept": len(records) - errored,
        "removed": 0,
        "errored": errored,
    }
    return _outcome_from_records(out, counts, reasons)


def _stage_augment_identity(ctx: StageContext) -> StageOutcome:
    params = ctx.spec.parameters
    records = read_manifest(ctx.spec.inputs[0])
    store = DirectoryStore(params["images_root"], params.get("format", "png"))
    unique_refs = []
    seen: set[str] = set()
    for record in records:
        if record.source_ref not in seen:
            seen.add(record.source_ref)
            unique_refs.append(record.source_ref)

    def identity_one(ref):
        image = store.resolve(ref)
        return augment.identity_triplet(image, derive_seed(ctx.seed, "identity", ref), store)

    results = _map_records(lambda ref: _catch(identity_one, ref), unique_refs, ctx.workers)
    out = list(records)
    reasons: Counter = Counter()
    for result in results:
        if isinstance(result, Exception):
            # a missing source image skips that identity; inputs pass through
            reasons["identity-skipped"] += 1
        else:
            out.append(result)
    counts = {"in": len(records), "kept": len(records), "removed": 0, "errored": 0}
    return _outcome_from_records(out, counts, reasons)


def _catch(fn, *args):
    try:
        return fn(*args)
    except Exception as exc:  # per-record isolation
        return exc


def _stage_augment_photometric(ctx: StageContext) -> StageOutcome:
    params = ctx.spec.parameters
    records = read_manifest(ctx.spec.inputs[0])
    store = DirectoryStore(params["images_root"], params.get("format", "png"))
    ops = params.get("ops", ["blur"])
    bad = [op for op in ops if op not in augment.PHOTOMETRIC_OPS]
    if bad:
        raise ConfigError(f"non-photometric ops in augment stage: {bad}")

    def augment_one(record):
        produced = []
        image = store.resolve(record.source_ref)
        for op in ops:
            spec = augment.AugmentationSpec(op, seed=derive_seed(ctx.seed, record.id, op))
            fwd, rev = augment.make_bidirectional_pair(image, spec, store)
            produced.extend(
                [replace(fwd, lineage=(record.id,)), replace(rev, lineage=(record.id,))]
            )
        return produced

    results = _map_records(lambda r: _catch(augment_one, r), records, ctx.workers)
    out = list(records)
    reasons: Counter = Counter()
    errored = 0
    for result in results:
        if isinstance(result, Exception):
            errored += 1
            reasons[type(result).__name__] += 1
        else:
            out.extend(result)
    counts = {
        "in": len(records),
        "kept": len(records) - errored,
        "removed": 0,
        "errored": errored,
    }
    return _outcome_from_records(out, counts, reasons)


def _stage_pair_dominance(ctx: StageContext) -> StageOutcome:
    params = ctx.spec.parameters
    records = read_manifest(ctx.spec.inputs[0])
    min_gap = float(params.get("min_gap", 0.0))

    contexts: dict[str, list[TripletRecord]] = {}
    unscored = 0
    for record in records:
        if record.scores is None:
            unscored += 1
            continue
        key = hashlib.blake2b(
            f"{record.source_ref}\x1f{record.instruction.text}".encode("utf-8"), digest_size=8
        ).hexdigest()
        contexts.setdefault(key, []).append(record)

    lines = []
    for context_id in sorted(contexts):
        group = contexts[context_id]
        if len(group) < 2:
            continue
        candidates = [
            preference.ScoredCandidate(r.id, r.scores, "on-policy") for r in group
        ]
        for pair in preference.strict_dominance_pairs(candidates, context_id):
            if min_gap > 0.0:
                w = next(r for r in group if r.id == pair.winner_id)
                l = next(r for r in group if r.id == pair.loser_id)
                if (
                    w.scores.instruction_adherence - l.scores.instruction_adherence < min_gap
                    or w.scores.aesthetic - l.scores.aesthetic < min_gap
                ):
                    continue
            lines.append(
                json.dumps(
                    {
                        "context_id": pair.context_id,
                        "winner_id": pair.winner_id,
                        "loser_id": pair.loser_id,
                        "origin": pair.origin,
                    },
                    ensure_ascii=False,
                    separators=(",", ":"),
                )
            )
    reasons = Counter()
    if unscored:
        reasons["unscored"] = unscored
    counts = {
        "in": len(records),
        "kept": len(records) - unscored,
        "removed": unscored,
        "errored": 0,
    }
    return StageOutcome(lines, counts, reasons, len(lines))


def _stage_cluster_report(ctx: StageContext) -> StageOutcome:
    params = ctx.spec.parameters
    records = read_manifest(ctx.spec.inputs[0])
    dim = int(params.get("dim", grounding.DEFAULT_DIM))
    k = int(params.get("clusters", grounding.DEFAULT_CLUSTERS))
    texts = [(r.instruction.id, r.instruction.text) for r in records]
    if len(texts) < k:
        raise StageError(f"{len(texts)} instruction(s) cannot form {k} clusters")
    embeddings = np.stack([grounding.embed_text(t, dim) for _, t in texts])
    assignments, centroids = grounding.cluster_instructions(embeddings, k, ctx.seed)
    lines = []
    for cluster_id in range(k):
        member_ids = [texts[i][0] for i in range(len(texts)) if assignments[i] == cluster_id]
        lines.append(
            json.dumps(
                {
                    "cluster_id": cluster_id,
                    "member_ids": member_ids,
                    "centroid": [round(float(v), 9) for v in centroids[cluster_id]],
                },
                ensure_ascii=False,
                separators=(",", ":"),
            )
        )
    counts = {"in": len(records), "kept": len(records), "removed": 0, "errored": 0}
    return StageOutcome(lines, counts, Counter(), len(lines))


STAGE_OPS = {
    "ground": _stage_ground,
    "bootstrap": _stage_bootstrap,
    "filter-assessor": _stage_filter_assessor,
    "filter-face-iou": _stage_filter_face_iou,
    "augment-mirror": _stage_augment_mirror,
    "augment-identity": _stage_augment_identity,
    "augment-photometric": _stage_augment_photometric,
    "pair-dominance": _stage_pair_dominance,
    "cluster-report": _stage_cluster_report,
}


# --- runner ---------------------------------------------------------------------

def _file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fingerprint(stage: StageSpec, seed: int) -> dict:
    return {
        "operation": stage.operation,
        "parameters": json.dumps(stage.parameters, sort_keys=True),
        "seed": seed,
        "inputs": {inp: _file_sha256(inp) for inp in stage.inputs},
    }


def run_pipeline(
    config: PipelineConfig, resume: bool = False, workers: int | None = None
) -> list[StageReport]:
    """Execute the stages in order; returns one report per stage.

    Outputs are written atomically; a failing stage halts the pipeline and
    leaves earlier outputs in place. With resume=True, a stage whose output
    exists and whose recorded fingerprint still matches is skipped.
    """
    validate_config(config)
    workers = config.parallelism if workers is None else workers
    reports = []
    for stage in config.stages:
        fp = _fingerprint(stage, config.global_seed)
        fp_path = Path(stage.output + ".fp")
        if resume and Path(stage.output).exists() and fp_path.exists():
            try:
                recorded = json.loads(fp_path.read_text(encoding="utf-8"))
            except json.JSONDecodeError:
                recorded = {}
            if recorded.get("fingerprint") == fp:
                report = StageReport(name=stage.name, skipped=True)
                if isinstance(recorded.get("report"), dict):
                    rep = recorded["report"]
                    report.counts = rep.get("counts", report.counts)
                    report.emitted = rep.get("emitted", 0)
                    report.reasons = rep.get("reasons", {})
                reports.append(report)
                log.info("stage %s: skipped (fingerprint match)", stage.name)
                continue
        start = time.perf_counter()
        ctx = StageContext(spec=stage, seed=config.global_seed, workers=workers)
        try:
            outcome = STAGE_OPS[stage.operation](ctx)
        except (ManifestError, ConfigError):
            raise
        except Exception as exc:
            raise StageError(f"stage {stage.name!r} failed: {exc}") from exc
        write_atomic_text("".join(line + "\n" for line in outcome.lines), stage.output)
        report = StageReport(
            name=stage.name,
            counts=outcome.counts,
            emitted=outcome.emitted,
            wall_time=time.perf_counter() - start,
            reasons=dict(outcome.reasons),
        )
        report.check()
        write_atomic_text(
            json.dumps({"fingerprint": fp, "report": report.to_dict()}, indent=1),
            fp_path,
        )
        reports.append(report)
        log.info(
            "stage %s: in=%d kept=%d removed=%d errored=%d emitted=%d (%.2fs)",
            stage.name,
            report.counts["in"],
            report.counts["kept"],
            report.counts["removed"],
            report.counts["errored"],
            report.emitted,
            report.wall_time,
        )
    return reports


# --- stats ----------------------------------------------------------------------

@dataclass
class StatsSummary:
    total: int
    by_provenance: dict
    by_origin: dict
    score_histogram: dict
    duplicate_groups: int
    duplicates: list

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "by_provenance": self.by_provenance,
            "by_origin": self.by_origin,
            "score_histogram": self.score_histogram,
            "duplicate_groups": self.duplicate_groups,
            "duplicates": self.duplicates,
        }


def stats(path) -> StatsSummary:
    """Manifest summary: provenance/origin counts, score histograms,
    duplicate (source, instruction, target) detection."""
    records = read_manifest(path)
    by_provenance: Counter = Counter(r.provenance for r in records)
    by_origin: Counter = Counter(r.instruction.origin for r in records)

    histogram: dict[str, dict[str, int]] = {}
    scored = [r for r in records if r.scores is not None]
    if scored:
        bins = np.arange(0.0, 5.5, 0.5)
        for criterion in ("instruction_adherence", "aesthetic"):
            values = [getattr(r.scores, criterion) for r in scored]
            hist, _ = np.histogram(values, bins=bins)
            histogram[criterion] = {
                f"[{bins[i]:.1f},{bins[i + 1]:.1f})": int(hist[i]) for i in range(len(hist))
            }

    groups: Counter = Counter(
        (r.source_ref, r.instruction.text, r.target_ref) for r in records
    )
    duplicates = sorted(
        f"{src}|{text}|{tgt}" for (src, text, tgt), n in groups.items() if n > 1
    )
    return StatsSummary(
        total=len(records),
        by_provenance=dict(by_provenance),
        by_origin=dict(by_origin),
        score_histogram=histogram,
        duplicate_groups=len(duplicates),
        duplicates=duplicates,
    )


def validate_manifest(path) -> dict:
    """Validate every record; returns {'records': n, 'violations': [...]}."""
    records = read_manifest(path)
    registry = {r.id: r for r in records}
    violations = []
    for record in records:
        for violation in validate_triplet(record, registry):
            violations.append({"id": record.id, "violation": violation})
    return {"records": len(records), "violations": violations}
