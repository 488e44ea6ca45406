"""Triplet bootstrapping: inversion, composite transitions, retry mining,
and instruction synthesis from segmentation annotations.

Given one anchor image x with N edited variants (t_i, y_i), inversion
produces the N reverse triplets (y_i, t_i^-1, x) and composition produces
the N(N-1) directed transitions (y_i, t_{i->j}, y_j), multiplying a mined
set without any extra generation.
"""

from __future__ import annotations

import json
import logging
import subprocess
from dataclasses import dataclass, field

import numpy as np

from .grounding import HookError
from .images import ImageBuffer
from .records import InstructionRecord, TripletRecord, derive_seed, make_triplet

log = logging.getLogger(__name__)

INVERT_TEMPLATE = "undo the previous edit: {t}; restore the original"
COMPOSE_TEMPLATE = "undo: {ti}; then: {tj}"


@dataclass(frozen=True)
class EditSet:
    """Anchor image ref plus its N edited variants."""

    anchor_ref: str
    edits: tuple[tuple[InstructionRecord, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "edits", tuple(self.edits))
        if len(self.edits) < 1:
            raise ValueError("an edit set needs at least one edit")
        refs = [ref for _, ref in self.edits]
        if self.anchor_ref in refs:
            raise ValueError("edited variant ref equals the anchor ref")
        if len(set(refs)) != len(refs):
            raise ValueError("edited variant refs must be distinct")


def base_triplets(edit_set: EditSet) -> list[TripletRecord]:
    """The N mined records (x, t_i, y_i) this set was built from."""
    return [
        make_triplet(edit_set.anchor_ref, instr, ref, "mined")
        for instr, ref in edit_set.edits
    ]


def invert_triplets(edit_set: EditSet, inverter=None) -> list[TripletRecord]:
    """Reverse triplets (y_i, t_i^-1, x), one per edit.

    `inverter` maps instruction text to its inverse; the default is the
    template form. A failing hook skips that edit (logged) and the rest
    proceed.
    """
    invert = inverter or (lambda text: INVERT_TEMPLATE.format(t=text))
    bases = base_triplets(edit_set)
    out = []
    for base, (instr, ref) in zip(bases, edit_set.edits):
        try:
            inv_text = invert(instr.text)
        except Exception as exc:
            log.warning("inverter failed for %r: %s; edit skipped", instr.id, exc)
            continue
        inv_instr = InstructionRecord(f"{instr.id}~inv", inv_text, origin="inverted")
        out.append(
            make_triplet(ref, inv_instr, edit_set.anchor_ref, "inverted", lineage=(base.id,))
        )
    return out


def composite_transitions(edit_set: EditSet, composer=None) -> list[TripletRecord]:
    """Directed transitions (y_i, t_{i->j}, y_j) for every ordered pair i != j.

    Emits exactly N(N-1) records; N < 2 yields an empty list. The default
    composer realizes "undo t_i, then apply t_j" as a template.
    """
    compose = composer or (lambda ti, tj: COMPOSE_TEMPLATE.format(ti=ti, tj=tj))
    bases = base_triplets(edit_set)
    out = []
    for i, (instr_i, ref_i) in enumerate(edit_set.edits):
        for j, (instr_j, ref_j) in enumerate(edit_set.edits):
            if i == j:
                continue
            try:
                text = compose(instr_i.text, instr_j.text)
            except Exception as exc:
                log.warning(
                    "composer failed for (%r, %r): %s; pair skipped", instr_i.id, instr_j.id, exc
                )
                continue
            instr = InstructionRecord(f"{instr_i.id}~to~{instr_j.id}", text, origin="composite")
            out.append(
                make_triplet(
                    ref_i, instr, ref_j, "composite", lineage=(bases[i].id, bases[j].id)
                )
            )
    return out


# --- retry mining -------------------------------------------------------------

@dataclass(frozen=True)
class AttemptRecord:
    attempt: int
    seed: int
    candidate_ref: str | None
    verdicts: tuple[tuple[str, bool], ...]
    passed: bool
    error: str | None = None


def mine_with_retries(
    pair,
    generator,
    validators,
    max_attempts: int = 5,
    global_seed: int = 0,
):
    """Generate-and-check loop for one (image_ref, instruction) pair.

    The generator is called with (source_ref, instruction, attempt, seed)
    and must return a candidate target ref; each validator is called with
    the candidate TripletRecord and returns truthy to pass. The first
    candidate passing every validator in order wins; a generator exception
    burns the attempt. Returns (record or None, attempt log).
    """
    if max_attempts < 1:
        raise ValueError("max_attempts must be >= 1")
    if not validators:
        raise ValueError("at least one validator is required")
    source_ref, instruction = pair
    if isinstance(instruction, str):
        instruction = InstructionRecord(f"instr-{derive_seed('instr', instruction):016x}", instruction)
    pair_id = f"{source_ref}::{instruction.id}"

    attempts: list[AttemptRecord] = []
    for attempt in range(1, max_attempts + 1):
        seed = derive_seed(global_seed, pair_id, attempt)
        try:
            candidate_ref = generator(source_ref, instruction.text, attempt, seed)
        except Exception as exc:
            attempts.append(AttemptRecord(attempt, seed, None, (), False, error=str(exc)))
            continue
        record = make_triplet(source_ref, instruction, str(candidate_ref), "mined")
        verdicts = []
        passed = True
        for vi, validator in enumerate(validators):
            name = getattr(validator, "__name__", f"validator_{vi}")
            ok = bool(validator(record))
            verdicts.append((name, ok))
            if not ok:
                passed = False
                break
        attempts.append(AttemptRecord(attempt, seed, record.target_ref, tuple(verdicts), passed))
        if passed:
            return record, attempts
    return None, attempts


class SubprocessHook:
    """Command-line hook speaking JSON on stdin/stdout.

    Request: {"source_ref", "instruction", "attempt", "seed"}; the reply is
    parsed JSON (a verdict or an artifact description). Non-zero exit or
    unparseable output raises HookError.
    """

    def __init__(self, argv, timeout: float = 60.0, single_flight: bool = False):
        self.argv = list(argv)
        self.timeout = timeout
        self.single_flight = single_flight

    def __call__(self, source_ref: str, instruction: str, attempt: int, seed: int):
        request = json.dumps(
            {"source_ref": source_ref, "instruction": instruction, "attempt": attempt, "seed": seed}
        )
        try:
            proc = subprocess.run(
                self.argv,
                input=request.encode("utf-8"),
                stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
                timeout=self.timeout,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise HookError(f"hook {self.argv[0]!r} transport failure: {exc}") from exc
        if proc.returncode != 0:
            raise HookError(
                f"hook {self.argv[0]!r} exited {proc.returncode}: {proc.stderr.decode(errors='replace')[:200]}"
            )
        try:
            return json.loads(proc.stdout.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise HookError(f"hook {self.argv[0]!r} returned invalid JSON") from exc


# --- segmentation-driven instructions ------------------------------------------

@dataclass(frozen=True)
class Instance:
    category: str
    box: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max
    mask: np.ndarray = field(repr=False)

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.box
        return (0.5 * (x0 + x1), 0.5 * (y0 + y1))

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.box
        return max(0.0, x1 - x0) * max(0.0, y1 - y0)


@dataclass(frozen=True)
class SegmentationAnnotation:
    image_ref: str
    width: int
    height: int
    instances: tuple[Instance, ...]

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        for inst in self.instances:
            x0, y0, x1, y1 = inst.box
            if not (0 <= x0 <= x1 <= self.width and 0 <= y0 <= y1 <= self.height):
                raise ValueError(f"box {inst.box} outside image bounds {self.width}x{self.height}")
            if inst.mask.shape != (self.height, self.width):
                raise ValueError(
                    f"mask shape {inst.mask.shape} != image dims ({self.height}, {self.width})"
                )


TIE_BAND_FRACTION = 0.05

KEEP_ONLY_TEMPLATE = "Preserve exclusively the {name}."
REMOVE_BACKGROUND_TEMPLATE = "Remove the background and all objects except the {name}."


def _spatial_qualifier(ann: SegmentationAnnotation, index: int) -> str:
    """Disambiguator for an instance among same-category siblings.

    Extremes along x win left/right, then extremes along y win top/bottom,
    with a 5%-of-dimension tie band; the strictly largest box wins
    "largest"; a non-extreme middle instance is called "middle".
    """
    target = ann.instances[index]
    siblings = [
        inst
        for i, inst in enumerate(ann.instances)
        if i != index and inst.category == target.category
    ]
    if not siblings:
        return ""
    cx, cy = target.center
    band_x = TIE_BAND_FRACTION * ann.width
    band_y = TIE_BAND_FRACTION * ann.height
    xs = [s.center[0] for s in siblings]
    if all(cx < x - band_x for x in xs):
        return "left"
    if all(cx > x + band_x for x in xs):
        return "right"
    ys = [s.center[1] for s in siblings]
    if all(cy < y - band_y for y in ys):
        return "top"
    if all(cy > y + band_y for y in ys):
        return "bottom"
    if all(target.area > s.area for s in siblings):
        return "largest"
    return "middle"


def generate_localization_instruction(
    ann: SegmentationAnnotation, selected, mode: str = "keep-only"
) -> str:
    """Instruction naming the selected instances with spatial qualifiers."""
    if mode not in ("keep-only", "remove-background"):
        raise ValueError(f"unknown mode {mode!r}")
    selected = list(selected)
    if not selected:
        raise ValueError("no instances selected")
    for idx in selected:
        if not (0 <= idx < len(ann.instances)):
            raise ValueError(f"instance index {idx} out of range")
    names = []
    for idx in selected:
        qualifier = _spatial_qualifier(ann, idx)
        category = ann.instances[idx].category
        names.append(f"{qualifier} {category}".strip())
    joined = names[0] if len(names) == 1 else ", ".join(names[:-1]) + " and the " + names[-1]
    template = KEEP_ONLY_TEMPLATE if mode == "keep-only" else REMOVE_BACKGROUND_TEMPLATE
    return template.format(name=joined)


def background_removal_target(image: ImageBuffer, masks, fill=(255, 255, 255)) -> ImageBuffer:
    """Copy pixels under the mask union verbatim; fill everything else."""
    union = np.zeros((image.height, image.width), dtype=bool)
    for mask in masks:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (image.height, image.width):
            raise ValueError(f"mask shape {mask.shape} != image dims")
        union |= mask
    fill_px = np.asarray(fill, dtype=np.uint8).reshape(1, 1, -1)
    if fill_px.shape[2] == 1 and image.channels == 3:
        fill_px = np.repeat(fill_px, 3, axis=2)
    if fill_px.shape[2] != image.channels:
        raise ValueError("fill color channel count does not match image")
    out = np.where(union[:, :, None], image.pixels, fill_px)
    return ImageBuffer(out.astype(np.uint8))


def composite_masked(original: ImageBuffer, edited: ImageBuffer, mask) -> ImageBuffer:
    """Hard composite: edited where mask is set, original elsewhere."""
    mask = np.asarray(mask, dtype=bool)
    if original.pixels.shape != edited.pixels.shape:
        raise ValueError("original and edited dims differ")
    if mask.shape != (original.height, original.width):
        raise ValueError("mask dims differ from images")
    out = np.where(mask[:, :, None], edited.pixels, original.pixels)
    return ImageBuffer(out.astype(np.uint8))


# --- COCO-style annotation ingestion --------------------------------------------

def decode_rle(counts, height: int, width: int) -> np.ndarray:
    """Uncompressed COCO RLE (column-major runs, starting with zeros)."""
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    value = False
    for run in counts:
        run = int(run)
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    if pos != height * width:
        raise ValueError(f"RLE covers {pos} pixels, expected {height * width}")
    return flat.reshape((width, height)).T


def rasterize_polygon(coords, height: int, width: int) -> np.ndarray:
    """Even-odd scanline fill of a flat [x0, y0, x1, y1, ...] polygon."""
    pts = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    mask = np.zeros((height, width), dtype=bool)
    if len(pts) < 3:
        return mask
    xs, ys = pts[:, 0], pts[:, 1]
    for row in range(height):
        yc = row + 0.5
        nodes = []
        j = len(pts) - 1
        for i in range(len(pts)):
            yi, yj = ys[i], ys[j]
            if (yi <= yc < yj) or (yj <= yc < yi):
                t = (yc - yi) / (yj - yi)
                nodes.append(xs[i] + t * (xs[j] - xs[i]))
            j = i
        nodes.sort()
        for a, b in zip(nodes[0::2], nodes[1::2]):
            lo = max(0, int(np.ceil(a - 0.5)))
            hi = min(width, int(np.floor(b - 0.5)) + 1)
            if hi > lo:
                mask[row, lo:hi] = True
    return mask


def load_coco_annotations(path) -> dict[str, SegmentationAnnotation]:
    """COCO-style JSON -> {image id: SegmentationAnnotation}.

    Supports bbox [x, y, w, h] plus either polygon segmentation or
    uncompressed RLE; an annotation without segmentation gets its bbox
    rasterized as the mask.
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    categories = {c["id"]: c["name"] for c in doc.get("categories", [])}
    images = {
        img["id"]: (str(img.get("file_name", img["id"])), int(img["width"]), int(img["height"]))
        for img in doc["images"]
    }
    grouped: dict = {img_id: [] for img_id in images}
    for ann in doc.get("annotations", []):
        img_id = ann["image_id"]
        ref, width, height = images[img_id]
        x, y, w, h = ann["bbox"]
        box = (float(x), float(y), float(x + w), float(y + h))
        seg = ann.get("segmentation")
        if isinstance(seg, dict):
            mask = decode_rle(seg["counts"], height, width)
        elif isinstance(seg, list) and seg:
            mask = np.zeros((height, width), dtype=bool)
            for poly in seg:
                mask |= rasterize_polygon(poly, height, width)
        else:
            mask = np.zeros((height, width), dtype=bool)
            mask[int(y) : int(np.ceil(y + h)), int(x) : int(np.ceil(x + w))] = True
        category = categories.get(ann.get("category_id"), str(ann.get("category_id")))
        grouped[img_id].append(Instance(category, box, mask))
    return {
        str(img_id): SegmentationAnnotation(ref, width, height, tuple(instances))
        for img_id, (ref, width, height) in images.items()
        for instances in [grouped[img_id]]
    }
