"""Mixed-resolution batch planning and edit/T2I task mixing.

Items are bucketed by exact dimensions (never resized), each bucket gets
the largest batch size whose total pixels fit the budget, and task mixing
draws from two streams at a normalized ratio with the fixed prompt
templates for generation and editing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

RESOLUTION_RANGE = (860, 2200)
MAX_ASPECT = 6.0
T2I_TEMPLATE = "generate the image by description: {prompt}"
EDIT_TEMPLATE = "what will this image be like if {prompt}"


def sample_resolution(
    seed: int,
    lo: int = RESOLUTION_RANGE[0],
    hi: int = RESOLUTION_RANGE[1],
    max_aspect: float = MAX_ASPECT,
    multiple: int = 4,
    max_retries: int = 1000,
) -> tuple[int, int]:
    """Draw (width, height) uniformly from [lo, hi], rounded to multiples
    of `multiple`, resampling until the aspect ratio is within
    [1/max_aspect, max_aspect].

    The default range cannot violate the aspect bound (hi/lo < 6); the
    retry loop guards custom ranges and errors out when exhausted.
    """
    rng = np.random.default_rng(seed)
    for _ in range(max_retries):
        w = int(np.clip(round(rng.uniform(lo, hi) / multiple) * multiple, lo, hi))
        h = int(np.clip(round(rng.uniform(lo, hi) / multiple) * multiple, lo, hi))
        aspect = w / h
        if 1.0 / max_aspect <= aspect <= max_aspect:
            return w, h
    raise RuntimeError(f"no aspect-valid resolution in [{lo}, {hi}] after {max_retries} draws")


@dataclass(frozen=True)
class ResolutionBucket:
    width: int
    height: int
    items: tuple[str, ...]


@dataclass(frozen=True)
class Batch:
    width: int
    height: int
    ids: tuple[str, ...]
    tags: tuple[str, ...] = ()


@dataclass(frozen=True)
class BatchPlan:
    batches: tuple[Batch, ...]
    pixel_budget: int

    def all_ids(self) -> list[str]:
        return [i for b in self.batches for i in b.ids]


def plan_batches(items, pixel_budget: int, seed: int = 0, tags: dict | None = None) -> BatchPlan:
    """Partition (id, width, height) items into dimension-exact batches.

    Per bucket, batch_size = floor(pixel_budget / (w * h)); batches are
    emitted in a seeded shuffled order and every item appears exactly
    once. An item larger than the budget is an error naming the item.
    """
    if pixel_budget < 1:
        raise ValueError("pixel budget must be positive")
    buckets: dict[tuple[int, int], list[str]] = {}
    for item_id, w, h in items:
        w, h = int(w), int(h)
        if w * h > pixel_budget:
            raise ValueError(
                f"item {item_id!r} ({w}x{h} = {w * h} px) exceeds pixel budget {pixel_budget}"
            )
        buckets.setdefault((w, h), []).append(str(item_id))

    batches = []
    for (w, h), ids in buckets.items():
        size = pixel_budget // (w * h)
        for i in range(0, len(ids), size):
            chunk = tuple(ids[i : i + size])
            batch_tags = tuple(tags[x] for x in chunk) if tags else ()
            batches.append(Batch(w, h, chunk, batch_tags))

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(batches))
    return BatchPlan(tuple(batches[i] for i in order), pixel_budget)


def write_plan(plan: BatchPlan, path) -> None:
    """Plan file: one JSON batch {dims, ids, tags} per line."""
    from .records import write_atomic_text

    lines = []
    for b in plan.batches:
        lines.append(
            json.dumps(
                {"dims": [b.width, b.height], "ids": list(b.ids), "tags": list(b.tags)},
                ensure_ascii=False,
                separators=(",", ":"),
            )
        )
    write_atomic_text("".join(line + "\n" for line in lines), path)


@dataclass(frozen=True)
class MixRatio:
    """Relative shares of text-to-image and editing samples."""

    t2i_percent: float
    edit_percent: float

    def __post_init__(self):
        if self.t2i_percent < 0 or self.edit_percent < 0:
            raise ValueError("shares must be non-negative")
        if self.t2i_percent + self.edit_percent <= 0:
            raise ValueError("shares must not both be zero")

    @property
    def t2i_share(self) -> float:
        return self.t2i_percent / (self.t2i_percent + self.edit_percent)


@dataclass(frozen=True)
class TaskAssignment:
    id: str
    task: str  # "t2i" | "edit"
    template: str
    black_conditioning: bool


class StreamExhausted(RuntimeError):
    def __init__(self, task: str, missing: int):
        self.task = task
        self.missing = missing
        super().__init__(f"{task} stream exhausted: {missing} more item(s) needed")


def mix_tasks(edit_ids, t2i_ids, ratio: MixRatio, count: int, seed: int = 0) -> list[TaskAssignment]:
    """Draw `count` tagged items: round(count * t2i_share) from the T2I
    stream, the rest from the edit stream, interleaved in seeded order.

    T2I entries carry the generation template and the black-conditioning
    flag; edit entries carry the editing template.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    t2i_count = round(count * ratio.t2i_share)
    tags = ["t2i"] * t2i_count + ["edit"] * (count - t2i_count)
    rng = np.random.default_rng(seed)
    rng.shuffle(tags)

    edit_iter = iter(edit_ids)
    t2i_iter = iter(t2i_ids)
    out = []
    for tag in tags:
        stream = t2i_iter if tag == "t2i" else edit_iter
        try:
            item = next(stream)
        except StopIteration:
            missing = sum(1 for t in tags[len(out):] if t == tag)
            raise StreamExhausted(tag, missing) from None
        if tag == "t2i":
            out.append(TaskAssignment(str(item), "t2i", T2I_TEMPLATE, True))
        else:
            out.append(TaskAssignment(str(item), "edit", EDIT_TEMPLATE, False))
    return out
