"""Deterministic just-in-time triplet synthesis.

Every operation is a pure function of (inputs, seed): float64 internally,
round-half-even before the 8-bit clamp, so outputs are byte-stable across
runs, platforms, and worker counts. Instruction text comes from the
versioned template bank in data/templates.json.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from .images import ImageBuffer, ImageStore, from_float, luma
from .records import InstructionRecord, TripletRecord, derive_seed, make_triplet

PHOTOMETRIC_OPS = ("blur", "noise", "sepia", "film_gray", "brightness", "contrast", "saturation")
ALL_OPS = PHOTOMETRIC_OPS + ("identity", "mirror", "overlay", "text_overlay", "jpeg_sync")

MAGNITUDE_RANGES = {
    "blur": (0.1, 16.0),
    "noise": (1.0 / 255.0, 0.25),
    "sepia": (0.0, 1.0),
    "film_gray": (0.0, 1.0),
    "brightness": (0.25, 4.0),
    "contrast": (0.25, 4.0),
    "saturation": (0.0, 4.0),
}

DEFAULT_MAGNITUDES = {
    "blur": 2.0,
    "noise": 10.0 / 255.0,
    "sepia": 1.0,
    "film_gray": 1.0,
    "brightness": 1.6,
    "contrast": 1.5,
    "saturation": 1.8,
}


def load_template_bank(path: str | Path | None = None) -> dict:
    """Instruction template bank; the bundled bank unless a path is given."""
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    with resources.files("tripletforge.data").joinpath("templates.json").open(
        "r", encoding="utf-8"
    ) as fh:
        return json.load(fh)


_BANK = None


def _bank() -> dict:
    global _BANK
    if _BANK is None:
        _BANK = load_template_bank()
    return _BANK


def _pick_template(op: str, direction: str, seed: int, bank: dict | None = None) -> str:
    bank = bank or _bank()
    options = bank[op][direction]
    rng = np.random.default_rng(derive_seed(seed, "template", op, direction))
    return options[int(rng.integers(len(options)))]


@dataclass(frozen=True)
class AugmentationSpec:
    """One planned augmentation: operation, direction, magnitude, seed."""

    op: str
    direction: str = "forward"
    magnitude: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.op not in ALL_OPS:
            raise ValueError(f"unknown augmentation op {self.op!r}")
        if self.direction not in ("forward", "reverse"):
            raise ValueError(f"unknown direction {self.direction!r}")
        if self.op in MAGNITUDE_RANGES and self.magnitude is not None:
            lo, hi = MAGNITUDE_RANGES[self.op]
            if not (lo <= self.magnitude <= hi):
                raise ValueError(
                    f"{self.op} magnitude {self.magnitude} outside [{lo}, {hi}]"
                )

    @property
    def effective_magnitude(self) -> float:
        if self.magnitude is not None:
            return self.magnitude
        return DEFAULT_MAGNITUDES.get(self.op, 1.0)


@dataclass(frozen=True)
class DirectionalBlocklist:
    """Lowercase terms whose presence disables mirroring."""

    terms: tuple[str, ...] = (
        "left",
        "right",
        "east",
        "west",
        "text",
        "read",
        "writing",
        "clockwise",
        "counterclockwise",
    )

    def __post_init__(self):
        terms = tuple(self.terms)
        if not terms:
            raise ValueError("blocklist must not be empty")
        if any(t != t.lower() for t in terms):
            raise ValueError("blocklist terms must be lowercase")
        object.__setattr__(self, "terms", terms)

    def blocks(self, text: str) -> bool:
        import re

        lowered = text.lower()
        return any(re.search(rf"\b{re.escape(t)}\b", lowered) for t in self.terms)


# --- photometric primitives -----------------------------------------------------

def gaussian_blur(image: ImageBuffer, sigma: float) -> ImageBuffer:
    out = np.empty_like(image.pixels, dtype=np.float64)
    for c in range(image.channels):
        out[:, :, c] = ndimage.gaussian_filter(
            image.as_float()[:, :, c], sigma=sigma, mode="nearest"
        )
    return from_float(out)


def add_noise(image: ImageBuffer, sigma: float, seed: int) -> ImageBuffer:
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma * 255.0, size=image.pixels.shape)
    return from_float(image.as_float() + noise)


_SEPIA = np.array(
    [[0.393, 0.769, 0.189], [0.349, 0.686, 0.168], [0.272, 0.534, 0.131]]
)


def sepia_tone(image: ImageBuffer, strength: float = 1.0) -> ImageBuffer:
    if image.channels != 3:
        raise ValueError("sepia requires an RGB image")
    px = image.as_float()
    toned = px @ _SEPIA.T
    return from_float(px + strength * (toned - px))


def scalar_adjust(image: ImageBuffer, kind: str, factor: float) -> ImageBuffer:
    """Brightness (multiplicative), contrast (about 128), or saturation
    (lerp from per-pixel luma)."""
    if kind not in ("brightness", "contrast", "saturation"):
        raise ValueError(f"unknown adjustment {kind!r}")
    lo, hi = MAGNITUDE_RANGES[kind]
    if not (lo <= factor <= hi):
        raise ValueError(f"{kind} factor {factor} outside [{lo}, {hi}]")
    px = image.as_float()
    if kind == "brightness":
        out = px * factor
    elif kind == "contrast":
        out = (px - 128.0) * factor + 128.0
    else:
        if image.channels != 3:
            raise ValueError("saturation requires an RGB image")
        gray = luma(image)[:, :, None]
        out = gray + (px - gray) * factor
    return from_float(out)


FILM_BASE_WEIGHTS = np.array([0.30, 0.55, 0.15])


def film_grayscale(image: ImageBuffer, seed: int) -> ImageBuffer:
    """Analog-film grayscale: randomized channel mix, sigmoid tone curve,
    grain. Output is 3-channel with R = G = B."""
    if image.channels != 3:
        raise ValueError("film grayscale needs an RGB input")
    rng = np.random.default_rng(seed)
    weights = rng.dirichlet(FILM_BASE_WEIGHTS * 60.0)
    weights = np.clip(weights, FILM_BASE_WEIGHTS - 0.1, FILM_BASE_WEIGHTS + 0.1)
    weights = weights / weights.sum()

    gray = image.as_float() @ weights / 255.0
    gain = rng.uniform(4.0, 10.0)
    mid = rng.uniform(0.4, 0.6)
    curve = 1.0 / (1.0 + np.exp(-gain * (gray - mid)))
    lo = 1.0 / (1.0 + np.exp(gain * mid))
    hi = 1.0 / (1.0 + np.exp(-gain * (1.0 - mid)))
    toned = (curve - lo) / (hi - lo)

    grain_sigma = rng.uniform(1.0, 4.0) / 255.0
    toned = toned + rng.normal(0.0, grain_sigma, size=toned.shape)
    out8 = np.clip(np.rint(toned * 255.0), 0, 255).astype(np.uint8)
    return ImageBuffer(np.repeat(out8[:, :, None], 3, axis=2))


def _degrade(image: ImageBuffer, spec: AugmentationSpec) -> ImageBuffer:
    mag = spec.effective_magnitude
    if spec.op == "blur":
        return gaussian_blur(image, mag)
    if spec.op == "noise":
        return add_noise(image, mag, derive_seed(spec.seed, "noise"))
    if spec.op == "sepia":
        return sepia_tone(image, mag)
    if spec.op == "film_gray":
        return film_grayscale(image, derive_seed(spec.seed, "film"))
    if spec.op in ("brightness", "contrast", "saturation"):
        return scalar_adjust(image, spec.op, mag)
    raise ValueError(f"op {spec.op!r} is not a photometric degradation")


def make_bidirectional_pair(
    image: ImageBuffer, spec: AugmentationSpec, store: ImageStore
) -> tuple[TripletRecord, TripletRecord]:
    """Forward (clean -> degraded) and reverse (degraded -> clean) triplets.

    The reverse record's source buffer is the forward record's target
    buffer, byte for byte. Scalar ops with magnitude < 1 swap the template
    direction so the wording matches what actually happened.
    """
    if spec.op not in PHOTOMETRIC_OPS:
        raise ValueError(f"op {spec.op!r} is not a bidirectional photometric op")
    degraded = _degrade(image, spec)
    clean_ref = store.put(image)
    degraded_ref = store.put(degraded)

    fwd_bank, rev_bank = "forward", "reverse"
    if spec.op in ("brightness", "contrast", "saturation") and spec.effective_magnitude < 1.0:
        fwd_bank, rev_bank = rev_bank, fwd_bank
    fwd_text = _pick_template(spec.op, fwd_bank, spec.seed)
    rev_text = _pick_template(spec.op, rev_bank, spec.seed)
    fwd_instr = InstructionRecord(
        f"aug-{spec.op}-f-{derive_seed(spec.seed, spec.op, 'f'):012x}", fwd_text, "template"
    )
    rev_instr = InstructionRecord(
        f"aug-{spec.op}-r-{derive_seed(spec.seed, spec.op, 'r'):012x}", rev_text, "template"
    )
    forward = make_triplet(clean_ref, fwd_instr, degraded_ref, "augmented")
    reverse = make_triplet(degraded_ref, rev_instr, clean_ref, "augmented")
    return forward, reverse


def identity_triplet(image: ImageBuffer, seed: int, store: ImageStore) -> TripletRecord:
    """Source and target are the same buffer, paired with a passive instruction."""
    ref = store.put(image)
    text = _pick_template("identity", "forward", seed)
    instr = InstructionRecord(f"identity-{derive_seed(seed, 'identity'):012x}", text, "template")
    return make_triplet(ref, instr, ref, "identity")


def passive_instructions() -> list[str]:
    return list(_bank()["identity"]["forward"])


def conditional_mirror(
    triplet: TripletRecord,
    blocklist: DirectionalBlocklist | None = None,
    store: ImageStore | None = None,
) -> TripletRecord | None:
    """Horizontally flip both images unless the prompt is direction-bound.

    Returns None when any blocklist term occurs as a whole word in the
    instruction; otherwise a new triplet with flipped source and target,
    unchanged instruction, and lineage pointing at the input.
    """
    blocklist = blocklist or DirectionalBlocklist()
    if blocklist.blocks(triplet.instruction.text):
        return None
    if store is None:
        raise ValueError("an image store is required to mirror a triplet")
    source = store.resolve(triplet.source_ref)
    target = store.resolve(triplet.target_ref)
    flipped_src = ImageBuffer(np.flip(source.pixels, axis=1).copy())
    flipped_tgt = ImageBuffer(np.flip(target.pixels, axis=1).copy())
    src_ref = store.put(flipped_src)
    tgt_ref = store.put(flipped_tgt)
    return make_triplet(
        src_ref,
        triplet.instruction,
        tgt_ref,
        "augmented",
        scores=triplet.scores,
        lineage=(triplet.id,),
    )


# --- overlays --------------------------------------------------------------------

# 5x7 bitmap font, one int per row, bit 4 = leftmost column
_FONT: dict[str, tuple[int, ...]] = {
    "A": (0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11),
    "B": (0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E),
    "C": (0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E),
    "D": (0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E),
    "E": (0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F),
    "F": (0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10),
    "G": (0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F),
    "H": (0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11),
    "I": (0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "J": (0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C),
    "K": (0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11),
    "L": (0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F),
    "M": (0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11),
    "N": (0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11),
    "O": (0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E),
    "P": (0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10),
    "Q": (0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D),
    "R": (0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11),
    "S": (0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E),
    "T": (0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04),
    "U": (0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E),
    "V": (0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04),
    "W": (0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11),
    "X": (0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11),
    "Y": (0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04),
    "Z": (0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F),
    "0": (0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E),
    "1": (0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E),
    "2": (0x0E, 0x11, 0x01, 0x06, 0x08, 0x10, 0x1F),
    "3": (0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E),
    "4": (0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02),
    "5": (0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E),
    "6": (0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E),
    "7": (0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08),
    "8": (0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E),
    "9": (0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C),
    " ": (0, 0, 0, 0, 0, 0, 0),
}


def render_text_mask(text: str, scale: int = 1) -> np.ndarray:
    """Boolean pixel mask of a string in the 5x7 font, 1-column letter gap."""
    cols = 6 * len(text) - 1 if text else 0
    mask = np.zeros((7, max(cols, 1)), dtype=bool)
    for i, ch in enumerate(text.upper()):
        glyph = _FONT.get(ch, _FONT[" "])
        for row, bits in enumerate(glyph):
            for col in range(5):
                if bits & (1 << (4 - col)):
                    mask[row, i * 6 + col] = True
    if scale > 1:
        mask = np.repeat(np.repeat(mask, scale, axis=0), scale, axis=1)
    return mask


COVERAGE_RANGE = (0.02, 0.20)


def _rect_mask(h, w, target, rng):
    aspect = rng.uniform(0.5, 2.0)
    area = target * w * h
    rw = min(int(round(np.sqrt(area * aspect))), int(0.9 * w))
    rw = max(rw, 1)
    rh = max(int(round(area / rw)), 1)
    rh = min(rh, int(0.9 * h))
    lo, hi = COVERAGE_RANGE
    while rw * rh < lo * w * h and (rw < 0.9 * w or rh < 0.9 * h):
        if rw <= rh and rw < 0.9 * w:
            rw += 1
        else:
            rh += 1
    while rw * rh > hi * w * h and (rw > 1 or rh > 1):
        if rw >= rh and rw > 1:
            rw -= 1
        else:
            rh -= 1
    x0 = int(rng.integers(0, w - rw + 1))
    y0 = int(rng.integers(0, h - rh + 1))
    mask = np.zeros((h, w), dtype=bool)
    mask[y0 : y0 + rh, x0 : x0 + rw] = True
    return mask


def _ellipse_mask(h, w, target, rng):
    aspect = rng.uniform(0.5, 2.0)
    area = target * w * h
    a = np.sqrt(area * aspect / np.pi)
    b = area / (np.pi * a)
    a = min(a, 0.45 * w)
    b = min(b, 0.45 * h)
    cx = rng.uniform(a, w - a)
    cy = rng.uniform(b, h - b)
    ys, xs = np.mgrid[0:h, 0:w]
    lo, hi = COVERAGE_RANGE
    for _ in range(64):
        mask = ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0
        frac = mask.sum() / (w * h)
        if frac < lo:
            a = min(a * 1.15, 0.45 * w)
            b = min(b * 1.15, 0.45 * h)
            cx = min(max(cx, a), w - a)
            cy = min(max(cy, b), h - b)
        elif frac > hi:
            a *= 0.9
            b *= 0.9
        else:
            return mask
    return mask


def _text_mask(h, w, target, rng):
    words = _bank()["overlay_text"]
    word = words[int(rng.integers(len(words)))]
    base = render_text_mask(word, 1)
    on = int(base.sum())
    max_scale = max(min((w - 2) // base.shape[1], (h - 2) // base.shape[0]), 0)
    if max_scale < 1:
        return None
    scale = int(round(np.sqrt(target * w * h / on)))
    scale = min(max(scale, 1), max_scale)
    lo, hi = COVERAGE_RANGE
    while on * scale * scale < lo * w * h and scale < max_scale:
        scale += 1
    while on * scale * scale > hi * w * h and scale > 1:
        scale -= 1
    frac = on * scale * scale / (w * h)
    if not (lo <= frac <= hi):
        return None
    glyph = render_text_mask(word, scale)
    gh, gw = glyph.shape
    x0 = int(rng.integers(0, w - gw + 1))
    y0 = int(rng.integers(0, h - gh + 1))
    mask = np.zeros((h, w), dtype=bool)
    mask[y0 : y0 + gh, x0 : x0 + gw] = glyph
    return mask


def overlay_primitive(
    image: ImageBuffer, seed: int, store: ImageStore
) -> tuple[TripletRecord, np.ndarray]:
    """Occlude the image with a seeded primitive and pair it with the clean
    original as the restoration target.

    The occluder (filled rectangle, filled ellipse, or rendered bitmap-font
    text) covers 2-20% of the pixels; no pixel outside the returned mask
    differs between source and target.
    """
    if min(image.height, image.width) < 64:
        raise ValueError("image too small for overlay synthesis (min dim 64)")
    rng = np.random.default_rng(seed)
    kind = ("rectangle", "ellipse", "text")[int(rng.integers(3))]
    target_frac = rng.uniform(*COVERAGE_RANGE)
    h, w = image.height, image.width
    if kind == "rectangle":
        mask = _rect_mask(h, w, target_frac, rng)
    elif kind == "ellipse":
        mask = _ellipse_mask(h, w, target_frac, rng)
    else:
        mask = _text_mask(h, w, target_frac, rng)
        if mask is None:
            mask = _rect_mask(h, w, target_frac, rng)

    color = rng.integers(0, 256, size=image.channels, dtype=np.int64).astype(np.uint8)
    occluded = image.pixels.copy()
    occluded[mask] = color
    occluded_img = ImageBuffer(occluded)

    src_ref = store.put(occluded_img)
    tgt_ref = store.put(image)
    text = _pick_template("overlay", "forward", seed)
    instr = InstructionRecord(f"overlay-{derive_seed(seed, 'overlay'):012x}", text, "template")
    record = make_triplet(src_ref, instr, tgt_ref, "augmented")
    return record, mask


# --- compression simulation -------------------------------------------------------

# ITU T.81 Annex K quantization tables
LUMA_QUANT = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

CHROMA_QUANT = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)


def quant_tables(quality: int) -> tuple[np.ndarray, np.ndarray]:
    """Annex-K tables scaled by the libjpeg quality law, clamped to [1, 255]."""
    if not (1 <= quality <= 100):
        raise ValueError(f"quality must be in 1..100, got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    tables = []
    for base in (LUMA_QUANT, CHROMA_QUANT):
        t = np.floor((base * scale + 50.0) / 100.0)
        tables.append(np.clip(t, 1.0, 255.0))
    return tables[0], tables[1]


_DCT_BASIS = None


def _dct_matrix() -> np.ndarray:
    global _DCT_BASIS
    if _DCT_BASIS is None:
        k = np.arange(8)[:, None]
        n = np.arange(8)[None, :]
        C = np.cos((2 * n + 1) * k * np.pi / 16.0)
        C[0, :] *= 1.0 / np.sqrt(2.0)
        _DCT_BASIS = C * 0.5
    return _DCT_BASIS


def _blockwise_quantize(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    """DCT -> quantize -> dequantize -> IDCT over 8x8 blocks of a plane."""
    h, w = plane.shape
    ph = (8 - h % 8) % 8
    pw = (8 - w % 8) % 8
    padded = np.pad(plane, ((0, ph), (0, pw)), mode="edge") - 128.0
    H, W = padded.shape
    blocks = padded.reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
    C = _dct_matrix()
    coeffs = np.einsum("ij,abjk,lk->abil", C, blocks, C)
    quantized = np.rint(coeffs / table) * table
    restored = np.einsum("ji,abjk,kl->abil", C, quantized, C)
    out = restored.transpose(0, 2, 1, 3).reshape(H, W) + 128.0
    return out[:h, :w]


def jpeg_roundtrip(image: ImageBuffer, quality: int) -> ImageBuffer:
    """Block-DCT compression simulation (4:2:0 chroma) at a given quality."""
    luma_table, chroma_table = quant_tables(quality)
    px = image.as_float()
    if image.channels == 1:
        y = _blockwise_quantize(px[:, :, 0], luma_table)
        return from_float(y[:, :, None])

    r, g, b = px[:, :, 0], px[:, :, 1], px[:, :, 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0
    cr = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0

    h, w = y.shape
    ph = (2 - h % 2) % 2
    pw = (2 - w % 2) % 2
    cb_p = np.pad(cb, ((0, ph), (0, pw)), mode="edge")
    cr_p = np.pad(cr, ((0, ph), (0, pw)), mode="edge")
    cb_sub = cb_p.reshape(cb_p.shape[0] // 2, 2, cb_p.shape[1] // 2, 2).mean(axis=(1, 3))
    cr_sub = cr_p.reshape(cr_p.shape[0] // 2, 2, cr_p.shape[1] // 2, 2).mean(axis=(1, 3))

    y_q = _blockwise_quantize(y, luma_table)
    cb_q = _blockwise_quantize(cb_sub, chroma_table)
    cr_q = _blockwise_quantize(cr_sub, chroma_table)

    cb_up = np.repeat(np.repeat(cb_q, 2, axis=0), 2, axis=1)[:h, :w]
    cr_up = np.repeat(np.repeat(cr_q, 2, axis=0), 2, axis=1)[:h, :w]

    out = np.empty_like(px)
    out[:, :, 0] = y_q + 1.402 * (cr_up - 128.0)
    out[:, :, 1] = y_q - 0.344136 * (cb_up - 128.0) - 0.714136 * (cr_up - 128.0)
    out[:, :, 2] = y_q + 1.772 * (cb_up - 128.0)
    return from_float(out)


def jpeg_sync(
    source: ImageBuffer, target: ImageBuffer, quality: int
) -> tuple[ImageBuffer, ImageBuffer]:
    """Run source and target through the same compression at the same quality."""
    if source.pixels.shape[:2] != target.pixels.shape[:2]:
        raise ValueError("source and target dims differ")
    return jpeg_roundtrip(source, quality), jpeg_roundtrip(target, quality)


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """Peak signal-to-noise ratio in dB between two same-shape buffers."""
    if a.pixels.shape != b.pixels.shape:
        raise ValueError("shape mismatch")
    mse = float(np.mean((a.as_float() - b.as_float()) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(255.0**2 / mse)
