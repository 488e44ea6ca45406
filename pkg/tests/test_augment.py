import numpy as np
import pytest
from scipy import ndimage

from tripletforge.augment import (
    AugmentationSpec,
    DirectionalBlocklist,
    add_noise,
    conditional_mirror,
    film_grayscale,
    gaussian_blur,
    identity_triplet,
    jpeg_roundtrip,
    jpeg_sync,
    make_bidirectional_pair,
    overlay_primitive,
    passive_instructions,
    psnr,
    quant_tables,
    render_text_mask,
    scalar_adjust,
    sepia_tone,
)
from tripletforge.images import ImageBuffer, MemoryStore, luma, synthetic_photo
from tripletforge.records import InstructionRecord, make_triplet, validate_triplet


# --- bidirectional pairs ---------------------------------------------------------

def test_blur_pair_shares_degraded_buffer(small_photo, store):
    spec = AugmentationSpec("blur", magnitude=2.0, seed=4)
    forward, reverse = make_bidirectional_pair(small_photo, spec, store)
    assert forward.target_ref == reverse.source_ref
    assert forward.source_ref == reverse.target_ref
    degraded = store.resolve(forward.target_ref)
    assert degraded == gaussian_blur(small_photo, 2.0)


def test_noise_pair_mean_absolute_deviation(small_photo, store):
    spec = AugmentationSpec("noise", magnitude=10 / 255, seed=11)
    forward, _ = make_bidirectional_pair(small_photo, spec, store)
    degraded = store.resolve(forward.target_ref)
    mad = np.abs(degraded.as_float() - small_photo.as_float()).mean()
    assert 6.0 <= mad <= 14.0


def test_pair_determinism(small_photo):
    spec = AugmentationSpec("sepia", seed=21)
    s1, s2 = MemoryStore(), MemoryStore()
    f1, r1 = make_bidirectional_pair(small_photo, spec, s1)
    f2, r2 = make_bidirectional_pair(small_photo, spec, s2)
    assert f1 == f2 and r1 == r2
    assert s1.resolve(f1.target_ref) == s2.resolve(f2.target_ref)


def test_pair_rejects_non_photometric(small_photo, store):
    with pytest.raises(ValueError):
        make_bidirectional_pair(small_photo, AugmentationSpec("mirror"), store)


def test_magnitude_range_enforced():
    with pytest.raises(ValueError):
        AugmentationSpec("brightness", magnitude=9.0)
    with pytest.raises(ValueError):
        AugmentationSpec("noise", magnitude=0.5)


def test_decreasing_scalar_swaps_instruction_direction(small_photo, store):
    darker = AugmentationSpec("brightness", magnitude=0.5, seed=3)
    forward, _ = make_bidirectional_pair(small_photo, darker, store)
    assert "dark" in forward.instruction.text or "decrease" in forward.instruction.text


# --- film grayscale ---------------------------------------------------------------

def test_film_gray_channels_equal(small_photo):
    out = film_grayscale(small_photo, seed=5)
    assert np.array_equal(out.pixels[:, :, 0], out.pixels[:, :, 1])
    assert np.array_equal(out.pixels[:, :, 1], out.pixels[:, :, 2])


def test_film_gray_deterministic(small_photo):
    assert film_grayscale(small_photo, 9) == film_grayscale(small_photo, 9)


def test_film_gray_rejects_gray_input():
    gray = ImageBuffer(np.full((16, 16, 1), 100, dtype=np.uint8))
    with pytest.raises(ValueError):
        film_grayscale(gray, 0)


def test_film_gray_mean_luminance_monte_carlo(photo):
    # tone-curve oracle: the seed-averaged output mean stays near the input
    input_mean = luma(photo).mean()
    outputs = [luma(film_grayscale(photo, seed)).mean() for seed in range(100)]
    assert abs(np.mean(outputs) - input_mean) <= 20.0


# --- identity triplets ----------------------------------------------------------------

def test_identity_refs_equal(small_photo, store):
    record = identity_triplet(small_photo, 7, store)
    assert record.source_ref == record.target_ref
    assert record.provenance == "identity"


def test_identity_instruction_from_passive_bank(small_photo, store):
    record = identity_triplet(small_photo, 3, store)
    assert record.instruction.text in passive_instructions()


def test_identity_passes_validation(small_photo, store):
    record = identity_triplet(small_photo, 1, store)
    assert validate_triplet(record) == []


# --- conditional mirror -----------------------------------------------------------------

def stored_triplet(image, store, text):
    src = store.put(image)
    tgt = store.put(ImageBuffer(255 - image.pixels))
    return make_triplet(src, InstructionRecord("i", text), tgt, "mined")


def test_mirror_blocked_for_directional_prompt(small_photo, store):
    triplet = stored_triplet(small_photo, store, "move the cup to the left")
    assert conditional_mirror(triplet, store=store) is None


def test_mirror_blocked_for_text_prompt(small_photo, store):
    triplet = stored_triplet(small_photo, store, "add text on the sign")
    assert conditional_mirror(triplet, store=store) is None


def test_mirror_blocking_is_whole_word(small_photo, store):
    # "lefty" contains "left" as a substring but not as a word
    triplet = stored_triplet(small_photo, store, "give the lefty pitcher a blue cap")
    assert conditional_mirror(triplet, store=store) is not None


def test_mirror_flips_and_double_flip_restores(small_photo, store):
    triplet = stored_triplet(small_photo, store, "make the sky pink")
    mirrored = conditional_mirror(triplet, store=store)
    assert mirrored is not None
    assert mirrored.provenance == "augmented"
    assert mirrored.lineage == (triplet.id,)
    assert mirrored.instruction.text == triplet.instruction.text
    flipped = store.resolve(mirrored.source_ref)
    assert np.array_equal(flipped.pixels, np.flip(small_photo.pixels, axis=1))
    twice = conditional_mirror(mirrored, store=store)
    assert store.resolve(twice.source_ref) == small_photo


def test_blocklist_validation():
    with pytest.raises(ValueError):
        DirectionalBlocklist(())
    with pytest.raises(ValueError):
        DirectionalBlocklist(("Left",))
    assert DirectionalBlocklist(("custom",)).blocks("a CUSTOM word")


# --- overlays ----------------------------------------------------------------------------

def test_overlay_changes_nothing_outside_mask(photo, store):
    for seed in range(25):
        record, mask = overlay_primitive(photo, seed, store)
        occluded = store.resolve(record.source_ref)
        assert np.array_equal(occluded.pixels[~mask], photo.pixels[~mask])
        assert store.resolve(record.target_ref) == photo


def test_overlay_coverage_in_range(photo, store):
    for seed in range(200):
        _, mask = overlay_primitive(photo, seed, store)
        frac = mask.mean()
        assert 0.02 <= frac <= 0.20, f"seed {seed}: coverage {frac}"


def test_overlay_deterministic(photo):
    s1, s2 = MemoryStore(), MemoryStore()
    r1, m1 = overlay_primitive(photo, 77, s1)
    r2, m2 = overlay_primitive(photo, 77, s2)
    assert r1 == r2 and np.array_equal(m1, m2)


def test_overlay_rejects_small_images(store):
    with pytest.raises(ValueError):
        overlay_primitive(synthetic_photo(40, 40), 0, store)


def test_text_mask_renders_known_glyph():
    mask = render_text_mask("I", scale=1)
    assert mask.shape == (7, 5)
    assert mask[0].tolist() == [False, True, True, True, False]
    doubled = render_text_mask("I", scale=2)
    assert doubled.shape == (14, 10)
    assert doubled.sum() == 4 * mask.sum()


# --- compression -------------------------------------------------------------------------

def test_jpeg_quality_100_high_fidelity(photo):
    out = jpeg_roundtrip(photo, 100)
    assert psnr(out, photo) >= 45.0


def test_jpeg_monotone_quality(photo):
    values = [psnr(jpeg_roundtrip(photo, q), photo) for q in (10, 30, 50, 80, 100)]
    assert all(values[i] < values[i + 1] for i in range(len(values) - 1))


def test_jpeg_near_idempotent(photo):
    once = jpeg_roundtrip(photo, 50)
    twice = jpeg_roundtrip(once, 50)
    assert abs(psnr(once, photo) - psnr(twice, photo)) < 1.0


def test_jpeg_sync_same_tables(small_photo):
    other = ImageBuffer(255 - small_photo.pixels)
    a, b = jpeg_sync(small_photo, other, 40)
    # identical quality for both sides: recompute the tables each would use
    assert np.array_equal(np.asarray(quant_tables(40)), np.asarray(quant_tables(40)))
    assert a == jpeg_roundtrip(small_photo, 40)
    assert b == jpeg_roundtrip(other, 40)


def test_jpeg_sync_dim_mismatch(small_photo):
    with pytest.raises(ValueError):
        jpeg_sync(small_photo, synthetic_photo(10, 10), 50)


def test_quant_tables_law():
    y100, c100 = quant_tables(100)
    assert (y100 == 1).all() and (c100 == 1).all()
    y50, _ = quant_tables(50)
    assert y50[0, 0] == 16  # scale 100 reproduces the base table
    with pytest.raises(ValueError):
        quant_tables(0)


def test_jpeg_gray_input():
    gray = ImageBuffer(luma(synthetic_photo(64, 48)).astype(np.uint8)[:, :, None])
    out = jpeg_roundtrip(gray, 90)
    assert out.channels == 1
    assert psnr(out, gray) > 30


# --- scalar adjustments -----------------------------------------------------------------

def test_factor_one_is_identity(small_photo):
    for kind in ("brightness", "contrast", "saturation"):
        assert scalar_adjust(small_photo, kind, 1.0) == small_photo


def test_saturation_zero_is_grayscale(small_photo):
    out = scalar_adjust(small_photo, "saturation", 0.0)
    assert np.array_equal(out.pixels[:, :, 0], out.pixels[:, :, 1])
    assert np.array_equal(out.pixels[:, :, 1], out.pixels[:, :, 2])


def test_brightness_doubles_midgray():
    mid = ImageBuffer(np.full((8, 8, 3), 100, dtype=np.uint8))
    out = scalar_adjust(mid, "brightness", 2.0)
    assert (out.pixels == 200).all()


def test_contrast_formula_oracle(small_photo, rng):
    factor = 1.5
    out = scalar_adjust(small_photo, "contrast", factor)
    expected = np.clip(np.rint((small_photo.as_float() - 128) * factor + 128), 0, 255)
    assert np.array_equal(out.pixels, expected.astype(np.uint8))


def test_scalar_range_errors(small_photo):
    with pytest.raises(ValueError):
        scalar_adjust(small_photo, "brightness", 0.1)
    with pytest.raises(ValueError):
        scalar_adjust(small_photo, "contrast", 5.0)
    with pytest.raises(ValueError):
        scalar_adjust(small_photo, "saturation", -0.5)


# --- cross-op determinism -----------------------------------------------------------------

def test_all_ops_byte_deterministic(small_photo):
    checks = [
        lambda: gaussian_blur(small_photo, 1.7),
        lambda: add_noise(small_photo, 0.03, 99),
        lambda: sepia_tone(small_photo),
        lambda: film_grayscale(small_photo, 123),
        lambda: scalar_adjust(small_photo, "saturation", 2.2),
        lambda: jpeg_roundtrip(small_photo, 35),
    ]
    for fn in checks:
        assert fn() == fn()
