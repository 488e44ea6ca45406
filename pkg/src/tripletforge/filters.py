"""Geometric and quality filters for triplet pairs.

Homographies are estimated with normalized DLT (Hartley preconditioning,
smallest-singular-vector solve) and robustified with a seeded RANSAC loop;
the face-IoU gate, the no-reference blur score and the score-threshold
partition implement the pair-level quality gates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .images import ImageBuffer, from_float, luma

DEFAULT_FACE_IOU_THRESHOLD = 0.9
DEFAULT_ASSESSOR_THRESHOLD = 3.5
DEFAULT_RANSAC_ITERATIONS = 2000
DEFAULT_INLIER_TOL = 1.5


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union; defined as 0 when the union has zero area."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    inter = max(0.0, ix) * max(0.0, iy)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


@dataclass(frozen=True)
class GateVerdict:
    keep: bool
    detail: str
    value: float | None = None


def face_iou_filter(faces_src, faces_tgt, threshold: float = DEFAULT_FACE_IOU_THRESHOLD) -> GateVerdict:
    """Keep a pair unless its largest faces moved: IoU(largest, largest) < threshold.

    Pairs without a face on either side pass with detail "no-face"; the
    gate is face-specific and has nothing to say about them.
    """
    if not faces_src or not faces_tgt:
        return GateVerdict(True, "no-face")
    largest_src = max(faces_src, key=lambda b: b.area)
    largest_tgt = max(faces_tgt, key=lambda b: b.area)
    value = iou(largest_src, largest_tgt)
    if value >= threshold:
        return GateVerdict(True, "face-stable", value)
    return GateVerdict(False, "face-moved", value)


# --- homography ---------------------------------------------------------------

@dataclass(frozen=True)
class Homography:
    """3x3 projective transform with H[2][2] normalized to 1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if abs(m[2, 2]) < 1e-12:
            raise ValueError("H[2][2] is numerically zero")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is singular")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (n, 2) points through the transform."""
        pts = np.asarray(points, dtype=np.float64)
        ph = np.column_stack([pts, np.ones(len(pts))])
        q = ph @ self.matrix.T
        return q[:, :2] / q[:, 2:3]


class DegenerateGeometryError(ValueError):
    pass


class NoModelError(RuntimeError):
    """RANSAC found no consensus: 'no-model'."""


def as_point_pairs(correspondences) -> tuple[np.ndarray, np.ndarray]:
    """Normalize correspondence input to (src (n,2), tgt (n,2)) arrays.

    Accepts a list of ((x, y), (x', y')) pairs, a (src, tgt) tuple of
    arrays, or an (n, 4) array.
    """
    if isinstance(correspondences, tuple) and len(correspondences) == 2:
        src = np.asarray(correspondences[0], dtype=np.float64)
        tgt = np.asarray(correspondences[1], dtype=np.float64)
        if src.ndim == 2 and src.shape[1] == 2 and tgt.shape == src.shape:
            return src, tgt
    arr = np.asarray(correspondences, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[1:] == (2, 2):
        return arr[:, 0, :].copy(), arr[:, 1, :].copy()
    if arr.ndim == 2 and arr.shape[1] == 4:
        return arr[:, :2].copy(), arr[:, 2:].copy()
    raise ValueError("cannot interpret correspondences; expected point pairs")


def _hartley_normalization(points: np.ndarray) -> np.ndarray:
    """Similarity transform. centroid to origin, mean distance sqrt(2)."""
    centroid = points.mean(axis=0)
    dist = np.sqrt(((points - centroid) ** 2).sum(axis=1)).mean()
    if dist < 1e-12:
        raise DegenerateGeometryError("all points coincide")
    s = np.sqrt(2.0) / dist
    return np.array(
        [[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]]
    )


def _apply_h(T: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ph = np.column_stack([pts, np.ones(len(pts))])
    q = ph @ T.T
    return q[:, :2] / q[:, 2:3]


def estimate_homography_dlt(correspondences) -> Homography:
    """Normalized DLT from >= 4 correspondences.

    Both point sets are Hartley-normalized, the 2n x 9 system is solved by
    the smallest right singular vector, and the result is denormalized with
    H[2][2] scaled to 1. Degenerate configurations raise.
    """
    src, tgt = as_point_pairs(correspondences)
    if len(src) < 4:
        raise ValueError(f"need >= 4 correspondences, got {len(src)}")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(tgt))):
        raise ValueError("correspondences contain non-finite coordinates")
    T_src = _hartley_normalization(src)
    T_tgt = _hartley_normalization(tgt)
    sn = _apply_h(T_src, src)
    tn = _apply_h(T_tgt, tgt)

    n = len(sn)
    x, y = sn[:, 0], sn[:, 1]
    u, v = tn[:, 0], tn[:, 1]
    zeros, ones = np.zeros(n), np.ones(n)
    A = np.empty((2 * n, 9))
    A[0::2] = np.column_stack([x, y, ones, zeros, zeros, zeros, -u * x, -u * y, -u])
    A[1::2] = np.column_stack([zeros, zeros, zeros, x, y, ones, -v * x, -v * y, -v])
    if np.linalg.matrix_rank(A) < 8:
        raise DegenerateGeometryError("rank-deficient correspondence configuration")
    _, _, Vt = np.linalg.svd(A)
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(T_tgt) @ Hn @ T_src
    if abs(H[2, 2]) < 1e-12:
        raise DegenerateGeometryError("homography at infinity")
    return Homography(H)


def reprojection_rmse(H: Homography, correspondences) -> float:
    src, tgt = as_point_pairs(correspondences)
    proj = H.apply(src)
    return float(np.sqrt(np.mean(np.sum((proj - tgt) ** 2, axis=1))))


def symmetric_transfer_error(H: Homography, correspondences) -> np.ndarray:
    """Per-pair sqrt(|H(s) - t|^2 + |H^-1(t) - s|^2) in pixels."""
    src, tgt = as_point_pairs(correspondences)
    fwd = H.apply(src) - tgt
    bwd = H.inverse().apply(tgt) - src
    return np.sqrt((fwd**2).sum(axis=1) + (bwd**2).sum(axis=1))


def _degenerate_samples(pts: np.ndarray) -> np.ndarray:
    """(k, 4, 2) samples -> bool mask of samples with 3 nearly collinear points."""
    bad = np.zeros(len(pts), dtype=bool)
    for skip in range(4):
        tri = np.delete(pts, skip, axis=1)
        area = 0.5 * np.abs(
            (tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1])
            - (tri[:, 2, 0] - tri[:, 0, 0]) * (tri[:, 1, 1] - tri[:, 0, 1])
        )
        bad |= area < 1e-8
    return bad


def _batched_normalization(pts: np.ndarray):
    """Hartley transforms for (k, 4, 2) point sets, with closed-form inverses."""
    centroid = pts.mean(axis=1)
    dist = np.sqrt(((pts - centroid[:, None, :]) ** 2).sum(axis=2)).mean(axis=1)
    dist = np.maximum(dist, 1e-12)
    s = np.sqrt(2.0) / dist
    k = len(pts)
    T = np.zeros((k, 3, 3))
    T[:, 0, 0] = s
    T[:, 1, 1] = s
    T[:, 0, 2] = -s * centroid[:, 0]
    T[:, 1, 2] = -s * centroid[:, 1]
    T[:, 2, 2] = 1.0
    T_inv = np.zeros((k, 3, 3))
    T_inv[:, 0, 0] = 1.0 / s
    T_inv[:, 1, 1] = 1.0 / s
    T_inv[:, 0, 2] = centroid[:, 0]
    T_inv[:, 1, 2] = centroid[:, 1]
    T_inv[:, 2, 2] = 1.0
    normalized = (pts - centroid[:, None, :]) * s[:, None, None]
    return normalized, T, T_inv


def _minimal_dlt_batch(src4: np.ndarray, tgt4: np.ndarray) -> np.ndarray:
    """Candidate homographies for (k, 4, 2) minimal samples; NaN rows mark
    samples whose solve failed."""
    sn, T_src, _ = _batched_normalization(src4)
    tn, _, Tt_inv = _batched_normalization(tgt4)
    k = len(src4)
    x, y = sn[:, :, 0], sn[:, :, 1]
    u, v = tn[:, :, 0], tn[:, :, 1]
    A = np.zeros((k, 8, 9))
    A[:, 0::2, 0] = x
    A[:, 0::2, 1] = y
    A[:, 0::2, 2] = 1.0
    A[:, 0::2, 6] = -u * x
    A[:, 0::2, 7] = -u * y
    A[:, 0::2, 8] = -u
    A[:, 1::2, 3] = x
    A[:, 1::2, 4] = y
    A[:, 1::2, 5] = 1.0
    A[:, 1::2, 6] = -v * x
    A[:, 1::2, 7] = -v * y
    A[:, 1::2, 8] = -v
    _, _, Vt = np.linalg.svd(A)
    Hn = Vt[:, -1, :].reshape(k, 3, 3)
    H = Tt_inv @ Hn @ T_src
    h22 = H[:, 2, 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        H = H / h22[:, None, None]
    H[np.abs(h22) < 1e-12] = np.nan
    return H


def ransac_homography(
    correspondences,
    iterations: int = DEFAULT_RANSAC_ITERATIONS,
    inlier_tol: float = DEFAULT_INLIER_TOL,
    seed: int = 0,
):
    """Seeded RANSAC: minimal 4-pair samples, symmetric-transfer consensus,
    final DLT refit on the largest consensus set.

    A candidate needs support beyond its own minimal sample (at least 5
    inliers, or all points when fewer exist), otherwise NoModelError
    ("no-model") is raised. Deterministic for a fixed seed; the whole loop
    is evaluated batched.
    """
    src, tgt = as_point_pairs(correspondences)
    n = len(src)
    if n < 4:
        raise ValueError(f"need >= 4 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    required = min(5, n)

    # uniform 4-subsets: first four positions of random-key permutations
    samples = rng.random((iterations, n)).argsort(axis=1)[:, :4]
    src4 = src[samples]
    tgt4 = tgt[samples]
    valid = ~(_degenerate_samples(src4) | _degenerate_samples(tgt4))
    H = _minimal_dlt_batch(src4, tgt4)
    valid &= np.isfinite(H).all(axis=(1, 2))
    with np.errstate(over="ignore", invalid="ignore"):
        det = np.linalg.det(np.where(np.isfinite(H), H, 0.0))
    valid &= np.abs(det) > 1e-12

    counts = np.zeros(iterations, dtype=np.int64)
    if valid.any():
        Hv = H[valid]
        Hv_inv = np.linalg.inv(Hv)
        ones = np.ones((n, 1))
        src_h = np.concatenate([src, ones], axis=1)  # (n, 3)
        tgt_h = np.concatenate([tgt, ones], axis=1)
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            fwd = np.einsum("kij,nj->kni", Hv, src_h)
            fwd = fwd[:, :, :2] / fwd[:, :, 2:3]
            bwd = np.einsum("kij,nj->kni", Hv_inv, tgt_h)
            bwd = bwd[:, :, :2] / bwd[:, :, 2:3]
            err2 = ((fwd - tgt[None]) ** 2).sum(axis=2) + ((bwd - src[None]) ** 2).sum(axis=2)
        err2 = np.nan_to_num(err2, nan=np.inf, posinf=np.inf)
        counts[valid] = (err2 < inlier_tol**2).sum(axis=1)

    best = int(np.argmax(counts))
    if counts[best] < required:
        raise NoModelError("no-model")
    H_best = Homography(H[best])
    best_mask = symmetric_transfer_error(H_best, (src, tgt)) < inlier_tol
    H_fit = estimate_homography_dlt((src[best_mask], tgt[best_mask]))
    final_mask = symmetric_transfer_error(H_fit, (src, tgt)) < inlier_tol
    return H_fit, final_mask


def align_pair(target: ImageBuffer, H: Homography, out_dims) -> ImageBuffer:
    """Inverse-warp the target through H with bilinear sampling.

    Output pixel p takes the target value at H(p); samples outside the
    target are black. out_dims is (width, height).
    """
    out_w, out_h = int(out_dims[0]), int(out_dims[1])
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    pts = np.column_stack([xs.ravel(), ys.ravel()])
    mapped = H.apply(pts)
    mx = mapped[:, 0].reshape(out_h, out_w)
    my = mapped[:, 1].reshape(out_h, out_w)

    h, w = target.height, target.width
    valid = (mx >= 0) & (mx <= w - 1) & (my >= 0) & (my <= h - 1)
    x0 = np.clip(np.floor(mx), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(my), 0, h - 1).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(mx - x0, 0.0, 1.0)[:, :, None]
    fy = np.clip(my - y0, 0.0, 1.0)[:, :, None]

    px = target.as_float()
    tl = px[y0, x0]
    tr = px[y0, x1]
    bl = px[y1, x0]
    br = px[y1, x1]
    interp = (
        tl * (1 - fx) * (1 - fy) + tr * fx * (1 - fy) + bl * (1 - fx) * fy + br * fx * fy
    )
    interp[~valid] = 0.0
    return from_float(interp)


def is_near_identity(H: Homography, image_dims, tol_px: float) -> bool:
    """True iff no image corner moves more than tol_px under H."""
    w, h = image_dims
    corners = np.array(
        [[0.0, 0.0], [w - 1.0, 0.0], [0.0, h - 1.0], [w - 1.0, h - 1.0]]
    )
    moved = H.apply(corners)
    disp = np.sqrt(((moved - corners) ** 2).sum(axis=1))
    return bool(disp.max() <= tol_px)


def grid_correspondences(
    source: ImageBuffer,
    target: ImageBuffer,
    grid: int = 16,
    patch_radius: int = 4,
    search_radius: int = 8,
):
    """Deterministic patch matches on a grid x grid lattice.

    For each lattice point, the source patch is matched against a search
    window in the target by normalized cross-correlation; flat patches are
    skipped. Returns (src (n,2), tgt (n,2)) pixel coordinates.
    """
    src_l = luma(source)
    tgt_l = luma(target)
    h, w = src_l.shape
    margin = patch_radius + search_radius + 1
    if h <= 2 * margin or w <= 2 * margin:
        return np.zeros((0, 2)), np.zeros((0, 2))
    xs = np.linspace(margin, w - 1 - margin, grid).round().astype(int)
    ys = np.linspace(margin, h - 1 - margin, grid).round().astype(int)

    src_pts, tgt_pts = [], []
    for yc in ys:
        for xc in xs:
            patch = src_l[yc - patch_radius : yc + patch_radius + 1,
                          xc - patch_radius : xc + patch_radius + 1]
            p = patch - patch.mean()
            pnorm = np.sqrt((p**2).sum())
            if pnorm < 1e-6:
                continue
            best_score, best_dx, best_dy = -2.0, 0, 0
            for dy in range(-search_radius, search_radius + 1):
                for dx in range(-search_radius, search_radius + 1):
                    cand = tgt_l[
                        yc + dy - patch_radius : yc + dy + patch_radius + 1,
                        xc + dx - patch_radius : xc + dx + patch_radius + 1,
                    ]
                    c = cand - cand.mean()
                    cnorm = np.sqrt((c**2).sum())
                    if cnorm < 1e-6:
                        continue
                    score = float((p * c).sum() / (pnorm * cnorm))
                    if score > best_score:
                        best_score, best_dx, best_dy = score, dx, dy
            if best_score > 0.5:
                src_pts.append((xc, yc))
                tgt_pts.append((xc + best_dx, yc + best_dy))
    return np.asarray(src_pts, dtype=np.float64), np.asarray(tgt_pts, dtype=np.float64)


# --- perceptual quality ---------------------------------------------------------

def blur_effect(image: ImageBuffer, kernel_size: int = 9) -> float:
    """No-reference blur score in [0, 1]; higher means blurrier.

    The image is re-blurred with horizontal and vertical box kernels; the
    score per axis is the share of neighbor-difference energy the re-blur
    fails to remove, maximized over axes. A constant image scores 0.
    """
    if min(image.height, image.width) < 8:
        raise ValueError(f"image too small for blur metric: {image.width}x{image.height}")
    im = luma(image)
    scores = []
    for axis in (0, 1):
        blurred = ndimage.uniform_filter1d(im, size=kernel_size, axis=axis, mode="reflect")
        d_orig = np.abs(np.diff(im, axis=axis))
        d_blur = np.abs(np.diff(blurred, axis=axis))
        attenuation = np.maximum(0.0, d_orig - d_blur)
        interior = tuple(slice(2, s - 1) for s in d_orig.shape)
        m_orig = float(d_orig[interior].sum())
        m_kept = float(attenuation[interior].sum())
        scores.append(0.0 if m_orig <= 0.0 else (m_orig - m_kept) / m_orig)
    return max(scores)


def select_diverse_frames(embeddings, fraction: float) -> list[int]:
    """Greedy farthest-point selection under cosine distance.

    Seeded at the maximal-norm vector (ties to the lowest index); returns
    ceil(fraction * n) indices in selection order.
    """
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    X = np.stack([np.asarray(e, dtype=np.float64) for e in embeddings])
    n = len(X)
    count = int(np.ceil(fraction * n))
    norms = np.linalg.norm(X, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = X / safe[:, None]

    selected = [int(np.argmax(norms))]
    # min cosine distance to the selected set, per point
    dist = 1.0 - unit @ unit[selected[0]]
    dist[selected[0]] = -np.inf
    while len(selected) < count:
        nxt = int(np.argmax(dist))
        selected.append(nxt)
        dist = np.minimum(dist, 1.0 - unit @ unit[nxt])
        dist[nxt] = -np.inf
    return selected


def assessor_threshold_filter(
    records,
    tau: float = DEFAULT_ASSESSOR_THRESHOLD,
    aesthetic_floor: float | None = None,
):
    """Partition scored records: keep iff instruction adherence >= tau.

    An optional conjunctive aesthetic floor can be enabled. Returns
    (kept, removed) with removed entries as (record, reason). Records
    without scores are an error.
    """
    kept, removed = [], []
    for record in records:
        if record.scores is None:
            raise ValueError(f"record {record.id} has no scores")
        if record.scores.instruction_adherence < tau:
            removed.append((record, "adherence"))
        elif aesthetic_floor is not None and record.scores.aesthetic < aesthetic_floor:
            removed.append((record, "aesthetic"))
        else:
            kept.append(record)
    return kept, removed
