"""Grounding synthetic edit instructions in real user phrasing.

Retrieval runs over an exact in-memory cosine index. The bundled embedder
is a hashed character-trigram stand-in so the whole stage works offline and
deterministically; real embeddings can be supplied through a sidecar file
of {id, vector} rows.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .records import InstructionRecord


class HookError(RuntimeError):
    """External hook failed to answer (transport error, not a judgement)."""


DEFAULT_DIM = 256
DEFAULT_TOPK = 20
DEFAULT_TAU_SIM = 0.70
DEFAULT_CAP = 3
DEFAULT_CLUSTERS = 50

_WORD_RE = re.compile(r"[\w'-]+", re.UNICODE)


def embed_text(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Deterministic unit-norm embedding from hashed character trigrams.

    Trigrams of the space-padded, lowercased text are folded into `dim`
    signed buckets. Equal text always gives the equal vector.
    """
    if not text or not text.strip():
        raise ValueError("cannot embed empty text")
    if dim < 1:
        raise ValueError("dim must be positive")
    padded = f" {text.strip().lower()} "
    vec = np.zeros(dim, dtype=np.float64)
    for i in range(len(padded) - 2):
        gram = padded[i : i + 3]
        h = int.from_bytes(
            hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest(), "big"
        )
        sign = 1.0 if (h >> 62) & 1 else -1.0
        vec[h % dim] += sign
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec[0] = 1.0
        norm = 1.0
    return vec / norm


class VectorIndex:
    """Exact-search cosine index over (instruction id, vector) entries."""

    def __init__(self, entries):
        ids = [e[0] for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate ids in index")
        if not entries:
            self.ids = []
            self._matrix = np.zeros((0, 0))
            self._norms = np.zeros(0)
            self.dim = 0
            return
        vectors = [np.asarray(e[1], dtype=np.float64) for e in entries]
        dims = {v.shape for v in vectors}
        if len(dims) != 1 or vectors[0].ndim != 1:
            raise ValueError(f"inconsistent vector shapes in index: {dims}")
        self.ids = ids
        self._matrix = np.stack(vectors)
        self._norms = np.linalg.norm(self._matrix, axis=1)
        self.dim = self._matrix.shape[1]

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_texts(cls, records, dim: int = DEFAULT_DIM) -> "VectorIndex":
        return cls([(r.id, embed_text(r.text, dim)) for r in records])

    @classmethod
    def from_sidecar(cls, path: str | Path) -> "VectorIndex":
        """Load a JSONL sidecar of {"id": ..., "vector": [...]} rows."""
        entries = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                row = json.loads(line)
                entries.append((str(row["id"]), np.asarray(row["vector"], dtype=np.float64)))
        return cls(entries)


def retrieve_topk(index: VectorIndex, query: np.ndarray, k: int) -> list[tuple[str, float]]:
    """Top-k by cosine similarity, non-increasing, ties broken by ascending id."""
    if len(index) == 0:
        raise ValueError("index is empty")
    if k < 1:
        raise ValueError("k must be positive")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (index.dim,):
        raise ValueError(f"query dim {query.shape} does not match index dim ({index.dim},)")
    qnorm = np.linalg.norm(query)
    denom = index._norms * (qnorm if qnorm > 0 else 1.0)
    sims = index._matrix @ query
    sims = np.where(denom > 0, sims / np.where(denom > 0, denom, 1.0), 0.0)
    order = sorted(range(len(index)), key=lambda i: (-sims[i], index.ids[i]))
    return [(index.ids[i], float(sims[i])) for i in order[: min(k, len(index))]]


def softmax_probabilities(scores) -> np.ndarray:
    """exp(s_i) / sum_j exp(s_j), computed with max subtraction."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty score list")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    z = np.exp(s - s.max())
    return z / z.sum()


def softmax_sample(scored: list[tuple[str, float]], seed: int) -> tuple[str, float]:
    """Draw one id by inverse CDF over the softmax of the scores.

    Pure function of (scored, seed); returns the chosen id and its
    probability under the distribution.
    """
    probs = softmax_probabilities([s for _, s in scored])
    rng = np.random.default_rng(seed)
    r = rng.random()
    idx = int(np.searchsorted(np.cumsum(probs), r, side="right"))
    idx = min(idx, len(scored) - 1)
    return scored[idx][0], float(probs[idx])


@dataclass(frozen=True)
class GroundingResult:
    """A grounded match: synthetic instruction replaced by a user phrasing."""

    artificial_id: str
    chosen_user_id: str
    similarity: float
    sampled_probability: float


def apply_similarity_threshold(results, tau_sim: float) -> list:
    """Keep results whose similarity is >= tau_sim, order preserved."""
    return [r for r in results if r.similarity >= tau_sim]


def enforce_frequency_cap(selections, cap: int = DEFAULT_CAP):
    """First-come-first-kept cap on how often one user instruction recurs.

    Returns (kept, rejected); every rejection is for reason "cap".
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    counts: dict[str, int] = {}
    kept, rejected = [], []
    for sel in selections:
        n = counts.get(sel.chosen_user_id, 0)
        if n < cap:
            counts[sel.chosen_user_id] = n + 1
            kept.append(sel)
        else:
            rejected.append(sel)
    return kept, rejected


def ground_stream(
    artificial: list[InstructionRecord],
    index: VectorIndex,
    embedder=None,
    topk: int = DEFAULT_TOPK,
    tau_sim: float = DEFAULT_TAU_SIM,
    cap: int = DEFAULT_CAP,
    seed: int = 0,
    seed_fn=None,
):
    """Ground a stream of synthetic instructions against a user-query index.

    Per record: retrieve top-k, softmax-sample one candidate, drop it if its
    similarity is below tau_sim. A cap rejection gets one re-draw: the
    best-ranked other candidate above the threshold whose id is still under
    the cap; if that too is unavailable the record is dropped.

    `embedder` maps an InstructionRecord to its query vector (defaults to
    the trigram stand-in on the text; an embedding-sidecar lookup keyed by
    id slots in here). Returns (results, dropped) where dropped is a list
    of (artificial_id, reason) with reasons "below-threshold" or "cap".
    """
    from .records import derive_seed

    embed = embedder or (lambda record: embed_text(record.text, index.dim))
    counts: dict[str, int] = {}
    results, dropped = [], []
    for record in artificial:
        rec_seed = seed_fn(record) if seed_fn is not None else derive_seed(seed, record.id)
        candidates = retrieve_topk(index, embed(record), topk)
        probs = softmax_probabilities([s for _, s in candidates])
        chosen_id, prob = softmax_sample(candidates, rec_seed)
        sim = dict(candidates)[chosen_id]
        if sim < tau_sim:
            dropped.append((record.id, "below-threshold"))
            continue
        if counts.get(chosen_id, 0) >= cap:
            redraw = next(
                (
                    (i, cid, csim)
                    for i, (cid, csim) in enumerate(candidates)
                    if cid != chosen_id and csim >= tau_sim and counts.get(cid, 0) < cap
                ),
                None,
            )
            if redraw is None:
                dropped.append((record.id, "cap"))
                continue
            i, chosen_id, sim = redraw
            prob = float(probs[i])
        counts[chosen_id] = counts.get(chosen_id, 0) + 1
        results.append(GroundingResult(record.id, chosen_id, float(sim), float(prob)))
    return results, dropped


# --- clustering and dedup ----------------------------------------------------

def cluster_instructions(embeddings, k: int, seed: int = 0, max_iter: int = 100, history=None):
    """Seeded k-means++ over embedding vectors.

    Returns (assignments, centroids). The within-cluster sum of squares is
    non-increasing across Lloyd iterations; iteration stops at convergence
    or `max_iter`. Pass a list as `history` to collect the objective after
    each iteration.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2:
        X = np.stack([np.asarray(e, dtype=np.float64) for e in embeddings])
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")

    rng = np.random.default_rng(seed)
    centroids = np.empty((k, X.shape[1]))
    centroids[0] = X[rng.integers(n)]
    closest = np.sum((X - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            centroids[j] = X[rng.integers(n)]
            continue
        r = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(closest), r, side="right"))
        idx = min(idx, n - 1)
        centroids[j] = X[idx]
        closest = np.minimum(closest, np.sum((X - centroids[j]) ** 2, axis=1))

    assignments = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assignments = np.argmin(d2, axis=1)
        new_centroids = centroids.copy()
        for j in range(k):
            members = X[new_assignments == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster on the farthest point
                far = int(np.argmax(d2[np.arange(n), new_assignments]))
                new_centroids[j] = X[far]
                new_assignments[far] = j
        converged = np.array_equal(new_assignments, assignments) and np.allclose(
            new_centroids, centroids
        )
        assignments, centroids = new_assignments, new_centroids
        if history is not None:
            history.append(kmeans_objective(X, assignments, centroids))
        if converged:
            break
    return assignments, centroids


def kmeans_objective(embeddings, assignments, centroids) -> float:
    X = np.asarray(embeddings, dtype=np.float64)
    return float(np.sum((X - np.asarray(centroids)[assignments]) ** 2))


def dedup_instructions(
    corpus: list[InstructionRecord], tau_dup: float, embedder=embed_text
) -> list[InstructionRecord]:
    """Greedy in-order dedup: drop if cosine to any kept record >= tau_dup.

    Byte-identical texts are always dropped regardless of the threshold.
    """
    kept: list[InstructionRecord] = []
    kept_vecs: list[np.ndarray] = []
    seen_texts: set[str] = set()
    for record in corpus:
        if record.text in seen_texts:
            continue
        vec = embedder(record.text)
        if kept_vecs:
            sims = np.stack(kept_vecs) @ vec
            if float(sims.max()) >= tau_dup:
                continue
        kept.append(record)
        kept_vecs.append(vec)
        seen_texts.add(record.text)
    return kept


# --- applicability ------------------------------------------------------------

@dataclass(frozen=True)
class ApplicabilityOutcome:
    """One of: applicable, minimally_edited (with new text), discarded (with reason)."""

    status: str
    text: str | None = None
    reason: str | None = None

    @classmethod
    def applicable(cls):
        return cls("applicable")

    @classmethod
    def minimally_edited(cls, text: str):
        return cls("minimally_edited", text=text)

    @classmethod
    def discarded(cls, reason: str):
        return cls("discarded", reason=reason)


_STOPWORDS = frozenset(
    "a an the this that these those it its of in on at to from with and or".split()
)

MIN_TOKEN_RETENTION = 0.6


def keyword_applicability(instruction: str, tags) -> ApplicabilityOutcome:
    """Bundled stand-in validator: keyword presence against a tag list.

    A tag occurring as a word in the instruction makes it applicable.
    Otherwise the last content word is swapped for the first tag
    (lexicographically) as a minimal edit; with no tags the instruction is
    discarded for lack of a referent.
    """
    tokens = [t.lower() for t in _WORD_RE.findall(instruction)]
    tagset = {str(t).lower() for t in tags}
    if tagset & set(tokens):
        return ApplicabilityOutcome.applicable()
    if not tagset:
        return ApplicabilityOutcome.discarded("no referent")
    content_positions = [i for i, t in enumerate(tokens) if t not in _STOPWORDS]
    if not content_positions:
        return ApplicabilityOutcome.discarded("no referent")
    words = _WORD_RE.findall(instruction)
    target_pos = content_positions[-1]
    replacement = sorted(tagset)[0]
    edited_words = words[:target_pos] + [replacement] + words[target_pos + 1 :]
    edited = _rebuild_text(instruction, words, edited_words)
    return ApplicabilityOutcome.minimally_edited(edited)


def _rebuild_text(original: str, words, new_words) -> str:
    out = []
    cursor = 0
    i = 0
    for match in _WORD_RE.finditer(original):
        out.append(original[cursor : match.start()])
        out.append(new_words[i])
        cursor = match.end()
        i += 1
    out.append(original[cursor:])
    return "".join(out)


def token_retention(original: str, edited: str) -> float:
    orig = [t.lower() for t in _WORD_RE.findall(original)]
    new = [t.lower() for t in _WORD_RE.findall(edited)]
    if not orig:
        return 0.0
    from collections import Counter

    kept = Counter(orig) & Counter(new)
    return sum(kept.values()) / len(orig)


def validate_applicability(
    instruction: str, image_descriptor, validator=None
) -> ApplicabilityOutcome:
    """Check whether an instruction applies to an image, via hook or stand-in.

    The image_descriptor is a tag list for the bundled stand-in; external
    validators receive (instruction, image_descriptor) and must return an
    ApplicabilityOutcome. Hook exceptions surface as HookError. A proposed
    minimal edit must keep >= 60% of the original tokens, be non-empty and
    actually differ, otherwise the pair is discarded.
    """
    hook = validator or (lambda instr, desc: keyword_applicability(instr, desc))
    try:
        outcome = hook(instruction, image_descriptor)
    except Exception as exc:
        raise HookError(f"applicability validator failed: {exc}") from exc
    if not isinstance(outcome, ApplicabilityOutcome):
        raise HookError(f"validator returned {type(outcome).__name__}, not an outcome")
    if outcome.status == "minimally_edited":
        text = (outcome.text or "").strip()
        if not text or text == instruction:
            return ApplicabilityOutcome.discarded("proposed edit is not an edit")
        if token_retention(instruction, text) < MIN_TOKEN_RETENTION:
            return ApplicabilityOutcome.discarded("edit exceeds minimal budget")
    return outcome
