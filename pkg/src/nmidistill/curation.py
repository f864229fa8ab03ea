"""Mixed-corpus curation: frame sampling, similarity dedup, grayscale, class balancing, mixing."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from nmidistill.errors import NumericError
from nmidistill.io_formats import CorpusManifest, Record


@dataclass
class CurationReport:
    step: str
    input_count: int
    output_count: int
    parameters: dict = field(default_factory=dict)
    similarity: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def _provenance(manifest: CorpusManifest, entry: dict) -> list[dict]:
    return list(manifest.provenance) + [entry]


# ---------------------------------------------------------------------------
# fixed-interval sampling


def interval_sample(manifest: CorpusManifest, k: int) -> CorpusManifest:
    """Keep every k-th frame of each sequence, counted from the sequence's first frame index."""
    if k < 1:
        raise ValueError(f"interval must be >= 1, got {k}")
    first: dict[str, int] = {}
    for rec in manifest.records:
        if rec.sequence_id is not None:
            first[rec.sequence_id] = min(first.get(rec.sequence_id, rec.frame_index), rec.frame_index)
    kept = [rec for rec in manifest.records
            if rec.sequence_id is None or (rec.frame_index - first[rec.sequence_id]) % k == 0]
    entry = {"step": "interval", "k": k, "input": len(manifest), "output": len(kept)}
    return CorpusManifest(kept, _provenance(manifest, entry))


# ---------------------------------------------------------------------------
# similarity-based sampling


def l2_normalize(vectors) -> np.ndarray:
    v = np.asarray(vectors, dtype=np.float64)
    if v.ndim != 2:
        raise NumericError(f"embeddings must be [n, D], got shape {v.shape}")
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms[:, 0] == 0)[0])
        raise NumericError(f"embedding {bad} is the zero vector; cosine similarity is undefined")
    return v / norms


def greedy_dedup(vectors, threshold: float) -> list[int]:
    """Indices kept by a first-seen-wins scan: a vector survives iff its cosine
    similarity to every previously kept vector is below ``threshold``."""
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    unit = l2_normalize(vectors)
    n, d = unit.shape
    kept_vecs = np.empty((n, d))
    kept: list[int] = []
    for i in range(n):
        if kept:
            if np.max(kept_vecs[: len(kept)] @ unit[i]) >= threshold:
                continue
        kept_vecs[len(kept)] = unit[i]
        kept.append(i)
    return kept


def dedup_manifest(manifest: CorpusManifest, vectors, threshold: float) -> CorpusManifest:
    """Apply :func:`greedy_dedup` with embeddings given in manifest order."""
    vectors = np.asarray(vectors)
    if len(vectors) != len(manifest):
        raise ValueError(f"{len(vectors)} embeddings for {len(manifest)} records")
    kept = greedy_dedup(vectors, threshold)
    entry = {"step": "dedup", "threshold": threshold, "input": len(manifest), "output": len(kept)}
    return CorpusManifest([manifest.records[i] for i in kept], _provenance(manifest, entry))


# ---------------------------------------------------------------------------
# grayscale


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """8-bit RGB -> 8-bit image with three identical luma channels.

    Luma is round(0.299 R + 0.587 G + 0.114 B) with halves rounded up, computed
    in integer arithmetic so gray input maps to itself exactly.
    """
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[-1] == 1:
        return np.repeat(img.astype(np.uint8), 3, axis=-1)
    if img.shape[-1] != 3:
        raise ValueError(f"expected an RGB or single-channel raster, got shape {image.shape}")
    c = img.astype(np.int64)
    y = (299 * c[..., 0] + 587 * c[..., 1] + 114 * c[..., 2] + 500) // 1000
    return np.repeat(y.astype(np.uint8)[..., None], 3, axis=-1)


def grayscale_manifest(manifest: CorpusManifest) -> CorpusManifest:
    """Record the grayscale transform for RGB records (pixels are converted at load time)."""
    n_rgb = sum(rec.modality == "rgb" for rec in manifest.records)
    entry = {"step": "grayscale", "records": n_rgb}
    return CorpusManifest(list(manifest.records), _provenance(manifest, entry))


# ---------------------------------------------------------------------------
# class-balanced subsampling


def class_quotas(labels: Iterable[str], n: int) -> dict[str, int]:
    """Split ``n`` evenly; the remainder goes one each to the lexicographically first classes."""
    classes = sorted(set(labels))
    if not classes:
        raise ValueError("no classes to sample from")
    base, extra = divmod(n, len(classes))
    return {c: base + (1 if i < extra else 0) for i, c in enumerate(classes)}


def balanced_subsample(manifest: CorpusManifest, n: int, seed: int = 0) -> CorpusManifest:
    """Draw ``n`` records with per-class counts differing by at most one; output keeps manifest order."""
    by_class: dict[str, list[int]] = defaultdict(list)
    for i, rec in enumerate(manifest.records):
        if rec.class_label is None:
            raise ValueError(f"record {rec.path!r} has no class label")
        by_class[rec.class_label].append(i)
    quotas = class_quotas(by_class, n)
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for cls in sorted(quotas):
        members, q = by_class[cls], quotas[cls]
        if len(members) < q:
            raise ValueError(f"class {cls!r} has {len(members)} records, fewer than its quota {q}")
        chosen.extend(np.asarray(members)[rng.choice(len(members), size=q, replace=False)].tolist())
    chosen.sort()
    entry = {"step": "balance", "n": n, "seed": seed, "classes": len(quotas),
             "input": len(manifest), "output": len(chosen)}
    return CorpusManifest([manifest.records[i] for i in chosen], _provenance(manifest, entry))


# ---------------------------------------------------------------------------
# mixing


def mix_manifests(sources: Sequence[tuple[str, CorpusManifest]],
                  transforms: dict[str, Sequence[str]] | None = None) -> CorpusManifest:
    """Concatenate named sources in order. RGB sources are tagged with the grayscale transform
    unless ``transforms`` overrides the list for that source."""
    transforms = transforms or {}
    seen: dict[str, str] = {}
    records: list[Record] = []
    provenance: list[dict] = []
    for name, manifest in sources:
        for rec in manifest.records:
            if rec.path in seen:
                raise ValueError(f"path {rec.path!r} appears in both {seen[rec.path]!r} and {name!r}")
            seen[rec.path] = name
        records.extend(manifest.records)
        has_rgb = any(rec.modality == "rgb" for rec in manifest.records)
        applied = list(transforms.get(name, ["grayscale"] if has_rgb else []))
        provenance.append({"step": "mix", "source": name, "count": len(manifest),
                           "transforms": applied, "history": list(manifest.provenance)})
    return CorpusManifest(records, provenance)


# ---------------------------------------------------------------------------
# cross-dataset similarity


@dataclass(frozen=True)
class SimilarityEstimate:
    mean: float
    mode: str          # "exact" or "sampled"
    pairs: int


def cross_similarity(emb_a, emb_b, pair_cap: int = 1_000_000, seed: int = 0) -> SimilarityEstimate:
    """Mean cosine similarity over all cross pairs, or over ``pair_cap`` seeded random pairs."""
    a = l2_normalize(emb_a)
    b = l2_normalize(emb_b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both embedding sets must be non-empty")
    total = len(a) * len(b)
    if total <= pair_cap:
        # mean of a_i . b_j over all pairs = (sum a) . (sum b) / (|A| |B|)
        return SimilarityEstimate(float(a.sum(axis=0) @ b.sum(axis=0) / total), "exact", total)
    rng = np.random.default_rng(seed)
    ia = rng.integers(0, len(a), pair_cap)
    ib = rng.integers(0, len(b), pair_cap)
    return SimilarityEstimate(float(np.einsum("ij,ij->i", a[ia], b[ib]).mean()), "sampled", pair_cap)


def similarity_table(sets: dict[str, np.ndarray], targets: dict[str, np.ndarray],
                     pair_cap: int = 1_000_000, seed: int = 0) -> dict:
    """``{source: {target: {mean, mode, pairs}}}`` for every source/target pair."""
    table = {}
    for sname, semb in sets.items():
        table[sname] = {tname: asdict(cross_similarity(semb, temb, pair_cap, seed))
                        for tname, temb in targets.items()}
    return table


# ---------------------------------------------------------------------------
# raster I/O


def read_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_image(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)
