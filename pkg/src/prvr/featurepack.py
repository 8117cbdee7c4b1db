"""On-disk feature packs: precomputed frame/word features plus query->video pairing.

A pack is a directory with a ``manifest.json`` and one headerless raw file per
array (row-major, little-endian IEEE-754 float32). The manifest records meta
info, the pairing table, and per-array entries ``{id, path, shape, dtype}``.
Validation is strict: any invariant breach raises :class:`PackError` instead
of degrading silently.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PACK_FORMAT_VERSION = 1
DTYPE_TAG = "f32le"
SPLITS = ("train", "val", "test")

# Generator constants: per-frame jitter is a fraction of the moment noise,
# so frames inside one segment stay close to the segment's latent vector.
FRAME_JITTER_FRACTION = 0.25
WORDS_PER_QUERY = 4


class PackError(ValueError):
    """A pack file, manifest, or invariant is broken."""


@dataclass
class VideoRecord:
    video_id: str
    frames: np.ndarray  # [T, feature_dim_video] float32


@dataclass
class QueryRecord:
    query_id: str
    words: np.ndarray  # [N, feature_dim_text] float32


@dataclass
class PackMeta:
    feature_dim_video: int
    feature_dim_text: int
    split: str


@dataclass
class FeaturePack:
    videos: list[VideoRecord]
    queries: list[QueryRecord]
    # query_id -> (video_id, optional (start, end) frame span). Spans are
    # diagnostic metadata from the synthetic generator; training never reads
    # them (moment timestamps are unavailable in this retrieval setting).
    pairing: dict[str, tuple[str, tuple[int, int] | None]]
    meta: PackMeta
    aux: dict[str, np.ndarray] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def video_index(self) -> dict[str, VideoRecord]:
        return {v.video_id: v for v in self.videos}

    def query_index(self) -> dict[str, QueryRecord]:
        return {q.query_id: q for q in self.queries}

    @property
    def num_videos(self) -> int:
        return len(self.videos)

    @property
    def num_queries(self) -> int:
        return len(self.queries)

    def validate(self) -> None:
        if self.meta.split not in SPLITS:
            raise PackError(f"unknown split {self.meta.split!r}, expected one of {SPLITS}")
        if self.meta.feature_dim_video <= 0 or self.meta.feature_dim_text <= 0:
            raise PackError("feature dimensions must be positive")

        seen_v: set[str] = set()
        for rec in self.videos:
            if rec.video_id in seen_v:
                raise PackError(f"duplicate video_id {rec.video_id!r}")
            seen_v.add(rec.video_id)
            _check_array(rec.frames, rec.video_id, self.meta.feature_dim_video)

        seen_q: set[str] = set()
        for rec in self.queries:
            if rec.query_id in seen_q:
                raise PackError(f"duplicate query_id {rec.query_id!r}")
            seen_q.add(rec.query_id)
            _check_array(rec.words, rec.query_id, self.meta.feature_dim_text)

        frame_counts = {v.video_id: v.frames.shape[0] for v in self.videos}
        for qid in seen_q:
            if qid not in self.pairing:
                raise PackError(f"query {qid!r} missing from pairing table")
        for qid, (vid, span) in self.pairing.items():
            if qid not in seen_q:
                raise PackError(f"pairing references unknown query_id {qid!r}")
            if vid not in seen_v:
                raise PackError(f"pairing for {qid!r} references unknown video_id {vid!r}")
            if span is not None:
                start, end = span
                if not (0 <= start < end <= frame_counts[vid]):
                    raise PackError(
                        f"moment span {span} of query {qid!r} outside [0, {frame_counts[vid]}]"
                    )


def _check_array(arr: np.ndarray, name: str, expected_dim: int) -> None:
    if arr.ndim != 2:
        raise PackError(f"array {name!r} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise PackError(f"array {name!r} has no rows")
    if arr.shape[1] != expected_dim:
        raise PackError(
            f"array {name!r} has feature dim {arr.shape[1]}, manifest says {expected_dim}"
        )
    if arr.dtype != np.float32:
        raise PackError(f"array {name!r} must be float32, got {arr.dtype}")
    if not np.isfinite(arr).all():
        raise PackError(f"array {name!r} contains NaN/Inf entries")


# ---------------------------------------------------------------------------
# Container I/O


def write_pack(pack: FeaturePack, out_dir: str | Path) -> None:
    """Write ``pack`` to ``out_dir`` as manifest.json plus raw f32le files."""
    pack.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        videos_entries = _write_arrays(out, "videos", [(v.video_id, v.frames) for v in pack.videos])
        queries_entries = _write_arrays(out, "queries", [(q.query_id, q.words) for q in pack.queries])
        aux_entries = _write_arrays(out, "aux", sorted(pack.aux.items()))
        manifest = {
            "format_version": PACK_FORMAT_VERSION,
            "meta": asdict(pack.meta),
            "videos": videos_entries,
            "queries": queries_entries,
            "aux": aux_entries,
            "pairing": {
                qid: {"video_id": vid, "moment_span": list(span) if span is not None else None}
                for qid, (vid, span) in sorted(pack.pairing.items())
            },
            "info": pack.info,
        }
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise PackError(f"failed writing pack to {out}: {exc}") from exc


def _write_arrays(root: Path, section: str, items) -> list[dict]:
    entries = []
    sub = root / section
    if items:
        sub.mkdir(exist_ok=True)
    for idx, (item_id, arr) in enumerate(items):
        rel = f"{section}/{idx:06d}.f32"
        arr.astype("<f4", copy=False).tofile(root / rel)
        entries.append({"id": item_id, "path": rel, "shape": list(arr.shape), "dtype": DTYPE_TAG})
    return entries


def read_pack(pack_dir: str | Path) -> FeaturePack:
    """Load and strictly validate a pack directory."""
    root = Path(pack_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise PackError(f"no manifest.json in {root}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != PACK_FORMAT_VERSION:
        raise PackError(f"unsupported pack format_version {manifest.get('format_version')!r}")

    meta = PackMeta(**manifest["meta"])
    videos = [
        VideoRecord(e["id"], _read_array(root, e)) for e in manifest.get("videos", [])
    ]
    queries = [
        QueryRecord(e["id"], _read_array(root, e)) for e in manifest.get("queries", [])
    ]
    aux = {e["id"]: _read_array(root, e) for e in manifest.get("aux", [])}
    pairing = {}
    for qid, entry in manifest.get("pairing", {}).items():
        span = entry.get("moment_span")
        pairing[qid] = (entry["video_id"], tuple(span) if span is not None else None)

    pack = FeaturePack(videos, queries, pairing, meta, aux, manifest.get("info", {}))
    pack.validate()
    return pack


def _read_array(root: Path, entry: dict) -> np.ndarray:
    if entry.get("dtype") != DTYPE_TAG:
        raise PackError(f"array {entry.get('id')!r} has unsupported dtype {entry.get('dtype')!r}")
    path = root / entry["path"]
    if not path.is_file():
        raise PackError(f"missing array file {path}")
    shape = tuple(int(s) for s in entry["shape"])
    raw = path.read_bytes()
    expected = 4 * int(np.prod(shape)) if shape else 4
    if len(raw) != expected:
        raise PackError(
            f"{path}: byte count {len(raw)} does not match shape {shape} ({expected} bytes)"
        )
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def pack_digest(pack_dir: str | Path) -> str:
    """SHA-256 over the manifest and every referenced raw file, for determinism checks."""
    root = Path(pack_dir)
    h = hashlib.sha256()
    h.update((root / "manifest.json").read_bytes())
    with open(root / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    for section in ("videos", "queries", "aux"):
        for entry in manifest.get(section, []):
            h.update((root / entry["path"]).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Synthetic packs


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the planted-structure generator.

    ``shared_concept_rate`` is the probability that a moment reuses a latent
    concept already used by another video (plants cross-video correlation);
    ``redundant_moment_rate`` is the fraction of moments carrying no query
    (plants within-video redundancy) and must agree with
    ``1 - queries_per_video / moments_per_video``.
    """

    num_concepts: int
    num_videos: int
    moments_per_video: int
    frames_per_moment: int
    queries_per_video: int
    noise_scale: float
    shared_concept_rate: float
    redundant_moment_rate: float
    seed: int
    feature_dim_video: int = 64
    feature_dim_text: int = 64

    def validate(self) -> None:
        if self.num_videos < 1 or self.moments_per_video < 1 or self.frames_per_moment < 1:
            raise PackError("num_videos, moments_per_video, frames_per_moment must be >= 1")
        if not (1 <= self.queries_per_video <= self.moments_per_video):
            raise PackError("queries_per_video must be in [1, moments_per_video]")
        if self.num_concepts < self.moments_per_video:
            raise PackError("need num_concepts >= moments_per_video for distinct in-video concepts")
        if self.noise_scale < 0:
            raise PackError("noise_scale must be nonnegative")
        for name in ("shared_concept_rate", "redundant_moment_rate"):
            val = getattr(self, name)
            if not (0.0 <= val <= 1.0):
                raise PackError(f"{name} must be in [0, 1]")
        if self.feature_dim_text < self.feature_dim_video:
            raise PackError("feature_dim_text must be >= feature_dim_video (orthonormal text map)")
        # The query-less fraction is structurally fixed by the two counts;
        # reject a rate that contradicts it rather than silently ignoring it.
        structural = (self.moments_per_video - self.queries_per_video) / self.moments_per_video
        if abs(self.redundant_moment_rate - structural) > 0.5 / self.moments_per_video + 1e-9:
            raise PackError(
                f"redundant_moment_rate {self.redundant_moment_rate} inconsistent with "
                f"(moments_per_video - queries_per_video)/moments_per_video = {structural:.4f}"
            )


def generate_synthetic(spec: SyntheticSpec) -> tuple[FeaturePack, FeaturePack, FeaturePack]:
    """Generate deterministic train/val/test packs with planted structure.

    Every video is a concatenation of ``moments_per_video`` segments. Each
    segment instantiates a latent concept plus segment-level Gaussian noise,
    repeated ``frames_per_moment`` times with small per-frame jitter. Each
    query is the mean of its target segment's frames mapped into a distinct
    text basis (a fixed orthonormal map stored in the pack's aux arrays),
    plus noise. Same spec + seed -> bitwise-identical packs.
    """
    spec.validate()
    master, s_train, s_val, s_test = np.random.SeedSequence(spec.seed).spawn(4)
    rng = np.random.default_rng(master)

    concepts = rng.standard_normal((spec.num_concepts, spec.feature_dim_video))
    concepts /= np.linalg.norm(concepts, axis=1, keepdims=True)
    # Orthonormal-column map video basis -> text basis, shared by all splits.
    gauss = rng.standard_normal((spec.feature_dim_text, spec.feature_dim_video))
    text_map, _ = np.linalg.qr(gauss)

    packs = []
    for split, stream in (("train", s_train), ("val", s_val), ("test", s_test)):
        packs.append(_generate_split(spec, split, np.random.default_rng(stream), concepts, text_map))
    return tuple(packs)


def _allocate_concepts(spec: SyntheticSpec, rng: np.random.Generator) -> list[list[int]]:
    """Assign a concept to every (video, moment), distinct within a video.

    With probability ``shared_concept_rate`` a moment reuses a concept already
    used by another video; otherwise it takes a not-yet-used one while any
    remain (afterwards reuse is forced).
    """
    used_by: dict[int, set[int]] = {}
    unused = list(range(spec.num_concepts))
    per_video: list[list[int]] = []
    for v in range(spec.num_videos):
        mine: list[int] = []
        for _ in range(spec.moments_per_video):
            reusable = sorted(
                c for c, owners in used_by.items() if owners - {v} and c not in mine
            )
            fresh = [c for c in unused if c not in mine]
            if reusable and (rng.random() < spec.shared_concept_rate or not fresh):
                concept = int(rng.choice(reusable))
            elif fresh:
                concept = int(rng.choice(fresh))
            else:
                # All concepts already appear in this video's earlier moments
                # is excluded by validation; fall back defensively.
                concept = int(rng.choice(sorted(set(range(spec.num_concepts)) - set(mine))))
            mine.append(concept)
            used_by.setdefault(concept, set()).add(v)
            if concept in unused:
                unused.remove(concept)
        per_video.append(mine)
    return per_video


def _generate_split(
    spec: SyntheticSpec,
    split: str,
    rng: np.random.Generator,
    concepts: np.ndarray,
    text_map: np.ndarray,
) -> FeaturePack:
    fpm = spec.frames_per_moment
    jitter = FRAME_JITTER_FRACTION * spec.noise_scale
    assignment = _allocate_concepts(spec, rng)

    videos, queries, pairing = [], [], {}
    for v, vid_concepts in enumerate(assignment):
        video_id = f"{split}-v{v:05d}"
        segments, centers = [], []
        for concept in vid_concepts:
            center = concepts[concept] + spec.noise_scale * rng.standard_normal(
                spec.feature_dim_video
            )
            frames = center + jitter * rng.standard_normal((fpm, spec.feature_dim_video))
            centers.append(center)
            segments.append(frames)
        frames_all = np.concatenate(segments, axis=0)
        videos.append(VideoRecord(video_id, frames_all.astype(np.float32)))

        queried = sorted(
            int(m) for m in rng.choice(spec.moments_per_video, spec.queries_per_video, replace=False)
        )
        for m in queried:
            query_id = f"{split}-q{v:05d}-{m}"
            target_mean = segments[m].mean(axis=0)
            words = text_map @ target_mean + spec.noise_scale * rng.standard_normal(
                (WORDS_PER_QUERY, spec.feature_dim_text)
            )
            queries.append(QueryRecord(query_id, words.astype(np.float32)))
            pairing[query_id] = (video_id, (m * fpm, (m + 1) * fpm))

    meta = PackMeta(spec.feature_dim_video, spec.feature_dim_text, split)
    aux = {
        "concepts": concepts.astype(np.float32),
        "text_map": text_map.astype(np.float32),
        "concept_assignment": np.asarray(assignment, dtype=np.float32),
    }
    info = {"synthetic_spec": asdict(spec)}
    pack = FeaturePack(videos, queries, pairing, meta, aux, info)
    pack.validate()
    return pack
