import json

import numpy as np
import pytest

from prvr.featurepack import (
    FeaturePack,
    PackError,
    PackMeta,
    QueryRecord,
    SyntheticSpec,
    VideoRecord,
    generate_synthetic,
    pack_digest,
    read_pack,
    write_pack,
)


def random_pack(rng, num_videos=3, num_queries=4, dv=8, dt=6, split="train") -> FeaturePack:
    videos = [
        VideoRecord(f"v{i}", rng.standard_normal((int(rng.integers(2, 9)), dv)).astype(np.float32))
        for i in range(num_videos)
    ]
    queries = [
        QueryRecord(f"q{i}", rng.standard_normal((int(rng.integers(1, 5)), dt)).astype(np.float32))
        for i in range(num_queries)
    ]
    pairing = {q.query_id: (videos[i % num_videos].video_id, None) for i, q in enumerate(queries)}
    return FeaturePack(videos, queries, pairing, PackMeta(dv, dt, split))


class TestContainer:
    def test_roundtrip_bitwise(self, tmp_path, rng):
        for trial in range(5):
            pack = random_pack(rng)
            out = tmp_path / f"pack{trial}"
            write_pack(pack, out)
            loaded = read_pack(out)
            assert [v.video_id for v in loaded.videos] == [v.video_id for v in pack.videos]
            for a, b in zip(loaded.videos, pack.videos):
                assert a.frames.tobytes() == b.frames.tobytes()
            for a, b in zip(loaded.queries, pack.queries):
                assert a.words.tobytes() == b.words.tobytes()
            assert loaded.pairing == pack.pairing

    def test_manifest_shape_and_byte_count(self, tmp_path, rng):
        frames = rng.standard_normal((4, 8)).astype(np.float32)
        pack = FeaturePack(
            [VideoRecord("v0", frames)], [], {}, PackMeta(8, 6, "train")
        )
        write_pack(pack, tmp_path / "p")
        manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
        entry = manifest["videos"][0]
        assert entry["shape"] == [4, 8]
        assert entry["dtype"] == "f32le"
        assert (tmp_path / "p" / entry["path"]).stat().st_size == 128  # 4*8*4 bytes

    def test_empty_query_list_is_valid(self, tmp_path, rng):
        pack = FeaturePack(
            [VideoRecord("v0", rng.standard_normal((2, 8)).astype(np.float32))],
            [],
            {},
            PackMeta(8, 6, "val"),
        )
        write_pack(pack, tmp_path / "p")
        loaded = read_pack(tmp_path / "p")
        assert loaded.queries == []

    def test_byte_count_mismatch_rejected(self, tmp_path, rng):
        pack = random_pack(rng)
        write_pack(pack, tmp_path / "p")
        manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
        target = tmp_path / "p" / manifest["videos"][0]["path"]
        target.write_bytes(target.read_bytes()[:-4])
        with pytest.raises(PackError, match="byte count"):
            read_pack(tmp_path / "p")

    def test_dangling_pairing_rejected(self, tmp_path, rng):
        pack = random_pack(rng)
        pack.pairing["q0"] = ("no-such-video", None)
        with pytest.raises(PackError, match="unknown video_id"):
            write_pack(pack, tmp_path / "p")

    def test_nan_rejected(self, tmp_path, rng):
        pack = random_pack(rng)
        pack.videos[0].frames[0, 0] = np.nan
        with pytest.raises(PackError, match="NaN"):
            write_pack(pack, tmp_path / "p")

    def test_missing_file_rejected(self, tmp_path, rng):
        pack = random_pack(rng)
        write_pack(pack, tmp_path / "p")
        manifest = json.loads((tmp_path / "p" / "manifest.json").read_text())
        (tmp_path / "p" / manifest["queries"][0]["path"]).unlink()
        with pytest.raises(PackError, match="missing array file"):
            read_pack(tmp_path / "p")

    def test_span_bounds_enforced(self, rng):
        pack = random_pack(rng)
        qid = pack.queries[0].query_id
        vid = pack.pairing[qid][0]
        frames = pack.video_index()[vid].frames.shape[0]
        pack.pairing[qid] = (vid, (0, frames + 1))
        with pytest.raises(PackError, match="span"):
            pack.validate()


def spec_with(**kw) -> SyntheticSpec:
    base = dict(
        num_concepts=16,
        num_videos=10,
        moments_per_video=4,
        frames_per_moment=5,
        queries_per_video=2,
        noise_scale=0.05,
        shared_concept_rate=0.2,
        redundant_moment_rate=0.5,
        seed=3,
        feature_dim_video=12,
        feature_dim_text=12,
    )
    base.update(kw)
    return SyntheticSpec(**base)


class TestSyntheticGenerator:
    def test_deterministic_given_seed(self, tmp_path):
        spec = spec_with(seed=1)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        for pa, pb in zip(a, b):
            for va, vb in zip(pa.videos, pb.videos):
                assert va.frames.tobytes() == vb.frames.tobytes()
            for qa, qb in zip(pa.queries, pb.queries):
                assert qa.words.tobytes() == qb.words.tobytes()
        write_pack(a[0], tmp_path / "a")
        write_pack(b[0], tmp_path / "b")
        assert pack_digest(tmp_path / "a") == pack_digest(tmp_path / "b")

    def test_structure(self):
        spec = spec_with()
        train, val, test = generate_synthetic(spec)
        assert (train.meta.split, val.meta.split, test.meta.split) == ("train", "val", "test")
        for pack in (train, val, test):
            assert pack.num_videos == spec.num_videos
            assert pack.num_queries == spec.num_videos * spec.queries_per_video
            for rec in pack.videos:
                assert rec.frames.shape == (
                    spec.moments_per_video * spec.frames_per_moment,
                    spec.feature_dim_video,
                )
            for qid, (vid, span) in pack.pairing.items():
                assert span is not None
                start, end = span
                assert end - start == spec.frames_per_moment

    def test_zero_noise_queries_are_exact_linear_images(self):
        spec = spec_with(noise_scale=0.0, shared_concept_rate=0.0, seed=5)
        train, _, _ = generate_synthetic(spec)
        text_map = train.aux["text_map"].astype(np.float64)
        fpm = spec.frames_per_moment
        for query in train.queries:
            vid, (start, end) = train.pairing[query.query_id]
            frames = train.video_index()[vid].frames.astype(np.float64)
            target_mean = frames[start:end].mean(axis=0)
            image = text_map @ target_mean
            for word in query.words:
                np.testing.assert_allclose(word, image, atol=1e-6)

    def test_zero_noise_target_moment_wins(self):
        # Mapped back through the fixed text<->video map the query matches its
        # own moment exactly and beats every other moment of the same video.
        spec = spec_with(noise_scale=0.0, shared_concept_rate=0.0, seed=6)
        train, _, _ = generate_synthetic(spec)
        text_map = train.aux["text_map"].astype(np.float64)
        fpm = spec.frames_per_moment
        for query in train.queries:
            vid, (start, end) = train.pairing[query.query_id]
            frames = train.video_index()[vid].frames.astype(np.float64)
            back = text_map.T @ query.words.mean(axis=0).astype(np.float64)
            target_idx = start // fpm
            sims = []
            for m in range(spec.moments_per_video):
                mean = frames[m * fpm : (m + 1) * fpm].mean(axis=0)
                sims.append(np.dot(back, mean) / (np.linalg.norm(back) * np.linalg.norm(mean)))
            assert sims[target_idx] == pytest.approx(1.0, abs=1e-5)
            for m, sim in enumerate(sims):
                if m != target_idx:
                    assert sims[target_idx] > sim

    def test_shared_concept_fraction_lands_in_window(self):
        # Count concepts used by >= 2 videos in the generated train pack.
        spec = spec_with(
            num_concepts=1000,
            num_videos=100,
            moments_per_video=2,
            queries_per_video=2,
            redundant_moment_rate=0.0,
            shared_concept_rate=0.5,
            seed=21,
        )
        train, _, _ = generate_synthetic(spec)
        assignment = train.aux["concept_assignment"].astype(int)
        videos_per_concept = {}
        for v, row in enumerate(assignment):
            for c in row:
                videos_per_concept.setdefault(c, set()).add(v)
        used = len(videos_per_concept)
        shared = sum(1 for owners in videos_per_concept.values() if len(owners) >= 2)
        assert 0.35 <= shared / used <= 0.65

    def test_concepts_distinct_within_video(self):
        spec = spec_with(seed=9)
        train, _, _ = generate_synthetic(spec)
        assignment = train.aux["concept_assignment"].astype(int)
        for row in assignment:
            assert len(set(row.tolist())) == len(row)

    def test_inconsistent_redundant_rate_rejected(self):
        with pytest.raises(PackError, match="redundant_moment_rate"):
            spec_with(redundant_moment_rate=0.9).validate()

    def test_queries_per_video_cap(self):
        with pytest.raises(PackError, match="queries_per_video"):
            spec_with(queries_per_video=5).validate()
