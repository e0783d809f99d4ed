import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from railseg.ply import load_ply
from railseg.pipeline import (ALIGNED, HUNDRED_THOUSAND, MILLION, RANDOM, DatasetManifest, DensityLevel,
                              assemble_group, augment, density_levels, extract_patches, make_group_configs,
                              subsample_to_level)
from railseg.pointcloud import PointCloud
from railseg.synthgen import WOOD_TIE, generate_clean


def cloud_of(n, seed=0):
    rng = np.random.default_rng(seed)
    return PointCloud(rng.uniform(-1, 1, (n, 3)), rng.integers(0, 3, n))


def diameter(p):
    return np.linalg.norm(p[:, None] - p[None], axis=-1).max()


def pdist(p):
    return np.linalg.norm(p[:, None] - p[None], axis=-1)


TINY = DensityLevel("tiny", (100, 300), 64)


class TestLevelsAndGroups:
    def test_full_scale(self):
        lv = density_levels(1.0)
        assert lv[MILLION].point_range == (2_000_000, 5_000_000)
        assert lv[MILLION].patch_size == 372_680
        assert lv[HUNDRED_THOUSAND].point_range == (200_000, 500_000)
        assert lv[HUNDRED_THOUSAND].patch_size == 37_268

    def test_desk_scale(self):
        lv = density_levels(1 / 91)
        assert (lv[MILLION].patch_size, lv[HUNDRED_THOUSAND].patch_size) == (4096, 409)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0.005, 1.0))
    def test_ratio_preserved(self, s):
        lv = density_levels(s)
        small = lv[HUNDRED_THOUSAND].patch_size
        assert abs(lv[MILLION].patch_size - 10 * small) <= 10

    def test_bad_scale(self):
        with pytest.raises(ValueError):
            density_levels(0.0)

    def test_table(self):
        groups = make_group_configs()
        got = [(g.id, g.level.name, g.rotation, g.bim_included) for g in groups]
        M, H = MILLION, HUNDRED_THOUSAND
        assert got == [
            ("G1", M, RANDOM, True), ("G2", M, RANDOM, False),
            ("G3", M, ALIGNED, True), ("G4", M, ALIGNED, False),
            ("G5", H, RANDOM, True), ("G6", H, RANDOM, False),
            ("G7", H, ALIGNED, True), ("G8", H, ALIGNED, False),
        ]
        assert sum(g.bim_included for g in groups) == 4


class TestSubsample:
    def test_in_range_unchanged(self):
        c = cloud_of(300)
        assert subsample_to_level(c, TINY, 1) is c

    def test_clamped_to_hi(self):
        assert subsample_to_level(cloud_of(600), TINY, 1).n == 300

    def test_below_lo(self):
        with pytest.raises(ValueError, match="below density level"):
            subsample_to_level(cloud_of(99), TINY, 1)


class TestExtractPatches:
    def test_exact_size_is_whole_cloud(self):
        c = cloud_of(64)
        for p in extract_patches(c, 64, 3, 0):
            assert sorted(map(tuple, p.positions.tolist())) == sorted(map(tuple, c.positions.tolist()))

    def test_sizes_and_diameter(self):
        c = cloud_of(10_000)
        patches = extract_patches(c, 1024, 4, 5)
        assert [p.n for p in patches] == [1024] * 4
        d = diameter(c.positions[::10])
        for p in patches:
            assert diameter(p.positions) <= np.sqrt(12) + 1e-12
            assert diameter(p.positions) < d

    def test_patch_is_knn_of_a_cloud_point(self):
        c = cloud_of(2000, 3)
        for p in extract_patches(c, 100, 5, 1):
            # the seed is a cloud point whose 100 nearest neighbours are exactly this patch
            got = set(map(tuple, p.positions.tolist()))
            ok = False
            for s in p.positions:
                d = np.linalg.norm(c.positions - s, axis=1)
                ok |= set(map(tuple, c.positions[np.argsort(d, kind="stable")[:100]].tolist())) == got
            assert ok

    def test_spatial_coherence(self):
        spec = dataclasses.replace(WOOD_TIE, length_m=10.0)
        c = generate_clean(spec, 200, 1)
        span = np.ptp(c.positions[:, 2])
        for p in extract_patches(c, 409, 6, 2):
            assert np.ptp(p.positions[:, 2]) < span / 2

    def test_small_cloud_resampled(self):
        c = cloud_of(10)
        (p,) = extract_patches(c, 25, 1, 0)
        assert p.n == 25
        src = set(map(tuple, c.positions.tolist()))
        assert set(map(tuple, p.positions.tolist())) == src

    def test_labels_follow_points(self):
        c = cloud_of(500)
        lookup = {tuple(x): l for x, l in zip(c.positions.tolist(), c.labels.tolist())}
        for p in extract_patches(c, 50, 4, 9):
            assert all(lookup[tuple(x)] == l for x, l in zip(p.positions.tolist(), p.labels.tolist()))

    def test_errors(self):
        with pytest.raises(ValueError):
            extract_patches(cloud_of(0), 10, 1, 0)
        with pytest.raises(ValueError):
            extract_patches(cloud_of(5), 0, 1, 0)


class TestAugment:
    def test_aligned_identity(self):
        ps = extract_patches(cloud_of(300), 40, 3, 0)
        out, rots = augment(ps, ALIGNED, 1)
        assert all(a.equals(b) for a, b in zip(out, ps))
        assert rots == [None] * 3

    def test_random_rigid_and_labels(self):
        ps = extract_patches(cloud_of(300), 40, 3, 0)
        out, rots = augment(ps, RANDOM, 1)
        for a, b, r in zip(ps, out, rots):
            np.testing.assert_allclose(pdist(b.positions), pdist(a.positions), atol=1e-9)
            np.testing.assert_array_equal(a.labels, b.labels)
            assert r is not None
        assert len({r.angle for r in rots}) == 3

    def test_random_deterministic(self):
        ps = extract_patches(cloud_of(300), 40, 3, 0)
        a, _ = augment(ps, RANDOM, 7)
        b, _ = augment(ps, RANDOM, 7)
        assert all(x.equals(y) for x, y in zip(a, b))

    def test_unknown(self):
        with pytest.raises(ValueError):
            augment([], "sideways", 0)


@pytest.fixture(scope="module")
def sources():
    real = [cloud_of(400, s) for s in (1, 2)]
    syn = [cloud_of(350, s) for s in (3, 4, 5)]
    return real, syn


def group(rot=RANDOM, bim=True):
    return dataclasses.replace(make_group_configs()[4], level=TINY, rotation=rot, bim_included=bim)


class TestAssemble:
    def test_file_count_and_contents(self, tmp_path, sources):
        m = assemble_group(group(), *sources, 4, tmp_path, 0)
        assert len(m.patches) == 20
        assert sorted(p.name for p in tmp_path.glob("*.ply")) == sorted(r.file for r in m.patches)
        for f in m.patch_files:
            c = load_ply(f)
            assert c.n == TINY.patch_size
            assert c.labels.max() < 3
            assert c.positions.dtype == np.float32
        assert all(r.rotation_axis is not None for r in m.patches)

    def test_bim_gating(self, tmp_path, sources):
        m = assemble_group(group(ALIGNED, bim=False), *sources, 4, tmp_path, 0)
        assert len(m.patches) == 8
        assert {r.source for r in m.patches} == {"real0", "real1"}
        assert all(r.rotation_axis is None and r.rotation_angle is None for r in m.patches)

    def test_requires_inputs(self, tmp_path, sources):
        real, syn = sources
        with pytest.raises(ValueError):
            assemble_group(group(), [], syn, 2, tmp_path, 0)
        with pytest.raises(ValueError):
            assemble_group(group(), real, [], 2, tmp_path, 0)

    def test_manifest_round_trip(self, tmp_path, sources):
        m = assemble_group(group(), *sources, 2, tmp_path, 3)
        back = DatasetManifest.load(tmp_path / "G5_manifest.json")
        assert back == m
        keys = set(json.loads((tmp_path / "G5_manifest.json").read_text()))
        assert keys == {"group_id", "level", "rotation", "bim_included", "seed", "created_at", "patches"}

    def test_deterministic(self, tmp_path, sources):
        a = assemble_group(group(), *sources, 2, tmp_path / "a", 3)
        b = assemble_group(group(), *sources, 2, tmp_path / "b", 3)
        da, db = a.to_dict(), b.to_dict()
        da.pop("created_at"), db.pop("created_at")
        assert da == db
        for fa, fb in zip(a.patch_files, b.patch_files):
            assert fa.read_bytes() == fb.read_bytes()

    def test_aligned_rails_span_patch(self, tmp_path):
        # aligned patches keep the canonical frame, so rails still run along z
        spec = dataclasses.replace(WOOD_TIE, length_m=3.0)
        real = [generate_clean(spec, 300, 1)]
        lv = DensityLevel("t", (100, 10_000), 500)
        g = dataclasses.replace(make_group_configs()[7], level=lv)
        m = assemble_group(g, real, [], 3, tmp_path, 0)
        for c in m.load_patches():
            rail = c.positions[c.labels == 0]
            if len(rail) > 20:
                assert np.ptp(rail[:, 2]) > np.ptp(rail[:, 0]) / 4
