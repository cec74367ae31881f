"""Encoders: splat rendering oracles, Fourier features, patch layout, IO."""

import numpy as np
import pytest

from pcreason.autodiff import Rng, Tensor
from pcreason.encoders import (
    DEPTH_SENTINEL,
    EncoderConfig,
    EncoderError,
    encode_points,
    encode_views,
    fourier_encode,
    init_point_encoder_params,
    init_view_encoder_params,
    load_views,
    preprocess_views,
    render_splat_views,
    save_views,
)
from pcreason.geometry import (
    PointCloud,
    build_spherical_rig,
    normalize_to_unit_sphere,
    project_points,
)


def _small_cfg(image_size=16):
    return EncoderConfig(
        feature_dim=12, n_geo_tokens=6, knn_k=5, patch_grid=2, pos_bands=3, hidden=8
    )


def _cloud(seed=0, n=64):
    return normalize_to_unit_sphere(Rng(seed).normal((n, 3)), object_id=f"c{seed}")


class TestFourier:
    def test_shape(self):
        out = fourier_encode(np.zeros((5, 3)), bands=4)
        assert out.shape == (5, 24)

    def test_values(self):
        x = np.array([[0.25]])
        out = fourier_encode(x, bands=2)
        # layout per coordinate: sin(pi x), cos(pi x) then sin(2 pi x), cos(2 pi x)
        expected = [
            np.sin(np.pi * 0.25), np.cos(np.pi * 0.25),
            np.sin(2 * np.pi * 0.25), np.cos(2 * np.pi * 0.25),
        ]
        assert np.allclose(out[0], expected, atol=1e-12)

    def test_zero_input(self):
        out = fourier_encode(np.zeros((1, 2)), bands=3)
        assert np.allclose(out[0], [0, 1] * 6)


class TestSplatRender:
    def test_reference_rasterizer(self):
        """Duplicate-implementation oracle with explicit per-point loops."""
        rig = build_spherical_rig(image_size=16)
        cloud = _cloud(1, 48)
        images = render_splat_views(cloud, rig)
        size = 16
        for vi, view in enumerate(rig.views):
            occ = np.zeros((size, size))
            dep = np.full((size, size), DEPTH_SENTINEL)
            u, depth, visible = project_points(cloud.points, view)
            for i in range(cloud.points.shape[0]):
                if not visible[i]:
                    continue
                c = min(size - 1, max(0, int(u[i, 0] * size)))
                r = min(size - 1, max(0, int(u[i, 1] * size)))
                occ[r, c] += 1.0
                dep[r, c] = min(dep[r, c], depth[i])
            assert np.array_equal(images[vi, 0], occ)
            assert np.array_equal(images[vi, 1], dep)

    def test_occupancy_conserves_visible_points(self):
        rig = build_spherical_rig(image_size=32)
        cloud = _cloud(2, 80)
        images = render_splat_views(cloud, rig)
        for vi, view in enumerate(rig.views):
            _, _, visible = project_points(cloud.points, view)
            assert images[vi, 0].sum() == visible.sum()

    def test_mirror_symmetry(self):
        """A y-mirrored cloud renders the front view left-right mirrored."""
        rng = Rng(3)
        pts = rng.normal((60, 3), 0.4)
        pts = pts - pts.mean(axis=0)
        scale = np.linalg.norm(pts, axis=1).max()
        cloud = PointCloud(pts / scale)
        mirrored = PointCloud(pts / scale * np.array([1.0, -1.0, 1.0]))
        rig = build_spherical_rig(image_size=16)
        a = render_splat_views(cloud, rig)
        b = render_splat_views(mirrored, rig)
        # front view (az 0): y maps to the horizontal image axis
        assert np.array_equal(a[0, 0], b[0, 0][:, ::-1])

    def test_min_depth_monotone(self):
        rig = build_spherical_rig(image_size=8)
        images = render_splat_views(_cloud(4, 32), rig)
        occupied = images[:, 0] > 0
        assert np.all(images[:, 1][occupied] < DEPTH_SENTINEL)
        assert np.all(images[:, 1][~occupied] == DEPTH_SENTINEL)

    def test_preprocess(self):
        img = np.zeros((1, 2, 2, 2))
        img[0, 1] = DEPTH_SENTINEL
        img[0, 0, 0, 0] = 3.0
        img[0, 1, 0, 0] = 1.25
        out = preprocess_views(img)
        assert out[0, 0, 0, 0] == pytest.approx(np.log1p(3.0))
        assert out[0, 1, 0, 0] == 1.25
        assert out[0, 1, 1, 1] == 0.0  # sentinel zeroed where empty


class TestViewIo:
    def test_roundtrip(self, tmp_path):
        images = Rng(5).normal((8, 2, 4, 4))
        save_views(images, tmp_path / "v.views")
        assert np.array_equal(load_views(tmp_path / "v.views"), images)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.views").write_bytes(b"NOPE")
        with pytest.raises(EncoderError, match="magic"):
            load_views(tmp_path / "bad.views")


class TestPointEncoder:
    def test_output_shapes_and_centroids(self):
        cfg = _small_cfg()
        cloud = _cloud(6)
        params = init_point_encoder_params(Rng(0), cfg)
        toks = encode_points(cloud, params, cfg)
        assert toks.features.shape == (cfg.n_geo_tokens, cfg.feature_dim)
        # centroids are actual input points
        for c in toks.centroids:
            assert np.any(np.all(np.isclose(cloud.points, c), axis=1))

    def test_too_many_tokens(self):
        cfg = EncoderConfig(n_geo_tokens=100)
        cloud = _cloud(7, 50)
        params = init_point_encoder_params(Rng(0), _small_cfg())
        with pytest.raises(EncoderError):
            encode_points(cloud, params, cfg)

    def test_deterministic(self):
        cfg = _small_cfg()
        cloud = _cloud(8)
        params = init_point_encoder_params(Rng(1), cfg)
        a = encode_points(cloud, params, cfg).features.data
        b = encode_points(cloud, params, cfg).features.data
        assert np.array_equal(a, b)

    def test_max_pool_reference(self):
        """Recompute one token's feature with plain numpy."""
        cfg = _small_cfg()
        cloud = _cloud(9)
        params = init_point_encoder_params(Rng(2), cfg)
        toks = encode_points(cloud, params, cfg)
        from pcreason.geometry import farthest_point_sample

        idx = farthest_point_sample(cloud, cfg.n_geo_tokens)
        c0 = cloud.points[idx[0]]
        d2 = np.sum((cloud.points - c0) ** 2, axis=1)
        nn = np.argsort(d2, kind="stable")[: cfg.knn_k]
        local = cloud.points[nn] - c0
        h = np.tanh(local @ params["pt_w1"].data + params["pt_b1"].data)
        h = np.tanh(h @ params["pt_w2"].data + params["pt_b2"].data)
        pooled = h.max(axis=0)
        pos = fourier_encode(c0[None, :], cfg.pos_bands)[0]
        expected = (
            np.concatenate([pooled, pos]) @ params["pt_proj_w"].data
            + params["pt_proj_b"].data
        )
        assert np.allclose(toks.features.data[0], expected, atol=1e-12)

    def test_gradients_reach_all_params(self):
        cfg = _small_cfg()
        cloud = _cloud(10)
        params = init_point_encoder_params(Rng(3), cfg)
        (encode_points(cloud, params, cfg).features ** 2).sum().backward()
        for name, p in params.items():
            assert p.grad is not None and np.any(p.grad != 0), name


class TestViewEncoder:
    def test_patch_layout_reference(self):
        """Token v*G*G + r*G + c must hold patch (r, c) of view v."""
        cfg = _small_cfg()
        rig = build_spherical_rig(image_size=16)
        images = render_splat_views(_cloud(11), rig)
        params = init_view_encoder_params(Rng(4), cfg, 16)
        toks = encode_views(images, params, cfg)
        g, patch = cfg.patch_grid, 16 // cfg.patch_grid
        prepped = preprocess_views(images)
        for v in (0, 3, 7):
            for r in range(g):
                for c in range(g):
                    flat = prepped[
                        v, :, r * patch : (r + 1) * patch, c * patch : (c + 1) * patch
                    ].reshape(-1)
                    ti = v * g * g + r * g + c
                    expected = (
                        flat @ params["vis_patch_w"].data
                        + params["vis_patch_b"].data
                        + params["vis_grid_emb"].data[r * g + c]
                        + params["vis_view_emb"].data[v]
                    )
                    assert np.allclose(toks.features.data[ti], expected, atol=1e-12)
                    assert np.allclose(
                        toks.patch_centers[ti], [(c + 0.5) / g, (r + 0.5) / g]
                    )
                    assert toks.view_index[ti] == v

    def test_token_count(self):
        cfg = _small_cfg()
        rig = build_spherical_rig(image_size=16)
        images = render_splat_views(_cloud(12), rig)
        params = init_view_encoder_params(Rng(5), cfg, 16)
        toks = encode_views(images, params, cfg)
        assert toks.features.shape == (8 * cfg.patch_grid**2, cfg.feature_dim)

    def test_indivisible_image_raises(self):
        cfg = EncoderConfig(patch_grid=3)
        with pytest.raises(EncoderError):
            init_view_encoder_params(Rng(0), cfg, 16)
        params = init_view_encoder_params(Rng(0), _small_cfg(), 16)
        with pytest.raises(EncoderError):
            encode_views(np.zeros((8, 2, 15, 15)), params, _small_cfg())
