"""Dual-stream sensory encoders.

The geometry stream selects farthest-point centroids and encodes each one
from its k-nearest-neighbor local patch (small shared perceptron, max-pooled)
plus Fourier features of the centroid. The visual stream rasterizes the cloud
into 8 two-channel splat images (occupancy count + min depth), splits each
image into a GxG patch grid, and linearly embeds every patch with a shared
grid positional embedding and an additive per-view embedding.

Image files use a tiny raw layout: magic b"PCIMG1\\n", uint64 ndim, uint64
dims, then row-major float64 payload (all little-endian).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Rng, Tensor, concat
from .geometry import CameraRig, PointCloud, farthest_point_sample, project_points

DEPTH_SENTINEL = 1e9  # min-depth channel value for empty pixels

_IMG_MAGIC = b"PCIMG1\n"


class EncoderError(ValueError):
    pass


@dataclass
class EncoderConfig:
    feature_dim: int = 64  # D
    n_geo_tokens: int = 32  # N_p
    knn_k: int = 16
    patch_grid: int = 4  # G
    pos_bands: int = 4
    hidden: int = 32
    n_views: int = 8


@dataclass
class GeoTokens:
    features: Tensor  # N_p x D
    centroids: np.ndarray  # N_p x 3, exactly the FPS-selected input points


@dataclass
class VisTokens:
    features: Tensor  # N_v x D
    patch_centers: np.ndarray  # N_v x 2 on the regular GxG grid of [0,1]^2
    view_index: np.ndarray  # N_v ints


def fourier_encode(x: np.ndarray, bands: int) -> np.ndarray:
    """Map each coordinate to {sin(2^k pi x), cos(2^k pi x)}, k < bands."""
    x = np.asarray(x, dtype=np.float64)
    freqs = (2.0 ** np.arange(bands)) * np.pi
    angles = x[..., None] * freqs  # (..., C, bands)
    enc = np.stack([np.sin(angles), np.cos(angles)], axis=-1)
    return enc.reshape(*x.shape[:-1], x.shape[-1] * 2 * bands)


# -- splat rendering --------------------------------------------------------


def render_splat_views(cloud: PointCloud, rig: CameraRig) -> np.ndarray:
    """Rasterize the cloud into per-view (occupancy, min-depth) images.

    Returns an array of shape (n_views, 2, S, S).
    """
    size = rig.views[0].image_size
    images = np.zeros((len(rig.views), 2, size, size))
    images[:, 1] = DEPTH_SENTINEL
    for vi, view in enumerate(rig.views):
        u, depth, visible = project_points(cloud.points, view)
        if not np.any(visible):
            continue
        uu = u[visible]
        cols = np.clip((uu[:, 0] * size).astype(np.int64), 0, size - 1)
        rows = np.clip((uu[:, 1] * size).astype(np.int64), 0, size - 1)
        np.add.at(images[vi, 0], (rows, cols), 1.0)
        np.minimum.at(images[vi, 1], (rows, cols), depth[visible])
    return images


def save_views(images: np.ndarray, path) -> None:
    images = np.ascontiguousarray(images, dtype="<f8")
    with open(Path(path), "wb") as fh:
        fh.write(_IMG_MAGIC)
        fh.write(struct.pack("<Q", images.ndim))
        for extent in images.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(images.tobytes())


def load_views(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(_IMG_MAGIC):
        raise EncoderError(f"bad image magic in {path}")
    off = len(_IMG_MAGIC)
    (ndim,) = struct.unpack_from("<Q", raw, off)
    off += 8
    shape = []
    for _ in range(ndim):
        (extent,) = struct.unpack_from("<Q", raw, off)
        shape.append(extent)
        off += 8
    return np.frombuffer(raw, dtype="<f8", offset=off).reshape(shape).copy()


# -- geometry stream --------------------------------------------------------


def init_point_encoder_params(rng: Rng, cfg: EncoderConfig) -> dict:
    h = cfg.hidden
    pos_dim = 3 * 2 * cfg.pos_bands
    scale = 0.2
    return {
        "pt_w1": Tensor.param(rng.normal((3, h), scale)),
        "pt_b1": Tensor.param(np.zeros(h)),
        "pt_w2": Tensor.param(rng.normal((h, h), scale)),
        "pt_b2": Tensor.param(np.zeros(h)),
        "pt_proj_w": Tensor.param(rng.normal((h + pos_dim, cfg.feature_dim), scale)),
        "pt_proj_b": Tensor.param(np.zeros(cfg.feature_dim)),
    }


def encode_points(
    cloud: PointCloud, params: dict, cfg: EncoderConfig, start_index: int = 0
) -> GeoTokens:
    """FPS centroids + max-pooled local-patch perceptron features."""
    n = cloud.points.shape[0]
    if cfg.n_geo_tokens > n:
        raise EncoderError(f"n_geo_tokens={cfg.n_geo_tokens} exceeds cloud size {n}")
    idx = farthest_point_sample(cloud, cfg.n_geo_tokens, start_index)
    centroids = cloud.points[idx]
    k = min(cfg.knn_k, n)
    d2 = np.sum((centroids[:, None, :] - cloud.points[None, :, :]) ** 2, axis=2)
    nn = np.argsort(d2, axis=1, kind="stable")[:, :k]
    local = cloud.points[nn] - centroids[:, None, :]  # N_p x k x 3

    x = Tensor.const(local.reshape(-1, 3))
    hidden = ((x @ params["pt_w1"]) + params["pt_b1"]).tanh()
    hidden = ((hidden @ params["pt_w2"]) + params["pt_b2"]).tanh()
    pooled = hidden.reshape(cfg.n_geo_tokens, k, -1).max(axis=1)
    pos = Tensor.const(fourier_encode(centroids, cfg.pos_bands))
    feats = (
        concat([pooled, pos], axis=1) @ params["pt_proj_w"]
    ) + params["pt_proj_b"]
    return GeoTokens(features=feats, centroids=centroids)


# -- visual stream ----------------------------------------------------------


def init_view_encoder_params(rng: Rng, cfg: EncoderConfig, image_size: int) -> dict:
    if image_size % cfg.patch_grid != 0:
        raise EncoderError("image size not divisible by patch grid")
    patch = image_size // cfg.patch_grid
    in_dim = 2 * patch * patch
    scale = 0.2
    return {
        "vis_patch_w": Tensor.param(rng.normal((in_dim, cfg.feature_dim), scale)),
        "vis_patch_b": Tensor.param(np.zeros(cfg.feature_dim)),
        "vis_grid_emb": Tensor.param(
            rng.normal((cfg.patch_grid**2, cfg.feature_dim), scale)
        ),
        "vis_view_emb": Tensor.param(rng.normal((cfg.n_views, cfg.feature_dim), scale)),
    }


def preprocess_views(images: np.ndarray) -> np.ndarray:
    """Compress occupancy counts and zero out empty-pixel depth sentinels."""
    occ = images[:, 0]
    depth = np.where(occ > 0, images[:, 1], 0.0)
    return np.stack([np.log1p(occ), depth], axis=1)


def encode_views(images: np.ndarray, params: dict, cfg: EncoderConfig) -> VisTokens:
    """Flatten each GxG patch, project to D, add grid + view embeddings."""
    n_views, channels, size, size2 = images.shape
    g = cfg.patch_grid
    if size != size2 or size % g != 0:
        raise EncoderError("image size not divisible by patch grid")
    patch = size // g
    prepped = preprocess_views(images)
    # (V, C, G, P, G, P) -> (V, G, G, C, P, P) -> (V*G*G, C*P*P)
    patches = (
        prepped.reshape(n_views, channels, g, patch, g, patch)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(n_views * g * g, channels * patch * patch)
    )
    x = Tensor.const(patches)
    grid_idx = np.tile(np.arange(g * g), n_views)
    view_idx = np.repeat(np.arange(n_views), g * g)
    feats = (
        (x @ params["vis_patch_w"])
        + params["vis_patch_b"]
        + params["vis_grid_emb"].gather_rows(grid_idx)
        + params["vis_view_emb"].gather_rows(view_idx)
    )
    rows, cols = np.divmod(np.arange(g * g), g)
    centers_one = np.stack([(cols + 0.5) / g, (rows + 0.5) / g], axis=1)  # (u, v)
    centers = np.tile(centers_one, (n_views, 1))
    return VisTokens(features=feats, patch_centers=centers, view_index=view_idx)
