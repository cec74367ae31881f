"""Geometry-guided cross-modal attention and tri-modal manifold assembly.

Each 3D token attends over all 2D patch tokens. The attention logit for pair
(i, j) is the scaled dot product multiplied by a Gaussian decay over the
distance between point i's projection into patch j's view and the patch
center, plus a scalar bias from a small Fourier-feature network:

    A[i, j] = (Q_i . K_j / sqrt(d)) * decay(i, j) + bias(i, j)

The attended visual evidence is folded back into each geometry token through
a sigmoid gate, normalized, projected into the language-model width, and
concatenated with the embedded instruction tokens.

Points behind a camera have no projection; their decay is clamped to
DECAY_FLOOR so logits and gradients stay finite. The bandwidth sigma is
parameterized as exp(rho), which keeps it positive under any update.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Rng, Tensor, concat, layer_norm, softmax_rows
from .encoders import GeoTokens, VisTokens, fourier_encode
from .geometry import CameraRig, CameraView, project_points

DECAY_FLOOR = 1e-4


class FusionError(ValueError):
    pass


@dataclass
class FusedManifold:
    tokens: Tensor  # (N_p + N_text) x D_llm
    provenance: list  # per-token tag: "sensory" | "text"
    geo_features: Tensor  # retained H_geo for the anchor loss

    @property
    def n_sensory(self) -> int:
        return sum(1 for tag in self.provenance if tag == "sensory")


def init_fusion_params(
    rng: Rng, feature_dim: int, l_bands: int = 4, d_llm: int = 64, hidden: int = 32
) -> dict:
    d = feature_dim
    bias_in = 2 * (3 + 2) * l_bands
    scale = 0.2
    return {
        "fus_wq": Tensor.param(rng.normal((d, d), scale)),
        "fus_wk": Tensor.param(rng.normal((d, d), scale)),
        "fus_wv": Tensor.param(rng.normal((d, d), scale)),
        # sigma_s = exp(rho); rho = log(0.25) starts at patch scale
        "fus_rho": Tensor.param(np.log(0.25)),
        "fus_fourier_w1": Tensor.param(rng.normal((bias_in, hidden), scale)),
        "fus_fourier_b1": Tensor.param(np.zeros(hidden)),
        "fus_fourier_w2": Tensor.param(rng.normal((hidden, 1), scale)),
        "fus_fourier_b2": Tensor.param(np.zeros(1)),
        "fus_gate_w": Tensor.param(rng.normal((2 * d, 1), scale)),
        "fus_gate_b": Tensor.param(np.zeros(1)),
        "fus_norm_gamma": Tensor.param(np.ones(d)),
        "fus_norm_beta": Tensor.param(np.zeros(d)),
        "fus_llm_proj_w": Tensor.param(rng.normal((d, d_llm), scale)),
        "fus_llm_proj_b": Tensor.param(np.zeros(d_llm)),
    }


def bandwidth(params: dict) -> Tensor:
    return params["fus_rho"].exp()


# -- spatial decay ----------------------------------------------------------


def _projection_dist2(
    centroids: np.ndarray, patch_centers: np.ndarray, view_index: np.ndarray,
    rig: CameraRig,
):
    """Squared projection distances and in-front mask for all (i, j) pairs."""
    n_p = centroids.shape[0]
    n_v = patch_centers.shape[0]
    dist2 = np.zeros((n_p, n_v))
    in_front = np.zeros((n_p, n_v), dtype=bool)
    for vi, view in enumerate(rig.views):
        cols = np.nonzero(view_index == vi)[0]
        if cols.size == 0:
            continue
        u, depth, _ = project_points(centroids, view)
        ok = depth > 0
        delta = u[:, None, :] - patch_centers[None, cols, :]
        d2 = np.sum(delta**2, axis=2)
        d2[~ok] = 0.0  # decay is clamped there; keep the constant finite
        dist2[:, cols] = d2
        in_front[:, cols] = ok[:, None]
    return dist2, in_front


def spatial_decay(
    p, patch_center, view: CameraView, sigma_s: Tensor | float
) -> Tensor:
    """Gaussian falloff exp(-|u - c|^2 / (2 sigma^2)) for a single pair."""
    sigma = sigma_s if isinstance(sigma_s, Tensor) else Tensor.const(sigma_s)
    p = np.asarray(p, dtype=np.float64)
    hom = view.projection @ np.append(p, 1.0)
    if hom[2] <= 0:
        return Tensor.const(DECAY_FLOOR)
    u = hom[:2] / hom[2]
    d2 = float(np.sum((u - np.asarray(patch_center)) ** 2))
    return (Tensor.const(-d2) / (sigma * sigma * 2.0)).exp()


def _decay_matrix(dist2: np.ndarray, in_front: np.ndarray, sigma: Tensor) -> Tensor:
    mask = Tensor.const(in_front.astype(np.float64))
    decay = (Tensor.const(-dist2) / (sigma * sigma * 2.0)).exp()
    return mask * decay + (1.0 - mask) * DECAY_FLOOR


# -- Fourier bias -----------------------------------------------------------


def _bias_features(
    centroids: np.ndarray, patch_centers: np.ndarray, l_bands: int
) -> np.ndarray:
    gp = fourier_encode(centroids, l_bands)  # N_p x 6L
    gc = fourier_encode(patch_centers, l_bands)  # N_v x 4L
    n_p, n_v = gp.shape[0], gc.shape[0]
    left = np.repeat(gp, n_v, axis=0)
    right = np.tile(gc, (n_p, 1))
    return np.concatenate([left, right], axis=1)


def _bias_net(features: Tensor, params: dict) -> Tensor:
    hidden = ((features @ params["fus_fourier_w1"]) + params["fus_fourier_b1"]).tanh()
    return (hidden @ params["fus_fourier_w2"]) + params["fus_fourier_b2"]


def fourier_bias(p, patch_center, params: dict, l_bands: int = 4) -> Tensor:
    """Scalar relative-position bias for a single (point, patch) pair."""
    feats = _bias_features(
        np.asarray(p, dtype=np.float64)[None, :],
        np.asarray(patch_center, dtype=np.float64)[None, :],
        l_bands,
    )
    return _bias_net(Tensor.const(feats), params).reshape(())


# -- attention --------------------------------------------------------------


def gcma_attend(
    geo: GeoTokens,
    vis: VisTokens,
    rig: CameraRig,
    params: dict,
    l_bands: int = 4,
):
    """Geometry-guided attention of 3D tokens over 2D patch tokens.

    Returns (attended: N_p x D, logits: N_p x N_v).
    """
    d = geo.features.shape[1]
    if vis.features.shape[1] != d or params["fus_wq"].shape != (d, d):
        raise FusionError("feature dimension mismatch")
    if int(vis.view_index.max()) >= len(rig.views):
        raise FusionError("view index outside rig")
    q = geo.features @ params["fus_wq"]
    k = vis.features @ params["fus_wk"]
    v = vis.features @ params["fus_wv"]
    affinity = (q @ k.transpose()) * (1.0 / np.sqrt(d))

    dist2, in_front = _projection_dist2(
        geo.centroids, vis.patch_centers, vis.view_index, rig
    )
    decay = _decay_matrix(dist2, in_front, bandwidth(params))
    bias_feats = Tensor.const(_bias_features(geo.centroids, vis.patch_centers, l_bands))
    bias = _bias_net(bias_feats, params).reshape(dist2.shape)

    logits = affinity * decay + bias
    attended = softmax_rows(logits) @ v
    return attended, logits


def occlusion_gate_fuse(geo: GeoTokens, attended: Tensor, params: dict) -> Tensor:
    """Sigmoid-gated residual fusion followed by normalization + affine."""
    if attended.shape != geo.features.shape:
        raise FusionError("attended/geo shape mismatch")
    gate_in = concat([geo.features, attended], axis=1)
    g = ((gate_in @ params["fus_gate_w"]) + params["fus_gate_b"]).sigmoid()
    fused = geo.features + g * attended
    return layer_norm(fused) * params["fus_norm_gamma"] + params["fus_norm_beta"]


def assemble_manifold(
    h_sensory: Tensor, text_ids, llm_embed: Tensor, params: dict,
    geo_features: Tensor,
) -> FusedManifold:
    """Project sensory tokens to LLM width and prepend them to the text."""
    sensory = (h_sensory @ params["fus_llm_proj_w"]) + params["fus_llm_proj_b"]
    text_ids = np.asarray(text_ids, dtype=np.int64)
    if text_ids.size:
        tokens = concat([sensory, llm_embed.gather_rows(text_ids)], axis=0)
    else:
        tokens = sensory
    provenance = ["sensory"] * sensory.shape[0] + ["text"] * int(text_ids.size)
    return FusedManifold(tokens=tokens, provenance=provenance, geo_features=geo_features)
