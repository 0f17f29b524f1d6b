"""Adversarial losses and their masks.

Four objectives share one perturbation: token divergence in the
projector, variance inflation on low-attention cells of the attention
map, targeted mean-squared-error on detected proposal cells across an
image pyramid, and cosine divergence of identity embeddings. The total
is a signed weighted sum that the sign-gradient loop descends.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import models
from .tensor import Tensor, as_tensor, box_resize, pool_avg, resize, square, tsum, variance

__all__ = [
    "LossWeights",
    "AttentionAttackState",
    "DetectorAttackState",
    "sigma_max",
    "attention_variance",
    "build_var_mask",
    "precompute_attention_state",
    "loss_proj",
    "loss_attn",
    "select_scales",
    "robust_resize",
    "bilinear_resize_path",
    "build_prob_mask",
    "make_detector_state",
    "loss_mtcnn",
    "loss_id",
    "loss_total",
]


@dataclass(frozen=True)
class LossWeights:
    """Signed weights of the total objective.

    proj and id push their (negative) losses further down, so they must
    not be positive; attn and mtcnn are minimized toward zero, so they
    must not be negative.
    """

    proj: float = -1.0
    attn: float = 1.0
    mtcnn: float = 1.0
    id: float = -1.0

    def __post_init__(self):
        if self.proj > 0:
            raise ValueError(f"lambda_proj must be <= 0, got {self.proj}")
        if self.id > 0:
            raise ValueError(f"lambda_id must be <= 0, got {self.id}")
        if self.attn < 0:
            raise ValueError(f"lambda_attn must be >= 0, got {self.attn}")
        if self.mtcnn < 0:
            raise ValueError(f"lambda_mtcnn must be >= 0, got {self.mtcnn}")


# -- projector ------------------------------------------------------------


def loss_proj(bundle: models.ToyModelBundle, x, delta) -> Tensor:
    """Negative L1 distance between clean and perturbed conditioning tokens."""
    x = as_tensor(x)
    adv = x + as_tensor(delta)
    tokens_adv = bundle.projector(adv)
    tokens_clean = bundle.projector(x)
    return -tsum((tokens_adv - tokens_clean).abs())


# -- attention ------------------------------------------------------------


def sigma_max(seq: int) -> float:
    """Largest variance a probability row of length seq can attain (one-hot)."""
    if seq < 1:
        raise ValueError(f"sigma_max: seq must be >= 1, got {seq}")
    return (1.0 / seq) * ((1.0 - 1.0 / seq) ** 2 + (seq - 1) * (1.0 / seq ** 2))


def attention_variance(a_map) -> Tensor:
    """Per-position variance of attention weights across tokens: [h,res,seq] -> [h,res]."""
    t = as_tensor(a_map)
    if t.ndim != 3:
        raise ValueError(f"attention_variance: expected [h,res,seq], got shape {t.shape}")
    return variance(t, dim=2)


def quantile_nearest_rank(values: np.ndarray, t: float) -> float:
    """Lower nearest-rank quantile over all entries."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"quantile: t must lie in (0,1), got {t}")
    flat = np.sort(values.reshape(-1))
    rank = max(1, math.ceil(t * flat.size))
    return float(flat[rank - 1])


def build_var_mask(a_var: np.ndarray, t_var: float) -> np.ndarray:
    """Binary mask of the low-variance cells: 1 where a_var <= its t_var quantile."""
    a_var = np.asarray(a_var, dtype=np.float64)
    threshold = quantile_nearest_rank(a_var, t_var)
    return (a_var <= threshold).astype(np.float64)


@dataclass
class AttentionAttackState:
    """Mask and target frozen from the clean image before the attack loop."""

    mask: np.ndarray  # [h, res], entries in {0, 1}
    sigma: float
    t_var: float


def precompute_attention_state(bundle: models.ToyModelBundle, x, t_var: float) -> AttentionAttackState:
    x = as_tensor(np.asarray(x, dtype=np.float64))
    tokens = bundle.projector(x)
    a_map = models.attention_forward(bundle.attention, x, tokens)
    a_var = attention_variance(a_map).data
    mask = build_var_mask(a_var, t_var)
    return AttentionAttackState(mask=mask, sigma=sigma_max(bundle.seq), t_var=t_var)


def loss_attn(state: AttentionAttackState, bundle: models.ToyModelBundle, x, delta) -> Tensor:
    """Squared shortfall of masked attention variance below its maximum.

    The query side comes from the clean image; only the key side sees the
    perturbation, via the projected tokens of x + delta.
    """
    if state is None:
        raise ValueError("loss_attn: attention state must be precomputed from the clean image first")
    x = as_tensor(x)
    adv = x + as_tensor(delta)
    tokens_adv = bundle.projector(adv)
    a_map = models.attention_forward(bundle.attention, x, tokens_adv)
    a_var = attention_variance(a_map)
    gap = (state.sigma - a_var) * Tensor(state.mask)
    return tsum(square(gap))


# -- detector -------------------------------------------------------------


def select_scales(d_land: float, d_cell: int, d_min: int, d_adv: int, k: float) -> list[float]:
    """Pyramid factors s_i = (d_cell/d_min) * k**(i-1) passing both bounds.

    Kept factors shrink landmarks into one detector cell while the scaled
    image stays above the detector minimum. Returned in decreasing order.
    """
    if not 0.0 < k < 1.0:
        raise ValueError(f"select_scales: k must lie in (0,1), got {k}")
    if d_land < 1 or d_adv < 1:
        raise ValueError(f"select_scales: sizes must be >= 1, got d_land={d_land} d_adv={d_adv}")
    scales = []
    i = 1
    while True:
        s = (d_cell / d_min) * k ** (i - 1)
        if s * d_adv < d_min:
            break
        if s * d_land <= d_cell:
            scales.append(s)
        i += 1
    return scales


def robust_resize(x, s: float) -> Tensor:
    """Interpolation-robust downscale by factor s.

    Equivalent to nearest-upscaling x[c,h,w] to (h*floor(s*h), w*floor(s*w))
    and average-pooling with kernel = stride = (h, w), but computed as a
    direct area-weighted accumulation; the intermediate image is never
    materialized. Integer downscale factors collapse to plain pooling.
    """
    t = as_tensor(x)
    if t.ndim != 3:
        raise ValueError(f"robust_resize: expected x[c,h,w], got shape {t.shape}")
    _, h, w = t.shape
    th, tw = int(s * h), int(s * w)
    if th < 1 or tw < 1:
        raise ValueError(f"robust_resize: scale {s} degenerates {h}x{w} to {th}x{tw}")
    if h % th == 0 and w % tw == 0:
        return pool_avg(t, (h // th, w // tw))
    return box_resize(t, (th, tw))


def bilinear_resize_path(x, s: float) -> Tensor:
    """The parallel plain-bilinear branch to the same pyramid size."""
    t = as_tensor(x)
    if t.ndim != 3:
        raise ValueError(f"bilinear_resize_path: expected x[c,h,w], got shape {t.shape}")
    _, h, w = t.shape
    th, tw = int(s * h), int(s * w)
    if th < 1 or tw < 1:
        raise ValueError(f"bilinear_resize_path: scale {s} degenerates {h}x{w} to {th}x{tw}")
    return resize(t, (th, tw), mode="bilinear")


def build_prob_mask(p_t: np.ndarray, t_prob: float) -> np.ndarray:
    """1 where the face probability strictly exceeds the detection threshold."""
    if not 0.0 < t_prob < 1.0:
        raise ValueError(f"build_prob_mask: t_prob must lie in (0,1), got {t_prob}")
    return (np.asarray(p_t, dtype=np.float64) > t_prob).astype(np.float64)


@dataclass
class DetectorAttackState:
    """Scale set and push-down targets for the proposal-network attack."""

    scales: list[float] = field(default_factory=list)
    t_prob: float = 0.6
    beta: float = 0.3
    p_gt: tuple[float, float] = field(init=False)

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0,1), got {self.beta}")
        if self.t_prob - self.beta <= 0.0:
            raise ValueError(f"t_prob - beta must be positive, got {self.t_prob} - {self.beta}")
        # targets: raise the non-face channel, sink the face channel
        self.p_gt = (self.t_prob + self.beta, self.t_prob - self.beta)


def make_detector_state(d_land: float, d_cell: int, d_min: int, d_adv: int, k: float,
                        t_prob: float, beta: float) -> DetectorAttackState:
    scales = select_scales(d_land, d_cell, d_min, d_adv, k)
    return DetectorAttackState(scales=scales, t_prob=t_prob, beta=beta)


def _detector_term(p_f: Tensor, p_t: Tensor, state: DetectorAttackState) -> Tensor:
    """Masked MSE against (t_prob+beta, t_prob-beta); mask from current face probs."""
    mask = Tensor(build_prob_mask(p_t.data, state.t_prob))
    gt_f, gt_t = state.p_gt
    return tsum(square((p_f - gt_f) * mask)) + tsum(square((p_t - gt_t) * mask))


def loss_mtcnn(state: DetectorAttackState, bundle: models.ToyModelBundle, x, delta) -> Tensor:
    """Detector loss summed over every kept scale and both resize branches.

    The probability mask is rebuilt each call from the current perturbed
    image, so cells drop out of the objective once pushed under t_prob.
    """
    if not state.scales:
        warnings.warn("loss_mtcnn: empty scale set, detector loss is inactive", stacklevel=2)
        return Tensor(0.0)
    x = as_tensor(x)
    adv = x + as_tensor(delta)
    total = None
    for s in state.scales:
        for branch in (robust_resize, bilinear_resize_path):
            scaled = branch(adv, s)
            p_f, p_t = models.pnet_forward(bundle.pnet, scaled)
            term = _detector_term(p_f, p_t, state)
            total = term if total is None else total + term
    return total


# -- identity -------------------------------------------------------------


def loss_id(bundle: models.ToyModelBundle, x, delta) -> Tensor:
    """Cosine similarity between perturbed and clean embeddings, minus one."""
    x = as_tensor(x)
    adv = x + as_tensor(delta)
    e_adv = bundle.embedder(adv)
    e_clean = bundle.embedder(x)
    dot = tsum(e_adv * e_clean)
    n_adv = tsum(square(e_adv)).sqrt()
    n_clean = tsum(square(e_clean)).sqrt()
    return dot / (n_adv * n_clean) - 1.0


# -- total ----------------------------------------------------------------


def loss_total(weights: LossWeights, proj, attn, mtcnn, ident) -> Tensor:
    """Weighted sum of the four components."""
    return (
        weights.proj * as_tensor(proj)
        + weights.attn * as_tensor(attn)
        + weights.mtcnn * as_tensor(mtcnn)
        + weights.id * as_tensor(ident)
    )
