"""Training losses: weighted dice, distance-transform shape loss, multi-scale L1."""
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError


@dataclass
class LossConfig:
    alpha1: float = 0.8
    dice_epsilon: float = 1e-6
    hd_cap: Optional[float] = None  # None -> H + W of the map
    ds_weights: Optional[Sequence[float]] = None  # None -> 1.0 for every level
    hd_weight: float = 0.001
    adv_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha1 <= 1.0:
            raise ConfigError("alpha1 must lie in [0, 1]")
        if self.ds_weights is not None:
            self.ds_weights = tuple(float(w) for w in self.ds_weights)

    @property
    def alpha2(self):
        return 1.0 - self.alpha1


def _gt_tensor(gt, like):
    g = gt.data if isinstance(gt, T.Tensor) else np.asarray(gt)
    if g.shape != like.shape:
        raise DimensionError(f"prediction {like.shape} and ground truth {g.shape} differ")
    return T.Tensor(g, dtype=like.dtype)


def dice_loss(probs, gt, config=None):
    """Two-class weighted dice: ``alpha1`` on the building term, ``alpha2`` on background."""
    config = config or LossConfig()
    g = _gt_tensor(gt, probs)
    eps = config.dice_epsilon
    fg = (2.0 * T.tsum(probs * g) + eps) / (T.tsum(T.square(probs)) + T.tsum(T.square(g)) + eps)
    q = 1.0 - probs
    h = 1.0 - g
    bg = (2.0 * T.tsum(q * h) + eps) / (T.tsum(T.square(q)) + T.tsum(T.square(h)) + eps)
    return 1.0 - (config.alpha1 * fg + config.alpha2 * bg)


def chamfer_sweep(d, axis):
    """Forward then backward ``d[i] = min(d[i], d[i -+ 1] + 1)`` passes along ``axis`` (in place)."""
    v = np.moveaxis(d, axis, 0)
    for i in range(1, v.shape[0]):
        np.minimum(v[i], v[i - 1] + 1, out=v[i])
    for i in range(v.shape[0] - 2, -1, -1):
        np.minimum(v[i], v[i + 1] + 1, out=v[i])
    return d


def taxicab_distance_transform(mask, cap=None):
    """L1 distance from every pixel to the nearest foreground pixel.

    Works on the last two axes; each 2-D map with no foreground is filled with
    ``cap`` (default ``H + W``).  The L1 metric is separable, so a sweep along
    rows followed by one along columns gives the exact distance.
    """
    m = np.asarray(mask) > 0
    h, w = m.shape[-2:]
    if cap is None:
        cap = float(h + w)
    d = np.where(m, 0.0, np.inf)
    chamfer_sweep(d, -1)
    chamfer_sweep(d, -2)
    d[np.isinf(d)] = cap
    return np.minimum(d, cap)


def hd_loss(probs, gt, config=None):
    """Mean of ``(p - g)^2 * (d_p^2 + d_g^2)``; the distance maps are constants."""
    config = config or LossConfig()
    g = _gt_tensor(gt, probs)
    d_p = taxicab_distance_transform(probs.data >= 0.5, config.hd_cap)
    d_g = taxicab_distance_transform(g.data, config.hd_cap)
    weight = T.Tensor(d_p**2 + d_g**2, dtype=probs.dtype)
    return T.mean(T.square(probs - g) * weight)


def multiscale_l1_loss(fake, real):
    """Average over critic levels of the mean absolute feature difference."""
    if len(fake) != len(real) or not fake:
        raise DimensionError(f"pyramids have {len(fake)} and {len(real)} levels")
    terms = []
    for f, r in zip(fake, real):
        if f.shape != r.shape:
            raise DimensionError(f"level shapes differ: {f.shape} vs {r.shape}")
        terms.append(T.mean(T.tabs(f - r)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total / float(len(terms))


def downsample_mask(gt, size):
    """Block-average ``gt`` (N,1,H,W) to ``size`` and threshold at 0.5 (ties go to building)."""
    g = np.asarray(gt, dtype=np.float32)
    h, w = g.shape[-2:]
    if (h, w) == tuple(size):
        return g
    fh, fw = h // size[0], w // size[1]
    if fh * size[0] != h or fw * size[1] != w:
        raise DimensionError(f"cannot block-downsample {h}x{w} to {size}")
    blocks = g.reshape(g.shape[:-2] + (size[0], fh, size[1], fw)).mean(axis=(-3, -1))
    return (blocks >= 0.5).astype(np.float32)


def total_generator_loss(outputs, gt, critic_term=None, config=None):
    """Deep-supervised dice + shape loss over every intermediate map plus the adversarial term.

    Returns ``(total, parts)`` where ``parts`` has float ``dice``, ``hd`` and ``adv``.
    """
    config = config or LossConfig()
    maps = outputs.intermediates if hasattr(outputs, "intermediates") else list(outputs)
    weights = config.ds_weights if config.ds_weights is not None else (1.0,) * len(maps)
    if len(weights) != len(maps):
        raise ConfigError(f"{len(weights)} deep-supervision weights for {len(maps)} maps")
    gt = gt.data if isinstance(gt, T.Tensor) else np.asarray(gt)
    total = None
    dice_sum = hd_sum = 0.0
    for logits, wgt in zip(maps, weights):
        probs = T.sigmoid(logits)
        g = downsample_mask(gt, logits.shape[2:])
        d = dice_loss(probs, g, config)
        h = hd_loss(probs, g, config)
        dice_sum += wgt * float(d.data)
        hd_sum += wgt * config.hd_weight * float(h.data)
        term = (d + config.hd_weight * h) * float(wgt)
        total = term if total is None else total + term
    adv = 0.0
    if critic_term is not None:
        adv = float(critic_term.data) if isinstance(critic_term, T.Tensor) else float(critic_term)
        total = total + config.adv_weight * critic_term
    return total, {"dice": dice_sum, "hd": hd_sum, "adv": adv}
