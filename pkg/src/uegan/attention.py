"""Reverse, edge and uncertainty attention, and the refinement module.

Attention maps are single-channel and broadcast over the channel axis of the
feature tensor they weight.  Binary decision and dilated edge maps are plain
arrays and act as constants in the backward pass.
"""
import numpy as np

from . import tensor as T
from .errors import DimensionError

PROB_CLAMP = 1e-7

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T


def _upsample_to(logits, features):
    """Bilinearly upsample ``logits`` to the spatial size of ``features``."""
    h, w = features.shape[2:]
    ph, pw = logits.shape[2:]
    if logits.shape[1] != 1:
        raise DimensionError(f"prediction maps have one channel, got {logits.shape[1]}")
    if h % ph or w % pw or h // ph != w // pw:
        raise DimensionError(f"cannot upsample {ph}x{pw} prediction to {h}x{w} features")
    if logits.shape[0] != features.shape[0]:
        raise DimensionError("batch size mismatch between prediction and features")
    return T.bilinear_upsample(logits, h // ph)


def reverse_attention(prev_logits, features):
    """Return ``(A_R, F_R)`` with ``A_R = 1 - sigmoid(U(prev))`` and ``F_R = A_R * F``."""
    up = _upsample_to(prev_logits, features)
    attn = 1.0 - T.sigmoid(up)
    return attn, attn * features


def sobel_edges(mask):
    """Binary edge map of a {0,1} mask: ``|Gx| + |Gy| > 0`` with replicate padding.

    ``mask`` is any array whose last two axes are H, W.
    """
    m = np.asarray(mask, dtype=np.float64)
    pad = [(0, 0)] * (m.ndim - 2) + [(1, 1), (1, 1)]
    mp = np.pad(m, pad, mode="edge")
    h, w = m.shape[-2:]
    gx = np.zeros_like(m)
    gy = np.zeros_like(m)
    for i in range(3):
        for j in range(3):
            patch = mp[..., i : i + h, j : j + w]
            gx += SOBEL_X[i, j] * patch
            gy += SOBEL_Y[i, j] * patch
    return ((np.abs(gx) + np.abs(gy)) > 0).astype(np.float32)


def dilate(edges, kernel=7):
    """Binary max-filter over a ``kernel x kernel`` window, clipped at the borders."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("dilation kernel must be a positive odd integer")
    e = np.asarray(edges) > 0
    r = kernel // 2
    if r == 0:
        return e.astype(np.float32)
    pad = [(0, 0)] * (e.ndim - 2) + [(r, r), (r, r)]
    ep = np.pad(e, pad)
    h, w = e.shape[-2:]
    # separable: rows then columns
    rows = np.zeros(ep.shape[:-1] + (w,), dtype=bool)
    for j in range(kernel):
        rows |= ep[..., j : j + w]
    out = np.zeros(e.shape, dtype=bool)
    for i in range(kernel):
        out |= rows[..., i : i + h, :]
    return out.astype(np.float32)


def edge_band(prob, kernel=7):
    """Dilated Sobel edges of the 0.5-thresholded probability map (``D_E``)."""
    decision = (np.asarray(prob) >= 0.5).astype(np.float32)
    return dilate(sobel_edges(decision), kernel)


def edge_attention(prev_logits, features, dilation_kernel=7):
    """Return ``(A_E, F_E)``; ``A_E = sigmoid(U(prev)) * D_E`` and ``F_E = A_E * F``."""
    up = _upsample_to(prev_logits, features)
    prob = T.sigmoid(up)
    band = edge_band(prob.data, dilation_kernel).astype(prob.dtype)
    attn = prob * T.Tensor(band, dtype=prob.dtype)
    return attn, attn * features


def uncertainty_map(logits):
    """Pixelwise binary entropy (natural log) of ``sigmoid(logits)``; values in [0, ln 2]."""
    p = T.clip(T.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    q = 1.0 - p
    return -(p * T.log(p) + q * T.log(q))


def apply_uncertainty_attention(encoder_feats, pred_logits):
    """Weight skip features by the entropy of ``pred_logits`` (upsampled to match)."""
    if pred_logits.shape[2:] != encoder_feats.shape[2:]:
        pred_logits = _upsample_to(pred_logits, encoder_feats)
    return uncertainty_map(pred_logits) * encoder_feats


def refinement_forward(prev_logits, features, params, prefix="", dilation_kernel=7, return_maps=False):
    """One refinement stage: ``U(prev) + conv3(relu(conv3(concat(F_R, F_E))))``.

    ``params`` holds ``{prefix}conv1.w/.b`` and ``{prefix}conv2.w/.b``.
    """
    up = _upsample_to(prev_logits, features)
    prob = T.sigmoid(up)
    a_r = 1.0 - prob
    band = edge_band(prob.data, dilation_kernel).astype(prob.dtype)
    a_e = prob * T.Tensor(band, dtype=prob.dtype)
    x = T.concat([a_r * features, a_e * features], axis=1)
    x = T.relu(T.conv2d(x, params[prefix + "conv1.w"], params[prefix + "conv1.b"], padding=1))
    residual = T.conv2d(x, params[prefix + "conv2.w"], params[prefix + "conv2.b"], padding=1)
    out = up + residual
    if return_maps:
        return out, {"reverse": a_r, "edge": a_e, "band": band}
    return out
