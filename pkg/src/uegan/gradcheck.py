"""Finite-difference suite over every differentiable op, attention unit and loss."""
import time

import numpy as np

from . import tensor as T
from .attention import edge_attention, refinement_forward, reverse_attention, uncertainty_map
from .losses import LossConfig, dice_loss, hd_loss, multiscale_l1_loss

F64 = np.float64


def _away_from(rng, shape, points, gap=0.02, low=-2.0, high=2.0):
    """Uniform samples in [low, high] kept at least ``gap`` from each of ``points``."""
    x = rng.uniform(low, high, shape)
    for p in points:
        near = np.abs(x - p) < gap
        x[near] = p + np.where(x[near] >= p, gap, -gap) * 2
    return x


def _probs(rng, shape):
    """Probabilities in (0.05, 0.95) at least 0.02 away from the 0.5 threshold."""
    p = rng.uniform(0.05, 0.95, shape)
    near = np.abs(p - 0.5) < 0.02
    p[near] += np.sign(p[near] - 0.5 + 1e-12) * 0.04
    return p


def _logits(rng, shape):
    """Logits whose sigmoid stays away from 0.5 (so thresholded maps are locally constant)."""
    return _away_from(rng, shape, [0.0], gap=0.1, low=-3.0, high=3.0)


def _upsampled_logits(rng, shape, factor, margin=0.05, tries=1000):
    """Logits whose bilinear upsampling stays ``margin`` away from the decision boundary."""
    for _ in range(tries):
        z = _logits(rng, shape)
        if np.min(np.abs(T.bilinear_upsample(T.Tensor(z, dtype=F64), factor).data)) >= margin:
            return z
    raise RuntimeError("could not sample logits away from the decision boundary")


def _refinement_instance(rng, prev_shape, c, margin=0.05, tries=1000):
    """Logits, features and weights with every hidden ReLU input ``margin`` away from 0."""
    for _ in range(tries):
        prev = _upsampled_logits(rng, prev_shape, 2)
        n, _, h, w = prev_shape
        feats = rng.uniform(-2, 2, (n, c, 2 * h, 2 * w))
        params = {
            "conv1.w": rng.uniform(-1, 1, (c, 2 * c, 3, 3)),
            "conv1.b": rng.uniform(-1, 1, c),
            "conv2.w": rng.uniform(-1, 1, (1, c, 3, 3)),
            "conv2.b": rng.uniform(-1, 1, 1),
        }
        pt, ft = T.Tensor(prev, dtype=F64), T.Tensor(feats, dtype=F64)
        x = T.concat([reverse_attention(pt, ft)[1], edge_attention(pt, ft, 3)[1]], axis=1)
        pre = T.conv2d(x, T.Tensor(params["conv1.w"], dtype=F64), T.Tensor(params["conv1.b"], dtype=F64), padding=1)
        if np.min(np.abs(pre.data)) >= margin:
            return prev, feats, params
    raise RuntimeError("could not sample a refinement instance away from ReLU kinks")


def _weighted(out, c):
    return T.tsum(out * T.Tensor(c, dtype=F64))


def _cases(rng):
    """Yield ``(name, f, inputs)`` for one random micro instance of every check."""
    n, c, h, w = 2, int(rng.integers(1, 4)), 6, 6

    def rnd(*shape):
        return rng.uniform(-2, 2, shape)

    x = rnd(n, c, h, w)
    c_out = int(rng.integers(1, 4))
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 3))
    dil = int(rng.integers(1, 3))
    pad = dil * (k - 1) // 2
    ho = T.conv_output_size(h, k, stride, pad, dil)
    cw = rng.standard_normal((n, c_out, ho, ho))
    yield (
        "conv2d",
        lambda a, wt, b: _weighted(T.conv2d(a, wt, b, stride, pad, dil), cw),
        [x, rnd(c_out, c, k, k), rnd(c_out)],
    )

    kt = int(rng.choice([2, 3, 5]))
    st = int(rng.integers(1, 3))
    pt = (kt - 1) // 2
    opad = 1 if st == 2 and kt % 2 else 0
    ht = (h - 1) * st - 2 * pt + kt + opad
    ct = rng.standard_normal((n, c_out, ht, ht))
    yield (
        "conv_transpose2d",
        lambda a, wt, b: _weighted(T.conv_transpose2d(a, wt, b, st, pt, opad), ct),
        [x, rnd(c, c_out, kt, kt), rnd(c_out)],
    )

    cx = rng.standard_normal(x.shape)
    kinked = _away_from(rng, x.shape, [0.0])
    yield "relu", lambda a: _weighted(T.relu(a), cx), [kinked]
    yield "leaky_relu", lambda a: _weighted(T.leaky_relu(a, 0.2), cx), [kinked]
    yield "sigmoid", lambda a: _weighted(T.sigmoid(a), cx), [x]
    yield "abs", lambda a: _weighted(T.tabs(a), cx), [kinked]
    yield "square", lambda a: _weighted(T.square(a), cx), [x]
    yield "log", lambda a: _weighted(T.log(a), cx), [rng.uniform(0.2, 3.0, x.shape)]
    yield "clip", lambda a: _weighted(T.clip(a, -1.0, 1.0), cx), [_away_from(rng, x.shape, [-1.0, 1.0])]
    yield "add_mul_div", lambda a, b: _weighted((a * b + a) / (b * b + 1.0), cx), [x, rnd(n, 1, h, w)]
    yield "mean_sum", lambda a: T.mean(a, axis=(2, 3)).sum() + T.tsum(T.square(a)) * 0.1, [x]
    c2 = rng.standard_normal((n, 2 * c, h, w))
    yield "broadcast_concat", lambda a: _weighted(
        T.concat([a, T.broadcast_to(T.global_avg_pool(a), a.shape)], axis=1), c2
    ), [x]

    factor = int(rng.integers(1, 4))
    cu = rng.standard_normal((n, c, h * factor, w * factor))
    yield "bilinear_upsample", lambda a: _weighted(T.bilinear_upsample(a, factor), cu), [x]

    def bn_fn(training):
        rm = T.Tensor(rng.uniform(-1, 1, c), dtype=F64)
        rv = T.Tensor(rng.uniform(0.5, 2, c), dtype=F64)
        return lambda a, g, b: _weighted(T.batchnorm(a, g, b, rm, rv, training=training, update_stats=False), cx)

    yield "batchnorm_train", bn_fn(True), [x, rnd(c), rnd(c)]
    yield "batchnorm_eval", bn_fn(False), [x, rnd(c), rnd(c)]

    prev = _upsampled_logits(rng, (n, 1, h // 2, w // 2), 2)
    feats = rnd(n, c, prev.shape[2] * 2, prev.shape[3] * 2)
    ca = rng.standard_normal(feats.shape)
    yield "reverse_attention", lambda p, f: _weighted(reverse_attention(p, f)[1], ca), [prev, feats]
    yield "edge_attention", lambda p, f: _weighted(edge_attention(p, f, 3)[1], ca), [prev, feats]
    cu1 = rng.standard_normal(prev.shape)
    yield "uncertainty_map", lambda p: _weighted(uncertainty_map(p), cu1), [prev]

    prev, feats, params = _refinement_instance(rng, prev.shape, c)
    names = list(params)
    gt = (rng.random((n, 1, feats.shape[2], feats.shape[3])) < 0.4).astype(F64)

    def refine_dice(p, f, *ws):
        out = refinement_forward(p, f, dict(zip(names, ws)), dilation_kernel=3)
        return dice_loss(T.sigmoid(out), gt)

    yield "refinement+dice", refine_dice, [prev, feats] + [params[k] for k in names]

    pr = _probs(rng, (n, 1, h, w))
    g = (rng.random(pr.shape) < 0.4).astype(F64)
    cfg = LossConfig()
    yield "dice_loss", lambda p: dice_loss(p, g, cfg), [pr]
    yield "hd_loss", lambda p: hd_loss(p, g, cfg), [pr]

    levels = int(rng.integers(1, 4))
    shapes = [(n, c, h // 2**i or 1, w // 2**i or 1) for i in range(levels)]
    fakes = [rnd(*s) for s in shapes]
    reals = [_away_from(rng, s, [0.0]) + f for s, f in zip(shapes, fakes)]
    yield "multiscale_l1", lambda *fs: multiscale_l1_loss(
        list(fs), [T.Tensor(r, dtype=F64) for r in reals]
    ), fakes


def run_suite(seed=0, instances=20, h=1e-3, tol=1e-3):
    """Run every check on ``instances`` random micro cases; returns rows of per-check results."""
    rng = np.random.default_rng(seed)
    rows = {}
    start = time.perf_counter()
    for _ in range(instances):
        for name, fn, inputs in _cases(rng):
            tensors = [T.Tensor(a, dtype=F64) for a in inputs]
            res = T.grad_check(fn, tensors, h=h, tol=tol)
            row = rows.setdefault(name, {"name": name, "instances": 0, "max_rel_err": 0.0, "passed": True})
            row["instances"] += 1
            row["max_rel_err"] = max(row["max_rel_err"], res["max_rel_err"])
            row["passed"] = row["passed"] and res["passed"]
    elapsed = time.perf_counter() - start
    return list(rows.values()), elapsed


def format_table(rows, elapsed=None):
    lines = [f"{'check':<20} {'n':>3} {'max rel err':>12}  status"]
    for r in rows:
        lines.append(f"{r['name']:<20} {r['instances']:>3} {r['max_rel_err']:>12.3e}  {'PASS' if r['passed'] else 'FAIL'}")
    if elapsed is not None:
        lines.append(f"elapsed {elapsed:.1f}s")
    return "\n".join(lines)
