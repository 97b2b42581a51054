"""Adversarial training: synthetic data, augmentation, poly-LR Adam, critic/generator alternation."""
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericError
from .inference import model_predictor, select_threshold, tta_predict
from .losses import LossConfig, multiscale_l1_loss, total_generator_loss
from .metrics import ConfusionCounts, confusion_counts, metrics_from_counts
from .network import ModelConfig, build_critic, build_generator, critic_forward, generator_forward

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) float32 in {0, 1}
    rects: List[tuple] = field(default_factory=list)  # (row, col, height, width)


ROOF_COLORS = np.array(
    [
        [0.62, 0.28, 0.22],  # terracotta
        [0.55, 0.56, 0.60],  # concrete
        [0.82, 0.80, 0.74],  # light membrane
        [0.30, 0.34, 0.45],  # slate
    ]
)
GROUND_COLORS = np.array(
    [
        [0.28, 0.42, 0.22],  # grass
        [0.45, 0.40, 0.28],  # dry soil
        [0.22, 0.33, 0.20],  # woodland
    ]
)


def _smooth_field(rng, size, cells=4):
    coarse = rng.standard_normal((cells, cells))
    reps = -(-size // cells)
    f = np.kron(coarse, np.ones((reps, reps)))[:size, :size]
    # box blur to soften the blocks
    k = max(reps // 2, 1)
    f = np.cumsum(np.cumsum(np.pad(f, ((k, k), (k, k)), mode="edge"), 0), 1)
    f = np.pad(f, ((1, 0), (1, 0)))
    n = 2 * k + 1
    f = (f[n:, n:] - f[:-n, n:] - f[n:, :-n] + f[:-n, :-n]) / (n * n)
    return f[:size, :size]


def _free(occupied, r, c, h, w):
    H, W = occupied.shape
    r0, c0 = max(r - 1, 0), max(c - 1, 0)
    return not occupied[r0 : min(r + h + 1, H), c0 : min(c + w + 1, W)].any()


def synth_sample(rng, size=64):
    """One image with 2-8 rectangular buildings and, 30% of the time, a roof-coloured road."""
    image = np.empty((3, size, size))
    ground = GROUND_COLORS[rng.integers(len(GROUND_COLORS))] + rng.uniform(-0.04, 0.04, 3)
    image[:] = ground[:, None, None] + 0.05 * _smooth_field(rng, size)[None]
    occupied = np.zeros((size, size), dtype=bool)
    mask = np.zeros((size, size), dtype=np.float32)

    if rng.random() < 0.3:
        width = int(rng.integers(3, 6))
        pos = int(rng.integers(4, size - 4 - width))
        road = ROOF_COLORS[rng.integers(len(ROOF_COLORS))] + rng.uniform(-0.03, 0.03, 3)
        if rng.random() < 0.5:
            image[:, pos : pos + width, :] = road[:, None, None]
            occupied[pos : pos + width, :] = True
        else:
            image[:, :, pos : pos + width] = road[:, None, None]
            occupied[:, pos : pos + width] = True

    rects = []
    target = int(rng.integers(2, 9))
    for _ in range(200):
        if len(rects) == target:
            break
        h, w = (int(v) for v in rng.integers(6, 25, size=2))
        r = int(rng.integers(0, size - h + 1))
        c = int(rng.integers(0, size - w + 1))
        if not _free(occupied, r, c, h, w):
            continue
        color = ROOF_COLORS[rng.integers(len(ROOF_COLORS))] + rng.uniform(-0.05, 0.05, 3)
        image[:, r : r + h, c : c + w] = color[:, None, None]
        # one-pixel shadow along the lower and right sides
        image[:, r + h : r + h + 1, c + 1 : c + w + 1] *= 0.6
        image[:, r + 1 : r + h + 1, c + w : c + w + 1] *= 0.6
        occupied[r : r + h, c : c + w] = True
        mask[r : r + h, c : c + w] = 1.0
        rects.append((r, c, h, w))

    image += rng.normal(0.0, 0.05, image.shape)
    return SynthSample(np.clip(image, 0.0, 1.0).astype(np.float32), mask, rects)


def synth_dataset(count, size=64, seed=0):
    if size % 16:
        raise ValueError("size must be divisible by 16")
    rng = np.random.default_rng(seed)
    return [synth_sample(rng, size) for _ in range(count)]


def stack_batch(samples):
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])[:, None]
    return images, masks


# ---------------------------------------------------------------------------
# augmentation


def geometric(a, hflip, vflip, k):
    if hflip:
        a = a[..., :, ::-1]
    if vflip:
        a = a[..., ::-1, :]
    return np.ascontiguousarray(np.rot90(a, k, axes=(-2, -1)))


def color_jitter(image, brightness, contrast, saturation):
    img = image * brightness
    mean = img.mean()
    img = (img - mean) * contrast + mean
    gray = img.mean(axis=0, keepdims=True)
    img = gray + (img - gray) * saturation
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def augment(sample, rng, jitter=0.2):
    """Random flips, quarter-turn rotation and colour jitter; the mask gets the same geometry."""
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    k = int(rng.integers(4))
    b, c, s = (float(rng.uniform(1 - jitter, 1 + jitter)) for _ in range(3))
    image = color_jitter(geometric(sample.image, hflip, vflip, k), b, c, s)
    return SynthSample(image, geometric(sample.mask, hflip, vflip, k), sample.rects)


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class TrainState:
    total_steps: int = 300
    step: int = 0
    lr0: float = 0.0005
    power: float = 0.9
    weight_decay: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    moments: Dict[str, tuple] = field(default_factory=dict)


def poly_lr(state):
    if state.total_steps <= 0:
        raise ValueError("total_steps must be positive")
    frac = min(max(state.step / state.total_steps, 0.0), 1.0)
    return state.lr0 * (1.0 - frac) ** state.power


def adam_step(params, state, prefix="", lr=None):
    """In-place Adam update of every trainable tensor in ``params`` (L2 decay added to the gradient).

    Bias correction uses ``state.step + 1``.  Moments are keyed by ``prefix + name``.
    """
    lr = poly_lr(state) if lr is None else lr
    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise ContractError(f"no gradient for parameter {name}")
        g = p.grad + state.weight_decay * p.data
        key = prefix + name
        m, v = state.moments.get(key, (np.zeros_like(p.data), np.zeros_like(p.data)))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.moments[key] = (m, v)
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)).astype(p.dtype)


def zero_grads(params):
    for p in params.values():
        p.grad = None


def frozen(params):
    """Views of ``params`` sharing storage but excluded from the graph."""
    return {k: T.Tensor(v.data, requires_grad=False, dtype=v.dtype) for k, v in params.items()}


def adversarial_step(images, masks, gen_params, critic_params, state, model_config, loss_config):
    """One critic update (generator frozen) then one generator update (critic frozen).

    Returns a LossReport dict and advances ``state.step``.
    """
    x = T.Tensor(images)
    gt = T.Tensor(masks)
    lr = poly_lr(state)

    # phase 1: critic maximises the multi-scale L1 gap
    with T.no_grad():
        fake = T.sigmoid(generator_forward(x, frozen(gen_params), model_config, update_stats=False).final)
    both = T.concat([x, x], axis=0)
    both_masks = T.Tensor(np.concatenate([fake.data, masks]), dtype=fake.dtype)
    feats = critic_forward(both, both_masks, critic_params, model_config)
    n = images.shape[0]
    split = [(T.slice_batch(f, 0, n), T.slice_batch(f, n, 2 * n)) for f in feats]
    critic_loss = -multiscale_l1_loss([a for a, _ in split], [b for _, b in split])
    _check_finite(critic_loss, "critic loss")
    zero_grads(critic_params)
    T.backward(critic_loss)
    adam_step(critic_params, state, prefix="critic.", lr=lr)

    # phase 2: generator minimises adversarial + deep-supervised dice/shape loss
    outputs = generator_forward(x, gen_params, model_config)
    probs = T.sigmoid(outputs.final)
    mask_in = T.concat([probs, gt], axis=0)
    feats = critic_forward(both, mask_in, frozen(critic_params), model_config, update_stats=False)
    split = [(T.slice_batch(f, 0, n), T.slice_batch(f, n, 2 * n)) for f in feats]
    adv = multiscale_l1_loss([a for a, _ in split], [b for _, b in split])
    total, parts = total_generator_loss(outputs, masks, adv, loss_config)
    _check_finite(total, "generator loss")
    zero_grads(gen_params)
    T.backward(total)
    adam_step(gen_params, state, prefix="gen.", lr=lr)

    report = {
        "step": state.step,
        "lr": lr,
        "dice": parts["dice"],
        "hd": parts["hd"],
        "adv": parts["adv"],
        "critic": float(critic_loss.data),
        "total": float(total.data),
    }
    state.step += 1
    return report


def _check_finite(loss, what):
    if not np.all(np.isfinite(loss.data)):
        raise NumericError(f"non-finite {what}")


# ---------------------------------------------------------------------------
# loops


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 8
    train_count: int = 200
    val_count: int = 50
    image_size: int = 64
    seed: int = 0
    augment: bool = True
    lr0: float = 0.002
    power: float = 0.9
    weight_decay: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    tta: bool = True
    threshold_metric: str = "iou"


@dataclass
class TrainResult:
    gen_params: dict
    critic_params: dict
    reports: List[dict]
    state: TrainState


def batch_order(rng, n, batch_size, steps):
    """Sample indices for every step: reshuffle each epoch, drop the ragged tail."""
    per_epoch = n // batch_size
    batches = []
    while len(batches) < steps:
        perm = rng.permutation(n)
        batches.extend(perm[i * batch_size : (i + 1) * batch_size] for i in range(per_epoch))
    return batches[:steps]


def train(
    train_set,
    model_config=None,
    loss_config=None,
    train_config=None,
    report_stream=None,
    checkpoint_fn=None,
    checkpoint_every=0,
    dump_fn=None,
):
    """Run adversarial training; returns :class:`TrainResult`.

    ``report_stream`` receives one JSON line per step.  ``checkpoint_fn(step, gen, critic)``
    is called every ``checkpoint_every`` steps; ``dump_fn`` on a numeric failure.
    """
    model_config = model_config or ModelConfig()
    loss_config = loss_config or LossConfig()
    tc = train_config or TrainConfig()
    rng = np.random.default_rng(tc.seed)
    gen = build_generator(model_config, seed=tc.seed)
    critic = build_critic(model_config, seed=tc.seed + 1)
    state = TrainState(
        total_steps=tc.steps,
        lr0=tc.lr0,
        power=tc.power,
        weight_decay=tc.weight_decay,
        beta1=tc.beta1,
        beta2=tc.beta2,
        eps=tc.adam_eps,
        seed=tc.seed,
    )
    reports = []
    for idx in batch_order(rng, len(train_set), tc.batch_size, tc.steps):
        samples = [train_set[i] for i in idx]
        if tc.augment:
            samples = [augment(s, rng) for s in samples]
        images, masks = stack_batch(samples)
        try:
            report = adversarial_step(images, masks, gen, critic, state, model_config, loss_config)
        except NumericError:
            if dump_fn is not None:
                dump_fn(state.step, gen, critic)
            raise
        reports.append(report)
        if report_stream is not None:
            report_stream.write(json.dumps(report) + "\n")
        if checkpoint_fn is not None and checkpoint_every and state.step % checkpoint_every == 0:
            checkpoint_fn(state.step, gen, critic)
        log.debug("step %d total %.4f", report["step"], report["total"])
    return TrainResult(gen, critic, reports, state)


def predict_probs(samples, params, model_config, tta=True, batch_size=16):
    predict = model_predictor(params, model_config)
    out = []
    for i in range(0, len(samples), batch_size):
        images, _ = stack_batch(samples[i : i + batch_size])
        probs = tta_predict(images, predict) if tta else predict(images)
        out.extend(probs[:, 0])
    return out


def validate(samples, params, model_config, tta=True, threshold="auto", metric="iou"):
    """Aggregate pixel metrics over ``samples`` at a fixed or auto-selected threshold."""
    probs = predict_probs(samples, params, model_config, tta=tta)
    gts = [s.mask for s in samples]
    t = select_threshold(probs, gts, metric) if threshold == "auto" else float(threshold)
    counts = ConfusionCounts(0, 0, 0, 0)
    for p, g in zip(probs, gts):
        counts = counts + confusion_counts(p >= t, g)
    result = dict(metrics_from_counts(counts)._asdict())
    result["threshold"] = t
    return result


def smoothed(values, window=20):
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")
