"""Tiled inference, weighted fusion, test-time augmentation, ensembling, thresholding."""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .metrics import ConfusionCounts, confusion_counts, metrics_from_counts
from .network import generator_forward


def axis_origins(dim, tile, overlap):
    if tile > dim:
        raise DimensionError(f"tile {tile} larger than image dimension {dim}")
    if not 0.0 <= overlap < 1.0:
        raise ValueError("overlap must lie in [0, 1)")
    stride = max(int(round(tile * (1.0 - overlap))), 1)
    origins = list(range(0, dim - tile + 1, stride))
    last = dim - tile
    if origins[-1] != last:
        origins.append(last)
    return origins


def triangular_window(n):
    """Centre-peaked weights ``min(i + 1, n - i)``, strictly positive at the edges."""
    i = np.arange(n)
    return np.minimum(i + 1, n - i).astype(np.float64)


@dataclass
class TileGrid:
    height: int
    width: int
    tile: int
    row_origins: List[int]
    col_origins: List[int]

    @property
    def origins(self) -> List[Tuple[int, int]]:
        return [(r, c) for r in self.row_origins for c in self.col_origins]

    @property
    def weights(self):
        w = triangular_window(self.tile)
        return np.outer(w, w)

    def crop(self, image):
        """Yield ``image[..., r:r+t, c:c+t]`` for every origin in grid order."""
        t = self.tile
        for r, c in self.origins:
            yield image[..., r : r + t, c : c + t]


def extract_tiles(image_size, tile, overlap):
    h, w = image_size
    return TileGrid(h, w, tile, axis_origins(h, tile, overlap), axis_origins(w, tile, overlap))


def fuse_tiles(grid, tile_predictions):
    """Weighted average of overlapping tile predictions (arrays shaped ``(..., t, t)``)."""
    origins = grid.origins
    if len(tile_predictions) != len(origins):
        raise ValueError(f"{len(tile_predictions)} predictions for {len(origins)} tiles")
    t = grid.tile
    lead = np.asarray(tile_predictions[0]).shape[:-2]
    value = np.zeros(lead + (grid.height, grid.width))
    weight = np.zeros((grid.height, grid.width))
    k = grid.weights
    for (r, c), pred in zip(origins, tile_predictions):
        pred = np.asarray(pred, dtype=np.float64)
        if pred.shape[-2:] != (t, t):
            raise DimensionError(f"tile prediction shape {pred.shape} != tile {t}")
        value[..., r : r + t, c : c + t] += pred * k
        weight[r : r + t, c : c + t] += k
    return (value / weight).astype(np.float32)


def predict_tiled(image, predict, tile, overlap=0.5):
    """Run ``predict`` on overlapping tiles of an NCHW array and fuse the results."""
    grid = extract_tiles(image.shape[-2:], tile, overlap)
    preds = [predict(np.ascontiguousarray(patch)) for patch in grid.crop(image)]
    return fuse_tiles(grid, preds)


# forward transform and its inverse, acting on the last two axes
TTA_TRANSFORMS = (
    ("identity", lambda a: a, lambda a: a),
    ("hflip", lambda a: a[..., :, ::-1], lambda a: a[..., :, ::-1]),
    ("vflip", lambda a: a[..., ::-1, :], lambda a: a[..., ::-1, :]),
    ("rot90", lambda a: np.rot90(a, 1, axes=(-2, -1)), lambda a: np.rot90(a, -1, axes=(-2, -1))),
    ("rot180", lambda a: np.rot90(a, 2, axes=(-2, -1)), lambda a: np.rot90(a, -2, axes=(-2, -1))),
    ("rot270", lambda a: np.rot90(a, 3, axes=(-2, -1)), lambda a: np.rot90(a, -3, axes=(-2, -1))),
)


def _order_free_mean(maps):
    # sorting along the stack axis makes the float sum independent of input order
    stack = np.sort(np.stack([np.asarray(m, dtype=np.float64) for m in maps]), axis=0)
    return (stack.sum(axis=0) / len(maps)).astype(np.float32)


def tta_predict(image, predict, transforms=TTA_TRANSFORMS):
    """Average of inverse-aligned probability maps over flips and right-angle rotations."""
    image = np.asarray(image)
    if image.shape[-1] != image.shape[-2]:
        raise DimensionError(f"TTA rotations need a square input, got {image.shape[-2:]}")
    aligned = []
    for _, fwd, inv in transforms:
        out = predict(np.ascontiguousarray(fwd(image)))
        aligned.append(inv(np.asarray(out)))
    return _order_free_mean(aligned)


def ensemble_average(predictions):
    if not predictions:
        raise ValueError("ensemble needs at least one prediction")
    shapes = {np.shape(p) for p in predictions}
    if len(shapes) != 1:
        raise DimensionError(f"ensemble members have different shapes: {shapes}")
    return _order_free_mean(predictions)


THRESHOLDS = np.round(np.arange(1, 100) * 0.01, 2)


def select_threshold(probs, gts, metric="iou"):
    """Threshold in {0.01, ..., 0.99} maximising the aggregate metric; ties go to the one nearest 0.5."""
    if not probs:
        raise ValueError("empty validation set")
    if metric not in ("iou", "f1"):
        raise ValueError("metric must be 'iou' or 'f1'")
    best, best_score = 0.5, -1.0
    for t in sorted(THRESHOLDS, key=lambda v: (abs(v - 0.5), v)):
        counts = ConfusionCounts(0, 0, 0, 0)
        for p, g in zip(probs, gts):
            counts = counts + confusion_counts(np.asarray(p) >= t, g)
        score = getattr(metrics_from_counts(counts), metric)
        if score > best_score:
            best, best_score = float(t), score
    return best


def model_predictor(params, config):
    """Callable mapping an NCHW image array to building probabilities (eval-mode batch norm)."""

    def predict(image):
        with T.no_grad():
            out = generator_forward(T.Tensor(image), params, config, training=False)
            return T.sigmoid(out.final).data

    return predict


def predict_image(image, models, config, tile=None, overlap=0.5, tta=False):
    """Probability map for an NCHW image: TTA per model, ensemble average, tiled if ``tile`` is set."""
    members = []
    for params in models:
        base = model_predictor(params, config)
        predict = (lambda x, base=base: tta_predict(x, base)) if tta else base
        if tile is not None and tile < max(image.shape[-2:]):
            members.append(predict_tiled(image, predict, tile, overlap))
        else:
            members.append(predict(image))
    return ensemble_average(members)
