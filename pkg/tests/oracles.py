"""Independent brute-force references shared by the unit tests and the acceptance gate."""
import itertools

import numpy as np


def all_masks(h, w):
    """Every binary h x w mask, as an array of shape (2**(h*w), h, w)."""
    n = h * w
    codes = np.arange(2**n, dtype=np.int64)
    bits = (codes[:, None] >> np.arange(n)) & 1
    return bits.reshape(-1, h, w).astype(bool)


def brute_force_dt_batch(masks, cap):
    """All-pairs minimum L1 distance to a foreground pixel for a stack of masks."""
    b, h, w = masks.shape
    ii, jj = np.mgrid[:h, :w]
    dist = np.abs(ii.reshape(-1, 1) - ii.reshape(1, -1)) + np.abs(jj.reshape(-1, 1) - jj.reshape(1, -1))
    flat = masks.reshape(b, 1, h * w)
    d = np.where(flat, dist[None], np.inf).min(axis=-1)
    d[np.isinf(d)] = cap
    return np.minimum(d, cap).reshape(b, h, w)


def brute_force_dt(mask, cap):
    return brute_force_dt_batch(np.asarray(mask, dtype=bool)[None], cap)[0]


def column_pass_inputs(height):
    """Every column a row sweep can hand to the column sweep: values in {0..height-1, inf}."""
    values = np.array(list(range(height)) + [np.inf])
    idx = np.array(list(itertools.product(range(len(values)), repeat=height)))
    return values[idx]


def min_plus_column(cols):
    """Reference column pass: out[i] = min_k |i - k| + col[k]."""
    k = np.arange(cols.shape[-1])
    return (np.abs(k[:, None] - k[None, :])[None] + cols[:, None, :]).min(axis=-1)


def flood_components(mask, connectivity=8):
    """Label components by breadth-first flood fill in raster order."""
    m = np.asarray(mask) > 0
    h, w = m.shape
    labels = np.zeros((h, w), dtype=int)
    steps = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    if connectivity == 8:
        steps += [(-1, -1), (-1, 1), (1, -1), (1, 1)]
    n = 0
    for i in range(h):
        for j in range(w):
            if m[i, j] and not labels[i, j]:
                n += 1
                labels[i, j] = n
                queue = [(i, j)]
                while queue:
                    a, b = queue.pop()
                    for da, db in steps:
                        u, v = a + da, b + db
                        if 0 <= u < h and 0 <= v < w and m[u, v] and not labels[u, v]:
                            labels[u, v] = n
                            queue.append((u, v))
    return labels, n


def pairwise_iou(pred_labels, n_pred, gt_labels, n_gt):
    iou = np.zeros((n_pred, n_gt))
    for a in range(1, n_pred + 1):
        pa = pred_labels == a
        for b in range(1, n_gt + 1):
            gb = gt_labels == b
            iou[a - 1, b - 1] = np.count_nonzero(pa & gb) / np.count_nonzero(pa | gb)
    return iou


def exhaustive_matches(iou, threshold=0.5):
    """Largest number of one-to-one pairs with IoU >= threshold, over every assignment."""
    n_p, n_g = iou.shape
    best = 0
    if n_p <= n_g:
        for perm in itertools.permutations(range(n_g), n_p):
            best = max(best, sum(iou[i, perm[i]] >= threshold for i in range(n_p)))
    else:
        for perm in itertools.permutations(range(n_p), n_g):
            best = max(best, sum(iou[perm[j], j] >= threshold for j in range(n_g)))
    return best


def random_object_instance(rng, size=14, max_objects=4):
    """A gt mask of up to ``max_objects`` rectangles and a jittered prediction of them."""
    gt = np.zeros((size, size), dtype=bool)
    pred = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(0, max_objects + 1)):
        h, w = rng.integers(2, 6, size=2)
        r, c = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        gt[r : r + h, c : c + w] = True
    for _ in range(rng.integers(0, max_objects + 1)):
        h, w = rng.integers(2, 6, size=2)
        r, c = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        pred[r : r + h, c : c + w] = True
    return pred, gt


def strict_pr(pred, gt):
    p, g = np.asarray(pred) > 0, np.asarray(gt) > 0
    tp = np.count_nonzero(p & g)
    if not p.any() and not g.any():
        return 1.0, 1.0
    precision = tp / p.sum() if p.any() else 0.0
    recall = tp / g.sum() if g.any() else 0.0
    return precision, recall


def stub_tile_round_trip(image, tile, overlap, extract, fuse):
    """Cut ``image`` into tiles, pass them through unchanged, and fuse them back."""
    grid = extract(image.shape[-2:], tile, overlap)
    tiles = [image[..., r : r + grid.tile, c : c + grid.tile] for r, c in grid.origins]
    return fuse(grid, tiles)


def stencil_edges(mask):
    """Sobel |Gx|+|Gy| > 0 evaluated pixel by pixel with clamped (replicate) indexing."""
    h, w = mask.shape
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            gx = gy = 0.0
            for u in range(3):
                for v in range(3):
                    px = mask[min(max(i + u - 1, 0), h - 1), min(max(j + v - 1, 0), w - 1)]
                    gx += kx[u][v] * px
                    gy += kx[v][u] * px
            out[i, j] = abs(gx) + abs(gy) > 0
    return out


def union_of_blocks(mask, kernel):
    """Dilation as the union of clipped kernel x kernel blocks around each set pixel."""
    out = np.zeros_like(mask, dtype=float)
    r = kernel // 2
    for i, j in zip(*np.nonzero(mask)):
        out[max(i - r, 0) : i + r + 1, max(j - r, 0) : j + r + 1] = 1.0
    return out
