"""Slow, independent reference implementations used to check the library."""
import itertools
import math

import numpy as np


def bilinear_resize(img, out_h, out_w):
    """Half-pixel bilinear resize of a 2-D array, edges clamped."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    out = np.empty((out_h, out_w))
    for i in range(out_h):
        y = max((i + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(math.floor(y)), h - 1)
        y1 = min(y0 + 1, h - 1)
        wy = y - y0
        for j in range(out_w):
            x = max((j + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(math.floor(x)), w - 1)
            x1 = min(x0 + 1, w - 1)
            wx = x - x0
            out[i, j] = ((1 - wy) * ((1 - wx) * img[y0, x0] + wx * img[y0, x1])
                         + wy * ((1 - wx) * img[y1, x0] + wx * img[y1, x1]))
    return out


def afs_channel_loss(fa, fi, masks):
    """Loss of one channel: fa, fi are (N, h, w), masks (N, H, W)."""
    total = 0.0
    for a, b, m in zip(fa, fi, masks):
        d = bilinear_resize((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2, *m.shape)
        span = d.max() - d.min()
        f = (d - d.min()) / span if span > 1e-12 else np.zeros_like(d)
        total += ((f - m) ** 2).mean()
    return total / len(masks)


def afs_oracle(layer_a, layer_i, masks, m_k):
    """All channel losses, then the m_k channels with the smallest (loss, index)."""
    c = layer_a.shape[1]
    losses = [afs_channel_loss(layer_a[:, j], layer_i[:, j], masks) for j in range(c)]
    order = sorted(range(c), key=lambda j: (losses[j], j))
    return order[:m_k], losses


def best_subset(losses, m_k):
    """Subset of size m_k with the minimal total loss by exhaustive enumeration."""
    return min(itertools.combinations(range(len(losses)), m_k), key=lambda s: (sum(losses[j] for j in s), s))


def top_channels(stat, r):
    """Indices of the r largest values; ties resolved towards the lower index."""
    return sorted(range(len(stat)), key=lambda j: (-stat[j], j))[:r]


def rrs_oracle(E, mode, r):
    """Per-sample channel list for E of shape (N, m, h, w) as nested Python lists."""
    out = []
    for e in np.asarray(E, dtype=np.float64):
        gmp = [float(ch.max()) for ch in e]
        gap = [float(ch.mean()) for ch in e]
        if mode == "max" or (mode == "max_and_avg" and r == len(gmp)):
            out.append(top_channels(gmp, r))
        elif mode == "avg":
            out.append(top_channels(gap, r))
        else:
            out.append(top_channels(gmp, r // 2) + top_channels(gap, r // 2))
    return out


def auroc_pairs(scores, labels):
    """Fraction of (positive, negative) pairs ordered correctly, ties count half."""
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    good = 0.0
    for p in pos:
        for n in neg:
            good += 1.0 if p > n else 0.5 if p == n else 0.0
    return good / (len(pos) * len(neg))


def label_regions(mask):
    """8-connected flood fill, labels in raster order of each region's first pixel."""
    mask = np.asarray(mask) > 0
    labels = np.zeros(mask.shape, dtype=int)
    n = 0
    h, w = mask.shape
    for i in range(h):
        for j in range(w):
            if mask[i, j] and not labels[i, j]:
                n += 1
                stack = [(i, j)]
                labels[i, j] = n
                while stack:
                    y, x = stack.pop()
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xx = y + dy, x + dx
                            if 0 <= yy < h and 0 <= xx < w and mask[yy, xx] and not labels[yy, xx]:
                                labels[yy, xx] = n
                                stack.append((yy, xx))
    return labels, n


def pro_oracle(score_maps, gt_masks, fpr_limit=0.3):
    """Sweep every distinct score as a threshold, recounting overlaps from scratch."""
    scores = np.asarray(score_maps, dtype=np.float64)
    gts = np.asarray(gt_masks) > 0
    regions = []
    for n in range(len(gts)):
        labels, count = label_regions(gts[n])
        regions += [(n, labels == k) for k in range(1, count + 1)]
    neg = ~gts
    points = [(0.0, 0.0)]
    for th in sorted(set(scores.ravel().tolist()), reverse=True):
        pred = scores >= th
        fpr = (pred & neg).sum() / neg.sum()
        overlap = np.mean([(pred[n] & r).sum() / r.sum() for n, r in regions])
        points.append((float(fpr), float(overlap)))
    points.sort()
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x0 >= fpr_limit:
            break
        if x1 > fpr_limit:
            y1 = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0)
            x1 = fpr_limit
        area += (x1 - x0) * (y0 + y1) / 2
    return area / fpr_limit
