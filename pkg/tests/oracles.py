"""Slow, literal reference implementations used only by the tests."""
import numpy as np

from emae import rng


def algorithm1_partition(n, k, seed, *path):
    """Sort-and-slice mask generation written out step by step with Python lists."""
    tensor = list(rng.uniform(n, seed, *path))
    ids = sorted(range(n), key=lambda a: (tensor[a], a))
    ids_tensor = sorted(range(n), key=lambda a: ids[a])
    size = n // k
    parts, masks = [], []
    for i in range(1, k + 1):
        parts.append(ids[(i - 1) * size:i * size])
        m_sorted = [1] * n
        for p in range((i - 1) * size, i * size):
            m_sorted[p] = 0
        masks.append([m_sorted[ids_tensor[p]] for p in range(n)])
    return parts, masks


def masked_mse(pred, target, mask):
    """Double loop: mean over masked rows and columns of squared error."""
    total, count = 0.0, 0
    for r in range(len(mask)):
        if mask[r]:
            for c in range(len(pred[r])):
                total += (pred[r][c] - target[r][c]) ** 2
                count += 1
    return total / count


def pair_l1(pi, pj, overlap):
    total, count = 0.0, 0
    for r in range(len(overlap)):
        if overlap[r]:
            for c in range(len(pi[r])):
                total += 2.0 * abs(pi[r][c] - pj[r][c])
                count += 1
    return total / count if count else 0.0


def consistency(preds, masks):
    k = len(preds)
    vals = []
    for i in range(k):
        for j in range(i + 1, k):
            ov = [masks[i][r] and masks[j][r] for r in range(len(masks[i]))]
            vals.append(pair_l1(preds[i], preds[j], ov))
    return sum(vals) / len(vals)


def whole(preds, target, masks):
    return sum(masked_mse(p, target, m) for p, m in zip(preds, masks)) / len(preds)


def central_differences(f, x, h=1e-5):
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        g.reshape(-1)[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return g
