"""Slow, obviously-correct reference implementations used only by the tests."""

from __future__ import annotations

import itertools
import math

import numpy as np


def conv3d_loops(x, k, stride=(1, 1, 1), pad=(0, 0, 0), bias=None):
    """Direct cross-correlation by explicit loops over output voxels."""
    n, ci, D, H, W = x.shape
    co, _, kd, kh, kw = k.shape
    xp = np.zeros((n, ci, D + 2 * pad[0], H + 2 * pad[1], W + 2 * pad[2]))
    xp[:, :, pad[0]:pad[0] + D, pad[1]:pad[1] + H, pad[2]:pad[2] + W] = x
    od = (D + 2 * pad[0] - kd) // stride[0] + 1
    oh = (H + 2 * pad[1] - kh) // stride[1] + 1
    ow = (W + 2 * pad[2] - kw) // stride[2] + 1
    out = np.zeros((n, co, od, oh, ow))
    for b, o, i, j, l in itertools.product(range(n), range(co), range(od), range(oh), range(ow)):
        win = xp[b, :, i * stride[0]:i * stride[0] + kd, j * stride[1]:j * stride[1] + kh,
                 l * stride[2]:l * stride[2] + kw]
        out[b, o, i, j, l] = (win * k[o]).sum() + (0.0 if bias is None else bias[o])
    return out


def attention_direct(q, k, v, mask=None):
    """Row-by-row softmax attention with explicit exponentials."""
    d = q.shape[-1]
    out = np.zeros(q.shape[:-1] + (v.shape[-1],))
    weights = np.zeros(q.shape[:-1] + (k.shape[-2],))
    for idx in np.ndindex(*q.shape[:-2]):
        for i in range(q.shape[-2]):
            s = np.array([q[idx][i] @ k[idx][j] / math.sqrt(d) for j in range(k.shape[-2])])
            allowed = np.ones_like(s, dtype=bool) if mask is None else mask[i]
            e = np.where(allowed, np.exp(s - s[allowed].max()), 0.0)
            w = e / e.sum()
            weights[idx][i] = w
            out[idx][i] = w @ v[idx]
    return out, weights


def adam_reference(p, grads, lr=3e-4, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam over a sequence of gradients for one parameter array."""
    p = np.array(p, dtype=np.float64)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        p = p - lr * mh / (np.sqrt(vh) + eps)
    return p


def two_point_pairs(v, axis, r):
    """Normalized covariance at lag ``r`` by enumerating every in-bounds voxel pair."""
    v = np.asarray(v, dtype=np.float64)
    n = v.shape[axis]
    if r >= n:
        return float("nan")
    a = np.take(v, range(0, n - r), axis=axis)
    b = np.take(v, range(r, n), axis=axis)
    phi = v.mean()
    var = phi * (1 - phi)
    total = 0.0
    count = 0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (x - phi) * (y - phi)
        count += 1
    return total / count / var


def euler_brute(v) -> int:
    """V - E + F - C of the union of closed unit cubes at the pore voxels.

    Every cell of the complex is keyed by doubled integer coordinates: a cube at
    voxel (i, j, k) owns the cells (2i + a, 2j + b, 2k + c) for a, b, c in
    {0, 1, 2}; the cell dimension is the number of odd coordinates.
    """
    cells = set()
    for i, j, k in zip(*np.nonzero(np.asarray(v))):
        for a, b, c in itertools.product(range(3), repeat=3):
            cells.add((2 * i + a, 2 * j + b, 2 * k + c))
    counts = [0, 0, 0, 0]
    for cell in cells:
        counts[sum(x % 2 for x in cell)] += 1
    return counts[0] - counts[1] + counts[2] - counts[3]


def surface_faces_brute(v) -> int:
    """Pore-solid faces counted voxel by voxel (domain boundary is not an interface)."""
    v = np.asarray(v)
    faces = 0
    for idx in zip(*np.nonzero(v)):
        for ax in range(3):
            for step in (-1, 1):
                nb = list(idx)
                nb[ax] += step
                if 0 <= nb[ax] < v.shape[ax] and v[tuple(nb)] == 0:
                    faces += 1
    return faces
