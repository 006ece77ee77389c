"""Independent reference implementations used as test oracles.

They share no code with the package: sets of coordinates, explicit
neighbour loops and all-pairs distances.
"""
import math

import numpy as np


def dsc_sets(pred, gt, cls):
    p = {tuple(i) for i in np.argwhere(np.asarray(pred) == cls)}
    g = {tuple(i) for i in np.argwhere(np.asarray(gt) == cls)}
    if not p and not g:
        return 1.0
    return 2.0 * len(p & g) / (len(p) + len(g))


def boundary_points(mask):
    """Voxels of ``mask`` with a face neighbour outside the mask or outside the grid."""
    mask = np.asarray(mask, bool)
    pts = []
    for idx in np.argwhere(mask):
        for ax in range(mask.ndim):
            hit = False
            for step in (-1, 1):
                n = idx.copy()
                n[ax] += step
                if n[ax] < 0 or n[ax] >= mask.shape[ax] or not mask[tuple(n)]:
                    hit = True
                    break
            if hit:
                pts.append(idx)
                break
    return np.array(pts, dtype=float).reshape(-1, mask.ndim)


def nsd_bruteforce(pred, gt, cls, tol, spacing=None):
    p, g = np.asarray(pred) == cls, np.asarray(gt) == cls
    if not p.any() and not g.any():
        return 1.0
    if p.any() != g.any():
        return 0.0
    sp = np.ones(p.ndim) if spacing is None else np.asarray(spacing, float)
    bp, bg = boundary_points(p) * sp, boundary_points(g) * sp
    d = np.sqrt(((bp[:, None, :] - bg[None, :, :]) ** 2).sum(-1))
    ok = (d.min(axis=1) <= tol + 1e-9).sum() + (d.min(axis=0) <= tol + 1e-9).sum()
    return ok / (len(bp) + len(bg))


def trapezoid(ts, ms):
    return sum((ms[i] + ms[i + 1]) / 2 * (ts[i + 1] - ts[i]) for i in range(len(ts) - 1))


def central_difference(f, params, eps=1e-5):
    """Numerical gradient of scalar ``f()`` w.r.t. every tensor in ``params`` (in place perturbation)."""
    import torch

    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = float(f())
                flat[i] = old - eps
                down = float(f())
                flat[i] = old
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def rel_error(a, b):
    import torch

    a = torch.cat([x.reshape(-1) for x in a])
    b = torch.cat([x.reshape(-1) for x in b])
    return float((a - b).norm()) / max(float(a.norm()), float(b.norm()), 1e-12)


def random_blob_mask(rng, shape, p_fill=0.3):
    """Random mask: union of a few axis-aligned boxes, sometimes empty."""
    m = np.zeros(shape, bool)
    for _ in range(rng.integers(0, 4)):
        lo = [rng.integers(0, s) for s in shape]
        hi = [min(s, lo_ + rng.integers(1, max(2, int(s * p_fill * 2)))) for lo_, s in zip(lo, shape)]
        m[tuple(slice(a, b) for a, b in zip(lo, hi))] = True
    return m


LN2 = math.log(2.0)
