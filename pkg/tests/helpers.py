"""Shared oracles for the test-suite."""
import itertools

import numpy as np
import torch


def finite_difference_check(loss_fn, tensors, per_tensor=10, seed=0, rtol=1e-4, eps=1e-5,
                            max_kinks=2):
    """Compare autograd with central differences on random entries of ``tensors``.

    ``loss_fn()`` must rebuild the scalar loss from the current tensor values.
    Each entry is tried at steps eps, eps/10 and 10*eps and passes if any of
    them agrees: the best step depends on the local balance of truncation and
    roundoff, while a wrong gradient disagrees at every step. When the three
    estimates also disagree with each other the entry sits on a kink (ReLU
    switch, max tie) and is skipped; at most ``max_kinks`` are allowed.
    Entries far below the tensor's typical gradient are compared against a
    floor of 1% of its RMS gradient, since their relative error is pure
    roundoff. Returns the number of entries checked.
    """
    for t in tensors:
        t.grad = None
    total = loss_fn()
    total.backward()
    rng = np.random.default_rng(seed)
    steps = (eps, eps / 10, eps * 10)

    def central(flat, j, old, h):
        flat[j] = old + h
        up = float(loss_fn())
        flat[j] = old - h
        down = float(loss_fn())
        flat[j] = old
        return (up - down) / (2 * h)

    bad, kinks, checked = [], 0, 0
    with torch.no_grad():
        for ti, t in enumerate(tensors):
            flat = t.data.view(-1)
            grad = t.grad.view(-1)
            floor = max(100 * np.finfo(np.float64).eps * max(abs(float(total.detach())), 1.0) / min(steps),
                        1e-2 * float(grad.pow(2).mean().sqrt()))
            picks = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            for j in picks:
                old = float(flat[j])
                an = float(grad[j])
                fds = []
                for h in steps:
                    fds.append(central(flat, j, old, h))
                    scale = max(abs(fds[-1]), abs(an), floor)
                    if abs(fds[-1] - an) / scale <= rtol:
                        break
                else:
                    spread = (max(fds) - min(fds)) / max(max(map(abs, fds)), floor)
                    if spread > 10 * rtol:
                        kinks += 1
                        continue
                    bad.append((ti, int(j), fds, an))
                checked += 1
    assert not bad, f"finite-difference mismatches (tensor, index, fd, analytic): {bad}"
    assert kinks <= max_kinks, f"{kinks} kinks hit"
    return checked


def brute_knn(points, k):
    """O(N^2) reference: self first, then ascending (distance, index)."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    ar = np.arange(n)
    for i in range(n):
        key = d[i].copy()
        key[i] = -1.0
        order = np.lexsort((ar, key))[:k]
        idx[i] = order
        dist[i] = d[i, order]
    return idx, dist


def dense_masked_attention(x, indices, weights, module):
    """Full N x N attention with non-neighbours at -inf and log(w) added."""
    n, d = x.shape
    h, dk = module.heads, d // module.heads
    q = module.q(x).view(n, h, dk).transpose(0, 1)
    k = module.k(x).view(n, h, dk).transpose(0, 1)
    v = module.v(x).view(n, h, dk).transpose(0, 1)
    bias = torch.full((n, n), float("-inf"), dtype=x.dtype)
    w = torch.as_tensor(weights, dtype=x.dtype)
    for i in range(n):
        for c, j in enumerate(indices[i]):
            bias[i, j] = torch.log(w[i, c])
    scores = q @ k.transpose(1, 2) / np.sqrt(dk) + bias
    attn = torch.softmax(scores, dim=-1)
    out = (attn @ v).transpose(0, 1).reshape(n, d)
    return x + module.proj(out), attn


def drr_matrix(geom, angle_deg, shape, spacing, step=None):
    """Explicit system matrix of the ray-marching DRR (rows: pixels u-fastest).

    Re-derives the sampling independently: slab entry/exit, midpoint samples,
    border-clamped trilinear weights.
    """
    from scipy import sparse

    shape = np.asarray(shape)
    spacing = np.asarray(spacing, dtype=np.float64)
    step = step or 0.5 * spacing.min()
    half = 0.5 * shape * spacing
    a = np.deg2rad(angle_deg)
    axis = np.array([np.cos(a), np.sin(a), 0.0])
    e_u = np.array([-np.sin(a), np.cos(a), 0.0])
    e_v = np.array([0.0, 0.0, 1.0])
    src = geom.source_to_isocenter_mm * axis
    n_u, n_v = geom.detector_pixels
    su, sv = geom.detector_size_mm
    rows, cols, vals = [], [], []
    strides = np.array([1, shape[0], shape[0] * shape[1]])
    for iv in range(n_v):
        for iu in range(n_u):
            u = ((iu + 0.5) / n_u - 0.5) * su
            v = ((iv + 0.5) / n_v - 0.5) * sv
            pix = (geom.source_to_isocenter_mm - geom.source_to_detector_mm) * axis + u * e_u + v * e_v
            d = (pix - src) / np.linalg.norm(pix - src)
            t_lo, t_hi = 0.0, np.inf
            for ax in range(3):
                if abs(d[ax]) < 1e-300:
                    if abs(src[ax]) > half[ax]:
                        t_hi = -1.0
                    continue
                ta, tb = sorted(((-half[ax] - src[ax]) / d[ax], (half[ax] - src[ax]) / d[ax]))
                t_lo, t_hi = max(t_lo, ta), min(t_hi, tb)
            if t_hi <= t_lo:
                continue
            n = int(np.ceil((t_hi - t_lo) / step))
            ds = (t_hi - t_lo) / n
            t = t_lo + (np.arange(n) + 0.5) * ds
            pos = src + np.outer(t, d)
            idx = np.clip(pos / spacing + 0.5 * (shape - 1), 0, shape - 1)
            base = np.minimum(np.floor(idx).astype(int), np.maximum(shape - 2, 0))
            frac = idx - base
            row = iv * n_u + iu
            for corner in np.ndindex(2, 2, 2):
                c = np.array(corner)
                w = np.prod(np.where(c, frac, 1 - frac), axis=1) * ds
                rows.append(np.full(n, row))
                cols.append(((base + c) * strides).sum(1))
                vals.append(w)
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_u * n_v, int(np.prod(shape))))


def backprojection_matrix(geom, angle_deg, shape, spacing):
    """Explicit unweighted voxel-driven backprojection (voxels x pixels)."""
    from scipy import sparse

    from scbct.geometry import project_point

    shape = np.asarray(shape)
    ax = [(np.arange(n) - 0.5 * (n - 1)) * s for n, s in zip(shape, spacing)]
    # x-fastest voxel order to match drr_matrix columns
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    pts = np.stack([gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")], 1)
    uv, vis = project_point(geom, angle_deg, pts)
    n_u, n_v = geom.detector_pixels
    x = np.clip(uv[:, 0] * n_u - 0.5, 0, n_u - 1)
    y = np.clip(uv[:, 1] * n_v - 0.5, 0, n_v - 1)
    x0 = np.minimum(np.floor(x).astype(int), n_u - 2)
    y0 = np.minimum(np.floor(y).astype(int), n_v - 2)
    fx, fy = x - x0, y - y0
    rows, cols, vals = [], [], []
    for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        rows.append(np.flatnonzero(vis))
        cols.append(((y0 + dy) * n_u + x0 + dx)[vis])
        vals.append(w[vis])
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(pts), n_u * n_v))


def sart_reference(a_mats, b_mats, proj, iterations, relaxation):
    """Matrix-form SART: x += lam * B (p - A x) / (A 1), clamped at zero, view by view."""
    n = a_mats[0].shape[1]
    x = np.zeros(n)
    lengths = []
    for a in a_mats:
        r = a @ np.ones(n)
        lengths.append(np.where(r < 1e-8, 1.0, r))
    history = []
    for _ in range(iterations):
        for a, b, p, length in zip(a_mats, b_mats, proj, lengths):
            x = np.maximum(x + relaxation * (b @ ((p - a @ x) / length)), 0.0)
        history.append(x.copy())
    return history


def trilinear_corner_oracle(data, p):
    """Weighted sum over the 8 enclosing voxel centers, one point at a time."""
    dims = np.array(data.shape)
    out = np.empty(len(p))
    for n, q in enumerate(p):
        idx = (np.clip(q, -1, 1) + 1) / 2 * (dims - 1)
        base = np.minimum(np.floor(idx).astype(int), dims - 2)
        frac = idx - base
        total = 0.0
        for corner in itertools.product((0, 1), repeat=3):
            w = 1.0
            for ax in range(3):
                w *= frac[ax] if corner[ax] else 1.0 - frac[ax]
            total += w * data[base[0] + corner[0], base[1] + corner[1], base[2] + corner[2]]
        out[n] = total
    return out


def bilinear_corner_oracle(fmap, uv):
    """4-corner weighted sum with border clamping, one query at a time."""
    c, h, w = fmap.shape
    out = np.empty((len(uv), c))
    for n, (u, v) in enumerate(uv):
        x = min(max(u * w - 0.5, 0.0), w - 1.0)
        y = min(max(v * h - 0.5, 0.0), h - 1.0)
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
        fx, fy = x - x0, y - y0
        out[n] = ((1 - fx) * (1 - fy) * fmap[:, y0, x0] + fx * (1 - fy) * fmap[:, y0, x1]
                  + (1 - fx) * fy * fmap[:, y1, x0] + fx * fy * fmap[:, y1, x1])
    return out
