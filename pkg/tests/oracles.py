"""Slow, loop-based reference implementations used to check the vectorised code."""

import math

import numpy as np


def _sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def march_cells(origin, direction, t0, t1, voxel_size, grid_origin=(0.0, 0.0, 0.0), step_frac=0.25, max_iter=80):
    """Cells visited by ``origin + t*direction`` for t in [t0, t1].

    Samples at a fraction of the voxel size, then bisects every sample pair
    whose cells differ in more than one axis step until the gap closes.
    Returns a set of coordinate tuples.
    """
    o = np.asarray(origin, float) - np.asarray(grid_origin, float)
    d = np.asarray(direction, float)
    n = max(2, int(math.ceil((t1 - t0) / (step_frac * voxel_size))) + 1)
    ts = np.linspace(t0, t1, n)
    cells = np.floor((o + ts[:, None] * d) / voxel_size).astype(np.int64)
    out = {tuple(c) for c in cells}
    pending = [
        (ts[i], ts[i + 1], cells[i], cells[i + 1]) for i in range(n - 1) if np.abs(cells[i + 1] - cells[i]).sum() > 1
    ]
    it = 0
    while pending and it < max_iter:
        nxt = []
        for ta, tb, ca, cb in pending:
            tm = 0.5 * (ta + tb)
            cm = np.floor((o + tm * d) / voxel_size).astype(np.int64)
            out.add(tuple(cm))
            if np.abs(cm - ca).sum() > 1:
                nxt.append((ta, tm, ca, cm))
            if np.abs(cb - cm).sum() > 1:
                nxt.append((tm, tb, cm, cb))
        pending = nxt
        it += 1
    return out


def band_cells(prior, kf, s, max_depth, voxel_size, grid_origin=(0.0, 0.0, 0.0)):
    """All cells crossed by every valid pixel's uncertainty band, one ray at a time."""
    K = kf.intrinsics
    R = kf.pose.rotation
    c = kf.pose.center
    out = set()
    for j in range(K.height):
        for i in range(K.width):
            D = prior.depth[j, i]
            if not (0 < D <= max_depth):
                continue
            C = prior.depth_uncertainty[j, i]
            ray_cam = np.array([(i + 0.5 - K.cx) / K.fx, (j + 0.5 - K.cy) / K.fy, 1.0])
            norm = np.linalg.norm(ray_cam)
            lo = max(D - s * C, 0.0) * norm
            hi = min(D + s * C, max_depth) * norm
            out |= march_cells(c, R @ (ray_cam / norm), lo, hi, voxel_size, grid_origin)
    return out


def linear(layer, x):
    w, b = layer.weight, layer.bias
    return [b[o] + sum(w[o, i] * x[i] for i in range(len(x))) for o in range(len(b))]


def layer_norm(x, gain, bias, eps):
    m = sum(x) / len(x)
    v = sum((a - m) ** 2 for a in x) / len(x)
    return [(a - m) / math.sqrt(v + eps) * g + b for a, g, b in zip(x, gain, bias)]


def attention(features, mask, block):
    """Masked two-layer post-norm self-attention with explicit loops over views and heads."""
    x = [[float(v) * bool(m) for v in row] for row, m in zip(features, mask)]
    N = len(x)
    C = len(x[0])
    H = block.num_heads
    dh = C // H
    all_weights = []
    for layer in block.layers:
        q = [linear(layer.query, r) for r in x]
        k = [linear(layer.key, r) for r in x]
        v = [linear(layer.value, r) for r in x]
        ctx = [[0.0] * C for _ in range(N)]
        weights = [[[0.0] * N for _ in range(N)] for _ in range(H)]
        for h in range(H):
            sl = range(h * dh, (h + 1) * dh)
            for a in range(N):
                scores = {}
                for b in range(N):
                    if mask[b]:
                        scores[b] = sum(q[a][c] * k[b][c] for c in sl) / math.sqrt(dh)
                top = max(scores.values())
                ex = {b: math.exp(sc - top) for b, sc in scores.items()}
                tot = sum(ex.values())
                for b, e in ex.items():
                    weights[h][a][b] = e / tot
                    for c in sl:
                        ctx[a][c] += e / tot * v[b][c]
        attn = [linear(layer.output, r) for r in ctx]
        x = [
            layer_norm([a + b for a, b in zip(r, t)], layer.norm1_gain, layer.norm1_bias, block.eps)
            for r, t in zip(x, attn)
        ]
        ff = [linear(layer.ffn_out, [max(u, 0.0) for u in linear(layer.ffn_in, r)]) for r in x]
        x = [
            layer_norm([a + b for a, b in zip(r, t)], layer.norm2_gain, layer.norm2_bias, block.eps)
            for r, t in zip(x, ff)
        ]
        all_weights.append(weights)
    return np.array(x), all_weights


def conv3(coords, x, layer):
    """Submanifold 3x3x3 convolution by dictionary lookup of each neighbour."""
    index = {tuple(c): n for n, c in enumerate(coords)}
    cin, cout = layer.kernel.shape[3:]
    out = np.zeros((len(coords), cout))
    for n, c in enumerate(coords):
        for o in range(cout):
            acc = layer.bias[o]
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        m = index.get((c[0] + dx, c[1] + dy, c[2] + dz))
                        if m is None:
                            continue
                        for i in range(cin):
                            acc += layer.kernel[dx + 1, dy + 1, dz + 1, i, o] * x[m][i]
            out[n, o] = acc
    return out


def gru(coords, H, S, SW, F, w):
    """GRU update evaluated channel by channel."""
    M = len(coords)
    h1 = np.array([linear(w.mlp_h, list(H[n]) + [S[n], SW[n]]) for n in range(M)])
    f1 = np.array([linear(w.mlp_f, list(F[n]) + [S[n], SW[n]]) for n in range(M)])
    x = np.concatenate([h1, f1], axis=1)
    zp = conv3(coords, x, w.conv_z)
    rp = conv3(coords, x, w.conv_r)
    z = np.vectorize(_sigmoid)(zp)
    r = np.vectorize(_sigmoid)(rp)
    cand = np.tanh(conv3(coords, np.concatenate([r * h1, f1], axis=1), w.conv_h))
    out = np.zeros_like(h1)
    for n in range(M):
        for c in range(h1.shape[1]):
            out[n, c] = (1 - z[n, c]) * h1[n, c] + z[n, c] * cand[n, c]
    return out, {"h_prime": h1, "z": z, "r": r, "candidate": cand}


def nearest(query, ref):
    q = np.asarray(query, float)
    r = np.asarray(ref, float)
    return np.array([np.sqrt(((r - p) ** 2).sum(axis=1)).min() for p in q])


def depth_metrics(pred, gt, trunc):
    """Per-pixel loop over jointly valid pixels."""
    n = nv = 0
    sums = dict(abs_rel=0.0, abs_diff=0.0, sq_rel=0.0, sq=0.0, delta=0.0)
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        gv = math.isfinite(g) and 0 < g <= trunc
        pv = math.isfinite(p) and 0 < p <= trunc
        nv += gv
        if not (gv and pv):
            continue
        n += 1
        sums["abs_rel"] += abs(p - g) / g
        sums["abs_diff"] += abs(p - g)
        sums["sq_rel"] += (p - g) ** 2 / g
        sums["sq"] += (p - g) ** 2
        sums["delta"] += max(p / g, g / p) < 1.25
    return dict(
        abs_rel=sums["abs_rel"] / n,
        abs_diff=sums["abs_diff"] / n,
        sq_rel=sums["sq_rel"] / n,
        rmse=math.sqrt(sums["sq"] / n),
        delta_125=sums["delta"] / n,
        completeness=n / nv,
    )
