"""Independent brute-force references, written without the package's own helpers.

Everything here is dense, loop-based and deliberately slow.
"""
import math

import numpy as np

# values fixed by hand evaluation of the defining formulas
SOFTMAX_1_0 = (math.e / (math.e + 1), 1 / (math.e + 1))   # 0.7311, 0.2689
TOPK_2_1_0 = (math.e / (math.e + 1), 1 / (math.e + 1), 0.0)
LN = {4: math.log(4), 9: math.log(9), 16: math.log(16)}
FLO_MAGIC = 202021.25


def dense_local_attention(xs, xt, flow, window, tau):
    """n x n transition: masked softmax of <xs(p), xt(q)>/tau over the window at floor(p + f + 0.5)."""
    h, w, _ = xs.shape
    n = h * w
    r = window // 2
    out = np.zeros((n, n))
    for py in range(h):
        for px in range(w):
            p = py * w + px
            ax = math.floor(px + flow[py, px, 0] + 0.5)
            ay = math.floor(py + flow[py, px, 1] + 0.5)
            ax = min(max(ax, 0), w - 1)
            ay = min(max(ay, 0), h - 1)
            logits = {}
            for qy in range(ay - r, ay + r + 1):
                for qx in range(ax - r, ax + r + 1):
                    if 0 <= qx < w and 0 <= qy < h:
                        logits[qy * w + qx] = float(np.dot(xs[py, px], xt[qy, qx])) / tau
            m = max(logits.values())
            z = sum(math.exp(v - m) for v in logits.values())
            for q, v in logits.items():
                out[p, q] = math.exp(v - m) / z
    return out


def dense_expected_flow(A, h, w, anchor_residual=None):
    """sum_q A(p,q) D(q) - D(p), optionally plus the sub-pixel anchor residual."""
    D = np.array([(i % w, i // w) for i in range(h * w)], dtype=float)
    f = A @ D - D
    if anchor_residual is not None:
        f = f + anchor_residual.reshape(-1, 2)
    return f.reshape(h, w, 2)


def dense_cycle_loss(forward, backward):
    """-mean log diag(prod(forward) prod(backward)) with dense matrices."""
    P = forward[0]
    for M in forward[1:]:
        P = P @ M
    Q = backward[0]
    for M in backward[1:]:
        Q = Q @ M
    d = np.diag(P @ Q)
    return float(-np.mean(np.log(np.maximum(d, 1e-9))))


def loop_conv2d(x, weight, bias, stride, pad):
    """NHWC zero-padded cross-correlation by explicit loops."""
    n, h, w, cin = x.shape
    kh, kw, _, cout = weight.shape
    xp = np.zeros((n, h + 2 * pad, w + 2 * pad, cin))
    xp[:, pad:pad + h, pad:pad + w] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oh, ow, cout))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                patch = xp[b, i * stride:i * stride + kh, j * stride:j * stride + kw]
                for c in range(cout):
                    out[b, i, j, c] = np.sum(patch * weight[..., c]) + (bias[c] if bias is not None else 0.0)
    return out


def loop_bilinear(img, x, y):
    h, w = img.shape[:2]
    out = []
    for xi, yi in zip(x, y):
        xi = min(max(xi, 0.0), w - 1.0)
        yi = min(max(yi, 0.0), h - 1.0)
        x0, y0 = int(math.floor(xi)), int(math.floor(yi))
        x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
        ax, ay = xi - x0, yi - y0
        out.append((1 - ax) * (1 - ay) * img[y0, x0] + ax * (1 - ay) * img[y0, x1]
                   + (1 - ax) * ay * img[y1, x0] + ax * ay * img[y1, x1])
    return np.array(out)


def loop_smoothness(flow, image, edge_weight):
    """Mean over interior pixels, components and both directions of exp(-l*|dI|) |d2 f|."""
    h, w = flow.shape[:2]
    terms = []
    for axis in (1, 0):
        vals = []
        for y in range(h):
            for x in range(w):
                if axis == 1 and not 0 < x < w - 1:
                    continue
                if axis == 0 and not 0 < y < h - 1:
                    continue
                if axis == 1:
                    d2 = flow[y, x + 1] - 2 * flow[y, x] + flow[y, x - 1]
                    g = np.mean(np.abs(image[y, x + 1] - image[y, x - 1])) / 2
                else:
                    d2 = flow[y + 1, x] - 2 * flow[y, x] + flow[y - 1, x]
                    g = np.mean(np.abs(image[y + 1, x] - image[y - 1, x])) / 2
                for c in range(2):
                    vals.append(math.exp(-edge_weight * g) * abs(d2[c]))
        if vals:
            terms.append(np.mean(vals))
    return float(np.mean(terms)) if terms else 0.0


def random_unit(rng, h, w, d):
    x = rng.standard_normal((h, w, d))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def random_stochastic(rng, n, density=0.5):
    M = rng.uniform(0, 1, (n, n)) * (rng.uniform(0, 1, (n, n)) < density)
    M[np.arange(n), rng.integers(0, n, n)] += 0.1
    return M / M.sum(1, keepdims=True)
