"""Slow, loop-based references. Deliberately independent of mgp.tensor."""

import numpy as np


def conv2d_naive(x, w, b, stride=1, padding=0):
    B, Cin, H, W = x.shape
    Cout, _, k, _ = w.shape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for co in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[co]
                    for ci in range(Cin):
                        for di in range(k):
                            for dj in range(k):
                                y = i * stride + di - padding
                                xx = j * stride + dj - padding
                                if 0 <= y < H and 0 <= xx < W:
                                    acc += x[n, ci, y, xx] * w[co, ci, di, dj]
                    out[n, co, i, j] = acc
    return out


def conv_transpose2d_naive(x, w, b, stride=1, padding=0):
    B, Cin, H, W = x.shape
    _, Cout, k, _ = w.shape
    Ho = (H - 1) * stride - 2 * padding + k
    Wo = (W - 1) * stride - 2 * padding + k
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for ci in range(Cin):
            for i in range(H):
                for j in range(W):
                    for co in range(Cout):
                        for di in range(k):
                            for dj in range(k):
                                y = i * stride + di - padding
                                xx = j * stride + dj - padding
                                if 0 <= y < Ho and 0 <= xx < Wo:
                                    out[n, co, y, xx] += x[n, ci, i, j] * w[ci, co, di, dj]
    for co in range(Cout):
        out[:, co] += b[co]
    return out


def compose_naive(g1, g2, codes, alphas):
    """Sum_n F_n[i,j,c] * alpha_n[c] with explicit loops, then the second half."""
    from mgp.tensor import Tensor, no_grad

    with no_grad():
        feats = [g1(Tensor(z)).data for z in codes]
        _, C, H, W = feats[0].shape
        acc = np.zeros((1, C, H, W))
        for f, a in zip(feats, alphas):
            for c in range(C):
                for i in range(H):
                    for j in range(W):
                        acc[0, c, i, j] += f[0, c, i, j] * a[c]
        return g2(Tensor(acc)).data


def ssim_naive(a, b, window, c1, c2):
    _, C, H, W = a.shape
    total, count = 0.0, 0
    for c in range(C):
        per = 0.0
        n = 0
        for i in range(H - window + 1):
            for j in range(W - window + 1):
                pa = [a[0, c, i + u, j + v] for u in range(window) for v in range(window)]
                pb = [b[0, c, i + u, j + v] for u in range(window) for v in range(window)]
                m = len(pa)
                ma = sum(pa) / m
                mb = sum(pb) / m
                va = sum((p - ma) ** 2 for p in pa) / m
                vb = sum((p - mb) ** 2 for p in pb) / m
                cv = sum((p - ma) * (q - mb) for p, q in zip(pa, pb)) / m
                per += ((2 * ma * mb + c1) * (2 * cv + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
                n += 1
        total += per / n
        count += 1
    return total / count
