"""Slow, straight-line reference implementations used as independent oracles.

Nothing here shares code with the kernels in :mod:`drfpn.ops`; everything is
written with explicit loops or plain numpy on raw arrays.
"""
from __future__ import annotations

import math

import numpy as np


def conv2d_naive(x, w, b=None, stride=1, padding=0):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bn in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b.reshape(-1)[oc])
                    for ic in range(c):
                        for ki in range(k):
                            r = i * stride - padding + ki
                            if r < 0 or r >= h:
                                continue
                            for kj in range(k):
                                q = j * stride - padding + kj
                                if 0 <= q < wd:
                                    acc += x[bn, ic, r, q] * w[oc, ic, ki, kj]
                    out[bn, oc, i, j] = acc
    return out


def conv_transpose_naive(x, w, b=None, stride=2, padding=1, output_padding=1):
    """Scatter form: every input pixel stamps its kernel into the output."""
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    ho = (h - 1) * stride - 2 * padding + k + output_padding
    wo = (wd - 1) * stride - 2 * padding + k + output_padding
    out = np.zeros((n, co, ho, wo))
    for bn in range(n):
        for ic in range(ci):
            for i in range(h):
                for j in range(wd):
                    v = x[bn, ic, i, j]
                    for oc in range(co):
                        for ki in range(k):
                            r = i * stride - padding + ki
                            if not 0 <= r < ho:
                                continue
                            for kj in range(k):
                                q = j * stride - padding + kj
                                if 0 <= q < wo:
                                    out[bn, oc, r, q] += v * w[ic, oc, ki, kj]
    if b is not None:
        out += b.reshape(1, co, 1, 1)
    return out


def bilinear_at(img, u, v):
    """Clamp-to-border bilinear read of a 2-D array at column u, row v."""
    h, w = img.shape
    u = min(max(u, 0.0), w - 1.0)
    v = min(max(v, 0.0), h - 1.0)
    x0 = min(int(math.floor(u)), max(w - 2, 0))
    y0 = min(int(math.floor(v)), max(h - 2, 0))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = u - x0, v - y0
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
            + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])


def upsample_bilinear_naive(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, 2 * h, 2 * w))
    for bn in range(n):
        for ch in range(c):
            for i in range(2 * h):
                for j in range(2 * w):
                    out[bn, ch, i, j] = bilinear_at(x[bn, ch], (j + 0.5) / 2 - 0.5, (i + 0.5) / 2 - 0.5)
    return out


def nearest_up(x):
    n, c, h, w = x.shape
    out = np.empty((n, c, 2 * h, 2 * w))
    for di in (0, 1):
        for dj in (0, 1):
            out[:, :, di::2, dj::2] = x
    return out


def conv_same(x, w, b, stride=1):
    """Dense-numpy convolution with 'same' padding for odd kernels (no sliding-window helpers)."""
    k = w.shape[2]
    p = k // 2
    n, c, h, wd = x.shape
    ho, wo = (h + 2 * p - k) // stride + 1, (wd + 2 * p - k) // stride + 1
    xp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    xp[:, :, p:p + h, p:p + wd] = x
    out = np.zeros((n, w.shape[0], ho, wo))
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, ki, kj])
    return out + b.reshape(1, -1, 1, 1)


def srb_fuse_reference(f_tilde, omega, f_high, f_low, w_out, b_out):
    """P = conv3x3((omega * F~ + nearest_up(F_high)) + F_low)."""
    return conv_same((omega * f_tilde + nearest_up(f_high)) + f_low, w_out, b_out)


def crb_fuse_reference(p_low, p_high, alpha, w_refine, b_refine, w_down, b_down, w_out, b_out):
    """N = conv_out(conv_refine(P_high) * alpha + conv_down(P_low))."""
    refined = conv_same(p_high, w_refine, b_refine)
    down = conv_same(p_low, w_down, b_down, stride=2)
    return conv_same(refined * alpha + down, w_out, b_out)


def fpn_reference(levels, weights, upsample=nearest_up):
    """Plain FPN from raw arrays; ``weights`` maps registry names to arrays."""
    lat = [conv_same(x, weights[f"lateral.{l}.weight"], weights[f"lateral.{l}.bias"])
           for l, x in zip((2, 3, 4, 5), levels)]
    p = [None, None, None, lat[3]]
    for i in (2, 1, 0):
        p[i] = upsample(p[i + 1]) + lat[i]
    return [conv_same(p[i], weights[f"output.{l}.weight"], weights[f"output.{l}.bias"])
            for i, l in enumerate((2, 3, 4, 5))]
