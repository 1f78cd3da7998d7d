"""Slow, obviously-correct reference implementations used as test oracles."""
import math

import numpy as np


def naive_conv2d(x, w, b, stride, padding):
    """Direct cross-correlation over a single [C, H, W] image."""
    c, h, wd = x.shape
    out_c, in_c, k, _ = w.shape
    assert in_c == c
    padded = np.zeros((c, h + 2 * padding, wd + 2 * padding))
    padded[:, padding : padding + h, padding : padding + wd] = x
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((out_c, oh, ow))
    for o in range(out_c):
        for i in range(oh):
            for j in range(ow):
                total = b[o]
                for ci in range(c):
                    for di in range(k):
                        for dj in range(k):
                            total += w[o, ci, di, dj] * padded[ci, i * stride + di, j * stride + dj]
                out[o, i, j] = total
    return out


def naive_max_pool(x, window, stride):
    c, h, w = x.shape
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((c, oh, ow))
    for ch in range(c):
        for i in range(oh):
            for j in range(ow):
                out[ch, i, j] = max(
                    x[ch, i * stride + di, j * stride + dj] for di in range(window) for dj in range(window)
                )
    return out


def naive_linear(x, w, b):
    out = np.zeros(w.shape[0])
    for i in range(w.shape[0]):
        out[i] = b[i] + sum(w[i, j] * x[j] for j in range(w.shape[1]))
    return out


def central_difference(f, arrays, eps=1e-6):
    """Numerical gradient of scalar ``f()`` with respect to each array, in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            keep = arr[idx]
            arr[idx] = keep + eps
            up = f()
            arr[idx] = keep - eps
            down = f()
            arr[idx] = keep
            g[idx] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def rotation_matrix(q):
    """Rotation matrix built from the quaternion sandwich product q v q*."""
    w, x, y, z = q
    cols = []
    for v in np.eye(3):
        # q * (0, v)
        a = (-x * v[0] - y * v[1] - z * v[2], w * v[0] + y * v[2] - z * v[1], w * v[1] + z * v[0] - x * v[2], w * v[2] + x * v[1] - y * v[0])
        # (q * v) * conj(q)
        aw, ax, ay, az = a
        cw, cx, cy, cz = w, -x, -y, -z
        cols.append(
            [
                aw * cx + ax * cw + ay * cz - az * cy,
                aw * cy - ax * cz + ay * cw + az * cx,
                aw * cz + ax * cy - ay * cx + az * cw,
            ]
        )
    return np.array(cols).T


def trace_angle_deg(q1, q2):
    """Rotation angle of R1^T R2 from its trace."""
    r = rotation_matrix(q1).T @ rotation_matrix(q2)
    c = (np.trace(r) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))
