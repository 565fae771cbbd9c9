"""Slow, loop-based reference implementations used by the tests."""
import math

import numpy as np


def _softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def swmsa_oracle(attn, x, M, s):
    """Shifted-window attention by explicit token-pair enumeration.

    Tokens i and j of an [H, W, C] map interact iff, after the (-s, -s)
    cyclic shift, they share a window and the shift did not wrap them apart
    (their offset is the same before and after shifting).
    """
    H, W, C = x.shape
    h = attn.spec.num_heads
    d = C // h
    qkv = x.reshape(-1, C) @ attn.qkv.weight.data
    if attn.qkv.bias is not None:
        qkv = qkv + attn.qkv.bias.data
    qkv = qkv.reshape(H, W, 3, h, d)
    table = attn.bias_table.data if attn.bias_table is not None else None
    out = np.zeros((H, W, C))
    for a in range(H):
        for b in range(W):
            pa, pb = (a - s) % H, (b - s) % W
            js, offs = [], []
            for c in range(H):
                for e in range(W):
                    qa, qb = (c - s) % H, (e - s) % W
                    if (pa // M, pb // M) != (qa // M, qb // M):
                        continue
                    if (a - c, b - e) != (pa - qa, pb - qb):
                        continue
                    js.append((c, e))
                    offs.append((pa - qa, pb - qb))
            for head in range(h):
                q = qkv[a, b, 0, head]
                scores = np.array([q @ qkv[c, e, 1, head] / math.sqrt(d) for c, e in js])
                if table is not None:
                    scores += [table[(dy + M - 1) * (2 * M - 1) + dx + M - 1, head] for dy, dx in offs]
                p = _softmax(scores)
                out[a, b, head * d:(head + 1) * d] = sum(w * qkv[c, e, 2, head] for w, (c, e) in zip(p, js))
    out = out.reshape(-1, C) @ attn.proj.weight.data + attn.proj.bias.data
    return out.reshape(H, W, C)


def xca_oracle(xca, x):
    """Cross-covariance attention for one [N, C] sequence, head by head."""
    N, C = x.shape
    h = xca.spec.num_heads
    d = C // h
    qkv = (x @ xca.qkv.weight.data + xca.qkv.bias.data).reshape(N, 3, h, d)
    out = np.zeros((N, C))
    for head in range(h):
        q, k, v = (qkv[:, i, head] for i in range(3))
        q = q / np.linalg.norm(q, axis=0, keepdims=True)
        k = k / np.linalg.norm(k, axis=0, keepdims=True)
        tau = math.exp(xca.log_temperature.data[head])
        A = np.array([_softmax(row) for row in (q.T @ k) / tau])
        out[:, head * d:(head + 1) * d] = v @ A.T
    return out @ xca.proj.weight.data + xca.proj.bias.data


def pearson_two_pass(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def normal_sf_two_sided_quad(z, steps=200_000):
    """2 * (1 - Phi(|z|)) by composite Simpson integration of the density."""
    z = abs(z)
    hi = z + 40.0
    h = (hi - z) / steps
    f = lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    acc = f(z) + f(hi)
    for i in range(1, steps):
        acc += (4 if i % 2 else 2) * f(z + i * h)
    return 2 * acc * h / 3


def jacobi_eigvals(A, sweeps=50):
    """Symmetric 3x3 eigenvalues by cyclic Jacobi rotations, descending."""
    A = np.array(A, dtype=np.float64)
    for _ in range(sweeps):
        off = A[0, 1] ** 2 + A[0, 2] ** 2 + A[1, 2] ** 2
        if off < 1e-30 * max(1e-300, (A ** 2).sum()):
            break
        for p in range(2):
            for q in range(p + 1, 3):
                if A[p, q] == 0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * A[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                sn = t * c
                J = np.eye(3)
                J[p, p] = J[q, q] = c
                J[p, q], J[q, p] = sn, -sn
                A = J.T @ A @ J
    return np.sort(np.diag(A))[::-1]


def fa_definition(l1, l2, l3):
    m = (l1 + l2 + l3) / 3
    num = (l1 - m) ** 2 + (l2 - m) ** 2 + (l3 - m) ** 2
    return math.sqrt(1.5) * math.sqrt(num) / math.sqrt(l1 * l1 + l2 * l2 + l3 * l3)
