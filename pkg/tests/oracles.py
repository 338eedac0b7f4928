"""Slow, obviously-correct reference implementations used as test oracles."""

import numpy as np


def conv_loops(x, w, b, stride=1, padding=0):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for q in range(wo):
                    acc = b[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ch, r * stride + u, q * stride + v] * w[o, ch, u, v]
                    out[i, o, r, q] = acc
    return out


def pool_loops(x, k, stride):
    """Window max and the flat (row * W + col) index of its first maximum."""
    n, c, h, w = x.shape
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    idx = np.zeros((n, c, ho, wo), dtype=np.int64)
    for i in range(n):
        for ch in range(c):
            for r in range(ho):
                for q in range(wo):
                    best, where = -np.inf, -1
                    for u in range(k):
                        for v in range(k):
                            rr, cc = r * stride + u, q * stride + v
                            val = x[i, ch, rr, cc]
                            flat = rr * w + cc
                            if val > best or (val == best and flat < where):
                                best, where = val, flat
                    out[i, ch, r, q] = best
                    idx[i, ch, r, q] = where
    return out, idx


def cmc_bruteforce(dist, probe_ids, gallery_ids, gallery_index=None):
    """Count, per rank r, probes whose identity's best gallery image sorts within the first r identities."""
    n_probe, n_gal = dist.shape
    if gallery_index is None:
        gallery_index = list(range(n_gal))
    ids = sorted(set(int(g) for g in gallery_ids))
    hits = np.zeros(len(ids))
    for i in range(n_probe):
        order = sorted(range(n_gal), key=lambda j: (dist[i, j], gallery_index[j]))
        seen = []
        for j in order:
            g = int(gallery_ids[j])
            if g not in seen:
                seen.append(g)
        rank = seen.index(int(probe_ids[i]))
        hits[rank:] += 1
    return hits / n_probe


def ap_bruteforce(dist_row, pid, gallery_ids, gallery_index=None):
    n = len(dist_row)
    if gallery_index is None:
        gallery_index = list(range(n))
    order = sorted(range(n), key=lambda j: (dist_row[j], gallery_index[j]))
    found, total = 0, 0.0
    for pos, j in enumerate(order, start=1):
        if gallery_ids[j] == pid:
            found += 1
            total += found / pos
    return total / found


def sgd_scalar(params, grads, step, weight_decay):
    out = {}
    for k, p in params.items():
        flat = p.reshape(-1).astype(float).tolist()
        g = grads[k].reshape(-1).tolist()
        out[k] = np.array([v - step * (gv + 2 * weight_decay * v) for v, gv in zip(flat, g)]).reshape(p.shape)
    return out


def hinge_scalar(D, y, m_p, m_n):
    return max(D - m_p, 0.0) if y == 1 else max(m_n - D, 0.0)
