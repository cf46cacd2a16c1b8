"""Loop-based reference implementations used as independent oracles."""

import math

import numpy as np


def ref_dist(p, g, xy_scale=5.0, use_3d=True):
    dx = (p[0] - g[0]) * xy_scale
    dy = (p[1] - g[1]) * xy_scale
    dz = (p[2] - g[2]) if use_3d else 0.0
    return math.sqrt(dx * dx + dy * dy + dz * dz)


def ref_average_jaccard(pred, pocc, gt, gocc, deltas, xy_scale=5.0, use_3d=True):
    js = ref_jaccards(pred, pocc, gt, gocc, deltas, xy_scale, use_3d)
    return sum(js) / len(js)


def ref_jaccards(pred, pocc, gt, gocc, deltas, xy_scale=5.0, use_3d=True):
    Q, T = gocc.shape
    js = []
    for d in deltas:
        tp = fp = fn = 0
        for q in range(Q):
            for t in range(T):
                close = ref_dist(pred[q, t], gt[q, t], xy_scale, use_3d) <= d
                gv, pv = not gocc[q, t], not pocc[q, t]
                if gv and pv and close:
                    tp += 1
                if pv and (not gv or not close):
                    fp += 1
                if gv and (not pv or not close):
                    fn += 1
        if tp + fp + fn == 0:
            js.append(1.0 if all(gocc[q, t] and pocc[q, t] for q in range(Q) for t in range(T)) else 0.0)
        else:
            js.append(tp / (tp + fp + fn))
    return js


def ref_apd(pred, gt, gocc, deltas, xy_scale=5.0, use_3d=True):
    cells = [(q, t) for q in range(gocc.shape[0]) for t in range(gocc.shape[1]) if not gocc[q, t]]
    fr = []
    for d in deltas:
        hits = sum(ref_dist(pred[q, t], gt[q, t], xy_scale, use_3d) <= d for q, t in cells)
        fr.append(hits / len(cells))
    return sum(fr) / len(fr)


def ref_oa(pocc, gocc):
    flat_p, flat_g = list(np.ravel(pocc)), list(np.ravel(gocc))
    return sum(a == b for a, b in zip(flat_p, flat_g)) / len(flat_g)


def ref_ranks(x):
    x = list(x)
    out = []
    for v in x:
        less = sum(1 for w in x if w < v)
        equal = sum(1 for w in x if w == v)
        out.append(less + (equal + 1) / 2)
    return out


def ref_spearman(x, y):
    rx, ry = ref_ranks(x), ref_ranks(y)
    n = len(rx)
    mx, my = sum(rx) / n, sum(ry) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(rx, ry))
    vx = sum((a - mx) ** 2 for a in rx)
    vy = sum((b - my) ** 2 for b in ry)
    return cov / math.sqrt(vx * vy)


def ref_win_rate(quads):
    """quads: list of ((p1, p2), ((kind, s), (kind, s))); returns {kind: (wins, pairs)}."""
    out = {}
    for poss, imps in quads:
        for p in poss:
            for kind, s in imps:
                w, n = out.get(kind, (0.0, 0))
                out[kind] = (w + (1.0 if p > s else 0.5 if p == s else 0.0), n + 1)
    return out
