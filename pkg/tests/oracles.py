"""Independent reference implementations used to check the library.

Nothing here imports the code under test beyond the Tensor container.
"""

import math

import numpy as np


def numerical_grad(f, arrays, h=1e-4):
    """Central differences of scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def numerical_grad_at(f, array, positions, h=1e-4):
    """Central differences at selected flat positions only."""
    flat = array.reshape(-1)
    out = []
    for i in positions:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def rel_error(analytic, numeric, floor=1e-6):
    """Largest elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return float((np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)).max())


def conv2d_loops(x, w, stride=1, padding=0, groups=1):
    """Direct seven-loop cross-correlation."""
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    co_per = cout // groups
    for b in range(n):
        for o in range(cout):
            g = o // co_per
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin_g):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, g * cin_g + c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def matmul_loops(a, b):
    n, f = a.shape
    f2, o = b.shape
    assert f == f2
    out = np.zeros((n, o))
    for i in range(n):
        for j in range(o):
            s = 0.0
            for k in range(f):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


def weighted_ce_naive(logits, labels, weights):
    """Explicit softmax per row, then the weighted negative log-likelihood mean."""
    total = 0.0
    for row, y in zip(np.asarray(logits, dtype=np.float64), labels):
        exps = [math.exp(v) for v in row]
        p = exps[y] / sum(exps)
        total += -weights[y] * math.log(p)
    return total / len(labels)


def f1_mcc_bruteforce(y_true, y_pred, k=6):
    """Macro-F1 and Gorodkin R_K from raw label lists, pair by pair."""
    f1s = []
    for c in range(k):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    macro = sum(f1s) / k

    # R_K as a correlation of one-hot indicator matrices
    n = len(y_true)
    X = [[1.0 if t == c else 0.0 for c in range(k)] for t in y_true]
    Y = [[1.0 if p == c else 0.0 for c in range(k)] for p in y_pred]
    mx = [sum(X[s][c] for s in range(n)) / n for c in range(k)]
    my = [sum(Y[s][c] for s in range(n)) / n for c in range(k)]
    cov_xy = sum((X[s][c] - mx[c]) * (Y[s][c] - my[c]) for s in range(n) for c in range(k))
    cov_xx = sum((X[s][c] - mx[c]) ** 2 for s in range(n) for c in range(k))
    cov_yy = sum((Y[s][c] - my[c]) ** 2 for s in range(n) for c in range(k))
    rk = cov_xy / math.sqrt(cov_xx * cov_yy) if cov_xx * cov_yy > 0 else 0.0
    return macro, rk


def toy_parameter_count(stem, stages, head, classes=6, se_ratio=0.25):
    """Hand-derived parameter total for stem / MBConv stages / head / classifier.

    ``stages`` lists (kernel, expansion, out_channels, repeats).  Conv layers
    have no bias; each batch norm contributes scale and shift; the squeeze and
    excite layers are biased linear maps sized from the block input width.
    """
    total = 3 * stem * 3 * 3 + 2 * stem
    cin = stem
    for k, e, cout, reps in stages:
        for _ in range(reps):
            mid = cin * e
            expand = (cin * mid + 2 * mid) if e != 1 else 0
            dw = mid * k * k + 2 * mid
            r = max(1, int(cin * se_ratio))
            se = (mid * r + r) + (r * mid + mid)
            proj = mid * cout + 2 * cout
            total += expand + dw + se + proj
            cin = cout
    total += cin * head + 2 * head
    total += head * classes + classes
    return total
