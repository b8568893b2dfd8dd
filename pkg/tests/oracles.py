"""Slow, independent reference implementations used only by the tests."""
import math

import numpy as np


def naive_forward(params, x, pad=1):
    """Scalar-loop CNN forward pass; ``params`` is the per-layer dict."""
    def conv(inp, w, b):
        n, cin, h, wd = inp.shape
        cout, _, k, _ = w.shape
        out = np.zeros((n, cout, h, wd))
        for s in range(n):
            for o in range(cout):
                for i in range(h):
                    for j in range(wd):
                        acc = b[o]
                        for c in range(cin):
                            for di in range(k):
                                for dj in range(k):
                                    ii, jj = i + di - pad, j + dj - pad
                                    if 0 <= ii < h and 0 <= jj < wd:
                                        acc += w[o, c, di, dj] * inp[s, c, ii, jj]
                        out[s, o, i, j] = acc
        return out

    def dense(inp, w, b):
        out = np.zeros((inp.shape[0], w.shape[0]))
        for s in range(inp.shape[0]):
            for o in range(w.shape[0]):
                acc = b[o]
                for i in range(w.shape[1]):
                    acc += w[o, i] * inp[s, i]
                out[s, o] = acc
        return out

    relu = lambda a: np.where(a > 0, a, 0.0)  # noqa: E731
    a1 = relu(conv(x, params["conv1.weight"], params["conv1.bias"]))
    a2 = relu(conv(a1, params["conv2.weight"], params["conv2.bias"]))
    flat = a2.reshape(a2.shape[0], -1)
    a3 = relu(dense(flat, params["fc1.weight"], params["fc1.bias"]))
    return dense(a3, params["fc2.weight"], params["fc2.bias"])


def naive_agglomerate(D, linkage):
    """Recompute every cluster-pair linkage from leaf distances at each step."""
    n = len(D)
    active = {i: [i] for i in range(n)}
    merges = []
    for step in range(n - 1):
        best = None
        ids = sorted(active)
        for x in range(len(ids)):
            for y in range(x + 1, len(ids)):
                a, b = ids[x], ids[y]
                vals = [D[i][j] for i in active[a] for j in active[b]]
                if linkage == "single":
                    d = min(vals)
                elif linkage == "complete":
                    d = max(vals)
                else:
                    d = math.fsum(vals) / len(vals)
                if best is None or (d, a, b) < best:
                    best = (d, a, b)
        d, a, b = best
        new = n + step
        active[new] = active.pop(a) + active.pop(b)
        merges.append((a, b, d, new))
    return merges


def naive_sens_spec(y_true, y_pred, num_classes):
    """Per-sample counting of TP/FN/FP/TN for each class."""
    sens, spec = [], []
    for c in range(num_classes):
        tp = fn = fp = tn = 0
        for t, p in zip(y_true, y_pred):
            if t == c and p == c:
                tp += 1
            elif t == c:
                fn += 1
            elif p == c:
                fp += 1
            else:
                tn += 1
        sens.append(tp / (tp + fn) if tp + fn else float("nan"))
        spec.append(tn / (tn + fp) if tn + fp else float("nan"))
    correct = sum(1 for t, p in zip(y_true, y_pred) if t == p)
    return sens, spec, correct / len(y_true)


def central_difference_grad(f, x, eps=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def relative_error(a, b, floor=1e-5):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
