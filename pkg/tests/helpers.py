import numpy as np

from transfusor import data


def numeric_grad(f, array, h=1e-4, entries=None):
    """Central differences of scalar ``f()`` w.r.t. ``array`` (mutated in place, restored)."""
    flat = array.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_module_grads(loss_fn, params, rng, per_param=4, h=1e-4):
    """Largest relative error over parameters, comparing backward() with finite differences.

    ``loss_fn()`` must rebuild the graph and return a scalar Tensor.
    """
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p in params:
        n = p.data.size
        entries = rng.choice(n, size=min(per_param, n), replace=False)
        analytic = p.grad.reshape(-1)[entries]
        numeric = numeric_grad(lambda: loss_fn().item(), p.data, h, entries)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def make_track(vy, lanes=None, vx=25.0, first=0, vid=1, direction=1, vclass="car", y0=0.0):
    vy = np.asarray(vy, dtype=float)
    n = len(vy)
    frames = np.arange(first, first + n)
    vx = np.full(n, vx, dtype=float)
    x = np.cumsum(vx) / data.FPS
    y = y0 + np.cumsum(vy) / data.FPS
    lanes = np.ones(n, dtype=int) if lanes is None else np.asarray(lanes)
    return data.Track(vid, frames, x, y, vx, vy, lanes, direction, vclass, canonical=True)


def dynamic_scan(vy, c, threshold=0.2, interval=25):
    """Exhaustive per-frame scan with explicit window loops."""
    n = len(vy)
    start = None
    for f in range(c, -1, -1):
        if f - interval + 1 < 0:
            break
        if sum(abs(vy[j]) for j in range(f - interval + 1, f + 1)) / interval < threshold:
            start = f
            break
    end = None
    for f in range(c, n):
        if f + interval > n:
            break
        if sum(abs(vy[j]) for j in range(f, f + interval)) / interval < threshold:
            end = f
            break
    return (0 if start is None else start, start is None), (n - 1 if end is None else end, end is None)
