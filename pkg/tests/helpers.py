"""Independent oracles used across the suite; none of these call into the library."""

import struct

import numpy as np


def matmul_loops(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv_loops(x, w, pad=0):
    """Direct stride-1 cross-correlation; w is I x O x K x K."""
    n, ch, h, wd = x.shape
    _, o, k, _ = w.shape
    xp = np.zeros((n, ch, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for y in range(ho):
                for z in range(wo):
                    s = 0.0
                    for ic in range(ch):
                        for k1 in range(k):
                            for k2 in range(k):
                                s += xp[b, ic, y + k1, z + k2] * w[ic, oc, k1, k2]
                    out[b, oc, y, z] = s
    return out


def central_fd(f, arrays, idx_list, h=1e-5, points=3):
    """Central differences of scalar f() w.r.t. selected coordinates.

    ``idx_list`` holds (array_position, flat_index) pairs; arrays are perturbed in place.
    ``points=5`` uses the fourth-order stencil, which tolerates a larger h and so
    loses far less to rounding in f.
    """
    if points == 3:
        offsets, weights, denom = (1, -1), (1, -1), 2
    elif points == 5:
        offsets, weights, denom = (-2, -1, 1, 2), (1, -8, 8, -1), 12
    else:
        raise ValueError("points must be 3 or 5")
    out = []
    for pos, flat in idx_list:
        arr = arrays[pos].reshape(-1)
        old = arr[flat]
        total = 0.0
        for off, w in zip(offsets, weights):
            arr[flat] = old + off * h
            total += w * f()
        arr[flat] = old
        out.append(total / (denom * h))
    return np.array(out)


def grad_close(analytic, numeric, rel=1e-4, small=1e-8, abs_tol=1e-6):
    """Per-coordinate check: relative error, or absolute error where |g| is tiny."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    tiny = scale < small
    ok_small = np.abs(analytic - numeric) < abs_tol
    ok_rel = np.abs(analytic - numeric) <= rel * np.maximum(scale, 1e-300)
    return np.where(tiny, ok_small, ok_rel)


def kahan_mean(arrays):
    total = np.zeros_like(arrays[0])
    comp = np.zeros_like(arrays[0])
    for a in arrays:
        y = a - comp
        t = total + y
        comp = (t - total) - y
        total = t
    return total / len(arrays)


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    n, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", 0x00000803, n, h, w))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, labels.size))
        fh.write(labels.tobytes())


def ref_partition(labels, num_clients, alpha, n_train, n_test, seed):
    """Straight-line restatement of the draw-and-round procedure (no shortfall handling)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    classes = int(max(labels)) + 1
    pools = []
    for c in range(classes):
        members = [i for i, y in enumerate(labels) if y == c]
        pools.append(list(rng.permutation(np.array(members, dtype=np.int64))))
    out = []
    for _ in range(num_clients):
        g = rng.standard_gamma(alpha, size=classes)
        p = g / g.sum()

        def lr_round(total, w):
            exact = [total * wi / sum(w) for wi in w]
            cnt = [int(np.floor(e)) for e in exact]
            rem = sorted(range(len(w)), key=lambda i: (-(exact[i] - cnt[i]), i))
            for i in rem[:total - sum(cnt)]:
                cnt[i] += 1
            return cnt

        tr = lr_round(n_train, list(p))
        te = lr_round(n_test, [t / n_train for t in tr])
        train, test = [], []
        for c in range(classes):
            assert tr[c] + te[c] <= len(pools[c]), "reference needs an ample pool"
            train += [int(v) for v in pools[c][:tr[c]]]
            test += [int(v) for v in pools[c][tr[c]:tr[c] + te[c]]]
            pools[c] = pools[c][tr[c] + te[c]:]
        out.append({"train": sorted(train), "test": sorted(test)})
    return out


def mlp_decomposed_grads(x, y, layers):
    """Hand-derived backprop for relu MLP with weights sigma + B @ A and mean cross-entropy.

    ``layers`` is a list of (sigma, B, A, bias). Returns per-layer dicts of
    gradients for sigma, B, A and bias.
    """
    acts = [x]
    pre = []
    h = x
    for k, (s, b, a, c) in enumerate(layers):
        z = h @ (s + b @ a) + c
        pre.append(z)
        h = np.maximum(z, 0.0) if k < len(layers) - 1 else z
        acts.append(h)
    z = acts[-1]
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    n = x.shape[0]
    dz = p.copy()
    dz[np.arange(n), y] -= 1.0
    dz /= n
    grads = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        s, b, a, c = layers[k]
        dw = acts[k].T @ dz
        grads[k] = {"sigma": dw, "B": dw @ a.T, "A": b.T @ dw, "bias": dz.sum(axis=0)}
        if k > 0:
            dz = (dz @ (s + b @ a).T) * (pre[k - 1] > 0)
    return grads
