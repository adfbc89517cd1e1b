"""Hot inner loops, each with a numba path and a pure-numpy path.

The public names at the bottom dispatch on ``refkv._accel.USE_NUMBA``.  Both
implementations are importable as ``<name>_numba`` / ``<name>_numpy`` so the
test suite and ``benchmarks/bench_kernels.py`` can check them against each
other.
"""
import numpy as np

from ._accel import USE_NUMBA, njit


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------- im2col


@njit
def im2col_numba(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.zeros((n, c * kh * kw, ho * wo), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(wo):
                            ix = ox * stride + j - pad
                            if ix < 0 or ix >= w:
                                continue
                            cols[b, row, oy * wo + ox] = x[b, ch, iy, ix]
    return cols


def im2col_numpy(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, c, ho, wo, kh, kw) -> (n, c, kh, kw, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


@njit
def col2im_numba(cols, n, c, h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(wo):
                            ix = ox * stride + j - pad
                            if ix < 0 or ix >= w:
                                continue
                            out[b, ch, iy, ix] += cols[b, row, oy * wo + ox]
    return out


def col2im_numpy(cols, n, c, h, w, kh, kw, stride, pad):
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    blocks = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += blocks[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------- graph


@njit
def _find(parent, u):
    root = u
    while parent[root] != root:
        root = parent[root]
    while parent[u] != root:
        nxt = parent[u]
        parent[u] = root
        u = nxt
    return root


@njit
def threshold_components_numba(dist, threshold):
    n = dist.shape[0]
    parent = np.arange(n)
    for i in range(n):
        for j in range(i + 1, n):
            if dist[i, j] < threshold:
                ri = _find(parent, i)
                rj = _find(parent, j)
                if ri != rj:
                    # smaller index becomes the root, so roots are component minima
                    if ri < rj:
                        parent[rj] = ri
                    else:
                        parent[ri] = rj
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        labels[i] = _find(parent, i)
    return labels


def threshold_components_numpy(dist, threshold):
    n = dist.shape[0]
    parent = list(range(n))

    def find(u):
        root = u
        while parent[root] != root:
            root = parent[root]
        while parent[u] != root:
            parent[u], u = root, parent[u]
        return root

    ii, jj = np.nonzero(np.triu(dist < threshold, k=1))
    for i, j in zip(ii.tolist(), jj.tolist()):
        ri, rj = find(i), find(j)
        if ri != rj:
            if ri < rj:
                parent[rj] = ri
            else:
                parent[ri] = rj
    return np.array([find(i) for i in range(n)], dtype=np.int64)


@njit
def fps_order_numba(to_target, pairwise):
    n = to_target.shape[0]
    order = np.empty(n, dtype=np.int64)
    picked = np.zeros(n, dtype=np.bool_)
    first = 0
    for i in range(1, n):
        if to_target[i] < to_target[first]:
            first = i
    order[0] = first
    picked[first] = True
    mind = pairwise[first].copy()
    for k in range(1, n):
        best = -1
        for i in range(n):
            if picked[i]:
                continue
            if best < 0 or mind[i] > mind[best]:
                best = i
        order[k] = best
        picked[best] = True
        for i in range(n):
            if pairwise[best, i] < mind[i]:
                mind[i] = pairwise[best, i]
    return order


def fps_order_numpy(to_target, pairwise):
    n = to_target.shape[0]
    order = [int(np.argmin(to_target))]
    picked = np.zeros(n, dtype=bool)
    picked[order[0]] = True
    mind = pairwise[order[0]].astype(np.float64).copy()
    for _ in range(1, n):
        score = np.where(picked, -np.inf, mind)
        best = int(np.argmax(score))  # argmax returns the first maximum
        order.append(best)
        picked[best] = True
        np.minimum(mind, pairwise[best], out=mind)
    return np.array(order, dtype=np.int64)


# ---------------------------------------------------------------- filtering


@njit
def _reflect(i, n):
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = i % period
    if i < 0:
        i += period
    if i > n - 1:
        i = period - i
    return i


def _reflect_index_numpy(idx, n):
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx > n - 1, period - idx, idx)


@njit
def blur_axis_numba(img, kernel, axis):
    c, h, w = img.shape
    r = kernel.shape[0] // 2
    out = np.zeros_like(img)
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                acc = 0.0
                for t in range(kernel.shape[0]):
                    if axis == 1:
                        acc += kernel[t] * img[ch, _reflect(y + t - r, h), x]
                    else:
                        acc += kernel[t] * img[ch, y, _reflect(x + t - r, w)]
                out[ch, y, x] = acc
    return out


def blur_axis_numpy(img, kernel, axis):
    n = img.shape[axis]
    r = kernel.shape[0] // 2
    out = np.zeros_like(img)
    base = np.arange(n)
    for t in range(kernel.shape[0]):
        idx = _reflect_index_numpy(base + t - r, n)
        out += kernel[t] * np.take(img, idx, axis=axis)
    return out


@njit
def bilinear_resize_numba(img, oh, ow):
    c, h, w = img.shape
    out = np.empty((c, oh, ow), dtype=img.dtype)
    sy = h / oh
    sx = w / ow
    for y in range(oh):
        fy = (y + 0.5) * sy - 0.5
        fy = min(max(fy, 0.0), h - 1.0)
        y0 = int(np.floor(fy))
        y1 = min(y0 + 1, h - 1)
        wy = fy - y0
        for x in range(ow):
            fx = (x + 0.5) * sx - 0.5
            fx = min(max(fx, 0.0), w - 1.0)
            x0 = int(np.floor(fx))
            x1 = min(x0 + 1, w - 1)
            wx = fx - x0
            for ch in range(c):
                top = img[ch, y0, x0] * (1.0 - wx) + img[ch, y0, x1] * wx
                bot = img[ch, y1, x0] * (1.0 - wx) + img[ch, y1, x1] * wx
                out[ch, y, x] = top * (1.0 - wy) + bot * wy
    return out


def _bilinear_taps(n_in, n_out):
    f = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    f = np.clip(f, 0.0, n_in - 1.0)
    i0 = np.floor(f).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, f - i0


def bilinear_resize_numpy(img, oh, ow):
    c, h, w = img.shape
    y0, y1, wy = _bilinear_taps(h, oh)
    x0, x1, wx = _bilinear_taps(w, ow)
    top = img[:, y0][:, :, x0] * (1.0 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1.0 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1.0 - wy)[None, :, None] + bot * wy[None, :, None]


if USE_NUMBA:
    im2col = im2col_numba
    col2im = col2im_numba
    threshold_components = threshold_components_numba
    fps_order = fps_order_numba
    blur_axis = blur_axis_numba
    bilinear_resize = bilinear_resize_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    threshold_components = threshold_components_numpy
    fps_order = fps_order_numpy
    blur_axis = blur_axis_numpy
    bilinear_resize = bilinear_resize_numpy
