"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (nested loops, direct formula
transcription) and never calls into the package's differentiable kernels, so
a bug cannot cancel between the implementation and its check.
"""

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, padding=0):
    c_in, h, wid = x.shape
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (wid + 2 * padding - k) // stride + 1
    y = np.zeros((c_out, h_out, w_out))
    for co in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                acc = 0.0
                for ci in range(c_in):
                    for di in range(k):
                        for dj in range(k):
                            acc += xp[ci, i * stride + di, j * stride + dj] * w[co, ci, di, dj]
                y[co, i, j] = acc + (b[co] if b is not None else 0.0)
    return y


def maxpool2_loops(x):
    c, h, w = x.shape
    y = np.zeros((c, h // 2, w // 2))
    for ci in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                y[ci, i, j] = x[ci, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].max()
    return y


def matmul_loops(a, b):
    n, m = a.shape
    m2, p = b.shape
    assert m == m2
    y = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            acc = 0.0
            for kk in range(m):
                acc += a[i, kk] * b[kk, j]
            y[i, j] = acc
    return y


def bilinear2x_direct(x):
    """Per-output-pixel evaluation of x2 bilinear interpolation with
    half-pixel centres (corner alignment off)."""
    c, h, w = x.shape
    y = np.zeros((c, 2 * h, 2 * w))
    for ci in range(c):
        for oi in range(2 * h):
            for oj in range(2 * w):
                si = min(max((oi + 0.5) / 2.0 - 0.5, 0.0), h - 1.0)
                sj = min(max((oj + 0.5) / 2.0 - 0.5, 0.0), w - 1.0)
                i0, j0 = int(np.floor(si)), int(np.floor(sj))
                i1, j1 = min(i0 + 1, h - 1), min(j0 + 1, w - 1)
                ti, tj = si - i0, sj - j0
                y[ci, oi, oj] = (
                    (1 - ti) * (1 - tj) * x[ci, i0, j0]
                    + (1 - ti) * tj * x[ci, i0, j1]
                    + ti * (1 - tj) * x[ci, i1, j0]
                    + ti * tj * x[ci, i1, j1]
                )
    return y


def softmax_direct(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def sigmoid_direct(v):
    return 1.0 / (1.0 + np.exp(-np.asarray(v, dtype=np.float64)))


def conv1x1_direct(x, w, b):
    """1x1 convolution as an explicit per-pixel linear map."""
    c_in, h, wid = x.shape
    c_out = w.shape[0]
    y = np.zeros((c_out, h, wid))
    for co in range(c_out):
        for i in range(h):
            for j in range(wid):
                y[co, i, j] = (w[co, :, 0, 0] * x[:, i, j]).sum() + b[co]
    return y


def adaptive_pool_direct(f, pool_w, pool_b):
    """Channel descriptor from softmax-weighted spatial pooling."""
    c, h, w = f.shape
    logits = conv1x1_direct(f, pool_w, pool_b)[0].reshape(h * w)
    weights = softmax_direct(logits)
    z = np.zeros(c)
    for ci in range(c):
        z[ci] = (weights * f[ci].reshape(h * w)).sum()
    return z


def awca_direct(f, pool_w, pool_b, w1, b1, w2, b2):
    """Step-by-step channel-attention forward built from the oracles above."""
    c = f.shape[0]
    z = adaptive_pool_direct(f, pool_w, pool_b)
    hidden = np.maximum(w1[:, :, 0, 0] @ z + b1, 0.0)
    v = sigmoid_direct(w2[:, :, 0, 0] @ hidden + b2)
    return f * v.reshape(c, 1, 1)


def centering_direct(m):
    return (np.eye(m) - np.full((m, m), 1.0 / m)) / m


def psnl_patch_direct(f, bw, bb, dw, db, pw, pb, center=None):
    """Matrix-by-matrix evaluation of the second-order spatial attention on
    one patch: projections, centered Gram matrix, row softmax, value mix,
    expansion, residual."""
    c, h, w = f.shape
    cr = bw.shape[0]
    n = h * w
    bmap = conv1x1_direct(f, bw, bb).reshape(cr, n).T  # n x C/r
    dmap = conv1x1_direct(f, dw, db).reshape(cr, n).T
    ibar = centering_direct(cr) if center is None else center
    xmat = bmap @ ibar @ bmap.T
    smax = np.zeros_like(xmat)
    for i in range(n):
        smax[i] = softmax_direct(xmat[i])
    u = smax @ dmap  # n x C/r
    u_map = u.T.reshape(cr, h, w)
    return conv1x1_direct(u_map, pw, pb) + f


def ssim_windowed_direct(y, yhat, c1, c2, valid, window=7):
    """Mean of the local structural-similarity index over all windows whose
    pixels are all valid; population statistics per window."""
    h, w = y.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            vwin = valid[i : i + window, j : j + window]
            if not vwin.all():
                continue
            a = y[i : i + window, j : j + window].ravel()
            b = yhat[i : i + window, j : j + window].ravel()
            mu_a, mu_b = a.mean(), b.mean()
            var_a = (a * a).mean() - mu_a * mu_a
            var_b = (b * b).mean() - mu_b * mu_b
            cov = (a * b).mean() - mu_a * mu_b
            vals.append(
                ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
            )
    assert vals, "no fully valid window"
    return float(np.mean(vals))


def ssim_global_direct(y, yhat, c1, c2, valid):
    a = y[valid.astype(bool)]
    b = yhat[valid.astype(bool)]
    mu_a, mu_b = a.mean(), b.mean()
    var_a = (a * a).mean() - mu_a * mu_a
    var_b = (b * b).mean() - mu_b * mu_b
    cov = (a * b).mean() - mu_a * mu_b
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    )


def l_depth_direct(y, yhat, valid):
    v = valid.astype(bool)
    return float(np.abs(y[v] - yhat[v]).mean())


def image_gradients_direct(d):
    h, w = d.shape
    gx = np.zeros_like(d)
    gy = np.zeros_like(d)
    gx[:, : w - 1] = d[:, 1:] - d[:, : w - 1]
    gy[: h - 1, :] = d[1:, :] - d[: h - 1, :]
    return gx, gy


def l_grad_direct(y, yhat, valid):
    v = valid.astype(bool)
    h, w = y.shape
    gx_y, gy_y = image_gradients_direct(y)
    gx_p, gy_p = image_gradients_direct(yhat)
    mx = v.copy()
    mx[:, : w - 1] &= v[:, 1:]
    my = v.copy()
    my[: h - 1, :] &= v[1:, :]
    total = (np.abs(gx_y - gx_p) * mx).sum() + (np.abs(gy_y - gy_p) * my).sum()
    return float(total / v.sum())


def abs_rel_direct(y, yhat, valid):
    v = valid.astype(bool)
    return float(np.mean(np.abs(y[v] - yhat[v]) / yhat[v]))


def si_rmse_direct(y, yhat, valid):
    v = valid.astype(bool)
    d = yhat[v] - y[v]
    return float(np.sqrt(max((d * d).mean() - d.mean() ** 2, 0.0)))


def adam_sequence(g_list, lr, beta1=0.9, beta2=0.99, eps=1e-8, theta0=0.0):
    """Scripted Adam recurrence on one scalar parameter; returns the value
    after each step."""
    m = v = 0.0
    theta = theta0
    history = []
    for t, g in enumerate(g_list, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        history.append(theta)
    return history


def fd_gradient(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f(arrays)`` w.r.t. every entry
    of every array in ``arrays`` (list of float64 numpy arrays)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat = a.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(arrays)
            flat[i] = orig - h
            down = f(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b, floor=1e-6):
    denom = max(abs(float(a)), abs(float(b)), floor)
    return abs(float(a) - float(b)) / denom


def max_rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
