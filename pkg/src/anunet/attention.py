"""Channel and spatial self-attention blocks.

The channel block (AWCA) pools each feature map with softmax-normalised
weights that are themselves predicted by a 1x1 convolution, squeezes the
resulting descriptor through a reduction bottleneck, and rescales the input
channels by the sigmoid output.  The spatial block (PSNL) splits the map into
four quadrants and, per quadrant, builds a second-order (centered Gram)
affinity between positions, row-normalises it, and mixes the value projection
back in through a residual 1x1 expansion.
"""

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .errors import ConfigError


def reduced_channels(channels, ratio):
    """Bottleneck width for a reduction ratio; clamped to >= 1 so tiny test
    networks stay constructible, otherwise the ratio must divide evenly."""
    if channels % ratio == 0:
        return channels // ratio
    if channels < ratio:
        return 1
    raise ConfigError(
        f"channel count {channels} is not divisible by reduction ratio {ratio}"
    )


def _zeros_init(name, shape, fan_in):
    return np.zeros(shape)


class AwcaParams:
    """Parameters of one channel-attention block for C input channels."""

    def __init__(self, pool_w, pool_b, reduce_w, reduce_b, expand_w, expand_b):
        self.pool_w = pool_w
        self.pool_b = pool_b
        self.reduce_w = reduce_w
        self.reduce_b = reduce_b
        self.expand_w = expand_w
        self.expand_b = expand_b
        self.channels = pool_w.shape[1]

    @classmethod
    def create(cls, channels, ratio, prefix, init):
        hidden = reduced_channels(channels, ratio)
        return cls(
            ad.Parameter(init(f"{prefix}.pool.weight", (1, channels, 1, 1), channels), f"{prefix}.pool.weight"),
            ad.Parameter(np.zeros(1), f"{prefix}.pool.bias"),
            ad.Parameter(init(f"{prefix}.reduce.weight", (hidden, channels, 1, 1), channels), f"{prefix}.reduce.weight"),
            ad.Parameter(np.zeros(hidden), f"{prefix}.reduce.bias"),
            ad.Parameter(init(f"{prefix}.expand.weight", (channels, hidden, 1, 1), hidden), f"{prefix}.expand.weight"),
            ad.Parameter(np.zeros(channels), f"{prefix}.expand.bias"),
        )

    def parameters(self):
        return [
            self.pool_w, self.pool_b,
            self.reduce_w, self.reduce_b,
            self.expand_w, self.expand_b,
        ]


class PsnlParams:
    """Parameters of the spatial-attention block for C input channels."""

    def __init__(self, b_w, b_b, d_w, d_b, phi_w, phi_b):
        self.b_w = b_w
        self.b_b = b_b
        self.d_w = d_w
        self.d_b = d_b
        self.phi_w = phi_w
        self.phi_b = phi_b
        self.channels = b_w.shape[1]
        self.reduced = b_w.shape[0]

    @classmethod
    def create(cls, channels, ratio, prefix, init):
        red = reduced_channels(channels, ratio)
        return cls(
            ad.Parameter(init(f"{prefix}.b.weight", (red, channels, 1, 1), channels), f"{prefix}.b.weight"),
            ad.Parameter(np.zeros(red), f"{prefix}.b.bias"),
            ad.Parameter(init(f"{prefix}.d.weight", (red, channels, 1, 1), channels), f"{prefix}.d.weight"),
            ad.Parameter(np.zeros(red), f"{prefix}.d.bias"),
            ad.Parameter(init(f"{prefix}.phi.weight", (channels, red, 1, 1), red), f"{prefix}.phi.weight"),
            ad.Parameter(np.zeros(channels), f"{prefix}.phi.bias"),
        )

    def parameters(self):
        return [self.b_w, self.b_b, self.d_w, self.d_b, self.phi_w, self.phi_b]


def adaptive_weighted_pool(f, pool_w, pool_b):
    """Softmax-weighted spatial pooling: a 1x1 convolution scores every
    position, the scores are softmax-normalised over the image, and each
    channel is reduced to the weighted sum of its values.  The result is a
    convex combination, so each entry stays inside that channel's range."""
    f = ad.as_tensor(f)
    c, h, w = f.shape
    logits = ad.reshape(ad.conv2d(f, pool_w, pool_b), (h * w,))
    weights = ad.softmax(logits)
    z = ad.matmul(ad.reshape(f, (c, h * w)), ad.reshape(weights, (h * w, 1)))
    return ad.reshape(z, (c,))


def awca_forward(f, params):
    """Rescale each channel of ``f`` by its learned attention weight."""
    f = ad.as_tensor(f)
    if f.ndim != 3 or f.shape[0] != params.channels:
        raise ShapeError(
            f"channel-attention input must be {params.channels} x H x W, got {f.shape}"
        )
    c = params.channels
    z = adaptive_weighted_pool(f, params.pool_w, params.pool_b)
    hidden = ad.relu(ad.conv2d(ad.reshape(z, (c, 1, 1)), params.reduce_w, params.reduce_b))
    v = ad.sigmoid(ad.conv2d(hidden, params.expand_w, params.expand_b))
    return f * v  # (C,1,1) broadcast over (C,H,W)


def centering_matrix(m):
    """Symmetric mean-removing matrix (1/m)(I - J/m).

    Entries are snapped to one dyadic grid (the ulp of the diagonal value) so
    that every row and column sums to exactly zero in float64 regardless of
    summation order; the snap perturbs each entry by well under one ulp of
    the diagonal.
    """
    if m < 1:
        raise ConfigError(f"centering matrix size must be >= 1, got {m}")
    if m == 1:
        return np.zeros((1, 1))
    grid = math.ulp((m - 1) / (m * m))
    off = round((1.0 / (m * m)) / grid) * grid
    mat = np.full((m, m), -off)
    np.fill_diagonal(mat, (m - 1) * off)
    return mat


def psnl_patch_forward(f, params, center_dim="channel"):
    """Second-order spatial attention on a single patch.

    ``center_dim`` selects which axis the centering matrix lives on: the
    default ``channel`` puts it on the reduced-channel axis, which makes the
    position-by-position affinity matrix n x n; ``spatial`` keeps it on the
    position axis (affinity between reduced channels instead).  Both close
    shape-wise; only ``channel`` yields the n x n map.
    """
    f = ad.as_tensor(f)
    if f.ndim != 3 or f.shape[0] != params.channels:
        raise ShapeError(
            f"spatial-attention input must be {params.channels} x H x W, got {f.shape}"
        )
    if center_dim not in ("channel", "spatial"):
        raise ConfigError(f"unknown center_dim {center_dim!r}")
    _, h, w = f.shape
    red = params.reduced
    n = h * w
    b = ad.reshape(ad.conv2d(f, params.b_w, params.b_b), (red, n))
    d = ad.reshape(ad.conv2d(f, params.d_w, params.d_b), (red, n))
    if center_dim == "channel":
        ibar = Tensor(centering_matrix(red))
        affinity = ad.matmul(ad.matmul(ad.transpose2d(b), ibar), b)  # n x n
        mixed = ad.matmul(ad.softmax(affinity, axis=-1), ad.transpose2d(d))
        u = ad.reshape(ad.transpose2d(mixed), (red, h, w))
    else:
        ibar = Tensor(centering_matrix(n))
        affinity = ad.matmul(ad.matmul(b, ibar), ad.transpose2d(b))  # red x red
        mixed = ad.matmul(ad.softmax(affinity, axis=-1), d)
        u = ad.reshape(mixed, (red, h, w))
    return ad.conv2d(u, params.phi_w, params.phi_b) + f


def psnl_forward(f, params, center_dim="channel"):
    """Apply the patch attention to the four spatial quadrants of ``f`` with
    shared parameters and stitch the results back in place."""
    f = ad.as_tensor(f)
    if f.ndim != 3:
        raise ShapeError(f"spatial-attention input must be C x H x W, got {f.shape}")
    _, h, w = f.shape
    if h % 2 or w % 2:
        raise ShapeError(f"spatial attention needs even H and W, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    quads = []
    for rows in ((0, h2), (h2, h)):
        row_pair = []
        for cols in ((0, w2), (w2, w)):
            patch = ad.spatial_slice(f, rows, cols)
            row_pair.append(psnl_patch_forward(patch, params, center_dim))
        quads.append(ad.concat(row_pair, axis=2))
    return ad.concat(quads, axis=1)
