"""Pairwise warp regression: correlation matching, point regression, warping.

The regressor sees the correlation between two dense feature grids and
predicts four points on each image (16 numbers in the [-1, 1] frame, the
first 8 for the first image). Warping each image with its quad brings the
two views to a common perspective before the dense similarity is computed.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import GRID, local_features
from .geometry import from_normalized, warp_image
from .tensor import ParameterSet

CORNERS_NORM = np.array([-1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -1.0, 1.0])
IDENTITY_OUTPUT = np.concatenate([CORNERS_NORM, CORNERS_NORM])


def correlation_map(fq, fp, postprocess=True):
    """All-pairs inner products between two channel-normalized grids.

    Inputs are [N, C, h, w] (or unbatched [C, h, w]). The result is laid out
    [N, h*w, h, w]: spatial position (i, j) indexes ``fq`` and channel
    k = i_k * w + j_k indexes ``fp``. Post-processing is ReLU followed by L2
    normalization along k.
    """
    fq, fp = T.as_tensor(fq), T.as_tensor(fp)
    single = fq.ndim == 3
    if single:
        fq = T.reshape(fq, (1,) + fq.shape)
        fp = T.reshape(fp, (1,) + fp.shape)
    if fq.shape != fp.shape:
        raise T.ShapeMismatch(f"feature grids differ: {fq.shape} vs {fp.shape}")
    n, c, h, w = fq.shape
    a = T.transpose(T.reshape(fp, (n, c, h * w)), (0, 2, 1))
    b = T.reshape(fq, (n, c, h * w))
    corr = T.reshape(T.matmul(a, b), (n, h * w, h, w))
    if postprocess:
        corr = T.l2_normalize(T.relu(corr), axis=1, eps=1e-6)
    if single:
        corr = T.reshape(corr, corr.shape[1:])
    return corr


def _out_extent(n, stride):
    return (n + 2 - 3) // stride + 1


class Regressor:
    """Six 3x3 convolutions with ReLU, then a fully connected layer to 16 outputs.

    The final layer starts with zero weights and a bias equal to the frame
    corners of both images, so an untrained model predicts identity warps.
    """

    kind = "regressor"

    def __init__(self, channels=(128, 128, 64, 64, 32, 32), strides=(1, 2, 1, 2, 1, 2),
                 grid=GRID, seed=0, dtype=np.float32):
        if len(channels) != len(strides):
            raise ValueError("channels and strides must have equal length")
        self.channels = tuple(int(c) for c in channels)
        self.strides = tuple(int(s) for s in strides)
        self.grid = int(grid)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params = ParameterSet()
        cin = self.grid * self.grid
        side = self.grid
        for i, (cout, s) in enumerate(zip(self.channels, self.strides)):
            std = np.sqrt(2.0 / (cin * 9))
            self.params.add(f"conv{i}.weight", rng.normal(0.0, std, (cout, cin, 3, 3)).astype(self.dtype))
            self.params.add(f"conv{i}.bias", np.zeros(cout, dtype=self.dtype))
            cin = cout
            side = _out_extent(side, s)
        self.fc_in = cin * side * side
        self.params.add("fc.weight", np.zeros((16, self.fc_in), dtype=self.dtype))
        self.params.add("fc.bias", IDENTITY_OUTPUT.astype(self.dtype))

    @classmethod
    def from_arrays(cls, arrays, strides=None):
        n = sum(1 for k in arrays if k.startswith("conv") and k.endswith(".weight"))
        channels = [arrays[f"conv{i}.weight"].shape[0] for i in range(n)]
        grid = int(round(np.sqrt(arrays["conv0.weight"].shape[1])))
        if strides is None:
            strides = _infer_strides(grid, channels, arrays["fc.weight"].shape[1])
        model = cls(channels, strides, grid=grid, dtype=arrays["fc.weight"].dtype)
        model.params.load_arrays(arrays)
        return model

    def __call__(self, corr):
        h = T.as_tensor(corr)
        if h.ndim == 3:
            h = T.reshape(h, (1,) + h.shape)
        if h.shape[1:] != (self.grid * self.grid, self.grid, self.grid):
            raise T.ShapeMismatch(f"correlation map has shape {h.shape[1:]}")
        if h.dtype != self.dtype and not h.requires_grad:
            h = T.Tensor(h.data.astype(self.dtype))
        for i, s in enumerate(self.strides):
            h = T.relu(T.conv2d(h, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"],
                                stride=s, padding=1))
        h = T.reshape(h, (h.shape[0], -1))
        return T.linear(h, self.params["fc.weight"], self.params["fc.bias"])


def _infer_strides(grid, channels, fc_in):
    # default stride plans tried in order; the checkpoint only stores shapes
    last = channels[-1]
    for plan in ((1, 2) * 8, (2, 1) * 8, (1,) * 16, (2,) * 16):
        strides = plan[:len(channels)]
        side = grid
        for s in strides:
            side = _out_extent(side, s)
        if last * side * side == fc_in:
            return strides
    raise ValueError("cannot infer regressor strides from checkpoint shapes")


def regress_points(model, corr):
    """R(c): [N, 16] normalized points, first 8 for the first image."""
    return model(corr)


def predict(encoder, regressor, imgs_a, imgs_b):
    """W(I_a, I_b) for batches of images ([N, 3, H, W] or single [3, H, W])."""
    fa = local_features(encoder, imgs_a, regressor.grid)
    fb = local_features(encoder, imgs_b, regressor.grid)
    return regressor(correlation_map(fa, fb))


def _to_pixels(nq, w, h):
    scale = np.tile([w / 2.0, h / 2.0], 4)
    return T.mul(T.add(nq, 1.0), scale)


def warp_pair(encoder, regressor, img_q, img_p):
    """Predict both quads and warp both images.

    Returns ``(t_q, t_p, warped_q, warped_p)`` with the quads as length-8
    pixel-coordinate tensors on their own images.
    """
    img_q, img_p = T.as_tensor(img_q), T.as_tensor(img_p)
    pred = predict(encoder, regressor, img_q, img_p)
    hq, wq = img_q.shape[-2:]
    hp, wp = img_p.shape[-2:]
    tq = _to_pixels(T.getitem(pred, (0, slice(0, 8))), wq, hq)
    tp = _to_pixels(T.getitem(pred, (0, slice(8, 16))), wp, hp)
    return tq, tp, warp_image(img_q, tq), warp_image(img_p, tp)


def quads_from_prediction(pred, size_q, size_p):
    """Split a 16-vector into two pixel quads; sizes are (h, w)."""
    pred = np.asarray(pred.data if isinstance(pred, T.Tensor) else pred, dtype=np.float64).reshape(16)
    return (from_normalized(pred[:8], size_q[1], size_q[0]),
            from_normalized(pred[8:], size_p[1], size_p[0]))
