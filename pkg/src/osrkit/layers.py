"""Differentiable layers with hand-written forward/backward passes.

All layers operate on channels-last float tensors and support float32
(training) as well as float64 (used by the finite-difference gradient
checks). Convolutions are stride-1 with symmetric zero padding; spatial
downsampling happens only in max-pool layers, upsampling only in the
nearest-neighbour upsample layer.
"""

from __future__ import annotations

import numpy as np

# per-chunk working-set budget for the convolution gemms; sized so the
# input view, output accumulator and scratch stay in last-level cache
_CHUNK_BYTES = 6_000_000


class Layer:
    """Base class: a differentiable operation with optional parameters."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def _require_forward(self, attr: str):
        if getattr(self, attr, None) is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")


class Dense(Layer):
    """Affine map y = x @ W + b with He-initialised weights."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        scale = np.sqrt(2.0 / n_in)
        self.params = {
            "W": (rng.standard_normal((n_in, n_out)) * scale).astype(dtype),
            "b": np.zeros(n_out, dtype=dtype),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._x = None

    def forward(self, x, training=False):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        self._require_forward("_x")
        self.grads["W"] += self._x.T @ dy
        self.grads["b"] += dy.sum(axis=0)
        return dy @ self.params["W"].T


class Conv2D(Layer):
    """3x3 (or any odd k) stride-1 convolution with same zero padding.

    Forward and both backward products are computed as per-offset gemms on
    shifted contiguous views of zero-padded buffers, chunked over images so
    the accumulators stay cache-resident. Wrap-around terms at image edges
    land only in the padding halo and are sliced away; the dy halo is zero,
    which keeps the weight-gradient gemms exact over the full aligned range.

    Input/output layout is (N, H, W, C). Set `input_layer=True` on the
    first layer of a network to skip the (unused) input gradient.
    """

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator,
                 kernel: int = 3, dtype=np.float32, input_layer: bool = False):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd for same padding")
        self.k = kernel
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.input_layer = input_layer
        fan_in = kernel * kernel * in_ch
        scale = np.sqrt(2.0 / fan_in)
        self.params = {
            "W": (rng.standard_normal((kernel, kernel, in_ch, out_ch)) * scale).astype(dtype),
            "b": np.zeros(out_ch, dtype=dtype),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._xpad = None
        self._in_shape = None

    def _pad(self, x):
        p = self.k // 2
        n, h, w, c = x.shape
        xpad = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
        xpad[:, p:p + h, p:p + w, :] = x
        return xpad

    def _chunk_images(self, hp, wp, itemsize):
        per_image = hp * wp * (self.in_ch + 2 * self.out_ch) * itemsize
        return max(4, _CHUNK_BYTES // per_image)

    def _offsets(self, wp):
        p = self.k // 2
        return [((di - p) * wp + (dj - p), di, dj)
                for di in range(self.k) for dj in range(self.k)]

    def _gather(self, src_flat, m, channels, wp, out):
        """Aligned k*k-offset gather: out[p, t*C:(t+1)*C] = src[p + s_t]."""
        out[:] = 0.0
        for t, (s, _, _) in enumerate(self._offsets(wp)):
            lo_s, lo_o = max(s, 0), max(-s, 0)
            length = m - abs(s)
            out[lo_o:lo_o + length, t * channels:(t + 1) * channels] = \
                src_flat[lo_s:lo_s + length]
        return out

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[3] != self.in_ch:
            raise ValueError(f"expected (N,H,W,{self.in_ch}) input, got {x.shape}")
        n, h, w, _ = x.shape
        self._in_shape = x.shape
        xpad = self._pad(x)
        self._xpad = xpad
        k, cin, cout = self.k, self.in_ch, self.out_ch
        p = k // 2
        hp, wp = h + 2 * p, w + 2 * p
        weights = self.params["W"]
        out_pad = np.zeros((n, hp, wp, cout), dtype=x.dtype)
        chunk = self._chunk_images(hp, wp, x.itemsize)
        gather_in = cin <= 4  # rank-deficient gemms are slower than a gather
        if gather_in:
            cols = np.empty((chunk * hp * wp, k * k * cin), dtype=x.dtype)
            wmat = weights.reshape(k * k * cin, cout)
        else:
            tmp = np.empty((chunk * hp * wp, cout), dtype=x.dtype)
        for n0 in range(0, n, chunk):
            n1 = min(n0 + chunk, n)
            xc = xpad[n0:n1].reshape(-1, cin)
            oc = out_pad[n0:n1].reshape(-1, cout)
            m = xc.shape[0]
            if gather_in:
                cc = self._gather(xc, m, cin, wp, cols[:m])
                np.matmul(cc, wmat, out=oc)
            else:
                for s, di, dj in self._offsets(wp):
                    lo_x, lo_o = max(s, 0), max(-s, 0)
                    length = m - abs(s)
                    t = tmp[:length]
                    np.matmul(xc[lo_x:lo_x + length], weights[di, dj], out=t)
                    oc[lo_o:lo_o + length] += t
        out = np.ascontiguousarray(out_pad[:, p:p + h, p:p + w, :])
        out += self.params["b"]
        return out

    def backward(self, dy):
        self._require_forward("_xpad")
        n, h, w, _ = self._in_shape
        k, cin, cout = self.k, self.in_ch, self.out_ch
        p = k // 2
        hp, wp = h + 2 * p, w + 2 * p
        weights = self.params["W"]
        dweights = self.grads["W"]
        self.grads["b"] += dy.sum(axis=(0, 1, 2))
        dypad = np.zeros((n, hp, wp, cout), dtype=dy.dtype)
        dypad[:, p:p + h, p:p + w, :] = dy
        dxpad = None if self.input_layer else np.zeros_like(self._xpad)
        chunk = self._chunk_images(hp, wp, dy.itemsize)
        gather_out = dxpad is not None and cout <= 4
        if gather_out:
            cols = np.empty((chunk * hp * wp, k * k * cout), dtype=dy.dtype)
            # gathering dy at +s_t pairs it with the offset-reversed,
            # transposed kernel: dx[q] = sum_t dy[q + s_t] @ W[flip(t)].T
            wflip = weights.reshape(k * k, cin, cout)[::-1].transpose(0, 2, 1)
            wflip = np.ascontiguousarray(wflip).reshape(k * k * cout, cin)
        else:
            tmp = np.empty((chunk * hp * wp, cin), dtype=dy.dtype)
        for n0 in range(0, n, chunk):
            n1 = min(n0 + chunk, n)
            xc = self._xpad[n0:n1].reshape(-1, cin)
            dyc = dypad[n0:n1].reshape(-1, cout)
            dxc = None if dxpad is None else dxpad[n0:n1].reshape(-1, cin)
            m = xc.shape[0]
            for s, di, dj in self._offsets(wp):
                lo_x, lo_o = max(s, 0), max(-s, 0)
                length = m - abs(s)
                dweights[di, dj] += xc[lo_x:lo_x + length].T @ dyc[lo_o:lo_o + length]
                if dxc is not None and not gather_out:
                    t = tmp[:length]
                    np.matmul(dyc[lo_o:lo_o + length], weights[di, dj].T, out=t)
                    dxc[lo_x:lo_x + length] += t
            if gather_out:
                cc = self._gather(dyc, m, cout, wp, cols[:m])
                np.matmul(cc, wflip, out=dxc)
        if dxpad is None:
            return None
        return np.ascontiguousarray(dxpad[:, p:p + h, p:p + w, :])


class MaxPool2D(Layer):
    """Max pooling, kernel (3,3), stride (2,2), same-style zero padding.

    Output size is ceil(in/2). The max is computed separably (rows, then
    columns) with the stage argmaxes recorded, so the backward pass routes
    each gradient to exactly one input cell (first-scan winner on ties).
    """

    KERNEL = 3
    STRIDE = 2

    def __init__(self):
        super().__init__()
        self._arg_row = None
        self._arg_col = None
        self._in_shape = None
        self._pads = None

    @staticmethod
    def out_size(n: int) -> int:
        return (n + 1) // 2

    def forward(self, x, training=False):
        n, h, w, c = x.shape
        ho, wo = self.out_size(h), self.out_size(w)
        k, s = self.KERNEL, self.STRIDE
        pad_h = (ho - 1) * s + k - h
        pad_w = (wo - 1) * s + k - w
        pb_h, pb_w = pad_h // 2, pad_w // 2
        hp, wp = h + pad_h, w + pad_w
        xpad = np.zeros((n, hp, wp, c), dtype=x.dtype)
        xpad[:, pb_h:pb_h + h, pb_w:pb_w + w, :] = x
        # stage 1: max over the 3 window rows (full-width slices)
        row_best = np.full((n, ho, wp, c), -np.inf, dtype=x.dtype)
        arg_row = np.zeros((n, ho, wp, c), dtype=np.int8)
        for di in range(k):
            cand = xpad[:, di:di + s * (ho - 1) + 1:s, :, :]
            better = cand > row_best
            np.copyto(row_best, cand, where=better)
            np.copyto(arg_row, np.int8(di), where=better)
        # stage 2: max over the 3 window columns of the row maxima
        best = np.full((n, ho, wo, c), -np.inf, dtype=x.dtype)
        arg_col = np.zeros((n, ho, wo, c), dtype=np.int8)
        for dj in range(k):
            cand = row_best[:, :, dj:dj + s * (wo - 1) + 1:s, :]
            better = cand > best
            np.copyto(best, cand, where=better)
            np.copyto(arg_col, np.int8(dj), where=better)
        self._arg_row = arg_row
        self._arg_col = arg_col
        self._in_shape = x.shape
        self._pads = (pb_h, pb_w, pad_h, pad_w)
        return best

    def backward(self, dy):
        self._require_forward("_arg_row")
        n, h, w, c = self._in_shape
        pb_h, pb_w, pad_h, pad_w = self._pads
        k, s = self.KERNEL, self.STRIDE
        ho, wo = dy.shape[1], dy.shape[2]
        hp, wp = h + pad_h, w + pad_w
        # undo stage 2: route each gradient to its winning column
        drow = np.zeros((n, ho, wp, c), dtype=dy.dtype)
        routed = np.empty_like(dy)
        for dj in range(k):
            np.multiply(dy, self._arg_col == dj, out=routed)
            drow[:, :, dj:dj + s * (wo - 1) + 1:s, :] += routed
        # undo stage 1: route to the winning row
        dxpad = np.zeros((n, hp, wp, c), dtype=dy.dtype)
        routed_r = np.empty_like(drow)
        for di in range(k):
            np.multiply(drow, self._arg_row == di, out=routed_r)
            dxpad[:, di:di + s * (ho - 1) + 1:s, :, :] += routed_r
        return np.ascontiguousarray(dxpad[:, pb_h:pb_h + h, pb_w:pb_w + w, :])


class BatchNorm(Layer):
    """Batch normalisation over all non-channel axes.

    Works for (N, F) dense activations and (N, H, W, C) conv activations
    alike by flattening to (M, C). Training mode normalises with batch
    statistics and maintains exponential running averages; inference mode
    uses the running averages.
    """

    def __init__(self, n_features: int, momentum: float = 0.9, eps: float = 1e-5,
                 dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.params = {
            "gamma": np.ones(n_features, dtype=dtype),
            "beta": np.zeros(n_features, dtype=dtype),
        }
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.running_mean = np.zeros(n_features, dtype=dtype)
        self.running_var = np.ones(n_features, dtype=dtype)
        self._cache = None

    def forward(self, x, training=False):
        shape = x.shape
        flat = x.reshape(-1, shape[-1])
        if training:
            mu = flat.mean(axis=0)
            # single-pass second moment; activations are He-scaled so the
            # E[x^2] - mu^2 cancellation stays benign
            sq = np.einsum("ij,ij->j", flat, flat, optimize=True) / flat.shape[0]
            var = np.maximum(sq - mu * mu, 0.0)
            mom = self.momentum
            self.running_mean = (mom * self.running_mean + (1 - mom) * mu).astype(x.dtype)
            self.running_var = (mom * self.running_var + (1 - mom) * var).astype(x.dtype)
        else:
            mu, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        # y = x * a + b with per-channel a, b (single fused scale/shift)
        a = (self.params["gamma"] * inv_std).astype(x.dtype)
        b = (self.params["beta"] - mu * a).astype(x.dtype)
        y = flat * a
        y += b
        self._cache = (flat, mu.astype(x.dtype), inv_std.astype(x.dtype), training, shape)
        return y.reshape(shape)

    def backward(self, dy):
        self._require_forward("_cache")
        flat, mu, inv_std, training, shape = self._cache
        dy_flat = dy.reshape(-1, shape[-1])
        xhat = (flat - mu)
        xhat *= inv_std
        dgamma = np.einsum("ij,ij->j", dy_flat, xhat, optimize=True)
        dbeta = dy_flat.sum(axis=0)
        self.grads["gamma"] += dgamma
        self.grads["beta"] += dbeta
        gamma = self.params["gamma"]
        if not training:
            return (dy_flat * (gamma * inv_std)).reshape(shape)
        m = dy_flat.shape[0]
        # dx = (gamma*inv_std) * (dy - dbeta/m - xhat * dgamma/m)
        dx = xhat
        dx *= (-dgamma / m).astype(dy.dtype)
        dx += dy_flat
        dx -= (dbeta / m).astype(dy.dtype)
        dx *= (gamma * inv_std).astype(dy.dtype)
        return dx.reshape(shape)


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x, training=False):
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, dy):
        self._require_forward("_mask")
        # dy is owned by the backward chain; masking in place avoids a copy
        np.multiply(dy, self._mask, out=dy)
        return dy


class Sigmoid(Layer):
    def __init__(self):
        super().__init__()
        self._y = None

    def forward(self, x, training=False):
        # two-sided form avoids overflow for large |x|
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        self._y = y
        return y

    def backward(self, dy):
        self._require_forward("_y")
        return dy * self._y * (1.0 - self._y)


class Dropout(Layer):
    """Inverted dropout with an explicit keep probability.

    `keep_prob` is the probability a unit survives; surviving units are
    scaled by 1/keep_prob during training so inference is the identity.
    """

    def __init__(self, keep_prob: float, rng: np.random.Generator):
        super().__init__()
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
        self.keep_prob = keep_prob
        self.rng = rng
        self._mask = None

    def forward(self, x, training=False):
        if not training or self.keep_prob >= 1.0:
            self._mask = None
            return x
        draw_dtype = np.float32 if x.dtype == np.float32 else np.float64
        mask = self.rng.random(x.shape, dtype=draw_dtype) < self.keep_prob
        # pre-scaled mask: one multiply in forward and one in backward
        self._mask = mask.astype(x.dtype) / self.keep_prob
        return x * self._mask

    def backward(self, dy):
        if self._mask is None:
            return dy
        return dy * self._mask


class Flatten(Layer):
    def __init__(self):
        super().__init__()
        self._shape = None

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        self._require_forward("_shape")
        return dy.reshape(self._shape)


class Reshape(Layer):
    """Reshape the per-sample payload to `shape` (batch axis untouched)."""

    def __init__(self, shape: tuple[int, ...]):
        super().__init__()
        self.shape = tuple(shape)
        self._in_shape = None

    def forward(self, x, training=False):
        self._in_shape = x.shape
        return x.reshape((x.shape[0],) + self.shape)

    def backward(self, dy):
        self._require_forward("_in_shape")
        return dy.reshape(self._in_shape)


class Upsample2x(Layer):
    """Nearest-neighbour 2x spatial upsampling; inverts a stride-2 pool."""

    def forward(self, x, training=False):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, dy):
        n, h2, w2, c = dy.shape
        return dy.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))
