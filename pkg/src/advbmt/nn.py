"""NumPy layers with hand-derived backward passes.

Every layer reads its parameters from a shared ``params`` dict and adds
gradients into a matching ``grads`` dict.  ``forward`` caches what
``backward`` needs, so each layer instance serves one pass at a time.
"""

from __future__ import annotations

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)


class Module:
    def __init__(self, name: str):
        self.name = name

    def _p(self, key: str) -> str:
        return f"{self.name}.{key}"


def _accumulate(grads: dict, key: str, value: np.ndarray) -> None:
    if key in grads:
        grads[key] += value
    else:
        grads[key] = value.copy()


class Linear(Module):
    def __init__(self, name: str, d_in: int, d_out: int, bias: bool = True):
        super().__init__(name)
        self.d_in, self.d_out, self.bias = d_in, d_out, bias

    def init(self, params: dict, rng: np.random.Generator, scale: float = 1.0) -> None:
        params[self._p("W")] = rng.normal(0.0, scale / math.sqrt(self.d_in), (self.d_in, self.d_out))
        if self.bias:
            params[self._p("b")] = np.zeros(self.d_out)

    def forward(self, params: dict, x: np.ndarray) -> np.ndarray:
        self._x = x
        y = x @ params[self._p("W")]
        if self.bias:
            y = y + params[self._p("b")]
        return y

    def backward(self, params: dict, grads: dict, dy: np.ndarray, need_dx: bool = True):
        x = self._x
        x2 = x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        _accumulate(grads, self._p("W"), x2.T @ dy2)
        if self.bias:
            _accumulate(grads, self._p("b"), dy2.sum(axis=0))
        self._x = None
        if need_dx:
            return dy @ params[self._p("W")].T
        return None


class LayerNorm(Module):
    def __init__(self, name: str, d: int, eps: float = 1e-5):
        super().__init__(name)
        self.d, self.eps = d, eps

    def init(self, params: dict, rng: np.random.Generator) -> None:
        params[self._p("gamma")] = np.ones(self.d)
        params[self._p("beta")] = np.zeros(self.d)

    def forward(self, params: dict, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv)
        return xhat * params[self._p("gamma")] + params[self._p("beta")]

    def backward(self, params: dict, grads: dict, dy: np.ndarray) -> np.ndarray:
        xhat, inv = self._cache
        self._cache = None
        flat = dy.reshape(-1, self.d)
        _accumulate(grads, self._p("gamma"), (flat * xhat.reshape(-1, self.d)).sum(axis=0))
        _accumulate(grads, self._p("beta"), flat.sum(axis=0))
        g = dy * params[self._p("gamma")]
        m1 = g.mean(axis=-1, keepdims=True)
        m2 = (g * xhat).mean(axis=-1, keepdims=True)
        return (g - m1 - xhat * m2) * inv


class Gelu:
    """Tanh approximation of GELU (smooth, so finite differences agree)."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        u = _GELU_C * (x + 0.044715 * (x * x * x))
        t = np.tanh(u)
        self._cache = (x, t)
        return 0.5 * x * (1.0 + t)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, t = self._cache
        self._cache = None
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


class Embedding(Module):
    def __init__(self, name: str, n: int, d: int):
        super().__init__(name)
        self.n, self.d = n, d

    def init(self, params: dict, rng: np.random.Generator, std: float = 0.5) -> None:
        params[self._p("W")] = rng.normal(0.0, std, (self.n, self.d))

    def forward(self, params: dict, idx: np.ndarray) -> np.ndarray:
        self._idx = idx
        return params[self._p("W")][idx]

    def backward(self, params: dict, grads: dict, dy: np.ndarray) -> None:
        g = np.zeros_like(params[self._p("W")])
        np.add.at(g, self._idx.reshape(-1), dy.reshape(-1, self.d))
        _accumulate(grads, self._p("W"), g)
        self._idx = None


class Mlp(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, name: str, d_in: int, d_hidden: int, d_out: int):
        super().__init__(name)
        self.fc1 = Linear(f"{name}.fc1", d_in, d_hidden)
        self.act = Gelu()
        self.fc2 = Linear(f"{name}.fc2", d_hidden, d_out)

    def init(self, params: dict, rng: np.random.Generator, out_scale: float = 1.0) -> None:
        self.fc1.init(params, rng)
        self.fc2.init(params, rng, scale=out_scale)

    def forward(self, params: dict, x: np.ndarray) -> np.ndarray:
        return self.fc2.forward(params, self.act.forward(self.fc1.forward(params, x)))

    def backward(self, params: dict, grads: dict, dy: np.ndarray, need_dx: bool = True):
        d = self.fc2.backward(params, grads, dy)
        return self.fc1.backward(params, grads, self.act.backward(d), need_dx=need_dx)


def fourier_features(x: np.ndarray, freqs: np.ndarray) -> np.ndarray:
    """Map ``[..., F_in]`` to ``[..., 2 * bands]`` with fixed frequencies."""
    proj = (2.0 * math.pi) * (x @ freqs)
    return np.concatenate([np.cos(proj), np.sin(proj)], axis=-1)


class FourierEncoder(Module):
    """Fixed random Fourier features followed by a trainable linear map.

    The inputs are data, never parameters, so no input gradient is formed.
    """

    def __init__(self, name: str, d_in: int, bands: int, d_out: int):
        super().__init__(name)
        self.d_in, self.bands = d_in, bands
        self.proj = Linear(f"{name}.proj", 2 * bands, d_out)

    def init(self, params: dict, buffers: dict, rng: np.random.Generator, scale: float) -> None:
        buffers[self._p("freqs")] = rng.normal(0.0, scale, (self.d_in, self.bands))
        self.proj.init(params, rng)

    def forward(self, params: dict, buffers: dict, x: np.ndarray) -> np.ndarray:
        feats = fourier_features(x, buffers[self._p("freqs")]).astype(x.dtype, copy=False)
        return self.proj.forward(params, feats)

    def backward(self, params: dict, grads: dict, dy: np.ndarray) -> None:
        self.proj.backward(params, grads, dy, need_dx=False)


class RelationAttention(Module):
    """Multi-head attention with a per-edge embedding added to keys and values.

    Shapes: queries ``[G, Lq, D]``, memory ``[G, Lk, D]``, edges
    ``[G, Lq, Lk, D]``, mask ``[G, Lq, Lk]`` (True = attend).  Rows with no
    admissible key produce zeros.
    """

    def __init__(self, name: str, d: int, heads: int):
        super().__init__(name)
        if d % heads:
            raise ValueError("hidden dim must be divisible by heads")
        self.d, self.h, self.dh = d, heads, d // heads
        self.q = Linear(f"{name}.q", d, d)
        self.k = Linear(f"{name}.k", d, d)
        self.v = Linear(f"{name}.v", d, d)
        self.o = Linear(f"{name}.o", d, d)

    def init(self, params: dict, rng: np.random.Generator, out_scale: float = 1.0) -> None:
        for lin in (self.q, self.k, self.v):
            lin.init(params, rng)
        self.o.init(params, rng, scale=out_scale)

    def _split(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(*x.shape[:-1], self.h, self.dh)

    def forward(self, params: dict, xq: np.ndarray, xkv: np.ndarray, rel: np.ndarray, mask: np.ndarray) -> np.ndarray:
        G, Lq, _ = xq.shape
        q = self._split(self.q.forward(params, xq)).transpose(0, 2, 1, 3)    # G H Lq dh
        k = self._split(self.k.forward(params, xkv)).transpose(0, 2, 1, 3)   # G H Lk dh
        v = self._split(self.v.forward(params, xkv)).transpose(0, 2, 1, 3)   # G H Lk dh
        r = self._split(rel)                                                 # G Lq Lk H dh
        scale = 1.0 / math.sqrt(self.dh)
        qr = (r * q.transpose(0, 2, 1, 3)[:, :, None]).sum(axis=-1)          # G Lq Lk H
        scores = (q @ k.transpose(0, 1, 3, 2) + qr.transpose(0, 3, 1, 2)) * scale  # G H Lq Lk
        m = mask[:, None]
        masked = np.where(m, scores, -1e30)
        mx = masked.max(axis=-1, keepdims=True)
        e = np.exp(masked - mx) * m
        denom = e.sum(axis=-1, keepdims=True)
        p = e / np.where(denom > 0, denom, 1.0)                              # G H Lq Lk
        pt = p.transpose(0, 2, 3, 1)                                         # G Lq Lk H
        out = (p @ v).transpose(0, 2, 1, 3) + (pt[..., None] * r).sum(axis=2)  # G Lq H dh
        self._cache = (q, k, v, r, p, scale)
        return self.o.forward(params, out.reshape(G, Lq, self.d))

    def backward(self, params: dict, grads: dict, dy: np.ndarray, need_dkv: bool = True):
        q, k, v, r, p, scale = self._cache
        self._cache = None
        G, H, Lq, _ = q.shape
        Lk = k.shape[2]
        d_out = self._split(self.o.backward(params, grads, dy))              # G Lq H dh
        d_out_h = d_out.transpose(0, 2, 1, 3)                                # G H Lq dh
        dp = d_out_h @ v.transpose(0, 1, 3, 2) \
            + (d_out[:, :, None] * r).sum(axis=-1).transpose(0, 3, 1, 2)     # G H Lq Lk
        dv = p.transpose(0, 1, 3, 2) @ d_out_h                               # G H Lk dh
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale         # G H Lq Lk
        dst = ds.transpose(0, 2, 3, 1)                                       # G Lq Lk H
        dq = (ds @ k).transpose(0, 2, 1, 3) + (dst[..., None] * r).sum(axis=2)  # G Lq H dh
        dk = (ds.transpose(0, 1, 3, 2) @ q).transpose(0, 2, 1, 3)            # G Lk H dh
        q_l = q.transpose(0, 2, 1, 3)                                        # G Lq H dh
        dr = p.transpose(0, 2, 3, 1)[..., None] * d_out[:, :, None] + dst[..., None] * q_l[:, :, None]
        dxq = self.q.backward(params, grads, dq.reshape(G, Lq, self.d))
        dxkv = self.k.backward(params, grads, dk.reshape(G, Lk, self.d), need_dx=need_dkv)
        dxv = self.v.backward(params, grads, dv.transpose(0, 2, 1, 3).reshape(G, Lk, self.d), need_dx=need_dkv)
        if need_dkv:
            dxkv = dxkv + dxv
        return dxq, dxkv, dr.reshape(G, Lq, Lk, self.d)
