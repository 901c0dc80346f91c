"""Network building blocks on top of the tape engine.

The recurrent layer is a fused primitive: the whole forward scan runs in
numpy with saved gates, and one hand-derived backward closure replays the
scan in reverse. Recording each gate op on the tape individually would
multiply Python overhead by sequence length, which dominates wall time on
a single core. Both directions of a bidirectional layer are batched into
one leading axis so every timestep costs two batched matmuls total.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _uniform(rng: np.random.Generator, lo: float, hi: float, shape, dtype):
    return rng.uniform(lo, hi, size=shape).astype(dtype)


_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": ad.relu,
    "elu": ad.elu,
    "tanh": ad.tanh,
    "identity": lambda t: t,
}


class Linear:
    """Affine map with the usual uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float64):
        k = 1.0 / np.sqrt(in_dim)
        self.w = ad.parameter(_uniform(rng, -k, k, (in_dim, out_dim), dtype))
        self.b = ad.parameter(_uniform(rng, -k, k, (out_dim,), dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b

    def params(self) -> list[Tensor]:
        return [self.w, self.b]


class MLP:
    """Fully connected stack; hidden activations share one nonlinearity,
    the output layer is linear."""

    def __init__(self, sizes: list[int], activation: str = "elu",
                 rng: Optional[np.random.Generator] = None, dtype=np.float64):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}'")
        if rng is None:
            rng = np.random.default_rng(0)
        self.activation = activation
        self._act = _ACTIVATIONS[activation]
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(sizes[:-1], sizes[1:])]
        self.sizes = list(sizes)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = self._act(layer(x))
        return self.layers[-1](x)

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]


def _sigmoid_(x: np.ndarray) -> np.ndarray:
    """In-place logistic; saturates cleanly on overflow."""
    np.negative(x, out=x)
    with np.errstate(over="ignore"):
        np.exp(x, out=x)
    x += 1.0
    np.reciprocal(x, out=x)
    return x


class LSTM:
    """One (optionally bidirectional) LSTM layer as a fused tape primitive.

    Weights follow the stacked-gate convention with gate order (i, f, o, g),
    sigmoid gates grouped ahead of the tanh block so each scan step applies
    one sigmoid pass and one tanh pass: w_ih (D, I, 4H), w_hh (D, H, 4H),
    bias (D, 1, 4H), where D is 1 or 2 directions. Returns the full hidden
    sequence (B, T, D*H). Initial state is zero. All-timestep input
    projections run as one batched matmul; the per-step recurrence only
    touches (D, B, 4H) blocks, with buffers laid out so no step allocates.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator,
                 bidirectional: bool = True, dtype=np.float64):
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.dirs = 2 if bidirectional else 1
        k = 1.0 / np.sqrt(hidden_size)
        self.w_ih = ad.parameter(_uniform(rng, -k, k, (self.dirs, input_size, 4 * hidden_size), dtype))
        self.w_hh = ad.parameter(_uniform(rng, -k, k, (self.dirs, hidden_size, 4 * hidden_size), dtype))
        self.bias = ad.parameter(_uniform(rng, -k, k, (self.dirs, 1, 4 * hidden_size), dtype))

    def params(self) -> list[Tensor]:
        return [self.w_ih, self.w_hh, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 3:
            raise ad.AutodiffError(f"lstm expects (batch, time, features), got {x.shape}")
        B, T, I = x.data.shape
        if I != self.input_size:
            raise ad.AutodiffError(f"lstm expects {self.input_size} features, got {I}")
        D, H = self.dirs, self.hidden_size
        w_ih, w_hh, bias = self.w_ih, self.w_hh, self.bias
        dtype = x.data.dtype

        # direction-stacked, scan-time-major input: (D, T, B, I); the
        # backward direction sees time reversed
        xt = x.data.transpose(1, 0, 2)
        if D == 2:
            xs = np.ascontiguousarray(np.stack([xt, xt[::-1]]))
        else:
            xs = np.ascontiguousarray(xt[None])
        xp = np.matmul(xs.reshape(D, T * B, I), w_ih.data) + bias.data
        xp = xp.reshape(D, T, B, 4 * H)

        # the scan writes activations straight into the saved buffers;
        # gates[t] holds (i, f, o, g) post-nonlinearity side by side
        gates = np.empty((T, D, B, 4 * H), dtype=dtype)
        tanh_c = np.empty((T, D, B, H), dtype=dtype)
        cells = np.empty_like(tanh_c)       # c_t
        hs = np.empty_like(tanh_c)          # h_t
        zeros_dbh = np.zeros((D, B, H), dtype=dtype)
        h = zeros_dbh
        c = zeros_dbh
        tmp = np.empty((D, B, H), dtype=dtype)

        for t in range(T):
            G = gates[t]
            np.matmul(h, w_hh.data, out=G)
            G += xp[:, t]
            _sigmoid_(G[..., :3 * H])
            np.tanh(G[..., 3 * H:], out=G[..., 3 * H:])
            i, f = G[..., :H], G[..., H:2 * H]
            o, g = G[..., 2 * H:3 * H], G[..., 3 * H:]
            ct = cells[t]
            np.multiply(f, c, out=ct)
            np.multiply(i, g, out=tmp)
            ct += tmp
            tc = tanh_c[t]
            np.tanh(ct, out=tc)
            h = hs[t]
            np.multiply(o, tc, out=h)
            c = ct

        # assemble (B, T, D*H): backward direction un-reversed
        if D == 2:
            fwd = hs[:, 0].transpose(1, 0, 2)               # (B, T, H)
            bwd = hs[::-1, 1].transpose(1, 0, 2)
            out_data = np.concatenate([fwd, bwd], axis=2)
        else:
            out_data = hs[:, 0].transpose(1, 0, 2)

        def backward(dy: np.ndarray) -> None:
            # per-direction adjoint sequences in scan time, as views
            if D == 2:
                dh_seqs = (dy[:, :, :H].transpose(1, 0, 2),
                           dy[:, ::-1, H:].transpose(1, 0, 2))
            else:
                dh_seqs = (dy.transpose(1, 0, 2),)

            dxp = np.empty((D, T, B, 4 * H), dtype=dtype)
            dw_hh = np.zeros_like(w_hh.data)
            dw_hh_step = np.empty_like(w_hh.data)
            zeros_dbh = np.zeros((D, B, H), dtype=dtype)
            dh = np.empty((D, B, H), dtype=dtype)
            dc = np.empty_like(dh)
            dc_next = np.zeros_like(dh)
            dh_next = np.zeros_like(dh)
            t1 = np.empty_like(dh)
            w_hh_T = np.ascontiguousarray(w_hh.data.transpose(0, 2, 1))
            for t in range(T - 1, -1, -1):
                G = gates[t]
                i, f = G[..., :H], G[..., H:2 * H]
                o, g = G[..., 2 * H:3 * H], G[..., 3 * H:]
                tc = tanh_c[t]
                c_prev = cells[t - 1] if t > 0 else zeros_dbh
                h_prev = hs[t - 1] if t > 0 else zeros_dbh
                for d in range(D):
                    np.add(dh_seqs[d][t], dh_next[d], out=dh[d])
                # dc = dh * o * (1 - tc^2) + dc_next
                np.multiply(tc, tc, out=t1)
                np.subtract(1.0, t1, out=t1)
                t1 *= o
                np.multiply(dh, t1, out=dc)
                dc += dc_next
                # raw-gate adjoints written straight into the dxp slot
                dG = dxp[:, t]
                dGi, dGf = dG[..., :H], dG[..., H:2 * H]
                dGo, dGg = dG[..., 2 * H:3 * H], dG[..., 3 * H:]
                np.multiply(dh, tc, out=dGo)                # do
                np.subtract(1.0, o, out=t1)
                t1 *= o
                dGo *= t1
                np.multiply(dc, g, out=dGi)                 # di
                np.subtract(1.0, i, out=t1)
                t1 *= i
                dGi *= t1
                np.multiply(dc, c_prev, out=dGf)            # df
                np.subtract(1.0, f, out=t1)
                t1 *= f
                dGf *= t1
                np.multiply(g, g, out=t1)                   # dg
                np.subtract(1.0, t1, out=t1)
                t1 *= i
                np.multiply(dc, t1, out=dGg)
                np.multiply(dc, f, out=dc_next)
                np.matmul(h_prev.transpose(0, 2, 1), dG, out=dw_hh_step)
                dw_hh += dw_hh_step
                np.matmul(dG, w_hh_T, out=dh_next)

            dxp_flat = dxp.reshape(D, T * B, 4 * H)
            xs_flat = xs.reshape(D, T * B, I)
            dw_ih = np.matmul(xs_flat.transpose(0, 2, 1), dxp_flat)
            db = dxp_flat.sum(axis=1, keepdims=True)
            dxs = np.matmul(dxp_flat, w_ih.data.transpose(0, 2, 1))
            dxs = dxs.reshape(D, T, B, I)
            if D == 2:
                dx = dxs[0].transpose(1, 0, 2) + dxs[1][::-1].transpose(1, 0, 2)
            else:
                dx = np.ascontiguousarray(dxs[0].transpose(1, 0, 2))
            ad.accumulate_grad(x, dx)
            ad.accumulate_grad(w_ih, dw_ih)
            ad.accumulate_grad(w_hh, dw_hh)
            ad.accumulate_grad(bias, db)

        return ad.custom_op("lstm", out_data, (x, w_ih, w_hh, bias), backward)


def mse(pred: Tensor, target) -> Tensor:
    """Mean over every element of the squared difference."""
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=pred.data.dtype))
    return ad.tmean(ad.square(pred - t))
