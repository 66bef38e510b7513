"""Conditional neural fields: hypernetwork -> linear projector -> SIREN.

All networks here are *layouts*: they know how many parameters they need and
how to apply themselves given a flat parameter tensor, but they own no state.
Parameters live in a :class:`~imdiff.params.ParamSet`.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = ["MLP", "SirenNet", "HyperNet", "Projector", "CNF", "hypernet_forward",
           "cnf_eval", "time_conditioned_field", "encode_time"]

_ACTS = {"tanh": T.tanh, "relu": T.relu, "softplus": T.softplus, None: None}


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 1:
        return T.reshape(x, (1, x.shape[0])), True
    return x, False


class MLP:
    """Dense network; each layer stores ``W`` (in x out, row-major) then ``b``."""

    def __init__(self, sizes: Sequence[int], hidden_act: str | None = "tanh",
                 out_act: str | None = None):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.hidden_act = hidden_act
        self.out_act = out_act

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    @property
    def num_params(self) -> int:
        return sum(a * b + b for a, b in zip(self.sizes[:-1], self.sizes[1:]))

    def _layers(self, params: Tensor):
        off = 0
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            W = T.reshape(T.getitem(params, slice(off, off + a * b)), (a, b))
            off += a * b
            bias = T.getitem(params, slice(off, off + b))
            off += b
            yield W, bias

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        out = []
        for a, b in zip(self.sizes[:-1], self.sizes[1:]):
            lim = np.sqrt(6.0 / (a + b))
            out.append(rng.uniform(-lim, lim, a * b))
            out.append(np.zeros(b))
        return np.concatenate(out)

    def apply(self, params, x) -> Tensor:
        params, x = _t(params), _t(x)
        if params.shape != (self.num_params,):
            raise ValueError(f"MLP expects {self.num_params} parameters, got {params.shape}")
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"MLP input has dimension {x.shape[-1]}, expected {self.in_dim}")
        z, squeeze = _as_batch(x)
        layers = list(self._layers(params))
        for li, (W, b) in enumerate(layers):
            z = T.matmul(z, W) + b
            act = _ACTS[self.out_act if li == len(layers) - 1 else self.hidden_act]
            if act is not None:
                z = act(z)
        return T.reshape(z, (self.out_dim,)) if squeeze else z


class HyperNet(MLP):
    """Condition vector ``c`` -> latent code ``h``; tanh hidden layers, linear output."""

    def __init__(self, cond_dim: int, latent_dim: int, hidden: Sequence[int] = (64, 64)):
        super().__init__((cond_dim, *hidden, latent_dim), hidden_act="tanh", out_act=None)

    @property
    def latent_dim(self) -> int:
        return self.out_dim


def hypernet_forward(net: HyperNet, params, c) -> Tensor:
    c = _t(c)
    if c.shape != (net.in_dim,):
        raise ValueError(f"condition has shape {c.shape}, expected ({net.in_dim},)")
    return net.apply(params, c)


class SirenNet:
    """Coordinate network with sine activations.

    First layer: ``sin(omega0 (x W + b))``; later hidden layers
    ``sin(omega_hidden (z W + b))``; final layer affine.
    """

    def __init__(self, in_dim: int = 2, hidden: Sequence[int] = (32, 32), out_dim: int = 1,
                 omega0: float = 30.0, omega_hidden: float = 1.0):
        if not hidden:
            raise ValueError("SIREN needs at least one hidden layer")
        self.sizes = (int(in_dim), *(int(h) for h in hidden), int(out_dim))
        self.omega0 = float(omega0)
        self.omega_hidden = float(omega_hidden)
        self._mlp = MLP(self.sizes, None, None)

    @property
    def num_params(self) -> int:
        return self._mlp.num_params

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def init_bounds(self) -> np.ndarray:
        """Half-widths of the uniform SIREN initialisation, one per parameter."""
        out = []
        for li, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            w = 1.0 / a if li == 0 else np.sqrt(6.0 / a) / self.omega_hidden
            out.append(np.full(a * b, w))
            out.append(np.full(b, 1.0 / np.sqrt(a)))
        return np.concatenate(out)

    def init(self, rng: np.random.Generator) -> np.ndarray:
        bounds = self.init_bounds()
        return rng.uniform(-bounds, bounds)

    def first_preactivation(self, theta_b, x) -> Tensor:
        """``omega0 (x W1 + b1)``, exposed so the frequency scaling can be checked."""
        z, _ = _as_batch(_t(x))
        W, b = next(self._mlp._layers(_t(theta_b)))
        return self.omega0 * (T.matmul(z, W) + b)

    def apply(self, theta_b, x) -> Tensor:
        theta_b, x = _t(theta_b), _t(x)
        if theta_b.shape != (self.num_params,):
            raise ValueError(f"SIREN expects {self.num_params} parameters, got {theta_b.shape}")
        z, squeeze = _as_batch(x)
        layers = list(self._mlp._layers(theta_b))
        for li, (W, b) in enumerate(layers):
            pre = T.matmul(z, W) + b
            if li == len(layers) - 1:
                z = pre
            else:
                z = T.sin((self.omega0 if li == 0 else self.omega_hidden) * pre)
        return T.reshape(z, (self.out_dim,)) if squeeze else z


class Projector:
    """``theta_b = W_proj h`` with ``W_proj`` of shape (d_theta_b, d_latent)."""

    def __init__(self, out_dim: int, latent_dim: int):
        self.out_dim, self.latent_dim = int(out_dim), int(latent_dim)

    @property
    def num_params(self) -> int:
        return self.out_dim * self.latent_dim

    def apply(self, W_flat, h) -> Tensor:
        W = T.reshape(_t(W_flat), (self.out_dim, self.latent_dim))
        return T.matvec(W, _t(h))


def encode_time(t: float, horizon: float) -> np.ndarray:
    """Condition vector for time-varying fields: (sin 2pi t/T, cos 2pi t/T, t/T)."""
    s = t / horizon
    return np.array([np.sin(2 * np.pi * s), np.cos(2 * np.pi * s), s])


class CNF:
    """Conditional neural field producing ``out_dim`` values per coordinate.

    ``mode="steady"`` uses a learned constant condition of length 4;
    ``mode="dynamic"`` conditions on :func:`encode_time`.  Output is
    ``gain * siren + offset``, or ``scale * softplus(gain * siren + offset)``
    when ``positive``.  Parameter segments are prefixed with ``name``.
    """

    def __init__(self, name: str = "cnf", out_dim: int = 1, mode: str = "steady",
                 horizon: float = 1.0, latent_dim: int = 16,
                 hyper_hidden: Sequence[int] = (64, 64), siren_hidden: Sequence[int] = (32, 32),
                 omega0: float = 30.0, in_dim: int = 2, positive: bool = False,
                 scale: float = 1.0, gain_init: float = 1.0):
        if mode not in ("steady", "dynamic"):
            raise ValueError(f"unknown field mode {mode!r}")
        self.name, self.mode, self.horizon = name, mode, float(horizon)
        self.cond_dim = 4 if mode == "steady" else 3
        self.hyper = HyperNet(self.cond_dim, latent_dim, hyper_hidden)
        self.siren = SirenNet(in_dim, siren_hidden, out_dim, omega0)
        self.proj = Projector(self.siren.num_params, latent_dim)
        self.positive, self.scale, self.gain_init = positive, float(scale), float(gain_init)

    @property
    def out_dim(self) -> int:
        return self.siren.out_dim

    def segments(self) -> list[tuple[str, int, bool]]:
        segs = [(f"{self.name}.hypernet", self.hyper.num_params, True),
                (f"{self.name}.projector", self.proj.num_params, True),
                (f"{self.name}.affine", 2 * self.out_dim, True)]
        if self.mode == "steady":
            segs.append((f"{self.name}.cond", self.cond_dim, True))
        return segs

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Initial values per segment.

        The projector rows are drawn so that, at the initial condition
        vector(s), ``theta_b`` has the per-parameter spread of a SIREN
        initialisation.
        """
        vals = {f"{self.name}.hypernet": self.hyper.init(rng)}
        if self.mode == "steady":
            c0 = rng.uniform(-1.0, 1.0, self.cond_dim)
            vals[f"{self.name}.cond"] = c0
            conds = [c0]
        else:
            conds = [encode_time(t, self.horizon) for t in np.linspace(0, self.horizon, 5)]
        hs = np.array([self.hyper.apply(vals[f"{self.name}.hypernet"], c).data for c in conds])
        h_rms2 = float(np.sum(np.mean(hs ** 2, axis=0)))
        std = self.siren.init_bounds() / np.sqrt(3.0)
        W = rng.standard_normal((self.proj.out_dim, self.proj.latent_dim))
        vals[f"{self.name}.projector"] = (W * (std / np.sqrt(max(h_rms2, 1e-12)))[:, None]).reshape(-1)
        gain = np.full(self.out_dim, self.gain_init)
        offset = np.full(self.out_dim, np.log(np.expm1(1.0)) if self.positive else 0.0)
        vals[f"{self.name}.affine"] = np.concatenate([gain, offset])
        return vals

    def condition(self, p: Callable[[str], Tensor], t: float) -> Tensor:
        if self.mode == "steady":
            return p(f"{self.name}.cond")
        return Tensor(encode_time(t, self.horizon))

    def theta_b(self, p: Callable[[str], Tensor], c) -> Tensor:
        h = hypernet_forward(self.hyper, p(f"{self.name}.hypernet"), c)
        return self.proj.apply(p(f"{self.name}.projector"), h)

    def apply(self, p: Callable[[str], Tensor], x, c) -> Tensor:
        raw = self.siren.apply(self.theta_b(p, c), x)
        aff = p(f"{self.name}.affine")
        gain = T.getitem(aff, slice(0, self.out_dim))
        offset = T.getitem(aff, slice(self.out_dim, 2 * self.out_dim))
        out = raw * gain + offset
        if self.positive:
            out = self.scale * T.softplus(out)
        return out


def cnf_eval(cnf: CNF, p: Callable[[str], Tensor], x, c) -> Tensor:
    """Field values at coordinates ``x`` (rows, normalised to [-1, 1]) for condition ``c``."""
    return cnf.apply(p, x, c)


def time_conditioned_field(x, t: float, cnf: CNF, p: Callable[[str], Tensor]) -> Tensor:
    """Steady fields ignore ``t``; dynamic fields condition on :func:`encode_time`."""
    return cnf.apply(p, x, cnf.condition(p, t))
