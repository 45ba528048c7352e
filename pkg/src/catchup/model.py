"""Multi-head velocity network, reparameterized noise encoder and EMA shadow."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import tensor as T
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import Tensor

LOGVAR_LIMIT = 30.0


def dynamic_skip_weight(t, c_skip: float):
    """Gain applied to the identity branch of a dynamic skip block.

    The residual branch receives ``2 - w`` so the two gains always sum to 2;
    ``t = 0.5`` gives the vanilla residual block for any ``c_skip``.
    """
    return 2.0 * (1.0 - (t * (1.0 - 2.0 * c_skip) + c_skip))


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = (1000.0 * t)[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((t.shape[0], 1))], axis=1)
    return emb


class ResBlock(Module):
    def __init__(self, width: int, rng: np.random.Generator):
        self.norm = LayerNorm(width)
        self.fc1 = Linear(width, width, rng)
        self.time_proj = Linear(width, width, rng)
        self.fc2 = Linear(width, width, rng)

    def branch(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.fc1(T.silu(self.norm(x))) + self.time_proj(temb)
        return self.fc2(T.silu(h))

    def __call__(self, x: Tensor, temb: Tensor, skip_gain: Optional[np.ndarray]) -> Tensor:
        m = self.branch(x, temb)
        if skip_gain is None:
            return x + m
        return T.row_scale(x, skip_gain) + T.row_scale(m, 2.0 - skip_gain)


class Head(Module):
    """Norm -> SiLU -> Linear projection back to data space."""

    def __init__(self, width: int, dim: int, rng: np.random.Generator, zero: bool = False):
        self.norm = LayerNorm(width)
        self.out = Linear(width, dim, rng, zero=zero)

    def __call__(self, h: Tensor) -> Tensor:
        return self.out(T.silu(self.norm(h)))


class VelocityNet(Module):
    """Shared residual MLP trunk with ``n_heads`` output heads.

    Head 1 is the canonical velocity; heads 2.. serve the extra alignment
    targets of the multi-step schemes. ``c_skip=None`` disables the dynamic
    skip gains (plain residual blocks).
    """

    def __init__(self, dim: int, width: int = 128, n_blocks: int = 4, temb_dim: int = 64,
                 n_heads: int = 1, c_skip: Optional[float] = 0.75, epsilon: float = 1e-5,
                 rng: Optional[np.random.Generator] = None, zero_heads: bool = False):
        if n_heads not in (1, 2, 3):
            raise ValueError(f"n_heads must be 1, 2 or 3, got {n_heads}")
        if c_skip is not None and not 0.0 <= c_skip <= 1.0:
            raise ValueError(f"c_skip must lie in [0, 1], got {c_skip}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.width = width
        self.temb_dim = temb_dim
        self.c_skip = c_skip
        self.epsilon = epsilon
        self.inp = Linear(dim, width, rng)
        self.time_mlp = MLP([temb_dim, width, width], rng)
        self.blocks = [ResBlock(width, rng) for _ in range(n_blocks)]
        self.heads = [Head(width, dim, rng, zero=zero_heads) for _ in range(n_heads)]

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def _times(self, t, batch: int) -> np.ndarray:
        t = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64).reshape(-1)
        if t.shape[0] == 1 and batch != 1:
            t = np.full(batch, t[0])
        if t.shape[0] != batch:
            raise T.ShapeError(f"{t.shape[0]} times for a batch of {batch}")
        return np.clip(t, self.epsilon, 1.0)

    def trunk(self, x, t) -> Tensor:
        x = T.as_tensor(x)
        tt = self._times(t, x.shape[0])
        temb = T.silu(self.time_mlp(Tensor(sinusoidal_embedding(tt, self.temb_dim))))
        gain = None if self.c_skip is None else dynamic_skip_weight(tt, self.c_skip)
        h = self.inp(x)
        for block in self.blocks:
            h = block(h, temb, gain)
        return h

    def forward(self, x, t, n_out: Optional[int] = None) -> list[Tensor]:
        h = self.trunk(x, t)
        heads = self.heads if n_out is None else self.heads[:n_out]
        return [head(h) for head in heads]

    __call__ = forward

    def velocity(self, x, t) -> np.ndarray:
        """Head-1 output as a plain array, never recorded on a tape."""
        with T.no_grad():
            return self.forward(x, t, n_out=1)[0].data

    def config(self) -> dict:
        return {
            "dim": self.dim, "width": self.width, "n_blocks": self.n_blocks,
            "temb_dim": self.temb_dim, "n_heads": self.n_heads,
            "c_skip": self.c_skip, "epsilon": self.epsilon,
        }


class NoiseEncoder(Module):
    """Gaussian encoder q(x1 | x0) regularized toward the standard normal.

    Output layers start at zero, so an untrained encoder equals the prior.
    """

    def __init__(self, dim: int, width: int = 64, beta: float = 20.0,
                 rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.width = width
        self.beta = beta
        self.mean_net = MLP([dim, width, width, dim], rng, zero_last=True)
        self.logvar_net = MLP([dim, width, width, dim], rng, zero_last=True)

    def __call__(self, x0) -> tuple[Tensor, Tensor]:
        x0 = T.as_tensor(x0)
        return self.mean_net(x0), self.logvar_net(x0)

    def config(self) -> dict:
        return {"dim": self.dim, "width": self.width, "beta": self.beta}


def encode_noise(enc: NoiseEncoder, x0, rng: np.random.Generator,
                 xi: Optional[np.ndarray] = None) -> tuple[Tensor, Tensor]:
    """Draw correlated noise for ``x0`` and the batch-mean KL to N(0, I).

    ``xi`` overrides the standard-normal draw (used by tests and oracles).
    """
    x0 = T.as_tensor(x0)
    mu, logvar = enc(x0)
    if np.max(np.abs(logvar.data), initial=0.0) > LOGVAR_LIMIT:
        raise FloatingPointError(
            f"encoder log-variance magnitude exceeds {LOGVAR_LIMIT}"
        )
    if xi is None:
        xi = rng.standard_normal(x0.shape)
    std = T.exp(T.scale(logvar, 0.5))
    x1 = mu + std * Tensor(xi)
    terms = mu * mu + T.exp(logvar) - logvar - 1.0
    kl = T.scale(T.sum(terms), 0.5 / x0.shape[0])
    return x1, kl


class EmaState:
    """Exponential moving average of a :class:`VelocityNet`.

    The shadow is kept as a full network copy so it can be evaluated as a
    teacher directly.
    """

    def __init__(self, net: VelocityNet, decay: float = 0.9999, start_step: int = 1):
        self.model = net.copy()
        self.decay = decay
        self.start_step = start_step

    @property
    def shadow(self) -> dict[str, np.ndarray]:
        return self.model.state_dict()

    def update(self, net: VelocityNet, step: int) -> "EmaState":
        if step < 0:
            raise ValueError("step must be non-negative")
        live = dict(net.named_parameters())
        for name, p in self.model.named_parameters():
            q = live.get(name)
            if q is None or q.shape != p.shape:
                raise T.ShapeError(f"EMA shadow/live mismatch at {name}")
            if step < self.start_step:
                p.data[...] = q.data
            else:
                p.data[...] = self.decay * p.data + (1.0 - self.decay) * q.data
        return self


def ema_update(ema: EmaState, net: VelocityNet, step: int) -> EmaState:
    return ema.update(net, step)


def velocity_net_from_state(state: dict[str, np.ndarray], prefix: str = "net.") -> VelocityNet:
    """Rebuild a network whose architecture is implied by tensor names/shapes."""
    params = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    meta = {k[len("meta."):]: float(v) for k, v in state.items() if k.startswith("meta.")}
    dim, width = params["inp.weight"].shape
    temb_dim = params["time_mlp.layers.0.weight"].shape[0]
    n_blocks = len({k.split(".")[1] for k in params if k.startswith("blocks.")})
    n_heads = len({k.split(".")[1] for k in params if k.startswith("heads.")})
    c_skip = meta.get("c_skip", -1.0)
    net = VelocityNet(dim, width, n_blocks, temb_dim, n_heads,
                      None if c_skip < 0 else c_skip, meta.get("epsilon", 1e-5))
    net.load_state_dict(params)
    return net


def noise_encoder_from_state(state: dict[str, np.ndarray], prefix: str = "enc.") -> Optional[NoiseEncoder]:
    params = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
    if not params:
        return None
    meta = {k[len("meta."):]: float(v) for k, v in state.items() if k.startswith("meta.")}
    dim, width = params["mean_net.layers.0.weight"].shape
    enc = NoiseEncoder(dim, width, meta.get("kl_beta", 20.0))
    enc.load_state_dict(params)
    return enc


def model_state(net: VelocityNet, enc: Optional[NoiseEncoder] = None,
                ema: Optional[EmaState] = None, extra: Optional[dict] = None) -> dict[str, np.ndarray]:
    """Flat name -> array mapping suitable for checkpointing."""
    state = {f"net.{k}": v for k, v in net.state_dict().items()}
    if enc is not None:
        state.update({f"enc.{k}": v for k, v in enc.state_dict().items()})
        state["meta.kl_beta"] = np.asarray(enc.beta)
    if ema is not None:
        state.update({f"ema.{k}": v for k, v in ema.shadow.items()})
        state["meta.ema_decay"] = np.asarray(ema.decay)
    state["meta.c_skip"] = np.asarray(-1.0 if net.c_skip is None else net.c_skip)
    state["meta.epsilon"] = np.asarray(net.epsilon)
    for k, v in (extra or {}).items():
        state[f"meta.{k}"] = np.asarray(v, dtype=np.float64)
    return state

