"""Learned factorized density of the latent tensor.

Each latent channel has its own monotone scalar CDF, a composition of small
affine maps with positive weights and bounded-slope nonlinearities followed
by a final sigmoid. The same parameters give

* the likelihood of noise-relaxed latents, ``cdf(x + 1/2) - cdf(x - 1/2)``,
  used as a differentiable rate during training, and
* fixed-point PMF tables for the range coder at test time.
"""

from __future__ import annotations

import logging
import math
import warnings

import numpy as np

from .autograd import Module, Parameter, Tensor
from .autograd import functional as F
from .rangecoder import TOTAL, ChannelTable, PmfTable

log = logging.getLogger(__name__)

LIKELIHOOD_FLOOR = 2.0 ** -64
TAIL_MASS = 1e-6


class SupportOverflowError(ValueError):
    """The PMF support needed to cover the density exceeds the allowed width."""


class FactorizedDensity(Module):
    """Per-channel learned CDF.

    ``hidden`` lists the widths between stages; the default ``(3, 3, 3)``
    gives four stages ``1 -> 3 -> 3 -> 3 -> 1``.
    """

    def __init__(self, channels: int, hidden: tuple[int, ...] = (3, 3, 3),
                 init_scale: float = 10.0, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.hidden = tuple(hidden)
        dims = (1, *self.hidden, 1)
        scale = init_scale ** (1.0 / (len(dims) - 1))
        self.matrices: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.factors: list[Tensor] = []
        for k in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[k + 1]))
            self.matrices.append(Parameter(np.full((channels, dims[k + 1], dims[k]), init)))
            self.biases.append(Parameter(rng.uniform(-0.5, 0.5, (channels, dims[k + 1], 1))))
            if k < len(dims) - 2:
                self.factors.append(Parameter(np.zeros((channels, dims[k + 1], 1))))

    # the parameter lists are not Modules, so expose them by hand
    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for k, m in enumerate(self.matrices):
            out[f"{prefix}matrices.{k}"] = m
        for k, b in enumerate(self.biases):
            out[f"{prefix}biases.{k}"] = b
        for k, a in enumerate(self.factors):
            out[f"{prefix}factors.{k}"] = a
        return out

    @property
    def n_stages(self) -> int:
        return len(self.matrices)

    def logits(self, x) -> Tensor:
        """CDF logits for ``x`` of shape ``(C, 1, M)``."""
        h = x
        for k in range(self.n_stages):
            h = F.add(F.matmul(F.softplus(self.matrices[k]), h), self.biases[k])
            if k < len(self.factors):
                h = F.add(h, F.mul(F.tanh(self.factors[k]), F.tanh(h)))
        return h

    # -- array helpers (no graph) -----------------------------------------
    def _logits_array(self, x: np.ndarray) -> np.ndarray:
        """Logits for ``x`` of shape ``(C, M)``."""
        return self.logits(Tensor(np.asarray(x, dtype=np.float64)[:, None, :])).data[:, 0, :]

    def cdf(self, x: np.ndarray) -> np.ndarray:
        """CDF values for ``x`` of shape ``(C, M)``."""
        return F.sigmoid_array(self._logits_array(x))

    def pdf(self, x: np.ndarray) -> np.ndarray:
        """Density (derivative of the CDF) for ``x`` of shape ``(C, M)``."""
        xt = Tensor(np.asarray(x, dtype=np.float64)[:, None, :], requires_grad=True)
        F.sum(F.sigmoid(self.logits(xt))).backward()
        return xt.grad[:, 0, :]

    # -- rate ------------------------------------------------------------
    def likelihood(self, latent) -> Tensor:
        """Probability mass of the unit bin centred on each latent value.

        ``latent`` has shape ``(N, C, H, W)``; the result has the same shape
        and is floored at 2**-64.
        """
        latent = latent if isinstance(latent, Tensor) else Tensor(latent)
        n, c, h, w = latent.shape
        if c != self.channels:
            raise ValueError(f"latent has {c} channels, density models {self.channels}")
        x = F.reshape(F.transpose(latent, (1, 0, 2, 3)), (c, 1, n * h * w))
        lower = self.logits(F.sub(x, 0.5))
        upper = self.logits(F.add(x, 0.5))
        # evaluate in whichever tail keeps the difference away from 1 - 1
        sign = np.where(lower.data + upper.data > 0, -1.0, 1.0)
        diff = F.sub(F.sigmoid(F.mul(upper, sign)), F.sigmoid(F.mul(lower, sign)))
        lik = F.mul(diff, sign)
        if np.any(lik.data < LIKELIHOOD_FLOOR):
            count = int(np.count_nonzero(lik.data < LIKELIHOOD_FLOOR))
            warnings.warn(f"{count} latent likelihoods below 2^-64 were clamped", RuntimeWarning, stacklevel=2)
        lik = F.lower_bound(lik, LIKELIHOOD_FLOOR)
        return F.transpose(F.reshape(lik, (c, n, h, w)), (1, 0, 2, 3))

    def bits(self, latent) -> Tensor:
        """Total information content in bits of each sample, shape ``(N,)``."""
        lik = self.likelihood(latent)
        return F.neg(F.sum(F.log2(lik), axis=(1, 2, 3)))

    def nll_bits(self, latent, n_entries: int) -> Tensor:
        """Mean over the batch of the latent's bits divided by ``n_entries``
        (the number of CSI entries per sample)."""
        return F.mul(F.mean(self.bits(latent)), 1.0 / n_entries)

    # -- coding tables ---------------------------------------------------
    def quantiles(self, tail: float = TAIL_MASS / 2, limit: float = 1e6) -> tuple[np.ndarray, np.ndarray]:
        """Per-channel points ``lo``, ``hi`` with ``cdf(lo) = tail`` and
        ``1 - cdf(hi) = tail``, found by bisection on the logits."""
        target = math.log(tail) - math.log1p(-tail)
        c = self.channels
        lo = np.full(c, -1.0)
        hi = np.full(c, 1.0)
        # expand brackets until they enclose both tail points
        while True:
            lg_lo = self._logits_array(lo[:, None])[:, 0]
            lg_hi = self._logits_array(hi[:, None])[:, 0]
            need_lo = lg_lo > target
            need_hi = lg_hi < -target
            if not need_lo.any() and not need_hi.any():
                break
            if np.max(np.abs(np.concatenate([lo, hi]))) > limit:
                raise SupportOverflowError("density tails extend beyond the search limit")
            lo[need_lo] *= 2.0
            hi[need_hi] *= 2.0
        out = []
        for goal in (target, -target):
            a, b = lo.copy(), hi.copy()
            for _ in range(80):
                mid = 0.5 * (a + b)
                below = self._logits_array(mid[:, None])[:, 0] < goal
                a = np.where(below, mid, a)
                b = np.where(below, b, mid)
            out.append(0.5 * (a + b))
        return out[0], out[1]

    def pmf(self, n_min: int, n_max: int, channel: int) -> tuple[np.ndarray, float]:
        """Bin masses ``cdf(n + 1/2) - cdf(n - 1/2)`` for ``n_min..n_max`` and
        the remaining tail mass."""
        edges = np.arange(n_min, n_max + 2, dtype=np.float64) - 0.5
        lg = self.logits(Tensor(np.broadcast_to(edges, (self.channels, edges.size))[:, None, :].copy())).data[channel, 0]
        lower, upper = lg[:-1], lg[1:]
        sign = np.where(lower + upper > 0, -1.0, 1.0)
        p = sign * (F.sigmoid_array(sign * upper) - F.sigmoid_array(sign * lower))
        tail = F.sigmoid_array(lg[0]) + F.sigmoid_array(-lg[-1])
        return p, float(tail)

    def discretize(self, max_width: int = 1024, model_id: int = 0) -> PmfTable:
        """Fixed-point coding tables covering at least ``1 - 1e-6`` of each
        channel's mass; the remainder becomes the escape symbol."""
        lo, hi = self.quantiles()
        tables = []
        for ch in range(self.channels):
            n_min = int(math.floor(lo[ch] + 0.5))
            n_max = int(math.ceil(hi[ch] - 0.5))
            width = n_max - n_min + 1
            if width > max_width:
                raise SupportOverflowError(
                    f"channel {ch} needs {width} symbols, max width is {max_width}"
                )
            p, tail = self.pmf(n_min, n_max, ch)
            tables.append(ChannelTable(n_min, quantize_pmf(np.append(p, tail))))
        return PmfTable(tables, model_id=model_id)


def quantize_pmf(p: np.ndarray, total: int = TOTAL) -> np.ndarray:
    """Integer frequencies summing to ``total`` with every entry >= 1.

    Largest-remainder rounding of ``p * total``: each entry ends within one
    unit of its exact scaled mass whenever the floor at 1 leaves room.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.size > total:
        raise SupportOverflowError(f"{p.size} symbols cannot all get nonzero mass out of {total}")
    p = np.clip(p, 0.0, None)
    exact = p / p.sum() * total
    freqs = np.maximum(np.floor(exact).astype(np.int64), 1)
    deficit = total - int(freqs.sum())
    resid = exact - freqs
    if deficit > 0:
        order = np.argsort(-resid, kind="stable")
        freqs[order[:deficit]] += 1
    elif deficit < 0:
        # take single units back from the most over-allocated entries
        order = [i for i in np.argsort(resid, kind="stable") if freqs[i] > 1]
        while deficit < 0 and order:
            for i in list(order):
                freqs[i] -= 1
                deficit += 1
                if freqs[i] == 1:
                    order.remove(i)
                if deficit == 0:
                    break
    return freqs
