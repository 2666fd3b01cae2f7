"""Reconstruction quality of channel matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DB_FLOOR = -100.0


class ZeroNormError(ValueError):
    pass


def to_db(linear: float) -> float:
    """``10 log10``, clamped at -100 dB (so exact matches stay finite)."""
    if linear <= 0:
        return DB_FLOOR
    return max(10.0 * math.log10(linear), DB_FLOOR)


def _batch(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h)
    return h[None] if h.ndim == 2 else h


def nmse_per_sample(h, h_hat) -> np.ndarray:
    h, h_hat = _batch(h), _batch(h_hat)
    if h.shape != h_hat.shape:
        raise ValueError(f"shape mismatch {h.shape} vs {h_hat.shape}")
    ref = np.sum(np.abs(h) ** 2, axis=(-2, -1))
    bad = np.flatnonzero(ref == 0)
    if bad.size:
        raise ZeroNormError(f"reference matrix {int(bad[0])} has zero norm")
    return np.sum(np.abs(h - h_hat) ** 2, axis=(-2, -1)) / ref


def nmse(h, h_hat) -> tuple[float, float]:
    """Mean of per-sample ``||H - H_hat||^2 / ||H||^2`` as (linear, dB)."""
    lin = float(np.mean(nmse_per_sample(h, h_hat)))
    return lin, to_db(lin)


def rho_per_sample(h, h_hat) -> np.ndarray:
    h, h_hat = _batch(h), _batch(h_hat)
    if h.shape != h_hat.shape:
        raise ValueError(f"shape mismatch {h.shape} vs {h_hat.shape}")
    nh = np.linalg.norm(h, axis=-1)
    nr = np.linalg.norm(h_hat, axis=-1)
    for name, norms in (("reference", nh), ("reconstruction", nr)):
        zero = np.argwhere(norms == 0)
        if zero.size:
            s, row = (int(v) for v in zero[0])
            raise ZeroNormError(f"{name} sample {s} has a zero row at subcarrier {row}")
    inner = np.abs(np.sum(np.conj(h_hat) * h, axis=-1))
    return np.mean(inner / (nh * nr), axis=-1)


def rho(h, h_hat) -> float:
    """Cosine correlation: per-subcarrier ``|h_hat^H h| / (|h_hat| |h|)``
    averaged over subcarriers and then over samples."""
    return float(np.mean(rho_per_sample(h, h_hat)))


@dataclass
class EvalResult:
    rate: float  # measured bits per CSI entry
    entropy: float  # model estimate, bits per CSI entry
    nmse: float  # linear
    nmse_db: float
    rho: float
    n_samples: int
    per_user: list["EvalResult"] | None = None

    def to_dict(self) -> dict:
        out = {
            "rate": self.rate,
            "entropy": self.entropy,
            "nmse": self.nmse,
            "nmse_db": self.nmse_db,
            "rho": self.rho,
            "n_samples": self.n_samples,
        }
        if self.per_user is not None:
            out["per_user"] = [u.to_dict() for u in self.per_user]
        return out
