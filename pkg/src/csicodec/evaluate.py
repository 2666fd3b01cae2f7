"""Held-out evaluation through the real quantiser and range coder."""

from __future__ import annotations

import warnings

import numpy as np

from .codec import CsiCodec, MultiUserCsiCodec, quantize
from .metrics import EvalResult, ZeroNormError, nmse, rho, to_db
from .rangecoder import Bitstream

# every stream also carries the rate-distortion weight index
LAMBDA_BITS = 16


def stream_bits(stream: Bitstream) -> int:
    """Feedback bits charged to one stream: coded payload plus the 16-bit
    lambda field. The remaining container fields (magic, version, model id,
    shape) are fixed per deployment and not counted."""
    return stream.payload_bits + LAMBDA_BITS


def estimated_bits(model, latent: np.ndarray, user: int = 0) -> float:
    """Model cross-entropy of the quantised latent ``(C, h, w)`` in bits."""
    if not model.config.entropy_coding:
        return 32.0 * latent.size
    density = model.densities[user] if isinstance(model, MultiUserCsiCodec) else model.density
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return float(density.bits(quantize(latent)[None]).data[0])


def _safe_rho(h: np.ndarray, rec: np.ndarray) -> float:
    """Correlation is undefined when a decoded row is all zero (typical of
    untrained models); report NaN rather than failing the evaluation."""
    try:
        return rho(h, rec)
    except ZeroNormError as exc:
        warnings.warn(f"rho undefined: {exc}", RuntimeWarning, stacklevel=3)
        return float("nan")


def evaluate_single(model: CsiCodec, h: np.ndarray) -> EvalResult:
    """Compress and decompress every matrix of ``h`` ``(n, N_c, N_t)`` one
    at a time through serialised bitstreams."""
    h = np.asarray(h)
    model.tables  # freeze if needed
    entries = h.shape[-2] * h.shape[-1]
    rec = np.empty(h.shape, dtype=np.complex128)
    bits = est = 0.0
    for i, sample in enumerate(h):
        stream = model.compress(sample)
        bits += stream_bits(stream)
        est += estimated_bits(model, model.encode_features(sample))
        rec[i] = model.decompress(Bitstream.from_bytes(stream.to_bytes()))
    lin, db = nmse(h, rec)
    n = len(h)
    return EvalResult(bits / (n * entries), est / (n * entries), lin, db, _safe_rho(h, rec), n)


def evaluate_distributed(model: MultiUserCsiCodec, h: np.ndarray) -> EvalResult:
    """``h`` has shape ``(K, n, N_c, N_t)``; scene ``i`` of every user is
    decoded jointly. Aggregates average the users."""
    h = np.asarray(h)
    k, n = h.shape[:2]
    if k != model.n_users:
        raise ValueError(f"model serves {model.n_users} users, data has {k}")
    model.tables
    entries = h.shape[-2] * h.shape[-1]
    rec = np.empty(h.shape, dtype=np.complex128)
    bits = np.zeros(k)
    est = np.zeros(k)
    for i in range(n):
        streams = []
        for u in range(k):
            s = model.compress(h[u, i], u)
            bits[u] += stream_bits(s)
            est[u] += estimated_bits(model, model.encode_features(h[u, i], u), u)
            streams.append(Bitstream.from_bytes(s.to_bytes()))
        for u, r in enumerate(model.decompress(streams)):
            rec[u, i] = r
    users = []
    for u in range(k):
        lin, db = nmse(h[u], rec[u])
        users.append(EvalResult(bits[u] / (n * entries), est[u] / (n * entries), lin, db, _safe_rho(h[u], rec[u]), n))
    lin = float(np.mean([u.nmse for u in users]))
    return EvalResult(
        float(np.mean([u.rate for u in users])),
        float(np.mean([u.entropy for u in users])),
        lin,
        to_db(lin),
        float(np.mean([u.rho for u in users])),
        n,
        per_user=users,
    )


def evaluate(model, h: np.ndarray) -> EvalResult:
    if isinstance(model, MultiUserCsiCodec):
        return evaluate_distributed(model, h)
    return evaluate_single(model, h)
