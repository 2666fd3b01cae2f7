"""Rate-distortion training of single-user and multi-user codecs."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import Adam, Tensor
from .autograd import functional as F
from .channel import normalization_scale
from .codec import CodecConfig, CsiCodec, MultiUserCsiCodec, ModelMeta, add_noise, split_complex
from .evaluate import evaluate
from .metrics import EvalResult

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, step: int):
        super().__init__(f"{term} became non-finite at step {step}")
        self.term = term
        self.step = step


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    lam: float = 8.0
    # per-user weights for the joint codec; defaults to ``lam`` for everyone
    lambdas: tuple[float, ...] | None = None
    batch_size: int = 32
    steps: int = 4000
    lr: float = 1e-3
    seed: int = 0
    scheme: str = "from_scratch"  # or "fine_tune"
    fine_tune_steps: int | None = None  # defaults to steps // 10
    train_fraction: float = 0.8
    lambda_code: int = 0
    divergence_factor: float = 1e3
    divergence_patience: int = 100

    def __post_init__(self):
        if self.lambdas is not None:
            self.lambdas = tuple(float(v) for v in self.lambdas)
            if any(not v >= 0 for v in self.lambdas):
                raise ValueError("lambdas must be non-negative")
        if not self.lam >= 0:
            raise ValueError("lambda must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch normalisation needs batch_size >= 2")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.scheme not in ("from_scratch", "fine_tune"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not 0 < self.train_fraction <= 1:
            raise ValueError("train_fraction must lie in (0, 1]")

    @property
    def tuning_steps(self) -> int:
        return self.steps // 10 if self.fine_tune_steps is None else self.fine_tune_steps

    def user_lambdas(self, n_users: int) -> tuple[float, ...]:
        if self.lambdas is None:
            return (self.lam,) * n_users
        if len(self.lambdas) != n_users:
            raise ValueError(f"{len(self.lambdas)} lambdas for {n_users} users")
        return self.lambdas


@dataclass
class StepRecord:
    step: int
    rate: float  # bits per entry, noisy latent
    mse: float
    loss: float


@dataclass
class TrainReport:
    config: dict
    steps: list[StepRecord] = field(default_factory=list)
    final: EvalResult | None = None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "steps": [asdict(s) for s in self.steps],
            "final": None if self.final is None else self.final.to_dict(),
        }


@dataclass
class LossTerms:
    total: Tensor
    rate: Tensor  # bits per CSI entry (summed over users)
    mse: Tensor  # per-entry MSE (mean over users)


def _mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """``||H - H_hat||^2 / (N_c N_t)`` averaged over the batch; the two real
    planes together make up the complex squared error."""
    n, _, h, w = target.shape
    return F.mul(F.sum(F.square(F.sub(pred, target))), 1.0 / (n * h * w))


def _latent(encoder, x: np.ndarray, config: CodecConfig, rng) -> Tensor:
    m = encoder(x)
    return add_noise(m, rng, config.noise) if config.entropy_coding else m


def loss_single(x: np.ndarray, model: CsiCodec, lam: float, rng: np.random.Generator) -> LossTerms:
    """Rate in bits per entry of the noise-relaxed latent plus ``lam`` times
    the reconstruction MSE; ``x`` is a real batch ``(N, 2, N_c, N_t)``."""
    m = _latent(model.encoder, x, model.config, rng)
    n_entries = x.shape[2] * x.shape[3]
    if model.config.entropy_coding:
        rate = model.density.nll_bits(m, n_entries)
    else:
        rate = Tensor(np.array(0.0))
    mse = _mse(model.decoder(m), x)
    return LossTerms(F.add(rate, F.mul(mse, lam)), rate, mse)


def loss_distributed(xs: list[np.ndarray], model: MultiUserCsiCodec, lams, rng: np.random.Generator) -> LossTerms:
    """Sum of every user's rate plus ``sum_k lam_k * MSE_k`` of the joint
    reconstruction; ``xs[k]`` holds user ``k``'s batch, aligned by scene."""
    if len(xs) != model.n_users or len(lams) != model.n_users:
        raise ValueError("need one batch and one lambda per user")
    n_entries = xs[0].shape[2] * xs[0].shape[3]
    latents = [_latent(enc, x, model.config, rng) for enc, x in zip(model.encoders, xs)]
    rate = Tensor(np.array(0.0))
    if model.config.entropy_coding:
        for den, m in zip(model.densities, latents):
            rate = F.add(rate, den.nll_bits(m, n_entries))
    total = rate
    mse_sum = Tensor(np.array(0.0))
    for lam, pred, x in zip(lams, model.decoder(latents), xs):
        mse = _mse(pred, x)
        total = F.add(total, F.mul(mse, lam))
        mse_sum = F.add(mse_sum, mse)
    return LossTerms(total, rate, F.mul(mse_sum, 1.0 / model.n_users))


def split_indices(n: int, fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """First ``fraction`` of the samples train, the rest are held out."""
    cut = int(round(n * fraction))
    idx = np.arange(n)
    return idx[:cut], idx[cut:]


def _check_finite(terms: LossTerms, step: int) -> None:
    for name in ("rate", "mse", "total"):
        if not np.all(np.isfinite(getattr(terms, name).data)):
            raise NonFiniteLossError(name, step)


def _run(model, batches, loss_fn, steps: int, config: TrainConfig, report: TrainReport) -> None:
    opt = Adam(model.parameters(), lr=config.lr)
    noise_rng = np.random.default_rng([config.seed, 2])
    model.train()
    model._tables = None
    initial = None
    bad = 0
    for step in range(steps):
        terms = loss_fn(next(batches), noise_rng)
        _check_finite(terms, step)
        opt.zero_grad()
        terms.total.backward()
        opt.step()
        loss = float(terms.total.data)
        report.steps.append(StepRecord(step, float(terms.rate.data), float(terms.mse.data), loss))
        if initial is None:
            initial = abs(loss)
        bad = bad + 1 if abs(loss) > config.divergence_factor * max(initial, 1e-12) else 0
        if bad >= config.divergence_patience:
            raise TrainingDiverged(
                f"loss stayed above {config.divergence_factor:g}x its initial value for {bad} steps", report
            )
        if step % 500 == 0:
            log.info("step %d loss %.5f rate %.4f mse %.5f", step, loss, report.steps[-1].rate, report.steps[-1].mse)


def _batches(n: int, batch_size: int, seed: int):
    """Endless shuffled mini-batches of indices, reshuffled every epoch."""
    rng = np.random.default_rng([seed, 1])
    batch_size = min(batch_size, n)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            yield np.sort(perm[start : start + batch_size])


def train(data: np.ndarray, config: TrainConfig, codec_config: CodecConfig | None = None,
          model: CsiCodec | None = None, steps: int | None = None) -> tuple[CsiCodec, TrainReport]:
    """Train a single-user codec on complex CSI ``(n, N_c, N_t)``.

    The first ``train_fraction`` of ``data`` is used for training and the
    rest for the held-out metrics in the report. Passing ``model`` continues
    training it (its input scale is kept).
    """
    data = np.asarray(data)
    tr, te = split_indices(len(data), config.train_fraction)
    if len(tr) < 2:
        raise ValueError("need at least two training samples")
    if model is None:
        model = CsiCodec(codec_config or CodecConfig(), seed=config.seed)
        model.meta.input_scale = normalization_scale(data[tr])
    model.meta.lam = config.lam
    model.meta.lambda_code = config.lambda_code
    x_all = split_complex(data[tr] * model.meta.input_scale)
    idx = _batches(len(tr), config.batch_size, config.seed)
    batches = (x_all[i] for i in idx)
    report = TrainReport(asdict(config))
    _run(model, batches, lambda x, rng: loss_single(x, model, config.lam, rng),
         config.steps if steps is None else steps, config, report)
    model.freeze()
    if len(te):
        report.final = evaluate(model, data[te])
    return model, report


def _train_joint(model: MultiUserCsiCodec, data: np.ndarray, config: TrainConfig,
                 steps: int) -> tuple[MultiUserCsiCodec, TrainReport]:
    k = model.n_users
    if data.shape[0] != k:
        raise ValueError(f"data has {data.shape[0]} users, model serves {k}")
    lams = config.user_lambdas(k)
    tr, te = split_indices(data.shape[1], config.train_fraction)
    if len(tr) < 2:
        raise ValueError("need at least two training scenes")
    model.meta.lam = float(np.mean(lams))
    model.meta.lambda_code = config.lambda_code
    x_all = [split_complex(data[u, tr] * model.meta.input_scale) for u in range(k)]
    idx = _batches(len(tr), config.batch_size, config.seed)
    batches = ([x[i] for x in x_all] for i in idx)
    report = TrainReport(asdict(config))
    _run(model, batches, lambda xs, rng: loss_distributed(xs, model, lams, rng), steps, config, report)
    model.freeze()
    if len(te):
        report.final = evaluate(model, data[:, te])
    return model, report


def train_distributed(data: np.ndarray, config: TrainConfig,
                      codec_config: CodecConfig | None = None) -> tuple[MultiUserCsiCodec, TrainReport]:
    """Train the joint codec from scratch on ``(K, n, N_c, N_t)`` CSI."""
    data = np.asarray(data)
    model = MultiUserCsiCodec(codec_config or CodecConfig(), data.shape[0], seed=config.seed)
    tr, _ = split_indices(data.shape[1], config.train_fraction)
    model.meta.input_scale = normalization_scale(data[:, tr])
    return _train_joint(model, data, config, config.steps)


def fine_tune(source: CsiCodec, data: np.ndarray, config: TrainConfig) -> tuple[MultiUserCsiCodec, TrainReport]:
    """Start every user's encoder, density and decoder branch from ``source``
    with zero combining kernels, then train all parameters for
    ``config.tuning_steps`` steps."""
    data = np.asarray(data)
    model = MultiUserCsiCodec.from_single(source, data.shape[0])
    return _train_joint(model, data, config, config.tuning_steps)


@dataclass
class SweepPoint:
    lam: float
    rate: float
    entropy: float
    nmse_db: float
    rho: float


def rd_sweep(data: np.ndarray, lambdas, config: TrainConfig,
             codec_config: CodecConfig | None = None) -> list[tuple[SweepPoint, CsiCodec, TrainReport]]:
    """One model per lambda, sorted by lambda. Lambda codes index the sorted
    list."""
    lambdas = sorted(float(v) for v in lambdas)
    if not lambdas:
        raise ValueError("need at least one lambda")
    out = []
    for code, lam in enumerate(lambdas):
        cfg = TrainConfig(**{**asdict(config), "lam": lam, "lambda_code": code})
        model, report = train(data, cfg, codec_config)
        r = report.final
        out.append((SweepPoint(lam, r.rate, r.entropy, r.nmse_db, r.rho), model, report))
    return out


def interpolate_nmse_db(points: list[SweepPoint], rate: float) -> float:
    """NMSE (dB) of a rate-distortion curve at ``rate`` by linear
    interpolation between neighbouring points (sorted by rate)."""
    pts = sorted(points, key=lambda p: p.rate)
    if not pts[0].rate <= rate <= pts[-1].rate:
        return math.nan
    rates = [p.rate for p in pts]
    return float(np.interp(rate, rates, [p.nmse_db for p in pts]))
