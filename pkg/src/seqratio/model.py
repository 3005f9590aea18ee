"""A small recurrent temporal integrator trained with manual backprop.

The cell is h' = tanh(W_in x + W_h h + b) with a linear softmax readout.
Each window X^(t-w+1, t) is processed from a zero state, so the posterior
for a window never sees frames outside it. Windows are computed start-major:
running the cell N+1 steps from every start frame s yields all windows of
length 1..N+1 beginning at s.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_softmax

from .core import (
    POSTERIOR_FLOOR,
    ClassPriorStats,
    InvalidInput,
    NumericalDivergence,
    PosteriorSeries,
    SequenceBatch,
)
from .losses import LLR_LOSSES, llr_grad_to_scores, llr_loss, multiplet
from .tandem import Formula, TandemConfig, scores_adjoint, scores_from_log_posteriors

LOG_FLOOR = float(np.log(POSTERIOR_FLOOR))


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector with named slices W_in, W_h, b, W_out, c."""

    vector: np.ndarray
    d: int
    h: int
    K: int

    def __post_init__(self):
        v = np.array(self.vector, dtype=np.float64)
        if v.shape != (self.size(self.d, self.h, self.K),):
            raise InvalidInput("parameter vector length does not match (d, h, K)")
        v.setflags(write=False)
        object.__setattr__(self, "vector", v)

    @staticmethod
    def layout(d: int, h: int, K: int) -> list[tuple[str, tuple[int, ...]]]:
        return [("W_in", (h, d)), ("W_h", (h, h)), ("b", (h,)), ("W_out", (K, h)), ("c", (K,))]

    @classmethod
    def size(cls, d, h, K) -> int:
        return sum(int(np.prod(s)) for _, s in cls.layout(d, h, K))

    def unpack(self, vec: np.ndarray | None = None) -> dict[str, np.ndarray]:
        vec = self.vector if vec is None else vec
        out, i = {}, 0
        for name, shape in self.layout(self.d, self.h, self.K):
            n = int(np.prod(shape))
            out[name] = vec[i : i + n].reshape(shape)
            i += n
        return out

    @classmethod
    def pack(cls, parts: dict[str, np.ndarray], d, h, K) -> np.ndarray:
        return np.concatenate([np.asarray(parts[n], dtype=np.float64).ravel() for n, _ in cls.layout(d, h, K)])

    @classmethod
    def zeros(cls, d, h, K) -> "ModelParams":
        return cls(np.zeros(cls.size(d, h, K)), d, h, K)

    @classmethod
    def init(cls, d, h, K, seed: int) -> "ModelParams":
        rng = np.random.Generator(np.random.Philox(key=[seed & 0xFFFFFFFFFFFFFFFF, 0xC0FFEE]))
        parts = {
            "W_in": rng.uniform(-1, 1, (h, d)) / np.sqrt(d),
            "W_h": rng.uniform(-1, 1, (h, h)) / np.sqrt(h),
            "b": np.zeros(h),
            "W_out": rng.uniform(-1, 1, (K, h)) / np.sqrt(h),
            "c": np.zeros(K),
        }
        return cls(cls.pack(parts, d, h, K), d, h, K)

    def with_vector(self, vec) -> "ModelParams":
        return ModelParams(vec, self.d, self.h, self.K)


@dataclass(frozen=True)
class TrainConfig:
    order: int = 1
    formula: Formula = Formula.M_TANDEM
    gamma: float = 1.0
    learning_rate: float = 1e-2
    weight_decay: float = 0.0
    batch_size: int = 64
    iterations: int = 500
    seed: int = 0
    hidden: int = 8
    llr_loss: str = "LSEL"
    dre_gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "formula", Formula(self.formula))
        if self.order < 0:
            raise InvalidInput("order must be >= 0")
        if self.learning_rate < 0:
            raise InvalidInput("learning rate must be >= 0")
        if self.iterations < 0:
            raise InvalidInput("iterations must be >= 0")
        if self.gamma < 0:
            raise InvalidInput("loss mix gamma must be >= 0")
        if self.batch_size < 1 or self.hidden < 1:
            raise InvalidInput("batch size and hidden size must be >= 1")
        if self.llr_loss not in LLR_LOSSES:
            raise InvalidInput(f"unknown llr loss {self.llr_loss!r}")

    @property
    def tandem(self) -> TandemConfig:
        return TandemConfig(self.order, self.formula)


def _forward_cache(params: ModelParams, x: np.ndarray, order: int):
    """Run the cell over every window; returns logits (M, T, W, K) and the cache."""
    p = params.unpack()
    M, T, d = x.shape
    if d != params.d:
        raise InvalidInput(f"frame dimension {d} does not match model input {params.d}")
    W = min(order + 1, T)
    logits = np.zeros((M, T, W, params.K))
    hs = [np.zeros((M, T, params.h))]
    for j in range(W):
        n = T - j  # starts 0..T-1-j have a frame at offset j
        a = x[:, j:, :] @ p["W_in"].T + hs[-1][:, :n] @ p["W_h"].T + p["b"]
        h = np.tanh(a)
        hs.append(h)
        logits[:, j:, j, :] = h @ p["W_out"].T + p["c"]
    return logits, hs


def _valid_mask(T: int, W: int) -> np.ndarray:
    t = np.arange(T)[:, None]
    w = np.arange(W)[None, :]
    return w <= t


def forward_batch(params: ModelParams, features: np.ndarray, order: int) -> np.ndarray:
    """Window posteriors for a batch, shape (M, T, W, K); invalid windows are NaN."""
    x = np.asarray(features, dtype=np.float64)
    logits, _ = _forward_cache(params, x, order)
    p = np.exp(log_softmax(logits, axis=-1))
    p[:, ~_valid_mask(x.shape[1], logits.shape[2])] = np.nan
    return p


def forward(params: ModelParams, sequence: np.ndarray, order: int) -> PosteriorSeries:
    seq = np.asarray(sequence, dtype=np.float64)
    if seq.ndim != 2:
        raise InvalidInput("sequence must be T x d")
    return PosteriorSeries(forward_batch(params, seq[None], order)[0])


def predict_llr(params: ModelParams, features: np.ndarray, tandem: TandemConfig) -> np.ndarray:
    """Estimated LLR tensor (M, T, K, K) via the selected tandem formula."""
    x = np.asarray(features, dtype=np.float64)
    logits, _ = _forward_cache(params, x, tandem.order)
    logp = np.maximum(log_softmax(logits, axis=-1), LOG_FLOOR)
    s = scores_from_log_posteriors(logp, tandem)
    return s[..., :, None] - s[..., None, :]


@dataclass
class LossBreakdown:
    total: float
    mult: float
    llr: float


def backward(params: ModelParams, batch: SequenceBatch, cfg: TrainConfig, priors: ClassPriorStats | None = None) -> tuple[LossBreakdown, np.ndarray]:
    """L_total = L_mult + gamma * L_llr and its gradient w.r.t. the flat parameters.

    ``priors`` feeds the prior-ratio losses (modLSEL, modlogistic); when
    omitted they use the class counts of ``batch``.
    """
    x = batch.features
    y = batch.labels
    M, T, _ = x.shape
    p = params.unpack()
    logits, hs = _forward_cache(params, x, cfg.order)
    W = logits.shape[2]
    logp = log_softmax(logits, axis=-1)
    post = np.exp(logp)
    valid = _valid_mask(T, W)

    mult = multiplet(np.where(valid[None, :, :, None], post, np.nan), y, cfg.order)
    d_logits = mult.gradient.copy()

    llr_val = 0.0
    if cfg.gamma > 0:
        clamped = logp > LOG_FLOOR
        logp_c = np.where(clamped, logp, LOG_FLOOR)
        s = scores_from_log_posteriors(logp_c, cfg.tandem)
        lam = s[..., :, None] - s[..., None, :]
        out = llr_loss(cfg.llr_loss, lam, y, gamma=cfg.dre_gamma, priors=priors)
        llr_val = out.value
        g_logp = scores_adjoint(llr_grad_to_scores(out.gradient), cfg.tandem, W)
        with np.errstate(invalid="ignore", over="ignore"):
            g_logp = np.where(clamped, g_logp, 0.0) * cfg.gamma
            d_logits += g_logp - post * g_logp.sum(axis=-1, keepdims=True)

    total = mult.value + cfg.gamma * llr_val
    if not np.isfinite(total) or not np.all(np.isfinite(d_logits)):
        raise NumericalDivergence(f"non-finite loss {total}")

    g = {k: np.zeros_like(v) for k, v in p.items()}
    d_h_next = None
    for j in range(W - 1, -1, -1):
        n = T - j
        h = hs[j + 1]
        dz = d_logits[:, j:, j, :]
        g["W_out"] += np.einsum("mnk,mnh->kh", dz, h)
        g["c"] += dz.sum(axis=(0, 1))
        dh = dz @ p["W_out"]
        if d_h_next is not None:
            dh[:, : n - 1] += d_h_next
        da = dh * (1.0 - h * h)
        g["W_in"] += np.einsum("mnh,mnd->hd", da, x[:, j:, :])
        g["W_h"] += np.einsum("mnh,mng->hg", da, hs[j][:, :n])
        g["b"] += da.sum(axis=(0, 1))
        d_h_next = da @ p["W_h"]
    grad = ModelParams.pack(g, params.d, params.h, params.K)
    return LossBreakdown(total, mult.value, llr_val), grad


@dataclass
class AdamW:
    """Adam moments with weight decay decoupled from the learning rate."""

    learning_rate: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step_count: int = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.step_count += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.step_count)
        v_hat = self.v / (1 - self.beta2**self.step_count)
        return theta * (1.0 - self.weight_decay) - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[LossBreakdown] = field(default_factory=list)


def train(cfg: TrainConfig, data: SequenceBatch, seed: int | None = None, init: ModelParams | None = None) -> TrainResult:
    """Minibatch training; deterministic given the seed.

    Raises NumericalDivergence (carrying the trace so far) when the loss or
    the parameters become non-finite.
    """
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    params = init if init is not None else ModelParams.init(data.d, cfg.hidden, data.K, cfg.seed)
    if (params.d, params.K) != (data.d, data.K):
        raise InvalidInput("initial parameters do not match the data shape")
    rng = np.random.Generator(np.random.Philox(key=[cfg.seed & 0xFFFFFFFFFFFFFFFF, 0xBA7C4]))
    opt = AdamW(cfg.learning_rate, cfg.weight_decay)
    theta = params.vector.copy()
    trace: list[LossBreakdown] = []
    full = cfg.batch_size >= data.M
    priors = ClassPriorStats.from_batch(data) if cfg.llr_loss in ("modLSEL", "modlogistic") else None
    for _ in range(cfg.iterations):
        mb = data if full else data.subset(rng.choice(data.M, cfg.batch_size, replace=False))
        try:
            losses, grad = backward(params.with_vector(theta), mb, cfg, priors)
        except NumericalDivergence as exc:
            raise NumericalDivergence(str(exc), trace, params.with_vector(theta)) from None
        trace.append(losses)
        new = opt.step(theta, grad)
        if not np.all(np.isfinite(new)):
            raise NumericalDivergence("parameters became non-finite", trace, params.with_vector(theta))
        theta = new
    return TrainResult(params.with_vector(theta), trace)


def evaluate_loss(params: ModelParams, batch: SequenceBatch, cfg: TrainConfig) -> LossBreakdown:
    return backward(params, batch, cfg)[0]


# checkpoint: magic "SEQP", u16 version, u32 slice count, then per slice
# (u16 name length, name utf-8, u32 ndim, ndim x u64 dims), then all values
# as float64 little-endian in slice order.
_CKPT_MAGIC = b"SEQP"
_CKPT_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    parts = params.unpack()
    layout = ModelParams.layout(params.d, params.h, params.K)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC + struct.pack("<HI", _CKPT_VERSION, len(layout)))
        for name, shape in layout:
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)) + raw + struct.pack("<I", len(shape)))
            f.write(struct.pack(f"<{len(shape)}Q", *shape))
        for name, _ in layout:
            f.write(np.ascontiguousarray(parts[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _CKPT_MAGIC:
        raise InvalidInput("not a checkpoint file")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != _CKPT_VERSION:
        raise InvalidInput(f"unsupported checkpoint version {version}")
    off = 10
    shapes = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + n].decode()
        off += n
        (nd,) = struct.unpack_from("<I", blob, off)
        off += 4
        shapes[name] = struct.unpack_from(f"<{nd}Q", blob, off)
        off += 8 * nd
    h, d = shapes["W_in"]
    K = shapes["c"][0]
    vec = np.frombuffer(blob, dtype="<f8", offset=off).astype(np.float64)
    return ModelParams(vec, int(d), int(h), int(K))
