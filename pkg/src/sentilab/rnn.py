"""A vanilla recurrent network classifier, written out in numpy.

    m_t = tanh(W x_t + V m_{t-1} + b)
    y_t = U m_t + e
    P_t = softmax(y_t)

trained on softmax cross-entropy by backpropagation through time and
Adagrad.  Used to recover sentiment states from price series.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, fields

import numpy as np

log = logging.getLogger(__name__)

PARAM_NAMES = ("W", "V", "U", "b", "e")
PROB_FLOOR = 1e-300


@dataclass
class RnnParams:
    W: np.ndarray  # (M, S) input to memory
    V: np.ndarray  # (M, M) memory to memory
    U: np.ndarray  # (N, M) memory to output
    b: np.ndarray  # (M,)
    e: np.ndarray  # (N,)

    @classmethod
    def init(cls, n_input: int, n_memory: int, n_output: int, rng: np.random.Generator,
             scale: float = 0.01) -> "RnnParams":
        """Weights uniform in ``[-scale, scale]``, biases zero."""
        return cls(
            W=rng.uniform(-scale, scale, (n_memory, n_input)),
            V=rng.uniform(-scale, scale, (n_memory, n_memory)),
            U=rng.uniform(-scale, scale, (n_output, n_memory)),
            b=np.zeros(n_memory),
            e=np.zeros(n_output),
        )

    @classmethod
    def zeros_like(cls, other: "RnnParams") -> "RnnParams":
        return cls(*(np.zeros_like(a) for a in other.blocks()))

    @property
    def dims(self) -> tuple[int, int, int]:
        """``(S, M, N)``: input, memory and output widths."""
        return self.W.shape[1], self.W.shape[0], self.U.shape[0]

    def blocks(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, k) for k in PARAM_NAMES)

    def copy(self) -> "RnnParams":
        return type(self)(*(a.copy() for a in self.blocks()))


@dataclass
class Gradients(RnnParams):
    clipped: int = 0


@dataclass
class AdagradCache:
    """Running sums of squared gradients, one per parameter block."""

    mem: RnnParams
    lr: float = 0.1
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: RnnParams, lr: float = 0.1, eps: float = 1e-8) -> "AdagradCache":
        return cls(RnnParams.zeros_like(params), lr, eps)


@dataclass
class Chunk:
    x: np.ndarray        # (T, S)
    targets: np.ndarray  # (T,)
    m0: np.ndarray       # (M,)

    def __post_init__(self):
        if len(self.x) != len(self.targets):
            raise ValueError("inputs and targets must have equal length")


@dataclass
class ForwardPass:
    memories: np.ndarray  # (T, M)
    outputs: np.ndarray   # (T, N)
    probs: np.ndarray     # (T, N)
    m0: np.ndarray


def softmax(y: np.ndarray) -> np.ndarray:
    z = y - y.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def forward(params: RnnParams, x: np.ndarray, m0: np.ndarray | None = None) -> ForwardPass:
    """Run the recursion over ``x`` of shape ``(T, S)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    T = len(x)
    M = params.V.shape[0]
    m_prev = np.zeros(M) if m0 is None else np.asarray(m0, dtype=float)
    pre = x @ params.W.T + params.b
    mem = np.empty((T, M))
    V = params.V
    for t in range(T):
        m_prev = np.tanh(pre[t] + V @ m_prev)
        mem[t] = m_prev
    y = mem @ params.U.T + params.e
    return ForwardPass(mem, y, softmax(y), np.zeros(M) if m0 is None else np.asarray(m0, dtype=float))


def loss(P: np.ndarray, targets) -> float:
    """Cross-entropy ``-sum_t log P[t, r_t]``."""
    targets = np.asarray(targets, dtype=np.int64)
    p = P[np.arange(len(targets)), targets]
    if np.any(p < PROB_FLOOR):
        warnings.warn("target probability underflow; clamped at 1e-300", RuntimeWarning)
        p = np.maximum(p, PROB_FLOOR)
    return float(-np.log(p).sum())


def backward(params: RnnParams, chunk: Chunk, fwd: ForwardPass, clip: float | None = 5.0) -> Gradients:
    """Exact BPTT gradients of :func:`loss` over one chunk.

    With ``clip`` set, every entry is clipped to ``[-clip, clip]`` afterwards
    and the number of clipped entries is recorded in ``Gradients.clipped``.
    """
    x = np.atleast_2d(np.asarray(chunk.x, dtype=float))
    targets = np.asarray(chunk.targets, dtype=np.int64)
    T = len(targets)
    m = fwd.memories
    dy = fwd.probs.copy()
    dy[np.arange(T), targets] -= 1.0

    dU = dy.T @ m
    de = dy.sum(axis=0)

    dm_out = dy @ params.U  # (T, M): sum_j U[j, i] dy[t, j]
    dmhat = np.empty_like(m)
    carry = np.zeros(m.shape[1])
    VT = params.V.T
    for t in range(T - 1, -1, -1):
        dmhat[t] = (dm_out[t] + carry) * (1.0 - m[t] ** 2)
        carry = VT @ dmhat[t]

    m_prev = np.vstack([fwd.m0[None, :], m[:-1]])
    grads = Gradients(W=dmhat.T @ x, V=dmhat.T @ m_prev, U=dU, b=dmhat.sum(axis=0), e=de)
    if clip is not None:
        n = 0
        for g in grads.blocks():
            n += int(np.count_nonzero(np.abs(g) > clip))
            np.clip(g, -clip, clip, out=g)
        grads.clipped = n
    return grads


def adagrad_update(params: RnnParams, cache: AdagradCache, grads: RnnParams) -> RnnParams:
    """In-place Adagrad step; returns ``params``."""
    for name in PARAM_NAMES:
        p, g, acc = getattr(params, name), getattr(grads, name), getattr(cache.mem, name)
        acc += g * g
        p -= cache.lr * g / np.sqrt(acc + cache.eps)
    return params


@dataclass(frozen=True)
class FeatureScaler:
    mean: float
    sd: float


def feature_scaler(prices, n_train: int | None = None) -> FeatureScaler:
    logp = np.log(np.asarray(prices, dtype=float)[:n_train])
    sd = float(logp.std())
    return FeatureScaler(float(logp.mean()), sd if sd > 0 else 1.0)


def make_features(prices, n_train: int | None = None, scaler: FeatureScaler | None = None) -> np.ndarray:
    """Two features per step: standardised log price and one-step log return.

    Standardisation constants come from the first ``n_train`` prices (all of
    them by default) unless ``scaler`` is given.
    """
    prices = np.asarray(prices, dtype=float)
    if np.any(prices <= 0):
        raise ValueError("prices must be positive")
    scaler = feature_scaler(prices, n_train) if scaler is None else scaler
    logp = np.log(prices)
    ret = np.zeros_like(logp)
    ret[1:] = np.diff(logp)
    return np.column_stack([(logp - scaler.mean) / scaler.sd, ret])


def predict(params: RnnParams, features: np.ndarray) -> np.ndarray:
    """Most probable class at every step, one pass with memory carried from zero."""
    return np.argmax(forward(params, features).probs, axis=1)


@dataclass
class RnnConfig:
    unroll: int = 50
    epochs: int = 50
    memory: int = 200
    lr: float = 0.01
    seed: int = 0
    train_fraction: float = 0.9
    init_scale: float = 0.01
    clip: float | None = 5.0
    n_classes: int = 3
    max_restarts: int = 3

    @classmethod
    def from_dict(cls, d: dict) -> "RnnConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown rnn keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainResult:
    params: RnnParams
    cache: AdagradCache
    loss_history: list[float]
    train_score: float
    test_score: float
    n_train: int
    scaler: FeatureScaler
    lr: float
    restarts: int = 0
    clipped: int = 0
    test_predictions: np.ndarray = field(default=None, repr=False)


class DivergenceError(RuntimeError):
    pass


def _fit(x, targets, config: RnnConfig, lr: float):
    rng = np.random.default_rng(config.seed)
    params = RnnParams.init(x.shape[1], config.memory, config.n_classes, rng, config.init_scale)
    cache = AdagradCache.for_params(params, lr)
    history = []
    clipped = 0
    T = len(targets)
    for _ in range(config.epochs):
        m0 = np.zeros(config.memory)
        total = 0.0
        for start in range(0, T, config.unroll):
            chunk = Chunk(x[start:start + config.unroll], targets[start:start + config.unroll], m0)
            fwd = forward(params, chunk.x, chunk.m0)
            total += loss(fwd.probs, chunk.targets)
            grads = backward(params, chunk, fwd, clip=config.clip)
            clipped += grads.clipped
            adagrad_update(params, cache, grads)
            m0 = fwd.memories[-1]
        mean_loss = total / T
        if not math.isfinite(mean_loss) or not all(np.all(np.isfinite(a)) for a in params.blocks()):
            raise DivergenceError(f"non-finite loss at lr={lr}")
        history.append(mean_loss)
    return params, cache, history, clipped


def train(prices, states, config: RnnConfig | None = None) -> TrainResult:
    """Supervised fit on the first ``train_fraction`` of a labelled price series.

    Sequence order is preserved: the training split is cut into consecutive
    chunks of ``config.unroll`` steps and memory is carried from one chunk to
    the next, restarting from zero each epoch.  ``loss_history`` holds the
    mean per-step loss of every epoch.  On divergence the learning rate is
    halved and training restarts from the initial weights.
    """
    config = RnnConfig() if config is None else config
    prices = np.asarray(prices, dtype=float)
    states = np.asarray(states, dtype=np.int64)
    n_train = int(round(config.train_fraction * len(prices)))
    if n_train < 10 * config.unroll:
        raise ValueError(f"training split of {n_train} steps is shorter than 10 unrolls")
    scaler = feature_scaler(prices, n_train)
    x = make_features(prices, scaler=scaler)
    lr = config.lr
    for attempt in range(config.max_restarts + 1):
        try:
            params, cache, history, clipped = _fit(x[:n_train], states[:n_train], config, lr)
            break
        except DivergenceError:
            if attempt == config.max_restarts:
                raise
            log.warning("training diverged at lr=%g; halving", lr)
            lr /= 2
    pred = predict(params, x)
    train_score = float(np.mean(pred[:n_train] == states[:n_train]))
    test = slice(n_train, None)
    test_score = float(np.mean(pred[test] == states[test])) if n_train < len(prices) else float("nan")
    return TrainResult(params, cache, history, train_score, test_score, n_train, scaler, lr,
                       restarts=attempt, clipped=clipped, test_predictions=pred[test])


def save_checkpoint(path, params: RnnParams, cache: AdagradCache | None = None,
                    scaler: FeatureScaler | None = None) -> None:
    """Plain-text checkpoint: dims, parameters, then Adagrad sums.

    An optional trailing ``scaler <mean> <sd>`` line keeps the feature
    standardisation with the weights.
    """
    S, M, N = params.dims
    acc = cache.mem if cache is not None else RnnParams.zeros_like(params)
    with open(path, "w") as fh:
        fh.write(f"{S} {M} {N}\n")
        for group in (params, acc):
            for name in PARAM_NAMES:
                for row in np.atleast_2d(getattr(group, name)):
                    fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
        if cache is not None:
            fh.write(f"lr {cache.lr:.17g} {cache.eps:.17g}\n")
        if scaler is not None:
            fh.write(f"scaler {scaler.mean:.17g} {scaler.sd:.17g}\n")


def load_checkpoint(path) -> tuple[RnnParams, AdagradCache, FeatureScaler | None]:
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    S, M, N = map(int, lines[0])
    shapes = {"W": (M, S), "V": (M, M), "U": (N, M), "b": (1, M), "e": (1, N)}
    pos = 1

    def read_group():
        nonlocal pos
        out = {}
        for name in PARAM_NAMES:
            rows, cols = shapes[name]
            block = np.array(lines[pos:pos + rows], dtype=float)
            if block.shape != (rows, cols):
                raise ValueError(f"{path}: bad block {name}, expected {rows}x{cols}")
            out[name] = block if name in "WVU" else block[0]
            pos += rows
        return RnnParams(**out)

    params = read_group()
    acc = read_group()
    lr, eps, scaler = 0.1, 1e-8, None
    for ln in lines[pos:]:
        if ln[0] == "lr":
            lr, eps = float(ln[1]), float(ln[2])
        elif ln[0] == "scaler":
            scaler = FeatureScaler(float(ln[1]), float(ln[2]))
    return params, AdagradCache(acc, lr, eps), scaler
