"""Single-layer dimension-importance predictor trained by KL distillation.

The model maps a frozen query embedding ``x`` to ``log_softmax(W x + b)``.
Dropout (when training) is applied to ``x`` before the linear layer.
Parameters are kept float32-representable so a saved predictor reproduces
forward outputs bit for bit after loading.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embstore import EmbeddingMatrix
from .errors import ConfigError, DimensionMismatchError, PredictorFormatError, TrainingError
from .oracle import ImportanceTarget
from .optim import AdamW, cosine_lr

logger = logging.getLogger(__name__)

MAGIC = b"DPRD"
VERSION = 1
EPOCH_GRID = (20, 30, 50, 75, 100, 200)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 256
    dropout: float = 0.1
    seed: int = 0
    val_fraction: float = 0.1
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


@dataclass
class Predictor:
    weight: np.ndarray
    bias: np.ndarray
    dropout_rate: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        d = self.bias.shape[0]
        if self.weight.shape != (d, d):
            raise DimensionMismatchError(f"weight shape {self.weight.shape} does not match bias length {d}")

    @property
    def dim(self) -> int:
        return int(self.bias.shape[0])

    @classmethod
    def init(cls, dim: int, seed: int = 0, dropout_rate: float = 0.0) -> Predictor:
        """Fan-in uniform init in [-1/sqrt(D), 1/sqrt(D)]."""
        rng = np.random.default_rng([seed, 0x1A1A])
        bound = 1.0 / math.sqrt(dim)
        w = rng.uniform(-bound, bound, size=(dim, dim)).astype(np.float32)
        b = rng.uniform(-bound, bound, size=dim).astype(np.float32)
        return cls(w, b, dropout_rate)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weight.T + self.bias

    def predict_log_probs(self, x: np.ndarray) -> np.ndarray:
        """Inference-mode log-probabilities for one query or a batch."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise DimensionMismatchError(f"input dim {x.shape[-1]} != predictor dim {self.dim}")
        return log_softmax(self.logits(x))


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def forward(
    p: Predictor,
    e_q: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Log-probabilities; with ``training`` the input goes through inverted dropout."""
    x = np.asarray(e_q, dtype=np.float64)
    if x.shape[-1] != p.dim:
        raise DimensionMismatchError(f"input dim {x.shape[-1]} != predictor dim {p.dim}")
    if training and p.dropout_rate > 0:
        if rng is None:
            rng = np.random.default_rng()
        keep = rng.random(x.shape) >= p.dropout_rate
        x = x * keep / (1.0 - p.dropout_rate)
    return log_softmax(p.logits(x))


def kl_loss(target: np.ndarray, predicted_log: np.ndarray) -> float | np.ndarray:
    """KL(target || predicted); zero target entries contribute nothing.

    Rows are reduced independently when given 2-D input.
    """
    target = np.asarray(target, dtype=np.float64)
    predicted_log = np.asarray(predicted_log, dtype=np.float64)
    if target.shape != predicted_log.shape:
        raise DimensionMismatchError(f"shape mismatch {target.shape} vs {predicted_log.shape}")
    pos = target > 0
    safe = np.where(pos, target, 1.0)
    terms = np.where(pos, target * (np.log(safe) - predicted_log), 0.0)
    out = terms.sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def _batch_loss_and_grads(p: Predictor, x: np.ndarray, target: np.ndarray):
    """Mean KL over the batch and its gradients w.r.t. W and b."""
    logp = log_softmax(p.logits(x))
    loss = float(kl_loss(target, logp).mean())
    g = (np.exp(logp) - target) / x.shape[0]
    return loss, {"weight": g.T @ x, "bias": g.sum(axis=0)}


def analytic_gradients(p: Predictor, e_q: np.ndarray, target: np.ndarray) -> dict[str, np.ndarray]:
    _, grads = _batch_loss_and_grads(p, np.atleast_2d(np.asarray(e_q, dtype=np.float64)), np.atleast_2d(target))
    return grads


def gradient_check(p: Predictor, e_q: np.ndarray, target: np.ndarray, epsilon: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients."""
    x = np.asarray(e_q, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    analytic = analytic_gradients(p, x, target)

    def loss() -> float:
        return float(kl_loss(target, p.predict_log_probs(x)))

    worst = 0.0
    for name in ("weight", "bias"):
        param = getattr(p, name)
        flat = param.reshape(-1)
        a = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss()
            flat[i] = orig - epsilon
            down = loss()
            flat[i] = orig
            num = (up - down) / (2 * epsilon)
            denom = max(abs(a[i]), abs(num), 1e-8)
            worst = max(worst, abs(a[i] - num) / denom)
    return worst


def _stack_targets(targets: Sequence[ImportanceTarget], queries: EmbeddingMatrix):
    missing = [t.query_id for t in targets if t.query_id not in queries.id_index]
    if missing:
        raise TrainingError(f"{len(missing)} target query ids missing from query matrix, e.g. {missing[0]!r}")
    x = queries.data[[queries.id_index[t.query_id] for t in targets]].astype(np.float64)
    y = np.array([t.probs for t in targets], dtype=np.float64)
    if y.shape[1] != queries.dim:
        raise DimensionMismatchError(f"target dim {y.shape[1]} != query dim {queries.dim}")
    return x, y


def split_validation(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle into (train, val) index arrays; both non-empty."""
    n_val = int(round(val_fraction * n))
    n_val = min(max(n_val, 1), n - 1)
    if n < 2 or n_val < 1:
        raise TrainingError(f"validation split is empty for {n} targets")
    perm = np.random.default_rng([seed, 0x5917]).permutation(n)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def mean_kl(p: Predictor, x: np.ndarray, y: np.ndarray) -> float:
    return float(kl_loss(y, p.predict_log_probs(x)).mean())


def train(
    targets: Sequence[ImportanceTarget],
    queries: EmbeddingMatrix,
    cfg: TrainConfig,
    val_targets: Sequence[ImportanceTarget] | None = None,
) -> Predictor:
    """Minimize mean KL(target || prediction) with mini-batch AdamW.

    The validation set is a seeded ``val_fraction`` split of ``targets``
    unless ``val_targets`` is supplied explicitly. The returned predictor
    carries the parameters of the epoch with the lowest validation KL.
    """
    if not targets:
        raise TrainingError("empty target list")
    x_all, y_all = _stack_targets(targets, queries)
    if val_targets is None:
        tr, va = split_validation(len(targets), cfg.val_fraction, cfg.seed)
        x_tr, y_tr, x_va, y_va = x_all[tr], y_all[tr], x_all[va], y_all[va]
    else:
        if not val_targets:
            raise TrainingError("validation split is empty")
        x_tr, y_tr = x_all, y_all
        x_va, y_va = _stack_targets(val_targets, queries)

    model = Predictor.init(queries.dim, cfg.seed, cfg.dropout)
    params = {"weight": model.weight, "bias": model.bias}
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    n = x_tr.shape[0]
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs

    def snapshot() -> Predictor:
        return Predictor(model.weight.astype(np.float32), model.bias.astype(np.float32), cfg.dropout)

    result = snapshot()
    best_kl = mean_kl(result, x_va, y_va)
    best_epoch = 0
    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        train_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = x_tr[idx]
            if cfg.dropout > 0:
                keep = rng.random(xb.shape) >= cfg.dropout
                xb = xb * keep / (1.0 - cfg.dropout)
            loss, grads = _batch_loss_and_grads(model, xb, y_tr[idx])
            train_sum += loss * len(idx)
            opt.step(grads, lr=cosine_lr(step, total, cfg.lr))
            step += 1
        current = snapshot()
        val = mean_kl(current, x_va, y_va)
        history.append({"epoch": epoch, "train_kl": train_sum / n, "val_kl": val})
        if epoch == 1 or val < best_kl:
            best_kl, best_epoch, result = val, epoch, current
        logger.debug("epoch %d train_kl %.6f val_kl %.6f", epoch, train_sum / n, val)

    result.metadata = {
        "train_config": cfg.to_dict(),
        "best_val_kl": best_kl,
        "best_epoch": best_epoch,
        "n_train": int(n),
        "n_val": int(x_va.shape[0]),
        "history": history,
    }
    logger.info("predictor: best val KL %.6f at epoch %d", best_kl, best_epoch)
    return result


def encode(p: Predictor) -> bytes:
    meta = json.dumps(p.metadata | {"dropout_rate": p.dropout_rate}, sort_keys=True).encode("utf-8")
    return b"".join(
        [
            MAGIC,
            struct.pack("<II", VERSION, p.dim),
            p.weight.astype("<f4").tobytes(order="C"),
            p.bias.astype("<f4").tobytes(),
            struct.pack("<I", len(meta)),
            meta,
        ]
    )


def decode(buf: bytes, expected_dim: int | None = None) -> Predictor:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise PredictorFormatError("not a predictor file (bad magic)")
    version, dim = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise PredictorFormatError(f"unsupported predictor version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatchError(f"predictor dim {dim} != expected {expected_dim}")
    pos = 12
    n_params = dim * dim + dim
    if len(buf) < pos + 4 * n_params + 4:
        raise PredictorFormatError("unexpected end of predictor file")
    w = np.frombuffer(buf, dtype="<f4", count=dim * dim, offset=pos).reshape(dim, dim)
    pos += 4 * dim * dim
    b = np.frombuffer(buf, dtype="<f4", count=dim, offset=pos)
    pos += 4 * dim
    (n_meta,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + n_meta:
        raise PredictorFormatError("unexpected end of predictor file")
    meta = json.loads(buf[pos : pos + n_meta].decode("utf-8"))
    dropout = float(meta.pop("dropout_rate", 0.0))
    return Predictor(w.astype(np.float64), b.astype(np.float64), dropout, meta)


def save(p: Predictor, path: str | Path) -> None:
    Path(path).write_bytes(encode(p))


def load(path: str | Path, expected_dim: int | None = None) -> Predictor:
    return decode(Path(path).read_bytes(), expected_dim)
