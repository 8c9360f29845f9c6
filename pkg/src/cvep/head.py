"""Trainable task head, cross-entropy, exact backpropagation, Adam and checkpoints.

Topology: ``Z (B,16,4,512) -> Z' (B,16,2048) -> Z'' = Z' W1 + b1 (B,16,16)
-> H (B,256) -> logits = H W2 + b2 (B,K)``. In raw mode the gradient also
flows through the frozen encoder into the spatial filter.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import (
    EMBED_DIM,
    FEATURE_SHAPE,
    N_TOKENS,
    N_WINDOWS,
    FeatureTensor,
    Projections,
    ReferenceEncoderParams,
    SpatialFilter,
    encode_projections,
    project,
)
from .errors import (
    EmptySplitError,
    FormatError,
    LabelOutOfRangeError,
    ShapeError,
    VersionMismatchError,
)

TOKEN_DIM = N_WINDOWS * EMBED_DIM  # 2048
HIDDEN = 16
FLAT = N_TOKENS * HIDDEN  # 256
PARAM_NAMES = ("W_spatial", "W1", "b1", "W2", "b2")


@dataclass
class TaskHead:
    W1: np.ndarray  # (2048, 16)
    b1: np.ndarray  # (16,)
    W2: np.ndarray  # (256, K)
    b2: np.ndarray  # (K,)

    def __post_init__(self):
        if self.W1.shape != (TOKEN_DIM, HIDDEN) or self.b1.shape != (HIDDEN,):
            raise ShapeError(f"first layer must be (2048, 16) + (16,), got {self.W1.shape} + {self.b1.shape}")
        if self.W2.ndim != 2 or self.W2.shape[0] != FLAT or self.b2.shape != (self.W2.shape[1],):
            raise ShapeError(f"second layer must be (256, K) + (K,), got {self.W2.shape} + {self.b2.shape}")

    @property
    def K(self) -> int:
        return int(self.W2.shape[1])

    @classmethod
    def init(cls, n_classes: int, seed: int = 0) -> "TaskHead":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        lim1 = np.sqrt(6.0 / (TOKEN_DIM + HIDDEN))
        lim2 = np.sqrt(6.0 / (FLAT + n_classes))
        return cls(
            rng.uniform(-lim1, lim1, size=(TOKEN_DIM, HIDDEN)),
            np.zeros(HIDDEN),
            rng.uniform(-lim2, lim2, size=(FLAT, n_classes)),
            np.zeros(n_classes),
        )

    @classmethod
    def zeros(cls, n_classes: int) -> "TaskHead":
        return cls(np.zeros((TOKEN_DIM, HIDDEN)), np.zeros(HIDDEN), np.zeros((FLAT, n_classes)), np.zeros(n_classes))

    def n_params(self) -> tuple[int, int]:
        """Parameter counts of the two linear layers."""
        return self.W1.size + self.b1.size, self.W2.size + self.b2.size


@dataclass
class HeadActivations:
    Zp: np.ndarray  # (B, 16, 2048)
    Zpp: np.ndarray  # (B, 16, 16)
    H: np.ndarray  # (B, 256)
    logits: np.ndarray  # (B, K)


def _flat_features(Z) -> np.ndarray:
    if isinstance(Z, FeatureTensor):
        Z = Z.Z
    Z = np.asarray(Z)
    if Z.ndim == 4 and Z.shape[1:] == (N_TOKENS, N_WINDOWS, EMBED_DIM):
        return Z.reshape(Z.shape[0], N_TOKENS, TOKEN_DIM)
    if Z.ndim == 3 and Z.shape[1:] == (N_TOKENS, TOKEN_DIM):
        return Z
    raise ShapeError(f"features must be (B, 16, 4, 512), got {Z.shape}")


def head_forward(Z, head: TaskHead) -> HeadActivations:
    Zp = _flat_features(Z)
    B = Zp.shape[0]
    Zpp = (Zp.reshape(B * N_TOKENS, TOKEN_DIM) @ head.W1).reshape(B, N_TOKENS, HIDDEN) + head.b1
    H = Zpp.reshape(B, FLAT)
    return HeadActivations(Zp, Zpp, H, H @ head.W2 + head.b2)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"need {B} labels, got shape {labels.shape}")
    if B and (labels.min() < 0 or labels.max() >= K):
        raise LabelOutOfRangeError(f"labels must lie in [0, {K})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(B)
    loss = float(np.mean(logsum - shifted[rows, labels]))
    d = np.exp(shifted - logsum[:, None])
    d[rows, labels] -= 1.0
    return loss, d / B


@dataclass
class Model:
    """Spatial filter + (frozen) encoder + task head, the unit that is trained and checkpointed.

    ``encoder`` is ``None`` for models trained on imported features; their
    spatial filter stays at identity.
    """

    head: TaskHead
    spatial: SpatialFilter
    encoder: ReferenceEncoderParams | None
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, n_channels: int, n_classes: int, encoder: ReferenceEncoderParams | None,
               seed: int = 0) -> "Model":
        return cls(TaskHead.init(n_classes, seed), SpatialFilter.identity(n_channels), encoder)

    @property
    def K(self) -> int:
        return self.head.K

    @property
    def imported(self) -> bool:
        return self.encoder is None

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def params(self) -> dict[str, np.ndarray]:
        h = self.head
        return {"W_spatial": self.spatial.W, "W1": h.W1, "b1": h.b1, "W2": h.W2, "b2": h.b2}

    def features(self, inputs) -> np.ndarray:
        """Flattened features ``(B, 16, 2048)`` for raw trials, projections or imported features."""
        if isinstance(inputs, FeatureTensor):
            return _flat_features(inputs)
        if self.encoder is None:
            raise ShapeError("model was trained on imported features and has no encoder")
        if not isinstance(inputs, Projections):
            inputs = project(np.asarray(inputs, dtype=np.float64), self.encoder)
        return encode_projections(inputs, self.spatial)

    def logits(self, inputs, chunk: int = 64) -> np.ndarray:
        n = len(inputs)
        if n <= chunk:
            return head_forward(self.features(inputs), self.head).logits
        return np.concatenate([head_forward(self.features(inputs[s:s + chunk]), self.head).logits
                               for s in range(0, n, chunk)])

    def predict(self, inputs) -> np.ndarray:
        return np.argmax(self.logits(inputs), axis=1)


CHUNK = 8  # trials per fused forward/backward pass; keeps intermediates in cache


def loss_and_grads(model: Model, inputs, labels, train_spatial: bool = True) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy and exact gradients for every trainable tensor.

    With raw inputs (trials or cached projections) the chain extends through
    ``tanh`` and the encoder's linear maps into ``W_spatial``. Encoder
    parameters never receive gradients. Per-trial gradients are independent,
    so the batch is processed in small chunks, forward and backward together.
    """
    raw = not isinstance(inputs, FeatureTensor)
    if raw and not isinstance(inputs, Projections):
        if model.encoder is None:
            raise ShapeError("raw trials need the reference encoder")
        inputs = project(np.asarray(inputs, dtype=np.float64), model.encoder)
    if raw and inputs.n_channels != model.spatial.n_channels:
        raise ShapeError(f"inputs have {inputs.n_channels} channels, model expects {model.spatial.n_channels}")
    labels = np.asarray(labels, dtype=np.int64)
    h = model.head
    K = h.K
    feats = None if raw else _flat_features(inputs)
    B = len(inputs)
    if labels.shape != (B,):
        raise ShapeError(f"need {B} labels, got shape {labels.shape}")
    if B and (labels.min() < 0 or labels.max() >= K):
        raise LabelOutOfRangeError(f"labels must lie in [0, {K})")
    want_spatial = raw and train_spatial
    M = model.encoder.A @ model.spatial.W if raw else None
    grads = {"W1": np.zeros_like(h.W1), "b1": np.zeros_like(h.b1),
             "W2": np.zeros_like(h.W2), "b2": np.zeros_like(h.b2)}
    dM = np.zeros_like(M) if want_spatial else None
    total = 0.0
    for s in range(0, B, CHUNK):
        if raw:
            Pc = inputs.P[s:s + CHUNK]
            Z = np.matmul(M, Pc)
            np.tanh(Z, out=Z)
        else:
            Z = feats[s:s + CHUNK]
        n = Z.shape[0]
        Zf = Z.reshape(n * N_TOKENS, TOKEN_DIM)
        Zpp = Zf @ h.W1
        Zpp += h.b1
        H = Zpp.reshape(n, FLAT)
        loss, d = cross_entropy(H @ h.W2 + h.b2, labels[s:s + n])
        total += loss * n
        d *= n / B
        grads["W2"] += H.T @ d
        grads["b2"] += d.sum(axis=0)
        dZpp = (d @ h.W2.T).reshape(n * N_TOKENS, HIDDEN)
        grads["W1"] += Zf.T @ dZpp
        grads["b1"] += dZpp.sum(axis=0)
        if want_spatial:
            # tanh' = 1 - Z^2; Z is a scratch buffer from here on
            dpre = dZpp @ h.W1.T
            Zf *= Zf
            np.subtract(1.0, Zf, out=Zf)
            dpre *= Zf
            dM += np.matmul(dpre.reshape(n, N_TOKENS, TOKEN_DIM), Pc.transpose(0, 2, 1)).sum(axis=0)
    if want_spatial:
        grads["W_spatial"] = model.encoder.A.T @ dM
    return total / B, grads


backward = loss_and_grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update with decoupled weight decay.

    Parameters without an entry in ``grads`` are left untouched. Arrays are
    updated in place and returned.
    """
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay:
            p -= state.lr * state.weight_decay * p
        p -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    train_spatial: bool = True
    select_by: str = "val_loss"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.select_by != "val_loss":
            raise ValueError("models are always selected by lowest validation loss")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float


def evaluate_loss(model: Model, inputs, labels) -> tuple[float, float]:
    logits = model.logits(inputs)
    loss, _ = cross_entropy(logits, labels)
    return loss, float(np.mean(np.argmax(logits, axis=1) == labels))


def train(model: Model, train_inputs, train_labels, val_inputs, val_labels,
          cfg: TrainConfig) -> tuple[Model, list[EpochRecord]]:
    """Minibatch Adam for ``cfg.epochs`` epochs; returns the lowest-validation-loss model.

    ``model`` is the initialization and is not modified. Ties in validation
    loss go to the earliest epoch.
    """
    train_labels = np.asarray(train_labels, dtype=np.int64)
    val_labels = np.asarray(val_labels, dtype=np.int64)
    if len(train_labels) == 0 or len(val_labels) == 0:
        raise EmptySplitError(f"train has {len(train_labels)} trials, val has {len(val_labels)}")
    if isinstance(train_inputs, np.ndarray):
        train_inputs = project(train_inputs, model.encoder)
    if isinstance(val_inputs, np.ndarray):
        val_inputs = project(val_inputs, model.encoder)
    current = model.copy()
    train_spatial = cfg.train_spatial and not isinstance(train_inputs, FeatureTensor)
    if not train_spatial:
        # the encoder output cannot change, so compute it once
        if isinstance(train_inputs, Projections):
            train_inputs = FeatureTensor(current.features(train_inputs).reshape(-1, *FEATURE_SHAPE))
        if isinstance(val_inputs, Projections):
            val_inputs = FeatureTensor(current.features(val_inputs).reshape(-1, *FEATURE_SHAPE))
    state = AdamState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    params = current.params()
    rng = np.random.default_rng(cfg.seed)
    n = len(train_labels)
    history: list[EpochRecord] = []
    best, best_loss = None, np.inf
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = loss_and_grads(current, train_inputs[idx], train_labels[idx], train_spatial)
            adam_step(params, grads, state)
            total += loss * idx.size
        val_loss, val_acc = evaluate_loss(current, val_inputs, val_labels)
        history.append(EpochRecord(epoch, total / n, val_loss, val_acc))
        if val_loss < best_loss:
            best_loss = val_loss
            best = current.copy()
            best.meta = {"selected_epoch": epoch, "val_loss": val_loss, "hyper": asdict(cfg)}
    return best, history


# -- checkpoints ------------------------------------------------------------

MAGIC = b"CVEPHEAD1\n"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Model, path: str | Path) -> Path:
    """Magic line, metadata length line, JSON metadata, then float64 blobs.

    Blob order is W_spatial, W1, b1, W2, b2, little-endian and row-major.
    """
    C = model.spatial.n_channels
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "n_channels": C,
        "n_classes": model.K,
        "encoder_seed": None if model.encoder is None else model.encoder.seed,
        "selected_epoch": model.meta.get("selected_epoch"),
        "val_loss": model.meta.get("val_loss"),
        "hyper": model.meta.get("hyper", {}),
    }
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    blobs = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params().values())
    path = Path(path)
    path.write_bytes(MAGIC + f"{len(text)}\n".encode("ascii") + text + blobs)
    return path


def load_checkpoint(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        if raw.startswith(b"CVEPHEAD"):
            raise VersionMismatchError(f"unsupported checkpoint magic {raw[:10]!r}")
        raise FormatError("not a checkpoint (bad magic)", field="magic")
    rest = raw[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise FormatError("truncated before metadata", field="metadata")
    try:
        n_meta = int(rest[:nl])
        meta = json.loads(rest[nl + 1:nl + 1 + n_meta].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"unreadable metadata: {exc}", field="metadata") from exc
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {meta.get('format_version')!r}")
    try:
        C, K = int(meta["n_channels"]), int(meta["n_classes"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError("missing dimensions", field="metadata") from exc
    shapes = [(C, C), (TOKEN_DIM, HIDDEN), (HIDDEN,), (FLAT, K), (K,)]
    body = rest[nl + 1 + n_meta:]
    need = sum(int(np.prod(s)) for s in shapes) * 8
    if len(body) != need:
        raise FormatError(f"parameter section has {len(body)} bytes, expected {need}", field="parameters")
    arrays, off = [], 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(np.frombuffer(body, dtype="<f8", count=size, offset=off).reshape(s).copy())
        off += size * 8
    W_s, W1, b1, W2, b2 = arrays
    seed = meta.get("encoder_seed")
    encoder = None if seed is None else ReferenceEncoderParams.create(C, int(seed))
    extra = {k: meta[k] for k in ("selected_epoch", "val_loss", "hyper") if meta.get(k) is not None}
    return Model(TaskHead(W1, b1, W2, b2), SpatialFilter(W_s), encoder, extra)
