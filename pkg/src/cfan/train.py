"""Optimizers, the training loop, configuration files and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import CFAN, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)


# -- optimizers ----------------------------------------------------------------


def _check(params, grads):
    for p, g in zip(params, grads):
        if g is not None and np.shape(p) != np.shape(g):
            raise T.ShapeError(f"gradient shape {np.shape(g)} does not match parameter {np.shape(p)}")


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray], state: dict, lr: float,
             momentum: float = 0.0, wd: float = 0.0) -> list[np.ndarray]:
    """Decoupled weight decay, then heavy-ball momentum ``v = mu v + g; w -= lr v``."""
    _check(params, grads)
    bufs = state.setdefault("momentum", [np.zeros_like(p) for p in params])
    out = []
    for i, (w, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(w)
        w = w - lr * wd * w if wd else w
        bufs[i] = momentum * bufs[i] + g
        out.append((w - lr * bufs[i]).astype(w.dtype))
    return out


def adamw_step(params: list[np.ndarray], grads: list[np.ndarray], state: dict, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               wd: float = 0.01) -> list[np.ndarray]:
    _check(params, grads)
    m = state.setdefault("m", [np.zeros_like(p) for p in params])
    v = state.setdefault("v", [np.zeros_like(p) for p in params])
    state["step"] = t = state.get("step", 0) + 1
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    out = []
    for i, (w, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(w)
        w = w - lr * wd * w if wd else w
        m[i] = beta1 * m[i] + (1 - beta1) * g
        v[i] = beta2 * v[i] + (1 - beta2) * g * g
        out.append((w - lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)).astype(w.dtype))
    return out


class Optimizer:
    """Applies ``sgd_step`` or ``adamw_step`` to a model's parameters in place."""

    def __init__(self, model: CFAN, kind: str = "sgd", lr: float = 1e-2, weight_decay: float = 1e-4,
                 momentum: float = 0.9, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if kind not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.model, self.kind = model, kind
        self.hp = dict(lr=lr, weight_decay=weight_decay, momentum=momentum, beta1=beta1, beta2=beta2, eps=eps)
        self.state: dict = {}

    def step(self) -> None:
        tensors = self.model.parameters()
        params = [t.data for t in tensors]
        grads = [t.grad for t in tensors]
        hp = self.hp
        if self.kind == "sgd":
            new = sgd_step(params, grads, self.state, hp["lr"], hp["momentum"], hp["weight_decay"])
        else:
            new = adamw_step(params, grads, self.state, hp["lr"], hp["beta1"], hp["beta2"], hp["eps"],
                             hp["weight_decay"])
        for t, data in zip(tensors, new):
            t.data = data

    def state_tensors(self) -> dict[str, np.ndarray]:
        names = list(self.model.params)
        out = {}
        for key in ("momentum", "m", "v"):
            for name, buf in zip(names, self.state.get(key, [])):
                out[f"{key}/{name}"] = buf
        if "step" in self.state:
            out["step"] = np.array([self.state["step"]], dtype=np.float64)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        names = list(self.model.params)
        self.state = {}
        for key in ("momentum", "m", "v"):
            if f"{key}/{names[0]}" in tensors:
                self.state[key] = [tensors[f"{key}/{n}"].copy() for n in names]
        if "step" in tensors:
            self.state["step"] = int(tensors["step"][0])


# -- configuration -------------------------------------------------------------

CONFIG_KEYS = ("optimizer", "lr", "weight_decay", "momentum", "beta1", "beta2", "eps", "batch_size",
               "epochs", "seed", "image_size", "backbone_widths", "upsample", "nc", "nt", "nf", "p_min",
               "p_max", "classes", "ablation", "fixed_p")


@dataclass
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 1e-2
    weight_decay: float = 1e-4
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    fixed_p: float | None = None  # None draws fresh adjustable vectors every iteration
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")
        for name in ("lr", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("weight_decay must be >= 0 and momentum in [0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.fixed_p is not None and not self.model.p_min <= self.fixed_p <= self.model.p_max:
            raise ValueError(f"fixed_p {self.fixed_p} outside [{self.model.p_min}, {self.model.p_max}]")

    def to_text(self) -> str:
        m = self.model
        values = {
            "optimizer": self.optimizer, "lr": self.lr, "weight_decay": self.weight_decay,
            "momentum": self.momentum, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "batch_size": self.batch_size, "epochs": self.epochs, "seed": self.seed,
            "image_size": m.image_size, "backbone_widths": ",".join(map(str, m.backbone_widths)),
            "upsample": m.upsample, "nc": m.nc, "nt": m.nt, "nf": m.nf, "p_min": m.p_min,
            "p_max": m.p_max, "classes": m.classes, "ablation": m.ablation,
            "fixed_p": "random" if self.fixed_p is None else self.fixed_p,
        }
        return "".join(f"{k} = {values[k]}\n" for k in CONFIG_KEYS)


_MODEL_KEYS = {"image_size": int, "backbone_widths": None, "upsample": int, "nc": int, "nt": int,
               "nf": int, "p_min": float, "p_max": float, "classes": int, "ablation": str}
_TRAIN_KEYS = {"optimizer": str, "lr": float, "weight_decay": float, "momentum": float, "beta1": float,
               "beta2": float, "eps": float, "batch_size": int, "epochs": int, "seed": int}


def parse_config(text: str) -> TrainConfig:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    train_kw, model_kw = {}, {}
    fixed_p = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        if key not in CONFIG_KEYS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            if key == "backbone_widths":
                model_kw[key] = tuple(int(v) for v in value.split(",") if v.strip())
            elif key == "fixed_p":
                fixed_p = None if value.lower() in ("random", "none", "") else float(value)
            elif key in _MODEL_KEYS:
                model_kw[key] = _MODEL_KEYS[key](value)
            else:
                train_kw[key] = _TRAIN_KEYS[key](value)
        except ValueError:
            raise ValueError(f"config line {lineno}: bad value {value!r} for {key}") from None
    return TrainConfig(**train_kw, fixed_p=fixed_p, model=ModelConfig(**model_kw))


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"CFAN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint64): 2}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: CFAN
    optimizer_state: dict[str, np.ndarray]
    rng_state: dict | None
    epoch: int
    train_config: str = ""


def _write_block(buf, tensors: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES[arr.dtype]
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def block(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<I")
            name = self.take(nlen).decode("utf-8")
            code, rank = self.unpack("<BI")
            if code not in _DTYPES:
                raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
            shape = self.unpack(f"<{rank}Q")
            dt = _DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape)
            out[name] = arr.astype(dt.newbyteorder("="))
        return out


def _rng_to_tensor(state: dict) -> dict[str, np.ndarray]:
    inner = state["state"]
    mask = (1 << 64) - 1
    words = [inner["state"] >> 64, inner["state"] & mask, inner["inc"] >> 64, inner["inc"] & mask,
             state.get("has_uint32", 0), state.get("uinteger", 0)]
    return {"pcg64": np.array(words, dtype=np.uint64)}


def _rng_from_tensor(tensors: dict[str, np.ndarray]) -> dict | None:
    if "pcg64" not in tensors:
        return None
    w = [int(v) for v in tensors["pcg64"]]
    return {"bit_generator": "PCG64", "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3]},
            "has_uint32": w[4], "uinteger": w[5]}


def checkpoint_bytes(model: CFAN, optimizer: Optimizer | None = None, rng: np.random.Generator | None = None,
                     epoch: int = 0, train_config: str = "") -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", VERSION))
    _write_block(buf, {k: v.data for k, v in model.params.items()})
    _write_block(buf, optimizer.state_tensors() if optimizer else {})
    _write_block(buf, _rng_to_tensor(rng.bit_generator.state) if rng is not None else {})
    meta = json.dumps({"model_config": model.cfg.to_dict(), "epoch": epoch, "seed": model.seed,
                       "train_config": train_config}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)) + meta)
    return buf.getvalue()


def save_checkpoint(path, model: CFAN, optimizer: Optimizer | None = None,
                    rng: np.random.Generator | None = None, epoch: int = 0, train_config: str = "") -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, optimizer, rng, epoch, train_config))
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    reader = _Reader(path.read_bytes())
    magic = reader.take(4)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: not a CFAN checkpoint (magic {magic!r})")
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    params = reader.block()
    opt_state = reader.block()
    rng_state = _rng_from_tensor(reader.block())
    (mlen,) = reader.unpack("<I")
    try:
        meta = json.loads(reader.take(mlen).decode("utf-8"))
        cfg = ModelConfig.from_dict(meta["model_config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata block ({exc})") from None
    expected = CFAN(cfg, seed=0)
    if set(params) != set(expected.params):
        raise ShapeMismatchError(f"{path}: parameter names do not match the stored model config")
    dtype = None
    tensors = {}
    for name, ref in expected.params.items():
        arr = params[name]
        if arr.shape != ref.shape:
            raise ShapeMismatchError(f"{path}: {name} has shape {arr.shape}, config implies {ref.shape}")
        dtype = arr.dtype
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    model = CFAN(cfg, tensors, seed=meta.get("seed", 0), dtype=dtype.type)
    return Checkpoint(model, opt_state, rng_state, int(meta.get("epoch", 0)), meta.get("train_config", ""))


# -- training loop -------------------------------------------------------------


class DivergenceError(FloatingPointError):
    pass


@dataclass
class TrainResult:
    model: CFAN
    optimizer: Optimizer
    rng: np.random.Generator
    log: list[dict] = field(default_factory=list)
    epoch: int = 0

    def log_csv(self) -> str:
        lines = ["epoch,loss,train_acc"]
        lines += [f"{r['epoch']},{r['loss']!r},{r['train_acc']!r}" for r in self.log]
        return "\n".join(lines) + "\n"


def make_optimizer(model: CFAN, cfg: TrainConfig) -> Optimizer:
    return Optimizer(model, cfg.optimizer, cfg.lr, cfg.weight_decay, cfg.momentum, cfg.beta1, cfg.beta2, cfg.eps)


def train_loop(cfg: TrainConfig, images: np.ndarray, labels: np.ndarray, resume: Checkpoint | None = None,
               epochs: int | None = None, dtype=np.float32) -> TrainResult:
    """Seeded mini-batch training on classifier-indexed ``labels``.

    ``resume`` continues from a checkpoint's parameters, optimizer and rng state.
    """
    if len(images) == 0:
        raise ValueError("empty training split")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= cfg.model.classes:
        raise ValueError(f"training labels must lie in [0, {cfg.model.classes})")
    if resume is not None:
        model = resume.model
        optimizer = make_optimizer(model, cfg)
        optimizer.load_state_tensors(resume.optimizer_state)
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start = resume.epoch
    else:
        model = CFAN(cfg.model, seed=cfg.seed, dtype=dtype)
        optimizer = make_optimizer(model, cfg)
        rng = np.random.default_rng([cfg.seed, 7])
        start = 0
    total = cfg.epochs if epochs is None else start + epochs
    images = np.asarray(images, dtype=model.dtype)
    result = TrainResult(model, optimizer, rng, epoch=start)
    n = len(images)
    for epoch in range(start, total):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            model.zero_grad()
            logits, _ = model.forward(Tensor(images[idx]), "train", rng, cfg.fixed_p)
            loss = T.softmax_cross_entropy(logits, labels[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss {value} at epoch {epoch + 1}")
            T.backward(loss)
            optimizer.step()
            loss_sum += value * len(idx)
            correct += int(np.sum(logits.data.argmax(axis=1) == labels[idx]))
        row = {"epoch": epoch + 1, "loss": loss_sum / n, "train_acc": correct / n}
        result.log.append(row)
        result.epoch = epoch + 1
        log.info("epoch %d loss %.4f train_acc %.3f", row["epoch"], row["loss"], row["train_acc"])
    return result


def config_from_fields(**kw) -> TrainConfig:
    """Build a TrainConfig from flat keys, as in a config file."""
    model_kw = {k: kw.pop(k) for k in list(kw) if k in _MODEL_KEYS}
    known = {f.name for f in fields(TrainConfig)}
    bad = set(kw) - known
    if bad:
        raise ValueError(f"unknown keys {sorted(bad)}")
    return TrainConfig(**kw, model=ModelConfig(**model_kw))
