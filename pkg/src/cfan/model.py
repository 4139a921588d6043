"""The CFAN network: conv backbone, adapter, frequency series, twin LSTMs, head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .spectral import P_MAX, P_MIN, _is_pow2, fvf_series, sample_adjustable_vectors
from .tensor import Tensor

GATES = ("input", "forget", "output", "candidate")

# head wiring per ablation; see CFAN.head_channels
ABLATIONS = (
    "none",              # full model
    "bypass",            # adapter output straight into the head
    "fvf-only",          # first filtered component of each branch, no recurrence
    "high-only",
    "low-only",
    "all-input-concat",
    "all-output-concat",
)


@dataclass
class ModelConfig:
    in_channels: int = 3
    image_size: int = 64
    backbone_widths: tuple[int, ...] = (16, 32, 64)
    upsample: int = 2
    nc: int = 16
    nt: int = 20
    nf: int = 4
    p_min: float = P_MIN
    p_max: float = P_MAX
    classes: int = 6
    ablation: str = "none"

    def __post_init__(self):
        self.backbone_widths = tuple(int(v) for v in self.backbone_widths)
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if not _is_pow2(self.image_size):
            raise ValueError(f"image_size {self.image_size} is not a power of two")
        feat = self.image_size >> len(self.backbone_widths)
        if feat < 1:
            raise ValueError("too many backbone blocks for the image size")
        if self.upsample < 1 or not _is_pow2(feat * self.upsample):
            raise ValueError(f"adapter output size {feat * self.upsample} is not a power of two")
        if not 0 < self.p_min < self.p_max:
            raise ValueError("need 0 < p_min < p_max")
        for name in ("nc", "nt", "nf", "classes", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def feature_size(self) -> int:
        return (self.image_size >> len(self.backbone_widths)) * self.upsample

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class BranchState:
    h: Tensor
    c: Tensor
    t: int = 0


def _uniform(rng, shape, fan_in, dtype):
    k = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-k, k, size=shape).astype(dtype)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) everywhere, forget bias 1."""
    rng = np.random.default_rng(seed)
    shapes: dict[str, tuple[tuple[int, ...], int]] = {}
    c_prev = cfg.in_channels
    for b, width in enumerate(cfg.backbone_widths, start=1):
        fan = c_prev * 9
        shapes[f"backbone.conv{b}.weight"] = ((width, c_prev, 3, 3), fan)
        shapes[f"backbone.conv{b}.bias"] = ((width,), fan)
        c_prev = width
    shapes["adapter.weight"] = ((cfg.nc, c_prev, 1, 1), c_prev)
    shapes["adapter.bias"] = ((cfg.nc,), c_prev)
    for branch in _branches(cfg.ablation):
        for gate in GATES:
            prefix = f"lstm_{branch}.{gate}"
            shapes[f"{prefix}.wx"] = ((cfg.nc, cfg.nc, 1, 1), 2 * cfg.nc)
            shapes[f"{prefix}.wh"] = ((cfg.nc, cfg.nc, 1, 1), 2 * cfg.nc)
            shapes[f"{prefix}.bias"] = ((cfg.nc,), 2 * cfg.nc)
    d = head_channels(cfg)
    params = {name: Tensor(_uniform(rng, shape, fan, dtype), requires_grad=True, name=name)
              for name, (shape, fan) in shapes.items()}
    for branch in _branches(cfg.ablation):
        params[f"lstm_{branch}.forget.bias"].data[:] = 1.0
    params["head.ln.gain"] = Tensor(np.ones(d, dtype=dtype), requires_grad=True, name="head.ln.gain")
    params["head.ln.bias"] = Tensor(np.zeros(d, dtype=dtype), requires_grad=True, name="head.ln.bias")
    params["head.fc.weight"] = Tensor(_uniform(rng, (d, cfg.classes), d, dtype), requires_grad=True,
                                      name="head.fc.weight")
    params["head.fc.bias"] = Tensor(_uniform(rng, (cfg.classes,), d, dtype), requires_grad=True,
                                    name="head.fc.bias")
    return params


def _branches(ablation: str) -> tuple[str, ...]:
    if ablation in ("bypass", "fvf-only", "all-input-concat"):
        return ()
    if ablation == "high-only":
        return ("h",)
    if ablation == "low-only":
        return ("l",)
    return ("h", "l")


def head_channels(cfg: ModelConfig) -> int:
    return {
        "bypass": cfg.nc,
        "high-only": cfg.nc,
        "low-only": cfg.nc,
        "all-input-concat": 2 * cfg.nf * cfg.nc,
        "all-output-concat": 2 * cfg.nf * cfg.nc,
    }.get(cfg.ablation, 2 * cfg.nc)


# -- building blocks -----------------------------------------------------------


def backbone_forward(params: dict[str, Tensor], image: Tensor, n_blocks: int) -> Tensor:
    x = image
    for b in range(1, n_blocks + 1):
        x = T.conv2d(x, params[f"backbone.conv{b}.weight"], params[f"backbone.conv{b}.bias"], pad=1)
        x = T.pool2d("max", T.relu(x), 2)
    return x


def adapter(params: dict[str, Tensor], feat: Tensor, upsample: int) -> Tensor:
    h, w = feat.shape[-2:]
    if not (_is_pow2(h * upsample) and _is_pow2(w * upsample)):
        raise ValueError(f"adapter output {h * upsample}x{w * upsample} is not a power of two")
    x = T.upsample_nearest(feat, upsample)
    return T.conv2d(x, params["adapter.weight"], params["adapter.bias"])


def lstm_cell_step(params: dict[str, Tensor], prefix: str, state: BranchState, x_t: Tensor) -> BranchState:
    """One convolutional LSTM step with 1x1 gate kernels."""
    if x_t.shape != state.h.shape:
        raise T.ShapeError(f"LSTM input {x_t.shape} vs hidden {state.h.shape}")

    def pre(gate):
        zx = T.conv2d(x_t, params[f"{prefix}.{gate}.wx"], params[f"{prefix}.{gate}.bias"])
        return zx + T.conv2d(state.h, params[f"{prefix}.{gate}.wh"])

    i = T.sigmoid(pre("input"))
    f = T.sigmoid(pre("forget"))
    o = T.sigmoid(pre("output"))
    g = T.tanh(pre("candidate"))
    c = f * state.c + i * g
    h = o * T.tanh(c)
    return BranchState(h, c, state.t + 1)


def run_branch(params: dict[str, Tensor], prefix: str, elements: list[Tensor]) -> list[BranchState]:
    zeros = np.zeros_like(elements[0].data)
    state = BranchState(Tensor(zeros), Tensor(zeros.copy()), 0)
    states = []
    for x_t in elements:
        state = lstm_cell_step(params, prefix, state, x_t)
        states.append(state)
    return states


def cta_aggregate(params: dict[str, Tensor], high, low) -> Tensor:
    """Concatenate the final hidden states of the high and low LSTMs."""
    if len(high) != len(low):
        raise ValueError(f"series length mismatch: {len(high)} vs {len(low)}")
    h_high = run_branch(params, "lstm_h", high.elements)[-1].h
    h_low = run_branch(params, "lstm_l", low.elements)[-1].h
    return T.concat_channels(h_high, h_low)


def head_forward(params: dict[str, Tensor], features: Tensor) -> Tensor:
    """LayerNorm over channels, global average pool, affine classifier."""
    x = T.layernorm(features, params["head.ln.gain"], params["head.ln.bias"])
    pooled = T.global_avg_pool(x)
    batched = pooled.ndim == 2
    if not batched:
        pooled = T.reshape(pooled, (1, -1))
    logits = T.bias_add(T.matmul(pooled, params["head.fc.weight"]), params["head.fc.bias"], axis=1)
    return logits if batched else T.reshape(logits, (-1,))


# -- full model ----------------------------------------------------------------


@dataclass
class CFAN:
    cfg: ModelConfig
    params: dict[str, Tensor] = field(default=None, repr=False)
    seed: int = 0
    dtype: type = np.float32

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.cfg, self.seed, self.dtype)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "CFAN":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        return CFAN(self.cfg, params, self.seed, dtype)

    def adjustable_vectors(self, mode: str, rng=None, fixed_p: float | None = None):
        nc = self.cfg.nc
        if mode == "eval":
            return np.ones(nc), np.ones(nc)
        if mode != "train":
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if fixed_p is not None:
            return np.full(nc, float(fixed_p)), np.full(nc, float(fixed_p))
        if rng is None:
            raise ValueError("train mode needs an rng unless fixed_p is given")
        return sample_adjustable_vectors(rng, nc, self.cfg.p_min, self.cfg.p_max)

    def features(self, images: Tensor, p_h1, p_l1, diagnostics: dict) -> Tensor:
        cfg, params = self.cfg, self.params
        feat = backbone_forward(params, images, len(cfg.backbone_widths))
        x = adapter(params, feat, cfg.upsample)
        if cfg.ablation == "bypass":
            return x
        branches = {"high-only": ("high",), "low-only": ("low",)}.get(cfg.ablation, ("high", "low"))
        high, low = fvf_series(x, p_h1, p_l1, cfg.nf, cfg.nt, cfg.p_min, cfg.p_max,
                               branches=branches, diagnostics=diagnostics)
        for series in (high, low):
            if series is not None:
                diagnostics[f"p_schedule_{series.branch}"] = series.schedule
                diagnostics[f"energy_{series.branch}"] = [float(np.mean(e.data ** 2)) for e in series.elements]
        ab = cfg.ablation
        if ab == "none":
            return cta_aggregate(params, high, low)
        if ab == "fvf-only":
            return T.concat_channels(high.elements[0], low.elements[0])
        if ab == "high-only":
            return run_branch(params, "lstm_h", high.elements)[-1].h
        if ab == "low-only":
            return run_branch(params, "lstm_l", low.elements)[-1].h
        if ab == "all-input-concat":
            return T.concat(high.elements + low.elements)
        states = run_branch(params, "lstm_h", high.elements) + run_branch(params, "lstm_l", low.elements)
        return T.concat([s.h for s in states])

    def forward(self, images: Tensor, mode: str = "eval", rng=None,
                fixed_p: float | None = None) -> tuple[Tensor, dict]:
        p_h1, p_l1 = self.adjustable_vectors(mode, rng, fixed_p)
        diagnostics: dict = {"p_h1": p_h1, "p_l1": p_l1}
        logits = head_forward(self.params, self.features(images, p_h1, p_l1, diagnostics))
        return logits, diagnostics

    __call__ = forward

    def predict_logits(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Eval-mode logits for an ``(N, C, H, W)`` array, without recording a tape."""
        out = []
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                batch = Tensor(np.asarray(images[start:start + batch_size], dtype=self.dtype))
                out.append(self.forward(batch, "eval")[0].data)
        if not out:
            return np.zeros((0, self.cfg.classes), dtype=self.dtype)
        return np.concatenate(out, axis=0)


def model_forward(model: CFAN, image: Tensor, mode: str = "eval", rng=None, fixed_p=None):
    return model.forward(image, mode, rng, fixed_p)
