"""Central finite-difference checks of every differentiable op and the model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import model as M
from . import tensor as T
from .spectral import build_templates, filter_apply, make_filter
from .tensor import Tensor


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f: Callable[[], float], arrays: list[np.ndarray], h: float = 1e-6) -> list[np.ndarray]:
    """Central differences of scalar ``f()`` w.r.t. each array, perturbed in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            flat[i] = orig + step
            up = f()
            flat[i] = orig - step
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads.append(g)
    return grads


def check_fn(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator,
             h: float = 1e-6) -> float:
    """Relative error between reverse-mode and numeric gradients of ``<fn(*x), r>``."""
    tensors = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    probe = rng.standard_normal(fn(*tensors).shape)
    out = fn(*tensors)
    loss = T.sum_all(T.mul(out, Tensor(probe))) if out.data.size > 1 else out
    T.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def f():
        with T.no_grad():
            val = fn(*tensors).data
        return float(np.sum(val * probe)) if val.size > 1 else float(val)

    numeric = numeric_grad(f, [t.data for t in tensors], h)
    return rel_err(np.concatenate([a.ravel() for a in analytic]), np.concatenate([n.ravel() for n in numeric]))


def check_model(model: M.CFAN, images: np.ndarray, labels, rng: np.random.Generator, h: float = 1e-6) -> float:
    """Whole-model check of the cross-entropy gradient w.r.t. every parameter (f64)."""
    x = Tensor(images.astype(np.float64))
    model.zero_grad()
    T.backward(T.softmax_cross_entropy(model.forward(x, "eval")[0], labels))
    params = model.parameters()
    analytic = np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params])

    def f():
        with T.no_grad():
            return float(T.softmax_cross_entropy(model.forward(x, "eval")[0], labels).data)

    numeric = np.concatenate([g.ravel() for g in numeric_grad(f, [p.data for p in params], h)])
    return rel_err(analytic, numeric)


MICRO = M.ModelConfig(image_size=8, backbone_widths=(4, 4, 4), upsample=4, nc=4, nt=4, nf=2, classes=3)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape):
    return (rng.permutation(int(np.prod(shape))).reshape(shape) * 0.1 + rng.uniform(0, 0.01, size=shape))


def _params(cfg, rng):
    model = M.CFAN(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    return model.params


# each case: (name, tolerance, builder(rng) -> (fn, inputs))
def cases():
    def conv_case(rng):
        return (lambda x, k, b: T.conv2d(x, k, b, stride=1, pad=1),
                [rng.standard_normal((2, 8, 8)), rng.standard_normal((4, 2, 3, 3)), rng.standard_normal(4)])

    def strided_conv(rng):
        return (lambda x, k: T.conv2d(x, k, stride=2, pad=1),
                [rng.standard_normal((2, 2, 7, 7)), rng.standard_normal((3, 2, 3, 3))])

    def filter_case(rng):
        mask = make_filter("high", rng.uniform(0.2, 20, size=2), build_templates(8, 8, 4))
        return (lambda x: filter_apply(x, mask), [rng.standard_normal((2, 8, 8))])

    def backbone_case(rng):
        params = _params(MICRO, rng)
        names = [f"backbone.conv{b}.{k}" for b in (1, 2, 3) for k in ("weight", "bias")]

        def fn(img, *ws):
            p = dict(zip(names, ws))
            return M.backbone_forward(p, img, 3)

        return fn, [rng.standard_normal((3, 8, 8))] + [params[n].data.copy() for n in names]

    def adapter_case(rng):
        params = _params(MICRO, rng)
        return (lambda f, w, b: M.adapter({"adapter.weight": w, "adapter.bias": b}, f, 2),
                [rng.standard_normal((4, 2, 2)), params["adapter.weight"].data.copy(),
                 params["adapter.bias"].data.copy()])

    def lstm_case(rng):
        params = _params(MICRO, rng)
        names = [n for n in params if n.startswith("lstm_h.")]

        def fn(x1, x2, *ws):
            p = dict(zip(names, ws))
            states = M.run_branch(p, "lstm_h", [x1, x2])
            return T.concat_channels(states[-1].h, states[-1].c)

        return fn, [rng.standard_normal((4, 4, 4)), rng.standard_normal((4, 4, 4))] + \
            [params[n].data.copy() for n in names]

    def head_case(rng):
        params = _params(MICRO, rng)
        names = ["head.ln.gain", "head.ln.bias", "head.fc.weight", "head.fc.bias"]

        def fn(x, *ws):
            return M.head_forward(dict(zip(names, ws)), x)

        return fn, [rng.standard_normal((8, 4, 4))] + [rng.standard_normal(params[n].shape) for n in names]

    def micro6(rng):
        # six scalars through mul, tanh, sigmoid, relu and matmul
        def fn(w):
            a = T.reshape(w, (2, 3))
            b = T.reshape(T.tanh(w), (3, 2))
            m = T.matmul(a, b)
            return T.sum_all(T.mul(T.sigmoid(m), T.relu(T.scale(m, 0.5)) + m))

        return fn, [_away_from_zero(rng, (6,))]

    return [
        ("add", 1e-6, lambda r: (T.add, [r.standard_normal((3, 4)), r.standard_normal((3, 4))])),
        ("sub", 1e-6, lambda r: (T.sub, [r.standard_normal((3, 4)), r.standard_normal((3, 4))])),
        ("mul", 1e-6, lambda r: (T.mul, [r.standard_normal((3, 4)), r.standard_normal((3, 4))])),
        ("scale", 1e-6, lambda r: (lambda a: T.scale(a, -1.7), [r.standard_normal((3, 4))])),
        ("relu", 1e-6, lambda r: (T.relu, [_away_from_zero(r, (3, 4))])),
        ("sigmoid", 1e-6, lambda r: (T.sigmoid, [r.standard_normal((3, 4)) * 3])),
        ("tanh", 1e-6, lambda r: (T.tanh, [r.standard_normal((3, 4)) * 2])),
        ("matmul", 1e-6, lambda r: (T.matmul, [r.standard_normal((3, 4)), r.standard_normal((4, 2))])),
        ("conv2d", 1e-5, conv_case),
        ("conv2d_stride2", 1e-5, strided_conv),
        ("avg_pool", 1e-6, lambda r: (lambda x: T.pool2d("avg", x, 2), [r.standard_normal((2, 4, 4))])),
        ("global_avg_pool", 1e-6, lambda r: (lambda x: T.pool2d("avg", x), [r.standard_normal((2, 4, 4))])),
        ("max_pool", 1e-6, lambda r: (lambda x: T.pool2d("max", x, 2), [_distinct(r, (2, 4, 4))])),
        ("layernorm", 1e-4, lambda r: (T.layernorm, [r.standard_normal((4, 2, 2)), r.standard_normal(4),
                                                     r.standard_normal(4)])),
        ("upsample_nearest", 1e-6, lambda r: (lambda x: T.upsample_nearest(x, 2), [r.standard_normal((2, 3, 3))])),
        ("softmax_cross_entropy", 1e-5, lambda r: (lambda z: T.softmax_cross_entropy(z, [1, 4]),
                                                   [r.standard_normal((2, 5))])),
        ("concat_channels", 1e-6, lambda r: (T.concat_channels, [r.standard_normal((1, 2, 2)),
                                                                 r.standard_normal((2, 2, 2))])),
        ("bias_add", 1e-6, lambda r: (lambda x, b: T.bias_add(x, b, 1), [r.standard_normal((3, 4)),
                                                                         r.standard_normal(4)])),
        ("filter_apply", 1e-5, filter_case),
        ("backbone", 1e-4, backbone_case),
        ("adapter", 1e-5, adapter_case),
        ("lstm_two_steps", 1e-4, lstm_case),
        ("head", 1e-4, head_case),
        ("micro6", 1e-4, micro6),
    ]


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def run_suite(trials: int = 3, seed: int = 0, include_model: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, tol, build in cases():
        worst = 0.0
        for _ in range(trials):
            fn, inputs = build(rng)
            worst = max(worst, check_fn(fn, inputs, rng))
        results.append(CheckResult(name, worst, tol))
    if include_model:
        model = M.CFAN(MICRO, seed=int(rng.integers(1 << 30)), dtype=np.float64)
        err = check_model(model, rng.standard_normal((2, 3, 8, 8)), [0, 2], rng)
        results.append(CheckResult("full_micro_model", err, 1e-3))
    return results
