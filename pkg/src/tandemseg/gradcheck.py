"""Central-difference gradient verification for the tensor engine.

Every differentiable op gets at least one case. Inputs are constructed to
stay away from non-differentiable points (relu at 0, pooling ties), all
arithmetic runs in double precision, and the analytic gradient must agree
with the numeric one to a relative error below the tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad, precision
from .training import dice_loss

DEFAULT_EPS = 1e-5
DEFAULT_TOLERANCE = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   atol: float = 1e-8) -> float:
    """max over elements of |a - n| / max(|a|, |n|, 1e-6).

    Elements where both estimates are below ``atol`` are skipped: they are
    indistinguishable from zero at central-difference resolution. The case
    that needs this is structural — a conv bias feeding straight into a
    train-mode batchnorm has a true gradient of exactly zero (the constant
    channel shift is erased by the normalizer), leaving only round-off noise
    in both the analytic and the numeric estimate.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric) / np.maximum(scale, 1e-6)
    err[scale <= atol] = 0.0
    return float(err.max()) if err.size else 0.0


def numeric_gradient(loss_fn: Callable[[list[np.ndarray]], float],
                     arrays: list[np.ndarray], index: int,
                     eps: float = DEFAULT_EPS) -> np.ndarray:
    """Central differences on one input array, element by element."""
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[index], dtype=np.float64)
    flat = base[index].reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn(base)
        flat[i] = orig - eps
        lo = loss_fn(base)
        flat[i] = orig
        out[i] = (hi - lo) / (2.0 * eps)
    return grad


@dataclass
class GradCheckCase:
    name: str
    build: Callable[[], list[np.ndarray]]
    loss: Callable[[list[Tensor]], Tensor]


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_inputs: int
    passed: bool


def _project(out: Tensor, seed: int) -> Tensor:
    """Scalarize via a fixed random projection so every output element
    influences the loss."""
    rng = np.random.default_rng(seed)
    weights = rng.normal(size=out.data.shape).astype(np.float64)
    return (out * weights).sum()


def _signed_away_from_zero(rng, shape, low=0.2, high=1.0) -> np.ndarray:
    mag = rng.uniform(low, high, size=shape)
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return (mag * sign).astype(np.float64)


def _distinct_tiles(rng, shape) -> np.ndarray:
    """Values that are globally distinct with a gap far above eps, so the
    maxpool argmax is stable under perturbation."""
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * 0.1).reshape(shape)


def _build_cases() -> list[GradCheckCase]:
    cases: list[GradCheckCase] = []

    def add_case(name, build, loss):
        cases.append(GradCheckCase(name=name, build=build, loss=loss))

    add_case(
        "add_broadcast",
        lambda: [np.random.default_rng(1).normal(size=(3, 4)),
                 np.random.default_rng(2).normal(size=(4,))],
        lambda ts: _project(ts[0] + ts[1], 101))
    add_case(
        "sub_mul",
        lambda: [np.random.default_rng(3).normal(size=(3, 4)),
                 np.random.default_rng(4).normal(size=(3, 4)),
                 np.random.default_rng(5).normal(size=(3, 4))],
        lambda ts: _project((ts[0] - ts[1]) * ts[2], 102))
    add_case(
        "div",
        lambda: [np.random.default_rng(6).normal(size=(2, 5)),
                 np.random.default_rng(7).uniform(0.5, 1.5, size=(2, 5))],
        lambda ts: _project(ts[0] / ts[1], 103))
    add_case(
        "sum_mean",
        lambda: [np.random.default_rng(8).normal(size=(4, 3))],
        lambda ts: (ts[0] * ts[0]).sum() + ts[0].mean() * 3.0)
    add_case(
        "strict_add",
        lambda: [np.random.default_rng(9).normal(size=(2, 3, 4, 4)),
                 np.random.default_rng(10).normal(size=(2, 3, 4, 4))],
        lambda ts: _project(T.add(ts[0], ts[1]), 104))
    add_case(
        "relu",
        lambda: [_signed_away_from_zero(np.random.default_rng(11), (3, 5))],
        lambda ts: _project(T.relu(ts[0]), 105))
    add_case(
        "sigmoid",
        lambda: [np.random.default_rng(12).normal(size=(3, 5)) * 3.0],
        lambda ts: _project(T.sigmoid(ts[0]), 106))
    add_case(
        "concat",
        lambda: [np.random.default_rng(13).normal(size=(2, 2, 3, 3)),
                 np.random.default_rng(14).normal(size=(2, 4, 3, 3))],
        lambda ts: _project(T.concat((ts[0], ts[1]), axis=1), 107))
    add_case(
        "maxpool2x2",
        lambda: [_distinct_tiles(np.random.default_rng(15), (1, 2, 4, 4))],
        lambda ts: _project(T.maxpool2x2(ts[0]), 108))
    add_case(
        "upsample_nearest2x",
        lambda: [np.random.default_rng(16).normal(size=(1, 3, 2, 3))],
        lambda ts: _project(T.upsample_nearest2x(ts[0]), 109))
    add_case(
        "grid_subsample2x",
        lambda: [np.random.default_rng(17).normal(size=(1, 2, 4, 6))],
        lambda ts: _project(T.grid_subsample2x(ts[0]), 110))
    add_case(
        "dropout",
        lambda: [np.random.default_rng(18).normal(size=(3, 4, 4))],
        lambda ts: _project(
            T.dropout(ts[0], 0.3, np.random.default_rng(4242), train=True), 111))
    add_case(
        "conv1x1",
        lambda: [np.random.default_rng(19).normal(size=(2, 3, 4, 5)),
                 np.random.default_rng(20).normal(size=(4, 3, 1, 1)),
                 np.random.default_rng(21).normal(size=(4,))],
        lambda ts: _project(T.conv2d(ts[0], ts[1], ts[2], stride=1), 112))
    add_case(
        "conv3x3_stride1",
        lambda: [np.random.default_rng(22).normal(size=(1, 2, 5, 6)),
                 np.random.default_rng(23).normal(size=(3, 2, 3, 3)),
                 np.random.default_rng(24).normal(size=(3,))],
        lambda ts: _project(T.conv2d(ts[0], ts[1], ts[2], stride=1), 113))
    add_case(
        "conv3x3_stride2",
        lambda: [np.random.default_rng(25).normal(size=(1, 2, 6, 6)),
                 np.random.default_rng(26).normal(size=(2, 2, 3, 3)),
                 np.random.default_rng(27).normal(size=(2,))],
        lambda ts: _project(T.conv2d(ts[0], ts[1], ts[2], stride=2), 114))

    def bn_train_loss(ts):
        running_mean = np.zeros(3, dtype=np.float64)
        running_var = np.ones(3, dtype=np.float64)
        out = T.batchnorm2d(ts[0], ts[1], ts[2], running_mean, running_var, train=True)
        return _project(out, 115)

    add_case(
        "batchnorm_train",
        lambda: [np.random.default_rng(28).normal(size=(2, 3, 4, 4)),
                 np.random.default_rng(29).uniform(0.5, 1.5, size=(3,)),
                 np.random.default_rng(30).normal(size=(3,))],
        bn_train_loss)

    def bn_eval_loss(ts):
        running_mean = np.array([0.1, -0.2, 0.3], dtype=np.float64)
        running_var = np.array([0.9, 1.1, 0.7], dtype=np.float64)
        out = T.batchnorm2d(ts[0], ts[1], ts[2], running_mean, running_var, train=False)
        return _project(out, 116)

    add_case(
        "batchnorm_eval",
        lambda: [np.random.default_rng(31).normal(size=(2, 3, 4, 4)),
                 np.random.default_rng(32).uniform(0.5, 1.5, size=(3,)),
                 np.random.default_rng(33).normal(size=(3,))],
        bn_eval_loss)

    def dice_case_loss(ts):
        target = (np.arange(36).reshape(1, 1, 6, 6) % 3 == 0).astype(np.float64)
        return dice_loss(T.sigmoid(ts[0]), target)

    add_case(
        "dice_loss",
        lambda: [np.random.default_rng(34).normal(size=(1, 1, 6, 6))],
        dice_case_loss)

    def chain_loss(ts):
        x, w1, b1, gamma, beta, w2, b2 = ts
        running_mean = np.zeros(4, dtype=np.float64)
        running_var = np.ones(4, dtype=np.float64)
        h = T.conv2d(x, w1, b1, stride=1)
        h = T.batchnorm2d(h, gamma, beta, running_mean, running_var, train=True)
        h = T.relu(h)
        h = T.maxpool2x2(h)
        h = T.conv2d(h, w2, b2, stride=1)
        return _project(T.sigmoid(h), 117)

    def chain_inputs():
        rng = np.random.default_rng(35)
        return [_distinct_tiles(rng, (1, 2, 4, 4)),
                rng.normal(size=(4, 2, 3, 3)),
                rng.normal(size=(4,)),
                rng.uniform(0.5, 1.5, size=(4,)),
                rng.normal(size=(4,)),
                rng.normal(size=(1, 4, 1, 1)),
                rng.normal(size=(1,))]

    add_case("conv_bn_relu_pool_chain", chain_inputs, chain_loss)
    return cases


def check_case(case: GradCheckCase, eps: float = DEFAULT_EPS,
               tolerance: float = DEFAULT_TOLERANCE) -> GradCheckResult:
    with precision("double"):
        arrays = [np.asarray(a, dtype=np.float64) for a in case.build()]
        tensors = [Tensor(a.copy(), track_grad=True) for a in arrays]
        loss = case.loss(tensors)
        loss.backward()
        analytic = [t.grad.copy() for t in tensors]

        def eval_loss(current: list[np.ndarray]) -> float:
            with no_grad():
                wrapped = [Tensor(a) for a in current]
                return float(case.loss(wrapped).data)

        worst = 0.0
        for index in range(len(arrays)):
            numeric = numeric_gradient(eval_loss, arrays, index, eps=eps)
            worst = max(worst, relative_error(analytic[index], numeric))
    return GradCheckResult(name=case.name, max_rel_error=worst,
                           n_inputs=len(arrays), passed=worst < tolerance)


TANDEM_CASE_NAME = "tandem_model_composed"


def check_tandem_model(eps: float = DEFAULT_EPS,
                       tolerance: float = DEFAULT_TOLERANCE) -> GradCheckResult:
    """Finite-difference check through the full two-FCN cascade: the input
    slice and every trainable parameter, with train-mode batch statistics."""
    from .architecture import ArchConfig, TandemModel

    with precision("double"):
        arch = ArchConfig(input_channels=1, initial_filters=2, level_filters=[2, 4],
                          level_kinds=["A", "B"], dropout_p=0.0)
        model = TandemModel(arch, seed=11)
        params = model.parameters()
        x = Tensor(np.random.default_rng(40).normal(size=(1, 1, 8, 8)),
                   track_grad=True)

        def loss_from(xt: Tensor) -> Tensor:
            liver, lesion, _, _ = model.forward(xt, train=True)
            return _project(liver, 118) + _project(lesion, 119)

        loss = loss_from(x)
        loss.backward()
        analytic = [x.grad.copy()] + [p.grad.copy() for p in params]
        for p in params:
            p.zero_grad()

        # Parameters are perturbed in place; the model reads them live.
        arrays = [x.data] + [p.data for p in params]

        def eval_loss() -> float:
            with no_grad():
                return float(loss_from(Tensor(arrays[0].copy())).data)

        worst = 0.0
        for arr, ana in zip(arrays, analytic):
            flat = arr.reshape(-1)
            numeric = np.zeros(flat.size, dtype=np.float64)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = eval_loss()
                flat[i] = orig - eps
                lo = eval_loss()
                flat[i] = orig
                numeric[i] = (hi - lo) / (2.0 * eps)
            worst = max(worst, relative_error(ana, numeric.reshape(ana.shape)))
    return GradCheckResult(name=TANDEM_CASE_NAME, max_rel_error=worst,
                           n_inputs=len(arrays), passed=worst < tolerance)


def run_gradcheck(eps: float = DEFAULT_EPS, tolerance: float = DEFAULT_TOLERANCE,
                  names: Sequence[str] | None = None) -> list[GradCheckResult]:
    cases = _build_cases()
    all_names = {c.name for c in cases} | {TANDEM_CASE_NAME}
    if names is not None:
        wanted = set(names)
        unknown = wanted - all_names
        if unknown:
            raise ValueError(f"unknown gradcheck cases: {sorted(unknown)}")
        cases = [c for c in cases if c.name in wanted]
    results = [check_case(case, eps=eps, tolerance=tolerance) for case in cases]
    if names is None or TANDEM_CASE_NAME in names:
        results.append(check_tandem_model(eps=eps, tolerance=tolerance))
    return results


def format_results(results: Sequence[GradCheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<28s} max_rel_err={r.max_rel_error:.3e}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} gradient checks passed")
    return "\n".join(lines)
