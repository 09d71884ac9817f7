"""Built-in consistency checks, runnable from the command line.

Each check is small, deterministic, and self-contained: oracle comparisons
for the conv/pool kernels, frozen fixture values for the optimizer and the
loss, round-trips for both binary formats, and invariance properties of the
augmentation and inference paths. A failure carries a message naming the
mismatch; the runner reports one line per check.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .architecture import ArchConfig, TandemModel, load_model, save_model
from .augment import AugmentConfig, AugmentParams, apply_params
from .checkpoint import load_checkpoint, save_checkpoint
from .inference import predict_volume
from .metrics import border_voxels, overlap_metrics
from .optim import RmspropState, rmsprop_step
from .postprocess import dilate_mm, largest_component
from .phantom import PhantomSpec, gen_phantom
from .tensor import Tensor, no_grad
from .training import dice_loss
from .volume import Volume, downscale_slice, read_volume, write_volume


class SelfTestFailure(Exception):
    pass


def _ensure(condition: bool, message: str) -> None:
    if not condition:
        raise SelfTestFailure(message)


def _conv_oracle(x, w, b, stride, pads):
    """Nested-loop reference convolution (zero padding already applied)."""
    xb = np.pad(x, ((0, 0), (0, 0), (pads[0], pads[1]), (pads[2], pads[3])))
    n, _, hp, wp = xb.shape
    co, ci, kh, kw = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for img in range(n):
        for oc in range(co):
            for i in range(ho):
                for j in range(wo):
                    patch = xb[img, :, i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    out[img, oc, i, j] = (patch * w[oc]).sum() + b[oc]
    return out


def check_conv_oracle() -> None:
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 3, 5, 6)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=(4,)).astype(np.float32)
    with no_grad():
        got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1).data
    want = _conv_oracle(x.astype(np.float64), w.astype(np.float64),
                        b.astype(np.float64), 1, (1, 1, 1, 1))
    _ensure(np.allclose(got, want, atol=1e-4), "conv2d disagrees with nested-loop oracle")


def check_maxpool_oracle() -> None:
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 2, 4, 6)).astype(np.float32)
    with no_grad():
        got = T.maxpool2x2(Tensor(x)).data
    want = np.zeros((1, 2, 2, 3), dtype=np.float32)
    for c in range(2):
        for i in range(2):
            for j in range(3):
                want[0, c, i, j] = x[0, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
    _ensure(np.array_equal(got, want), "maxpool2x2 disagrees with tile-max oracle")


def check_batchnorm_normalizes() -> None:
    rng = np.random.default_rng(9)
    x = rng.normal(loc=3.0, scale=2.0, size=(4, 2, 5, 5)).astype(np.float32)
    gamma = Tensor(np.ones(2, dtype=np.float32))
    beta = Tensor(np.zeros(2, dtype=np.float32))
    rm = np.zeros(2, dtype=np.float32)
    rv = np.ones(2, dtype=np.float32)
    with no_grad():
        out = T.batchnorm2d(Tensor(x), gamma, beta, rm, rv, train=True).data
    mean = out.mean(axis=(0, 2, 3))
    var = out.var(axis=(0, 2, 3))
    _ensure(np.abs(mean).max() < 1e-4, "batchnorm output mean not ~0")
    _ensure(np.abs(var - 1.0).max() < 1e-3, "batchnorm output variance not ~1")


def check_rmsprop_fixture() -> None:
    p = Tensor(np.array([1.0], dtype=np.float32), track_grad=True)
    state = RmspropState.for_params([p], learning_rate=0.01)
    rmsprop_step([p], [np.array([1.0], dtype=np.float32)], state)
    _ensure(abs(state.acc[0][0] - 0.1) < 1e-7, "rmsprop accumulator != 0.1 after one step")
    expected = 1.0 - 0.01 * 1.0 / (np.sqrt(0.1) + 1e-8)
    _ensure(abs(p.data[0] - expected) < 1e-6,
            f"rmsprop parameter {p.data[0]!r} != {expected!r}")


def check_dice_fixture() -> None:
    pred = np.zeros((1, 1, 4, 4), dtype=np.float32)
    target = np.zeros((1, 1, 4, 4), dtype=np.float32)
    pred[0, 0, 0, 0] = pred[0, 0, 0, 1] = 1.0
    target[0, 0, 3, 2] = target[0, 0, 3, 3] = 1.0
    with no_grad():
        loss = float(dice_loss(Tensor(pred), target, smooth=1.0).data)
    _ensure(abs(loss - 0.8) < 1e-6, f"disjoint two-pixel dice loss {loss} != 0.8")
    with no_grad():
        perfect = float(dice_loss(Tensor(target), target, smooth=1.0).data)
    _ensure(perfect < 1e-6, f"perfect-match dice loss {perfect} not ~0")


def check_checkpoint_roundtrip() -> None:
    rng = np.random.default_rng(10)
    arrays = {"w": rng.normal(size=(2, 3)).astype(np.float32),
              "b": rng.normal(size=(3,)).astype(np.float32)}
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "t.ckpt")
        save_checkpoint(path, arrays, meta={"note": "selftest"})
        loaded, meta = load_checkpoint(path)
    _ensure(list(loaded) == ["w", "b"], "checkpoint entry order not preserved")
    _ensure(all(np.array_equal(arrays[k], loaded[k]) for k in arrays),
            "checkpoint arrays not bit-identical after roundtrip")
    _ensure(meta.get("note") == "selftest", "checkpoint metadata lost in roundtrip")


def check_volume_roundtrip() -> None:
    rng = np.random.default_rng(11)
    vol = Volume(rng.normal(size=(3, 4, 5)).astype(np.float32), spacing=(2.0, 1.0, 1.5))
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "v.segv")
        write_volume(vol, path)
        back = read_volume(path)
    _ensure(np.array_equal(vol.data, back.data), "volume payload changed in roundtrip")
    _ensure(back.spacing == (2.0, 1.0, 1.5), "volume spacing changed in roundtrip")


def check_downscale_majority() -> None:
    labels = np.array([[0, 0], [1, 2]], dtype=np.uint8)
    _ensure(int(downscale_slice(labels)[0, 0]) == 2,
            "label downscale tie {0,0,1,2} should give 2")
    labels = np.array([[0, 0], [0, 1]], dtype=np.uint8)
    _ensure(int(downscale_slice(labels)[0, 0]) == 1,
            "label downscale {0,0,0,1} should give 1")
    image = np.array([[1.0, 2.0], [3.0, 6.0]], dtype=np.float32)
    _ensure(float(downscale_slice(image)[0, 0]) == 3.0,
            "image downscale should average 2x2 tiles")


def check_phantom_deterministic() -> None:
    spec = PhantomSpec(dims=(12, 48, 48), liver_semi_axes_mm=(8.0, 18.0, 18.0),
                       lesion_radius_mm=(2.5, 4.0), seed=5)
    img1, lab1 = gen_phantom(spec)
    img2, lab2 = gen_phantom(spec)
    _ensure(np.array_equal(img1.data, img2.data), "phantom image not seed-deterministic")
    _ensure(np.array_equal(lab1.labels, lab2.labels),
            "phantom labels not seed-deterministic")
    _ensure(lab1.labels.max() == 2, "phantom has no lesion voxels")
    lesion = lab1.labels == 2
    liver = lab1.labels >= 1
    _ensure(bool((liver | ~lesion).all()), "phantom lesion escapes the liver")


def check_augment_identity() -> None:
    rng = np.random.default_rng(12)
    image = rng.normal(size=(16, 16)).astype(np.float32)
    labels = (rng.uniform(size=(16, 16)) > 0.7).astype(np.uint8)
    params = AugmentParams(flip_h=False, flip_v=False, rotation_deg=0.0, zoom=1.0,
                           field=None)
    out_img, out_lab = apply_params(image, labels, params)
    _ensure(np.array_equal(out_img, image), "identity augmentation altered the image")
    _ensure(np.array_equal(out_lab, labels), "identity augmentation altered the labels")


def check_augment_flip_involution() -> None:
    rng = np.random.default_rng(13)
    image = rng.normal(size=(12, 12)).astype(np.float32)
    labels = (rng.uniform(size=(12, 12)) > 0.5).astype(np.uint8)
    params = AugmentParams(flip_h=True, flip_v=True, rotation_deg=0.0, zoom=1.0,
                           field=None)
    once_img, once_lab = apply_params(image, labels, params)
    twice_img, twice_lab = apply_params(once_img, once_lab, params)
    _ensure(np.array_equal(twice_img, image), "double flip is not the identity on images")
    _ensure(np.array_equal(twice_lab, labels), "double flip is not the identity on labels")


def check_rotation_matches_rot90() -> None:
    rng = np.random.default_rng(14)
    image = rng.normal(size=(10, 10)).astype(np.float32)
    labels = np.zeros((10, 10), dtype=np.uint8)
    params = AugmentParams(flip_h=False, flip_v=False, rotation_deg=90.0, zoom=1.0,
                           field=None)
    out_img, _ = apply_params(image, labels, params)
    _ensure(np.allclose(out_img, np.rot90(image, 1), atol=1e-4),
            "90-degree rotation disagrees with np.rot90")


def _tiny_model(seed: int = 0) -> TandemModel:
    config = ArchConfig(initial_filters=4, level_filters=[4, 8], level_kinds=["A", "B"],
                        dropout_p=0.0)
    return TandemModel(config, seed=seed)


def check_model_roundtrip() -> None:
    model = _tiny_model(seed=3)
    rng = np.random.default_rng(15)
    img = rng.normal(size=(16, 16)).astype(np.float32)
    liver1, lesion1 = model.predict_slice(img)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ckpt")
        save_model(model, path)
        back = load_model(path)
    liver2, lesion2 = back.predict_slice(img)
    _ensure(np.array_equal(liver1, liver2) and np.array_equal(lesion1, lesion2),
            "saved/loaded model predictions differ")


def check_parallel_matches_sequential() -> None:
    model = _tiny_model(seed=4)
    rng = np.random.default_rng(16)
    vol = Volume(rng.uniform(0, 255, size=(3, 16, 16)).astype(np.float32),
                 spacing=(2.0, 1.0, 1.0))
    seq = predict_volume(model, vol, jobs=1)
    par = predict_volume(model, vol, jobs=2)
    _ensure(np.array_equal(seq.liver_prob, par.liver_prob)
            and np.array_equal(seq.lesion_prob, par.lesion_prob),
            "parallel inference is not bitwise equal to sequential")


def check_largest_component() -> None:
    mask = np.zeros((4, 8, 8), dtype=bool)
    mask[1, 1:4, 1:4] = True   # 9 voxels
    mask[2, 6:8, 6:8] = True   # 4 voxels
    kept = largest_component(mask)
    _ensure(int(kept.sum()) == 9, "largest_component kept the wrong blob")
    _ensure(bool(kept[1, 2, 2]) and not bool(kept[2, 6, 6]),
            "largest_component kept the wrong voxels")


def check_dilation_count() -> None:
    mask = np.zeros((7, 7, 7), dtype=bool)
    mask[3, 3, 3] = True
    grown = dilate_mm(mask, spacing=(1.0, 1.0, 1.0), radius_mm=2.0)
    _ensure(int(grown.sum()) == 33,
            f"unit-spacing radius-2 ball has {int(grown.sum())} voxels, expected 33")


def check_border_voxels() -> None:
    mask = np.zeros((5, 5, 5), dtype=bool)
    mask[1:4, 1:4, 1:4] = True
    border = border_voxels(mask)
    _ensure(int(border.sum()) == 26, "3x3x3 cube should have 26 border voxels")
    _ensure(not bool(border[2, 2, 2]), "cube centre wrongly marked as border")


def check_overlap_conventions() -> None:
    empty = np.zeros((2, 2, 2), dtype=bool)
    both = overlap_metrics(empty, empty)
    _ensure(both["dice"] == 1.0 and both["voe"] == 0.0 and both["rvd"] is None,
            "empty-vs-empty overlap conventions violated")
    full = np.ones((2, 2, 2), dtype=bool)
    same = overlap_metrics(full, full)
    _ensure(same["dice"] == 1.0 and same["rvd"] == 0.0,
            "identical-mask overlap should be perfect")


@dataclass
class CheckResult:
    name: str
    passed: bool
    message: str = ""


CHECKS: list[tuple[str, Callable[[], None]]] = [
    ("conv_oracle", check_conv_oracle),
    ("maxpool_oracle", check_maxpool_oracle),
    ("batchnorm_normalizes", check_batchnorm_normalizes),
    ("rmsprop_fixture", check_rmsprop_fixture),
    ("dice_fixture", check_dice_fixture),
    ("checkpoint_roundtrip", check_checkpoint_roundtrip),
    ("volume_roundtrip", check_volume_roundtrip),
    ("downscale_majority", check_downscale_majority),
    ("phantom_deterministic", check_phantom_deterministic),
    ("augment_identity", check_augment_identity),
    ("augment_flip_involution", check_augment_flip_involution),
    ("rotation_matches_rot90", check_rotation_matches_rot90),
    ("model_roundtrip", check_model_roundtrip),
    ("parallel_matches_sequential", check_parallel_matches_sequential),
    ("largest_component", check_largest_component),
    ("dilation_count", check_dilation_count),
    ("border_voxels", check_border_voxels),
    ("overlap_conventions", check_overlap_conventions),
]


def run_selftest() -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        try:
            fn()
        except SelfTestFailure as exc:
            results.append(CheckResult(name=name, passed=False, message=str(exc)))
        except Exception as exc:  # a crash is a failure, not an abort
            results.append(CheckResult(name=name, passed=False,
                                       message=f"{type(exc).__name__}: {exc}"))
        else:
            results.append(CheckResult(name=name, passed=True))
    return results


def format_results(results: list[CheckResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        suffix = f"  ({r.message})" if r.message else ""
        lines.append(f"{status}  {r.name}{suffix}")
    n_pass = sum(r.passed for r in results)
    lines.append(f"{n_pass}/{len(results)} self-test checks passed")
    return "\n".join(lines)
