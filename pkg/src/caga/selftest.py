"""Built-in self-test: gradient checks, oracle equivalence and shape laws.

Every check resolves the functions under test through their module at call
time, so a patched (for example deliberately broken) operation is picked up.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as A
from . import dataio as D
from . import interpret as I
from . import layers as L
from . import model as M
from . import oracles as O
from . import tensor as T
from . import training as TR

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-6


@dataclass
class CheckResult:
    module: str
    name: str
    passed: bool
    detail: str
    seconds: float


def _f64(rng: np.random.Generator, *shape, positive: bool = False) -> T.Tensor:
    data = rng.uniform(0.5, 2.0, shape) if positive else rng.normal(size=shape)
    return T.Tensor(data, requires_grad=True, dtype=np.float64)


def _grad_case(build: Callable[[list[T.Tensor]], T.Tensor], inputs: list[T.Tensor], seed: int = 1,
               max_entries: int | None = None) -> tuple[bool, str]:
    """Gradcheck the scalar sum(w * build(inputs)) for a fixed random w."""
    rng = np.random.default_rng(seed)
    with T.no_grad():
        probe = build(inputs)
    w = T.Tensor(rng.normal(size=probe.shape), dtype=np.float64)
    err = T.gradcheck(lambda: T.sum_(T.mul(build(inputs), w)), inputs, max_entries=max_entries)
    return err < GRAD_TOL, f"max rel err {err:.2e}"


def _op_checks() -> dict[str, Callable[[], tuple[bool, str]]]:
    r = np.random.default_rng(7)
    a, b = _f64(r, 3, 4), _f64(r, 3, 4)
    row = _f64(r, 1, 4)
    pos = _f64(r, 3, 4, positive=True)
    m1, m2 = _f64(r, 2, 3, 4), _f64(r, 2, 4, 5)
    away_from_kink = T.Tensor(np.where(a.data >= 0, 1, -1) * (np.abs(a.data) + 0.05), requires_grad=True,
                              dtype=np.float64)
    return {
        "add": lambda: _grad_case(lambda t: T.add(t[0], t[1]), [a, row]),
        "sub": lambda: _grad_case(lambda t: T.sub(t[0], t[1]), [a, b]),
        "mul": lambda: _grad_case(lambda t: T.mul(t[0], t[1]), [a, row]),
        "scale": lambda: _grad_case(lambda t: T.scale(t[0], 0.37), [a]),
        "matmul": lambda: _grad_case(lambda t: T.matmul(t[0], t[1]), [m1, m2]),
        "softmax_rows": lambda: _grad_case(lambda t: T.softmax_rows(t[0]), [a]),
        "reshape": lambda: _grad_case(lambda t: T.reshape(t[0], (4, 3)), [a]),
        "permute": lambda: _grad_case(lambda t: T.permute(t[0], (2, 0, 1)), [m1]),
        "transpose": lambda: _grad_case(lambda t: T.transpose(t[0]), [m1]),
        "concat": lambda: _grad_case(lambda t: T.concat([t[0], t[1]], axis=1), [a, b]),
        "slice": lambda: _grad_case(lambda t: T.slice_(t[0], (slice(0, 2), slice(1, 4))), [a]),
        "slice_axis": lambda: _grad_case(lambda t: T.slice_axis(t[0], 2, 1, 3), [m1]),
        "sum": lambda: _grad_case(lambda t: T.sum_(t[0], axis=0), [a]),
        "mean": lambda: _grad_case(lambda t: T.mean(t[0], axis=(0, 2)), [m1]),
        "exp": lambda: _grad_case(lambda t: T.exp(t[0]), [a]),
        "log": lambda: _grad_case(lambda t: T.log(t[0]), [pos]),
        "power": lambda: _grad_case(lambda t: T.power(t[0], 2.5), [pos]),
        "relu": lambda: _grad_case(lambda t: T.relu(t[0]), [away_from_kink]),
    }


def _check_tnsr() -> tuple[bool, str]:
    arr = np.random.default_rng(3).normal(size=(2, 3, 4))
    buf = io.BytesIO()
    T.write_tnsr(buf, arr)
    buf.seek(0)
    back = T.read_tnsr(buf)
    return bool(np.array_equal(arr, back)), "round trip"


def _check_conv_grad() -> tuple[bool, str]:
    r = np.random.default_rng(11)
    worst = 0.0
    for d, s, pad, groups in ((1, 1, "valid", 1), (2, 1, "valid", 1), (3, 2, "valid", 1),
                              (2, 1, "same", 1), (1, 1, "same", 3)):
        x = _f64(r, 2, 3, 9, 9)
        w = _f64(r, 3, 3 // groups, 3, 3)
        bias = _f64(r, 3)
        ok, detail = _grad_case(lambda t: L.conv2d(t[0], t[1], t[2], stride=s, dilation=d, padding=pad,
                                                   groups=groups), [x, w, bias])
        worst = max(worst, float(detail.split()[-1]))
    return worst < GRAD_TOL, f"max rel err {worst:.2e}"


def _check_conv_oracle() -> tuple[bool, str]:
    r = np.random.default_rng(12)
    worst = 0.0
    for d in (1, 2, 3):
        x = r.normal(size=(2, 9, 8))
        w = r.normal(size=(3, 2, 3, 3))
        b = r.normal(size=3)
        ref, _ = O.conv2d_loop(x, w, b, 1, d)
        with T.no_grad():
            got = L.conv2d(T.Tensor(x, dtype=np.float64), T.Tensor(w, dtype=np.float64),
                           T.Tensor(b, dtype=np.float64), dilation=d).data
        worst = max(worst, float(np.abs(got - ref).max()))
    return worst < ORACLE_TOL, f"max abs diff {worst:.1e}"


def _check_shape_law() -> tuple[bool, str]:
    for k in (1, 3, 5):
        for d in (1, 2, 3):
            for s in (1, 2):
                for H in range(k + (k - 1) * (d - 1), 20):
                    if L.dilated_output_extent(H, k, d, s) != O.valid_placements(H, k, d, s):
                        return False, f"k={k} d={d} s={s} H={H}"
    return True, "k∈{1,3,5} d∈{1,2,3} s∈{1,2}"


def _check_interp_grad() -> tuple[bool, str]:
    r = np.random.default_rng(13)
    return _grad_case(lambda t: L.interpolate_bilinear(t[0], (7, 5)), [_f64(r, 1, 2, 3, 4)])


def _check_bn_grad() -> tuple[bool, str]:
    r = np.random.default_rng(14)
    x = _f64(r, 3, 2, 3, 3)
    gamma, beta = _f64(r, 2), _f64(r, 2)

    def build(t):
        state = L.BatchNormState(t[1], t[2], np.zeros(2), np.ones(2))
        return L.batchnorm2d(t[0], state, training=True)

    return _grad_case(build, [x, gamma, beta])


def _check_attention_oracle() -> tuple[bool, str]:
    r = np.random.default_rng(15)
    q, k, v = (r.normal(size=(4, 9)) for _ in range(3))
    ref, _ = O.attention_loop(q, k, v)
    with T.no_grad():
        got = A.scaled_dot_attention(A.AttentionTriple(*(T.Tensor(m, dtype=np.float64) for m in (q, k, v)))).data
    diff = float(np.abs(got - ref).max())
    return diff < ORACLE_TOL, f"max abs diff {diff:.1e}"


def _small_cfg() -> A.CagaConfig:
    return A.CagaConfig(num_heads=2, caa=A.CaaConfig(head_dim=2, d_qkv=2, dilations=(1, 2)))


def _check_block_grad() -> tuple[bool, str]:
    previous = T.default_dtype()
    T.set_default_dtype(np.float64)
    try:
        cfg = _small_cfg()
        block = A.CagaBlock(3, cfg, seed=5)
        r = np.random.default_rng(16)
        x = _f64(r, 2, 3, 6, 6)
        return _grad_case(lambda t: block(t[0]), [x] + block.parameters(), max_entries=12)
    finally:
        T.set_default_dtype(previous)


def _check_param_count() -> tuple[bool, str]:
    cfg = A.CagaConfig()
    closed = A.caga_param_count(cfg, 32)
    counted = A.CagaBlock(32, cfg).num_parameters()
    return closed == counted, f"closed form {closed}, enumerated {counted}"


def _check_model_shape() -> tuple[bool, str]:
    model = M.CagaClassifier(M.ModelConfig(num_classes=4))
    with T.no_grad():
        out = model(T.Tensor(np.zeros((2, 3, 32, 32)))).shape
    return out == (2, 4), f"logits {out}"


def _check_pnm() -> tuple[bool, str]:
    img = np.random.default_rng(17).integers(0, 256, (3, 5, 4)) / 255.0
    back = np.moveaxis(D.decode_pnm(D.encode_ppm(img)), -1, 0)
    return bool(np.allclose(back, img)), "PPM round trip"


def _check_hsv() -> tuple[bool, str]:
    img = np.random.default_rng(18).uniform(size=(3, 6, 6))
    err = float(np.abs(D.hsv_to_rgb(D.rgb_to_hsv(img)) - img).max())
    return err < 1e-12, f"max err {err:.1e}"


def _check_focal_ce() -> tuple[bool, str]:
    r = np.random.default_rng(19)
    logits = r.normal(size=(6, 4))
    targets = r.integers(0, 4, 6)
    got = TR.focal_loss(T.Tensor(logits, dtype=np.float64), targets, TR.FocalLossConfig(gamma=0.0)).item()
    z = logits - logits.max(axis=1, keepdims=True)
    ce = float(np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(6), targets]))
    return abs(got - ce) < 1e-9, f"|focal - ce| = {abs(got - ce):.1e}"


def _check_kfold() -> tuple[bool, str]:
    labels = np.repeat(np.arange(4), 100)
    sizes = {(len(f.train), len(f.val), len(f.test)) for f in TR.kfold_split(400, 10, 82, labels)}
    return sizes == {(288, 72, 40)}, f"sizes {sorted(sizes)}"


def _check_gradcam_fixture() -> tuple[bool, str]:
    feats = np.array([[[1.0, 2.0], [3.0, 4.0]], [[4.0, 0.0], [1.0, 1.0]]])
    grads = np.stack([np.full((2, 2), 0.5), np.full((2, 2), -0.25)])
    cam = I.grad_cam_from_maps(feats, grads, normalize=False)
    expect = np.array([[0.0, 1.0], [1.25, 1.75]])
    return bool(np.allclose(cam, expect)), "2×2 fixture"


def _check_conv_macs() -> tuple[bool, str]:
    r = np.random.default_rng(20)
    _, loops = O.conv2d_loop(r.normal(size=(3, 10, 10)), r.normal(size=(8, 3, 3, 3)))
    macs = I.conv_macs(3, 8, 3, 1, 8, 8)
    return macs == loops, f"{macs} vs {loops} loop iterations"


def registry() -> list[tuple[str, str, Callable[[], tuple[bool, str]]]]:
    checks = [("tensor", f"grad:{name}", fn) for name, fn in _op_checks().items()]
    checks += [
        ("tensor", "tnsr_roundtrip", _check_tnsr),
        ("layers", "grad:conv2d", _check_conv_grad),
        ("layers", "oracle:conv2d", _check_conv_oracle),
        ("layers", "shape_law", _check_shape_law),
        ("layers", "grad:interpolate_bilinear", _check_interp_grad),
        ("layers", "grad:batchnorm2d", _check_bn_grad),
        ("attention", "oracle:scaled_dot_attention", _check_attention_oracle),
        ("attention", "grad:caga_block", _check_block_grad),
        ("attention", "param_count", _check_param_count),
        ("model", "logits_shape", _check_model_shape),
        ("dataio", "pnm_roundtrip", _check_pnm),
        ("dataio", "hsv_roundtrip", _check_hsv),
        ("training", "focal_gamma0_is_ce", _check_focal_ce),
        ("training", "kfold_sizes", _check_kfold),
        ("interpret", "gradcam_fixture", _check_gradcam_fixture),
        ("interpret", "conv_macs", _check_conv_macs),
    ]
    return checks


def run_selftest() -> list[CheckResult]:
    results = []
    for module, name, fn in registry():
        start = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(module, name, bool(passed), detail, time.perf_counter() - start))
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(f"{r.module}.{r.name}") for r in results)
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.module + '.' + r.name:<{width}}  {r.detail} ({r.seconds:.2f}s)")
    failed = [f"{r.module}.{r.name}" for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        lines.append("failing: " + ", ".join(failed))
    return "\n".join(lines)
