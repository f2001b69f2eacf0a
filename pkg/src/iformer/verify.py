"""Self-check suite behind ``iformer verify``.

Each check returns a :class:`CheckResult`; :func:`run_checks` runs them
all against one model and never raises for a failing invariant.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .attention import (
    ShmaParams,
    chunked_window_partition,
    chunked_window_reverse,
    shma_backward,
    shma_forward,
    window_partition,
    window_reverse,
)
from .fusion import (
    count_macs,
    fuse_model,
    fusion_drift,
    layer_macs,
    randomize_bn_statistics,
    shma_complexity_formula,
)
from .model import AttentionBlock, Model
from .ops import BnParams, ConvParams
from .tensor import Tensor, count_layout_changes

__all__ = ["CheckResult", "run_checks", "random_shma_params", "shma_reference", "gradient_check", "CHECKS"]

LAYER_TOL = 1e-4
LOGIT_TOL = 1e-3
GRAD_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<24} {self.detail}"


def random_shma_params(rng: np.random.Generator, c: int, hd: int, bias: bool = False, bn: bool = True) -> ShmaParams:
    """Standalone SHMA weights with non-trivial BN statistics."""

    def conv(cout, cin):
        w = Tensor(rng.normal(0, cin ** -0.5, (cout, cin, 1, 1)))
        return ConvParams(w, Tensor(rng.normal(0, 0.1, cout)) if bias else None)

    def norm(ch):
        if not bn:
            return None
        return BnParams(
            Tensor(rng.uniform(0.5, 1.5, ch)),
            Tensor(rng.normal(0, 0.1, ch)),
            Tensor(rng.normal(0, 0.1, ch)),
            Tensor(rng.uniform(0.5, 1.5, ch)),
        )

    return ShmaParams(
        conv(hd, c), conv(hd, c), conv(c, c), conv(c, c), conv(c, c),
        norm(hd), norm(hd), norm(c), norm(c), norm(c),
    )


def shma_reference(x: np.ndarray, p: ShmaParams, arrays: Optional[dict] = None) -> np.ndarray:
    """Plain float64 SHMA forward used for finite differences."""
    arrays = p.arrays() if arrays is None else arrays
    n, c, h, w = x.shape
    t = x.reshape(n, c, h * w)

    def proj(name, inp):
        y = np.einsum("oc,ncl->nol", arrays[f"{name}.weight"][:, :, 0, 0], inp)
        if f"{name}.bias" in arrays:
            y = y + arrays[f"{name}.bias"][None, :, None]
        bn = getattr(p, f"bn_{name}")
        if bn is not None:
            mean = bn.running_mean.data.astype(np.float64)[None, :, None]
            var = bn.running_var.data.astype(np.float64)[None, :, None]
            y = (y - mean) / np.sqrt(var + bn.eps) * arrays[f"bn_{name}.gamma"][None, :, None] \
                + arrays[f"bn_{name}.beta"][None, :, None]
        return y

    q, k, v, m = (proj(nm, t) for nm in "qkvm")
    s = np.einsum("ndi,ndj->nij", q, k) * p.scale
    a = np.exp(s - s.max(axis=-1, keepdims=True))
    a /= a.sum(axis=-1, keepdims=True)
    ctx = np.einsum("ncj,nij->nci", v, a)
    g = 1 / (1 + np.exp(-m)) * (1 / (1 + np.exp(-ctx)))
    return proj("o", g).reshape(n, c, h, w)


def gradient_check(seed: int = 0, c: int = 4, hw: int = 2, hd: int = 2, step: float = 1e-3, bias: bool = True) -> dict:
    """Max relative error (max|analytic - fd| / max|fd|) per gradient tensor.

    The denominator is floored at 1e-6: key-side biases shift every score of
    a row equally, so their true gradient is zero and only round-off remains.
    """
    rng = np.random.default_rng(seed)
    p = random_shma_params(rng, c, hd, bias=bias)
    x = rng.normal(0, 1, (1, c, hw, hw)).astype(np.float32).astype(np.float64)
    g = rng.normal(0, 1, x.shape).astype(np.float32).astype(np.float64)
    grad_x, grads = shma_backward(Tensor(x), p, Tensor(g))
    base = p.arrays()

    def rel(analytic, fd):
        return float(np.max(np.abs(analytic - fd)) / max(np.max(np.abs(fd)), 1e-6))

    def loss(xv, arrays):
        return float(np.sum(shma_reference(xv, p, arrays) * g))

    out = {}
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += step
        xm[idx] -= step
        fd[idx] = (loss(xp, base) - loss(xm, base)) / (2 * step)
    out["x"] = rel(grad_x.data.astype(np.float64), fd)
    for name, arr in base.items():
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus, minus = dict(base), dict(base)
            plus[name] = arr.copy()
            plus[name][idx] += step
            minus[name] = arr.copy()
            minus[name][idx] -= step
            fd[idx] = (loss(x, plus) - loss(x, minus)) / (2 * step)
        out[name] = rel(grads[name].data.astype(np.float64), fd)
    return out


# --- individual checks -----------------------------------------------------

def check_bn_invariants(model: Model, rng) -> CheckResult:
    bad = []
    for layer in model.layers():
        for bn in layer.batchnorms():
            for v in bn.violations():
                bad.append(f"{layer.name}: {v}")
    if bad:
        return CheckResult("bn-invariants", False, f"{len(bad)} violations, first: {bad[0]}")
    return CheckResult("bn-invariants", True, f"{len(model.batchnorms())} BN layers ok")


def check_fold(model: Model, rng) -> CheckResult:
    res = model.config.resolution
    x = Tensor(rng.normal(0, 1, (1, model.config.in_channels, res, res)))
    noisy = randomize_bn_statistics(model, int(rng.integers(1 << 31)))
    per_layer, logits = fusion_drift(noisy, fuse_model(noisy), x)
    worst_name, worst = max(per_layer, key=lambda t: t[1])
    ok = worst <= LAYER_TOL and logits <= LOGIT_TOL
    return CheckResult("fold-equivalence", ok, f"worst layer {worst:.2e} ({worst_name}), logits {logits:.2e}")


def check_partition(model: Model, rng) -> CheckResult:
    cases = 0
    for size in (2, 4, 8):
        for n_chunks in (1, 2, 4):
            x = Tensor(rng.normal(0, 1, (2, 8, 2 * size, 3 * size)))
            h, w = x.shape[2:]
            win = window_partition(x, size)
            ok = window_reverse(win, size, h, w).bit_equal(x)
            ok &= chunked_window_partition(x, size, n_chunks).bit_equal(win)
            ok &= chunked_window_reverse(win, size, h, w, n_chunks).bit_equal(x)
            if not ok:
                return CheckResult("partition-roundtrip", False, f"P={size} chunks={n_chunks} mismatch")
            cases += 1
    return CheckResult("partition-roundtrip", True, f"{cases} cases bit-exact")


def _first_shma(model: Model):
    for layer in model.layers():
        if isinstance(layer, AttentionBlock) and isinstance(layer.attn, ShmaParams):
            return layer.attn
    return None


def check_boundedness(model: Model, rng, trials: int = 200) -> CheckResult:
    p = _first_shma(model) or random_shma_params(rng, 16, 8)
    lo, hi = 1.0, 0.0
    for _ in range(trials):
        mag = 10.0 ** rng.uniform(-2, 4)
        x = Tensor(rng.normal(0, 1, (1, p.channels, 4, 4)) * mag)
        _, mod = shma_forward(x, p, return_modulation=True)
        lo, hi = min(lo, float(mod.data.min())), max(hi, float(mod.data.max()))
        if not (lo > 0.0 and hi < 1.0):
            return CheckResult("modulation-bounds", False, f"product left (0,1): [{lo}, {hi}] at |x|~{mag:.1e}")
    return CheckResult("modulation-bounds", True, f"{trials} inputs, range [{lo:.2e}, {hi:.6f}]")


def check_gradient(model: Model, rng) -> CheckResult:
    errs = gradient_check(seed=int(rng.integers(1 << 31)))
    name, worst = max(errs.items(), key=lambda t: t[1])
    return CheckResult("gradient-check", worst <= GRAD_TOL, f"{len(errs)} tensors, worst rel err {worst:.2e} ({name})")


def check_counters(model: Model, rng) -> CheckResult:
    problems = []
    total = count_macs(model)
    if total <= 0:
        problems.append("non-positive MAC total")
    # isolated SHMA layer vs closed form
    for _ in range(3):
        r = int(rng.choice([1, 2, 4]))
        c = r * int(rng.integers(1, 5)) * 4
        p = random_shma_params(rng, c, c // r)
        hh = int(rng.integers(1, 6))
        macs, _ = layer_macs(p, (1, c, hh, hh))
        if macs != shma_complexity_formula(hh, hh, c, r=r):
            problems.append(f"SHMA MACs {macs} != formula at H=W={hh} C={c} R={r}")
    # permutes per attention block are a fixed structural count
    block = next((l for l in model.layers() if isinstance(l, AttentionBlock) and l.window_role is None), None)
    if block is not None:
        c = block.attn.channels
        x = Tensor(rng.normal(0, 1, (1, c, 4, 4)))
        counts = []
        for _ in range(2):
            with count_layout_changes() as lc:
                block(x, (4, 4))
            counts.append(lc.total)
        if counts[0] != counts[1] or counts[0] == 0:
            problems.append(f"unstable layout-change count {counts}")
    if problems:
        return CheckResult("counter-crosscheck", False, problems[0])
    return CheckResult("counter-crosscheck", True, f"{total / 1e9:.3f} GMACs, formulas agree")


CHECKS: list = [
    ("bn-invariants", check_bn_invariants),
    ("fold-equivalence", check_fold),
    ("partition-roundtrip", check_partition),
    ("modulation-bounds", check_boundedness),
    ("gradient-check", check_gradient),
    ("counter-crosscheck", check_counters),
]


def run_checks(model: Model, seed: int = 0, only: Optional[list] = None,
               report: Optional[Callable[[CheckResult], None]] = None) -> list:
    """Run every check (or those named in ``only``); each gets its own seeded RNG."""
    results = []
    for i, (name, fn) in enumerate(CHECKS):
        if only and name not in only:
            continue
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        try:
            res = fn(model, rng)
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(name, False, f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        results.append(res)
        if report is not None:
            report(res)
    return results
