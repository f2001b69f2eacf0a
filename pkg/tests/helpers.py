import numpy as np

from iformer.attention import MhaParams, ShmaParams
from iformer.ops import BnParams, ConvParams
from iformer.tensor import Tensor


def conv1x1(rng, cout, cin, bias=False):
    w = Tensor(rng.normal(0, cin ** -0.5, (cout, cin, 1, 1)))
    return ConvParams(w, Tensor(rng.normal(0, 0.1, cout)) if bias else None)


def bn(rng, c, eps=1e-5):
    return BnParams(
        Tensor(rng.uniform(0.5, 1.5, c)), Tensor(rng.normal(0, 0.1, c)),
        Tensor(rng.normal(0, 0.1, c)), Tensor(rng.uniform(0.5, 1.5, c)), eps,
    )


def shma_params(rng, c, hd, bias=False, with_bn=True):
    convs = [conv1x1(rng, hd, c, bias), conv1x1(rng, hd, c, bias)] + [conv1x1(rng, c, c, bias) for _ in range(3)]
    bns = [bn(rng, hd), bn(rng, hd), bn(rng, c), bn(rng, c), bn(rng, c)] if with_bn else [None] * 5
    return ShmaParams(*convs, *bns)


def mha_params(rng, c, heads, with_bn=True):
    convs = [conv1x1(rng, c, c) for _ in range(4)]
    bns = [bn(rng, c) for _ in range(4)] if with_bn else [None] * 4
    return MhaParams(*convs, heads, *bns)


def oracle_weights(p: ShmaParams):
    """(weights, bn) dicts in the layout :func:`oracles.shma` expects."""
    w, norms = {}, {}
    for n in "qkvmo":
        conv = getattr(p, n)
        w[n] = conv.weight.data[:, :, 0, 0].astype(np.float64)
        if conv.bias is not None:
            w[n + "_b"] = conv.bias.data.astype(np.float64)
        b = getattr(p, f"bn_{n}")
        if b is not None:
            norms[n] = tuple(t.data.astype(np.float64) for t in (b.gamma, b.beta, b.running_mean, b.running_var)) + (b.eps,)
    return w, norms
