"""Finite-difference verification of every hand-written backward pass.

Two families of checks run in double precision:

* layer checks: each kernel in :mod:`lamreid.numerics` against central
  differences of ``sum(out * R)`` for a random upstream ``R``;
* network checks: the full loss, through :func:`network.backward`, for every
  residual depth, with and without batch-norm, under each loss kind.

Adaptive margins are frozen at the base point because the analytic gradient
treats them as constants.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import network
from . import numerics as nx
from .margin_loss import LOSS_KINDS, LossConfig, adaptive_margins, batch_loss, batch_mean_distances, pair_distances
from .sampler import PairBatch, generate_synthetic, make_minibatch

TOLERANCE = 1e-4
EPS = 1e-6
# zero-gradient tensors are measured against this fraction of the largest gradient in the same network
FLOOR_FRACTION = 1e-3
SIZES = ("tiny", "small")


def size_config(size: str, **overrides) -> network.NetConfig:
    if size == "tiny":
        return network.NetConfig.reduced(**overrides)
    if size == "small":
        kw = dict(input_shape=(3, 48, 16), global_filters=6, local_filters=4, part_dim=8)
        kw.update(overrides)
        return network.NetConfig.reduced(**kw)
    raise ValueError(f"size must be one of {SIZES}, got {size!r}")


def relative_error(analytic, numeric, floor=1e-12) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)`` over one tensor's checked entries.

    ``floor`` stops tensors whose true gradient is identically zero (a bias
    that cancels in a pair difference, a bias ahead of batch-norm) from being
    judged on pure round-off.
    """
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


@dataclass
class CheckResult:
    component: str
    error: float
    checked: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < TOLERANCE)


@dataclass
class Report:
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_error(self) -> float:
        return max((r.error for r in self.results), default=0.0)

    def lines(self):
        for r in self.results:
            yield f"{'PASS' if r.passed else 'FAIL'}  {r.error:.3e}  {r.component}"


def _sample(shape, k, rng):
    """Up to ``k`` distinct flat indices into an array of ``shape``."""
    size = int(np.prod(shape))
    return rng.choice(size, size=min(k, size), replace=False)


def numeric_grad(f, x, flat_indices, eps=EPS):
    """Central differences of scalar ``f()`` w.r.t. ``x`` (mutated in place, then restored)."""
    view = x.reshape(-1)
    out = np.empty(len(flat_indices))
    for k, i in enumerate(flat_indices):
        old = view[i]
        view[i] = old + eps
        fp = f()
        view[i] = old - eps
        fm = f()
        view[i] = old
        out[k] = (fp - fm) / (2 * eps)
    return out


def _corrupt(grad, name, corrupt):
    if corrupt is not None and corrupt in name:
        return grad * 1.01 + 1e-3 * np.max(np.abs(grad), initial=1.0)
    return grad


# -- layer checks -----------------------------------------------------------

def _layer_cases(rng):
    """Yield ``(kind, forward, backward, inputs)``; backward(dout) returns grads aligned with inputs."""
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    for stride, pad in ((1, 0), (1, 1), (2, 1)):
        yield (f"convolution(stride={stride},pad={pad})",
               lambda x=x, w=w, b=b, s=stride, p=pad: nx.convolve(x, w, b, s, p),
               lambda d, x=x, w=w, s=stride, p=pad: nx.convolve_grad(d, x, w, s, p),
               {"input": x, "weight": w, "bias": b})
    xp = rng.standard_normal((2, 3, 7, 6))
    for window, stride in ((3, 3), (3, 1), (2, 2)):
        def fwd(xp=xp, k=window, s=stride):
            return nx.pool_max(xp, k, s)[0]

        def bwd(d, xp=xp, k=window, s=stride):
            return (nx.pool_max_grad(d, nx.pool_max(xp, k, s)[1], xp.shape, k, s),)
        yield f"max_pool(window={window},stride={stride})", fwd, bwd, {"input": xp}
    xr = rng.standard_normal((3, 7))
    xr[np.abs(xr) < 0.05] = 0.3   # keep clear of the kink
    yield "rectify", lambda: nx.rectify(xr), lambda d: (nx.rectify_grad(d, xr),), {"input": xr}
    a, c = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
    yield ("add_elementwise", lambda: nx.add_elementwise(a, c), lambda d: nx.add_elementwise_grad(d),
           {"a": a, "b": c})
    xa, wa, ba = rng.standard_normal((4, 6)), rng.standard_normal((5, 6)), rng.standard_normal(5)
    yield ("affine", lambda: nx.affine(xa, wa, ba), lambda d: nx.affine_grad(d, xa, wa),
           {"input": xa, "weight": wa, "bias": ba})
    xb = rng.standard_normal((4, 3, 2, 3))
    sc, sh = rng.standard_normal(3), rng.standard_normal(3)
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    for mode in ("train", "inference"):
        def fwd(mode=mode):
            return nx.normalize_batch(xb, sc, sh, rm, rv, mode)[0]

        def bwd(d, mode=mode):
            return nx.normalize_batch_grad(d, nx.normalize_batch(xb, sc, sh, rm, rv, mode)[1])
        yield f"batch_norm({mode})", fwd, bwd, {"input": xb, "scale": sc, "shift": sh}
    p1, p2 = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 2))
    yield ("concatenate", lambda: nx.concatenate([p1, p2], axis=2),
           lambda d: nx.concatenate_grad(d, [4, 2], axis=2), {"a": p1, "b": p2})


def check_layers(seed=0, samples=40, corrupt=None) -> list:
    rng = np.random.default_rng(seed)
    results = []
    for kind, fwd, bwd, inputs in _layer_cases(rng):
        upstream = rng.standard_normal(fwd().shape)
        analytic = bwd(upstream)
        for (name, arr), g in zip(inputs.items(), analytic):
            component = f"layer {kind} d/{name}"
            g = _corrupt(g, component, corrupt)
            idx = _sample(arr.shape, samples, rng)
            num = numeric_grad(lambda: float(np.sum(fwd() * upstream)), arr, idx)
            results.append(CheckResult(component, relative_error(g.reshape(-1)[idx], num), len(idx)))
    return results


# -- network checks ---------------------------------------------------------

def _gradcheck_batch(config, seed):
    ds = generate_synthetic(5, 2, seed=seed, image_shape=config.input_shape, max_jitter=1)
    batch = make_minibatch(ds, 3, 2, 2, np.random.default_rng(seed))
    return ds.images[batch.image_indices].astype(np.float64), batch


def check_network(config: network.NetConfig, loss_kind: str, seed=0, samples=6, corrupt=None) -> list:
    """Per-tensor check of d(loss)/d(params) through the full network."""
    rng = np.random.default_rng(seed)
    params = network.init_params(config, seed).astype(np.float64)
    images, batch = _gradcheck_batch(config, seed)
    features, trace = network.forward(params, images, mode="train")
    # fixed margin scaled to the features so some pairs are active and some are not
    D = pair_distances(features, batch.ia, batch.ib)
    lc = LossConfig(loss_kind=loss_kind, margin=float(np.median(D)) * 1.5 + 1e-3)
    margins = adaptive_margins(*batch_mean_distances(D, batch.y), lc.mu, lc.gamma) \
        if loss_kind == "adaptive" else None
    res = batch_loss(features, batch, lc, margins)
    grads = network.backward(params, trace, res.grad)

    def loss():
        f, _ = network.forward(params, images, mode="train")
        return batch_loss(f, batch, lc, margins).loss

    floor = FLOOR_FRACTION * max(np.max(np.abs(g)) for g in grads.values())
    tag = f"R={config.residual_blocks} bn={'on' if config.use_batch_norm else 'off'} loss={loss_kind}"
    results = []
    for name, arr in params.params.items():
        component = f"network[{tag}] {name}"
        g = _corrupt(grads[name], component, corrupt)
        idx = _sample(arr.shape, samples, rng)
        num = numeric_grad(loss, arr, idx)
        results.append(CheckResult(component, relative_error(g.reshape(-1)[idx], num, floor), len(idx)))
    return results


def check_feature_grads(loss_kind: str, seed=0, corrupt=None) -> list:
    """d(loss)/d(features) alone, every entry."""
    rng = np.random.default_rng(seed)
    n, dim = 8, 6
    F = rng.standard_normal((n, dim))
    ia = np.repeat(np.arange(2), 4)
    ib = np.array([2, 3, 4, 5, 3, 4, 6, 7])
    y = np.array([1, 1, -1, -1, 1, 1, -1, -1])
    batch = PairBatch(np.arange(n), ia, ib, y, 2, 2)
    D = pair_distances(F, ia, ib)
    lc = LossConfig(loss_kind=loss_kind, margin=float(np.median(D)))
    margins = adaptive_margins(*batch_mean_distances(D, y), lc.mu, lc.gamma) if loss_kind == "adaptive" else None
    if loss_kind == "adaptive":
        # rescale so the hinge is active for some pairs and not others
        F *= np.sqrt(margins.m_tau / np.median(D))
        D = pair_distances(F, ia, ib)
        margins = adaptive_margins(*batch_mean_distances(D, y), lc.mu, lc.gamma)
    component = f"loss {loss_kind} d/features"
    g = _corrupt(batch_loss(F, batch, lc, margins).grad, component, corrupt)
    idx = np.arange(F.size)
    num = numeric_grad(lambda: batch_loss(F, batch, lc, margins).loss, F, idx)
    return [CheckResult(component, relative_error(g.reshape(-1), num), len(idx))]


def run_gradcheck(size="tiny", seed=0, corrupt=None, samples=6) -> Report:
    """The full suite: layers, feature gradients, and every network variant.

    ``corrupt`` is a test hook: any component whose name contains it gets a
    deliberately wrong analytic gradient, so the report must fail.
    """
    start = time.perf_counter()
    report = Report()
    report.results += check_layers(seed, corrupt=corrupt)
    for kind in LOSS_KINDS:
        report.results += check_feature_grads(kind, seed, corrupt)
    for blocks in (1, 2):
        for bn in (False, True):
            cfg = size_config(size, residual_blocks=blocks, use_batch_norm=bn)
            for kind in LOSS_KINDS:
                report.results += check_network(cfg, kind, seed, samples, corrupt)
    report.seconds = time.perf_counter() - start
    return report
