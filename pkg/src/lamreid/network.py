"""Part-based convolutional ranking network.

Topology (per image)::

    conv7x7(64) -> maxpool 3x3/3 -> relu -> split into 4 horizontal stripes
    per stripe:  R x [conv3x3 -> conv3x3, sum of both conv outputs, (batch-norm)]
                 -> maxpool 3x3/1 -> relu -> flatten -> fc1 -> relu -> fc2
    fusion:      summarizer fc over the 4 rectified fc1 outputs, concatenated
                 with the 4 fc2 outputs

The four stripes never share parameters. The backward pass is written out by
hand from the kernels in :mod:`lamreid.numerics`.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx

N_PARTS = 4
INIT_SCHEMES = ("fan_in", "fixed")


@dataclass(frozen=True)
class NetConfig:
    residual_blocks: int = 1
    use_batch_norm: bool = False
    init_scheme: str = "fan_in"
    init_gain: float = 1.0
    init_std_conv: float = 0.01
    init_std_fc: float = 0.001
    input_shape: tuple = (3, 230, 80)
    global_filters: int = 64
    global_kernel: int = 7
    global_stride: int = 1
    global_padding: int = 0
    pool_window: int = 3
    pool_stride: int = 3
    local_filters: int = 32
    local_kernel: int = 3
    local_padding: int = 1
    local_pool: int = 3
    part_dim: int = 100

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.residual_blocks < 1:
            raise ValueError("residual_blocks must be >= 1")
        if self.init_scheme not in INIT_SCHEMES:
            raise ValueError(f"init_scheme must be one of {INIT_SCHEMES}")
        if self.init_std_conv <= 0 or self.init_std_fc <= 0 or self.init_gain <= 0:
            raise ValueError("initialisation scales must be positive")
        # raises if the shape chain is infeasible
        self.part_shapes()

    @property
    def feature_dim(self) -> int:
        return 2 * N_PARTS * self.part_dim

    @classmethod
    def reduced(cls, **overrides) -> "NetConfig":
        """Small network used for finite-difference gradient checks."""
        kw = dict(input_shape=(3, 24, 8), global_filters=4, global_kernel=3, pool_window=2,
                  pool_stride=2, local_filters=3, local_pool=2, part_dim=5)
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def global_shape(self):
        """(channels, height, width) after the global conv/pool stage."""
        c, h, w = self.input_shape
        h = nx.output_extent(h, self.global_kernel, self.global_stride, self.global_padding)
        w = nx.output_extent(w, self.global_kernel, self.global_stride, self.global_padding)
        if h < 1 or w < 1:
            raise ValueError(f"global kernel {self.global_kernel} does not fit input {self.input_shape}")
        if self.pool_window > h or self.pool_window > w:
            raise ValueError(f"pool window {self.pool_window} larger than conv output {(h, w)}")
        return (self.global_filters, nx.output_extent(h, self.pool_window, self.pool_stride),
                nx.output_extent(w, self.pool_window, self.pool_stride))

    def part_shapes(self):
        """Per stripe: (stripe height, width, fc1 input size)."""
        _, h, w = self.global_shape()
        out = []
        for sh in stripe_heights(h):
            bh = nx.output_extent(sh, self.local_kernel, 1, self.local_padding)
            bw = nx.output_extent(w, self.local_kernel, 1, self.local_padding)
            if bh != sh or bw != w:
                raise ValueError("local convolutions must preserve the stripe extent")
            if self.local_pool > sh or self.local_pool > w:
                raise ValueError(f"local pool {self.local_pool} larger than stripe {(sh, w)}")
            ph = nx.output_extent(sh, self.local_pool, 1)
            pw = nx.output_extent(w, self.local_pool, 1)
            out.append((sh, w, self.local_filters * ph * pw))
        return out


@dataclass
class ParamSet:
    """Trainable tensors plus batch-norm running statistics."""

    config: NetConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)

    def copy(self) -> "ParamSet":
        return ParamSet(self.config, {k: v.copy() for k, v in self.params.items()},
                        {k: v.copy() for k, v in self.buffers.items()})

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(self.config, {k: v.astype(dtype) for k, v in self.params.items()},
                        {k: v.astype(dtype) for k, v in self.buffers.items()})

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def signature(self):
        return tuple((k, v.shape) for k, v in self.params.items())

    def num_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


def stripe_heights(height: int) -> list:
    """Near-equal split of ``height`` into four stripes, larger stripes first."""
    if height < N_PARTS:
        raise ValueError(f"cannot split height {height} into {N_PARTS} stripes")
    base, extra = divmod(height, N_PARTS)
    return [base + 1 if p < extra else base for p in range(N_PARTS)]


def split_parts(feature_map: np.ndarray) -> list:
    """Split ``(N, C, H, W)`` into four horizontal stripes along H."""
    bounds = np.cumsum(stripe_heights(feature_map.shape[2]))[:-1]
    return np.split(feature_map, bounds, axis=2)


def _block_names(p, r):
    return f"part{p}.block{r}"


def weight_std(config: NetConfig, kind: str, fan_in: int) -> float:
    """Initial standard deviation for a conv or fc weight tensor."""
    if config.init_scheme == "fixed":
        return config.init_std_conv if kind == "conv" else config.init_std_fc
    return config.init_gain / np.sqrt(fan_in)


def init_params(config: NetConfig, seed: int = 0) -> ParamSet:
    """Zero-mean Gaussian weights and zero biases, deterministic in ``seed``.

    ``init_scheme="fixed"`` draws conv weights with ``init_std_conv`` and fc
    weights with ``init_std_fc``; ``"fan_in"`` uses ``init_gain / sqrt(fan_in)``.
    """
    rng = np.random.default_rng(seed)
    params, buffers = {}, {}

    def conv(name, f, c, k):
        std = weight_std(config, "conv", c * k * k)
        params[f"{name}.weight"] = rng.normal(0.0, std, size=(f, c, k, k))
        params[f"{name}.bias"] = np.zeros(f)

    def fc(name, out, inp):
        params[f"{name}.weight"] = rng.normal(0.0, weight_std(config, "fc", inp), size=(out, inp))
        params[f"{name}.bias"] = np.zeros(out)

    c_in = config.input_shape[0]
    conv("global.conv", config.global_filters, c_in, config.global_kernel)
    lf = config.local_filters
    for p, (_, _, flat) in enumerate(config.part_shapes()):
        for r in range(config.residual_blocks):
            name = _block_names(p, r)
            conv(f"{name}.conv1", lf, config.global_filters if r == 0 else lf, config.local_kernel)
            conv(f"{name}.conv2", lf, lf, config.local_kernel)
            if config.use_batch_norm:
                params[f"{name}.bn.scale"] = np.ones(lf)
                params[f"{name}.bn.shift"] = np.zeros(lf)
                buffers[f"{name}.bn.running_mean"] = np.zeros(lf)
                buffers[f"{name}.bn.running_var"] = np.ones(lf)
        fc(f"part{p}.fc1", config.part_dim, flat)
        fc(f"part{p}.fc2", config.part_dim, config.part_dim)
    fc("summarizer", N_PARTS * config.part_dim, N_PARTS * config.part_dim)
    return ParamSet(config, params, buffers)


@dataclass
class ForwardTrace:
    """Everything :func:`backward` needs; discard after the update step."""

    signature: tuple
    mode: str
    images: np.ndarray
    chunk: int
    global_pre: np.ndarray = None        # pooled, pre-relu
    global_index: np.ndarray = None
    conv_shape: tuple = None
    parts: list = field(default_factory=list)
    fc1_relu: list = field(default_factory=list)
    buffers: dict = field(default_factory=dict)


def _check_images(config, images):
    images = np.asarray(images)
    expected = config.input_shape
    if images.ndim != 4 or tuple(images.shape[1:]) != expected:
        raise ValueError(f"expected images shaped (batch, {expected[0]}, {expected[1]}, {expected[2]}), "
                         f"got {images.shape}")
    return images


def forward(params: ParamSet, images: np.ndarray, mode: str = "train", chunk: int = 16):
    """Features ``(N, feature_dim)`` and the trace needed for backward.

    ``mode`` selects batch-norm behaviour; without batch-norm it has no effect.
    Updated running statistics (train mode) are in ``trace.buffers``; the
    caller decides whether to commit them.
    """
    cfg = params.config
    P = params.params
    x = _check_images(cfg, images).astype(params.dtype, copy=False)
    n = x.shape[0]
    trace = ForwardTrace(params.signature(), mode, x, chunk)

    # global stage, chunked over the batch to bound the conv output memory
    pre, idx = [], []
    for s in range(0, n, chunk):
        z = nx.convolve(x[s:s + chunk], P["global.conv.weight"], P["global.conv.bias"],
                        cfg.global_stride, cfg.global_padding)
        trace.conv_shape = z.shape[1:]
        p, i = nx.pool_max(z, cfg.pool_window, cfg.pool_stride)
        pre.append(p)
        idx.append(i)
    trace.global_pre = np.concatenate(pre)
    trace.global_index = np.concatenate(idx)
    g = nx.rectify(trace.global_pre)

    fc1_out, fc2_out = [], []
    for p, stripe in enumerate(split_parts(g)):
        h = np.ascontiguousarray(stripe)
        blocks = []
        for r in range(cfg.residual_blocks):
            name = _block_names(p, r)
            c1 = nx.convolve(h, P[f"{name}.conv1.weight"], P[f"{name}.conv1.bias"], 1, cfg.local_padding)
            c2 = nx.convolve(c1, P[f"{name}.conv2.weight"], P[f"{name}.conv2.bias"], 1, cfg.local_padding)
            out = nx.add_elementwise(c1, c2)
            bn_cache = None
            if cfg.use_batch_norm:
                out, bn_cache, (rm, rv) = nx.normalize_batch(
                    out, P[f"{name}.bn.scale"], P[f"{name}.bn.shift"],
                    params.buffers[f"{name}.bn.running_mean"], params.buffers[f"{name}.bn.running_var"], mode)
                trace.buffers[f"{name}.bn.running_mean"] = rm
                trace.buffers[f"{name}.bn.running_var"] = rv
            blocks.append((h, c1, bn_cache))
            h = out
        q, qi = nx.pool_max(h, cfg.local_pool, 1)
        a = nx.rectify(q)
        f1 = nx.affine(a, P[f"part{p}.fc1.weight"], P[f"part{p}.fc1.bias"])
        r1 = nx.rectify(f1)
        f2 = nx.affine(r1, P[f"part{p}.fc2.weight"], P[f"part{p}.fc2.bias"])
        trace.parts.append(dict(blocks=blocks, block_out_shape=h.shape, pool_pre=q, pool_index=qi,
                                flat=a, fc1=f1, fc1_relu=r1))
        fc1_out.append(r1)
        fc2_out.append(f2)

    fused_in = nx.concatenate(fc1_out, axis=1)
    trace.fc1_relu = fused_in
    summary = nx.affine(fused_in, P["summarizer.weight"], P["summarizer.bias"])
    features = nx.concatenate([summary] + fc2_out, axis=1)
    return features, trace


def backward(params: ParamSet, trace: ForwardTrace, feature_grads: np.ndarray) -> dict:
    """Gradient of a scalar loss w.r.t. every parameter, given dL/dfeatures."""
    if trace.signature != params.signature():
        raise ValueError("forward trace was produced by a parameter set with a different structure")
    cfg = params.config
    P = params.params
    n = trace.images.shape[0]
    if feature_grads.shape != (n, cfg.feature_dim):
        raise ValueError(f"feature gradients {feature_grads.shape} do not match ({n}, {cfg.feature_dim})")
    feature_grads = feature_grads.astype(params.dtype, copy=False)
    grads = {}
    d = cfg.part_dim
    d_summary, *d_fc2 = nx.concatenate_grad(feature_grads, [N_PARTS * d] + [d] * N_PARTS)
    d_fused, grads["summarizer.weight"], grads["summarizer.bias"] = nx.affine_grad(
        d_summary, trace.fc1_relu, P["summarizer.weight"])
    d_fc1_relu = nx.concatenate_grad(d_fused, [d] * N_PARTS)

    d_stripes = []
    for p in range(N_PARTS):
        t = trace.parts[p]
        d_r1, grads[f"part{p}.fc2.weight"], grads[f"part{p}.fc2.bias"] = nx.affine_grad(
            d_fc2[p], t["fc1_relu"], P[f"part{p}.fc2.weight"])
        d_r1 = d_r1 + d_fc1_relu[p]
        d_f1 = nx.rectify_grad(d_r1, t["fc1"])
        d_a, grads[f"part{p}.fc1.weight"], grads[f"part{p}.fc1.bias"] = nx.affine_grad(
            d_f1, t["flat"], P[f"part{p}.fc1.weight"])
        d_q = nx.rectify_grad(d_a.reshape(t["pool_pre"].shape), t["pool_pre"])
        d_h = nx.pool_max_grad(d_q, t["pool_index"], t["block_out_shape"], cfg.local_pool, 1)
        for r in reversed(range(cfg.residual_blocks)):
            name = _block_names(p, r)
            h_in, c1, bn_cache = t["blocks"][r]
            if bn_cache is not None:
                d_h, grads[f"{name}.bn.scale"], grads[f"{name}.bn.shift"] = nx.normalize_batch_grad(d_h, bn_cache)
            d_c1, d_c2 = nx.add_elementwise_grad(d_h)
            d_c1_from2, grads[f"{name}.conv2.weight"], grads[f"{name}.conv2.bias"] = nx.convolve_grad(
                d_c2, c1, P[f"{name}.conv2.weight"], 1, cfg.local_padding)
            d_c1 = d_c1 + d_c1_from2
            d_h, grads[f"{name}.conv1.weight"], grads[f"{name}.conv1.bias"] = nx.convolve_grad(
                d_c1, h_in, P[f"{name}.conv1.weight"], 1, cfg.local_padding)
        d_stripes.append(d_h)

    d_g = np.concatenate(d_stripes, axis=2)
    d_pre = nx.rectify_grad(d_g, trace.global_pre)
    gw = np.zeros_like(P["global.conv.weight"])
    gb = np.zeros_like(P["global.conv.bias"])
    chunk = trace.chunk
    for s in range(0, n, chunk):
        x = trace.images[s:s + chunk]
        conv_shape = (x.shape[0],) + tuple(trace.conv_shape)
        dz = nx.pool_max_grad(d_pre[s:s + chunk], trace.global_index[s:s + chunk], conv_shape,
                              cfg.pool_window, cfg.pool_stride)
        _, dw, db = nx.convolve_grad(dz, x, P["global.conv.weight"], cfg.global_stride,
                                     cfg.global_padding, need_input_grad=False)
        gw += dw
        gb += db
    grads["global.conv.weight"] = gw
    grads["global.conv.bias"] = gb
    return {k: grads[k] for k in P}
