"""Upstream encoder, weighted-sum featurizer, downstream head, adaptation plans."""

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    NumericError,
    Tensor,
    add,
    conv1d,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    relu,
    reshape,
    slice_,
    softmax,
    transpose,
)

# canonical full-scale presets: upstream depth, fine-tune window (1-based,
# inclusive), layers carrying the auxiliary LID loss
REFERENCE_WINDOWS = {
    "mms_1b": (48, (25, 36), (27, 30, 33, 36)),
    "xeus": (19, (12, 19), (14, 17)),
    "owsm_ctc": (27, (8, 13), (10, 13)),
}


class Linear:
    def __init__(self, d_in, d_out, rng, name):
        bound = 1.0 / np.sqrt(d_in)
        self.w = Tensor(rng.uniform(-bound, bound, (d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)
        self.name = name

    def __call__(self, x):
        return add(matmul(x, self.w), self.b)

    def params(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


class LowRankAdapter:
    """Rank-r additive correction to a frozen linear projection.

    The down factor is small random, the up factor starts at zero, so the
    adapted projection equals the base projection exactly at initialization.
    """

    def __init__(self, base, rank, alpha, rng):
        d_in, d_out = base.w.shape
        bound = 1.0 / np.sqrt(d_in)
        self.base = base
        self.a = Tensor(rng.uniform(-bound, bound, (d_in, rank)), requires_grad=True)
        self.b = Tensor(np.zeros((rank, d_out)), requires_grad=True)
        self.scale = alpha / rank
        self.name = base.name

    def __call__(self, x):
        delta = mul(matmul(matmul(x, self.a), self.b), self.scale)
        return add(self.base(x), delta)

    def params(self):
        return self.base.params() + [
            (f"{self.name}.lora.a", self.a),
            (f"{self.name}.lora.b", self.b),
        ]

    def adapter_params(self):
        return [(f"{self.name}.lora.a", self.a), (f"{self.name}.lora.b", self.b)]


class LayerNorm:
    def __init__(self, dim, name):
        self.g = Tensor(np.ones(dim), requires_grad=True)
        self.b = Tensor(np.zeros(dim), requires_grad=True)
        self.name = name

    def __call__(self, x):
        return layer_norm(x, self.g, self.b)

    def params(self):
        return [(f"{self.name}.g", self.g), (f"{self.name}.b", self.b)]


class MultiHeadSelfAttention:
    def __init__(self, dim, heads, rng, name):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(dim, dim, rng, f"{name}.q")
        self.k = Linear(dim, dim, rng, f"{name}.k")
        self.v = Linear(dim, dim, rng, f"{name}.v")
        self.o = Linear(dim, dim, rng, f"{name}.o")

    def _split(self, x, t):
        # [T, D] -> [H, T, dh]
        return transpose(reshape(x, (t, self.heads, self.head_dim)), (1, 0, 2))

    def __call__(self, x):
        t = x.shape[0]
        q = self._split(self.q(x), t)
        k = self._split(self.k(x), t)
        v = self._split(self.v(x), t)
        scores = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.head_dim))
        ctx = matmul(softmax(scores), v)
        ctx = reshape(transpose(ctx, (1, 0, 2)), (t, self.dim))
        return self.o(ctx)

    def projections(self):
        return [self.q, self.k, self.v, self.o]

    def params(self):
        return [p for proj in self.projections() for p in proj.params()]


class FeedForward:
    def __init__(self, dim, hidden, rng, name):
        self.w1 = Linear(dim, hidden, rng, f"{name}.w1")
        self.w2 = Linear(hidden, dim, rng, f"{name}.w2")

    def __call__(self, x):
        return self.w2(relu(self.w1(x)))

    def params(self):
        return self.w1.params() + self.w2.params()


class EncoderLayer:
    """Pre-norm Transformer encoder block, shape-preserving on [T, D]."""

    def __init__(self, dim, heads, ffn_dim, rng, name):
        self.ln1 = LayerNorm(dim, f"{name}.ln1")
        self.attn = MultiHeadSelfAttention(dim, heads, rng, f"{name}.attn")
        self.ln2 = LayerNorm(dim, f"{name}.ln2")
        self.ffn = FeedForward(dim, ffn_dim, rng, f"{name}.ffn")

    def __call__(self, x):
        h = add(x, self.attn(self.ln1(x)))
        return add(h, self.ffn(self.ln2(h)))

    def params(self):
        return (
            self.ln1.params() + self.attn.params()
            + self.ln2.params() + self.ffn.params()
        )


class UpstreamModel:
    """Stack of shape-preserving encoder layers over [T, D] features."""

    def __init__(self, n_layers, dim, heads, ffn_dim, rng):
        if n_layers < 2:
            raise ValueError("upstream needs at least 2 layers")
        self.dim = dim
        self.layers = [
            EncoderLayer(dim, heads, ffn_dim, rng, f"upstream.layer{i + 1}")
            for i in range(n_layers)
        ]

    @property
    def n_layers(self):
        return len(self.layers)

    def forward(self, x):
        """All layer outputs, bottom to top; the input itself is excluded."""
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected [T x {self.dim}] input, got {x.shape}")
        outputs = []
        z = x
        for i, layer in enumerate(self.layers):
            z = layer(z)
            if not np.isfinite(z.data).all():
                raise NumericError(f"non-finite activations in upstream layer {i + 1}")
            outputs.append(z)
        return outputs

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def layer_params(self, index):
        """Parameters of one layer, 1-based."""
        return self.layers[index - 1].params()


class Featurizer:
    """Softmax-normalized convex combination of all upstream layer outputs."""

    def __init__(self, n_layers):
        self.raw = Tensor(np.zeros(n_layers), requires_grad=True)

    def __call__(self, layer_outputs):
        if not layer_outputs:
            raise ValueError("featurizer needs at least one layer output")
        if len(layer_outputs) != self.raw.size:
            raise ValueError(
                f"featurizer holds {self.raw.size} weights for "
                f"{len(layer_outputs)} layer outputs"
            )
        w = softmax(self.raw)
        out = mul(slice_(w, slice(0, 1)), layer_outputs[0])
        for i in range(1, len(layer_outputs)):
            out = add(out, mul(slice_(w, slice(i, i + 1)), layer_outputs[i]))
        return out

    @property
    def effective_weights(self):
        e = np.exp(self.raw.data - np.max(self.raw.data))
        return e / e.sum()

    def params(self):
        return [("featurizer.weights", self.raw)]


def sinusoidal_encoding(length, dim):
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (i - i % 2) / dim)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe


class DownstreamModel:
    """Projection, subsampling input layer, positional encoding, encoder
    stack, and a log-softmax output head over the vocabulary."""

    def __init__(self, d_in, d_proj, d_down, n_layers, heads, ffn_dim,
                 vocab_size, subsample, rng):
        self.subsample = subsample
        self.proj = Linear(d_in, d_proj, rng, "downstream.proj")
        if subsample == 1:
            self.input_linear = Linear(d_proj, d_down, rng, "downstream.input")
            self.input_conv_w = None
        else:
            bound = 1.0 / np.sqrt(3 * d_proj)
            self.input_conv_w = Tensor(
                rng.uniform(-bound, bound, (3, d_proj, d_down)), requires_grad=True
            )
            self.input_conv_b = Tensor(np.zeros(d_down), requires_grad=True)
            self.input_linear = None
        self.d_down = d_down
        self.layers = [
            EncoderLayer(d_down, heads, ffn_dim, rng, f"downstream.layer{i + 1}")
            for i in range(n_layers)
        ]
        self.head = Linear(d_down, vocab_size, rng, "downstream.head")

    def out_frames(self, t):
        if self.subsample == 1:
            return t
        return (t - 1) // self.subsample + 1

    def __call__(self, z):
        x = self.proj(z)
        if self.input_linear is not None:
            x = self.input_linear(x)
        else:
            x = conv1d(x, self.input_conv_w, self.input_conv_b, self.subsample)
        t = x.shape[0]
        if t < 1:
            raise ValueError("downstream input too short after subsampling")
        x = add(x, Tensor(sinusoidal_encoding(t, self.d_down)))
        for layer in self.layers:
            x = layer(x)
        return log_softmax(self.head(x))

    def params(self):
        out = self.proj.params()
        if self.input_linear is not None:
            out += self.input_linear.params()
        else:
            out += [
                ("downstream.input.w", self.input_conv_w),
                ("downstream.input.b", self.input_conv_b),
            ]
        for layer in self.layers:
            out += layer.params()
        out += self.head.params()
        return out


@dataclass(frozen=True)
class AdaptationPlan:
    """Which upstream parameters train: none, a layer window, or adapters."""

    mode: str
    window: tuple = None
    rank: int = None
    alpha: float = None

    FROZEN = "frozen"
    FINETUNE = "finetune"
    LORA = "lora"

    @classmethod
    def frozen(cls):
        return cls(mode=cls.FROZEN)

    @classmethod
    def finetune_window(cls, low, high):
        if low > high:
            raise ValueError(f"empty fine-tune window [{low}, {high}]")
        return cls(mode=cls.FINETUNE, window=(int(low), int(high)))

    @classmethod
    def low_rank(cls, rank=16, alpha=16.0):
        if rank < 1:
            raise ValueError("rank must be positive")
        return cls(mode=cls.LORA, rank=int(rank), alpha=float(alpha))

    def window_layers(self):
        return list(range(self.window[0], self.window[1] + 1))


class AsrModel:
    """Upstream + featurizer + downstream wired per an adaptation plan.

    In frozen mode the downstream consumes the weighted sum of all layer
    outputs; fine-tune and low-rank modes feed the final layer output.
    """

    def __init__(self, upstream, featurizer, downstream):
        self.upstream = upstream
        self.featurizer = featurizer
        self.downstream = downstream
        self.plan = None

    def forward(self, features, spec_mask=None):
        """Log-prob frames [T' x |V|] plus every upstream layer output."""
        x = features if isinstance(features, Tensor) else Tensor(features)
        layer_outputs = self.upstream.forward(x)
        if self.plan is not None and self.plan.mode != AdaptationPlan.FROZEN:
            z = layer_outputs[-1]
        else:
            z = self.featurizer(layer_outputs)
        if spec_mask is not None:
            z = mul(z, Tensor(spec_mask))
        return self.downstream(z), layer_outputs

    def params(self):
        return (
            self.upstream.params()
            + self.featurizer.params()
            + self.downstream.params()
        )

    def named_params(self):
        return dict(self.params())


def apply_plan(model, plan, rng=None):
    """Freeze/unfreeze parameters per the plan; returns the trainable set.

    Low-rank mode attaches adapters to all four attention projections of
    every upstream layer (seeded by `rng`) and returns only adapter (plus
    downstream) parameters.
    """
    upstream = model.upstream
    n = upstream.n_layers
    if plan.mode == AdaptationPlan.FINETUNE:
        low, high = plan.window
        if not (1 <= low <= high <= n):
            raise ValueError(
                f"fine-tune window [{low}, {high}] outside layers 1..{n}"
            )
    if plan.mode == AdaptationPlan.LORA:
        for layer in upstream.layers:
            if any(isinstance(p, LowRankAdapter) for p in layer.attn.projections()):
                raise ValueError("adapters already attached")

    for _, p in model.params():
        p.requires_grad = False

    trainable = []
    if plan.mode == AdaptationPlan.FROZEN:
        trainable += model.featurizer.params()
    elif plan.mode == AdaptationPlan.FINETUNE:
        for i in plan.window_layers():
            trainable += upstream.layer_params(i)
    elif plan.mode == AdaptationPlan.LORA:
        if rng is None:
            rng = np.random.default_rng(0)
        for layer in upstream.layers:
            attn = layer.attn
            attn.q = LowRankAdapter(attn.q, plan.rank, plan.alpha, rng)
            attn.k = LowRankAdapter(attn.k, plan.rank, plan.alpha, rng)
            attn.v = LowRankAdapter(attn.v, plan.rank, plan.alpha, rng)
            attn.o = LowRankAdapter(attn.o, plan.rank, plan.alpha, rng)
            trainable += attn.q.adapter_params() + attn.k.adapter_params()
            trainable += attn.v.adapter_params() + attn.o.adapter_params()
    else:
        raise ValueError(f"unknown adaptation mode {plan.mode!r}")

    trainable += model.downstream.params()
    for _, p in trainable:
        p.requires_grad = True
    model.plan = plan
    return trainable


@dataclass
class ModelConfig:
    """Desk-scale architecture defaults."""

    upstream_layers: int = 6
    dim: int = 64
    upstream_heads: int = 4
    upstream_ffn: int = 256
    d_proj: int = 48
    d_down: int = 64
    down_layers: int = 2
    down_heads: int = 4
    down_ffn: int = 256
    subsample: int = 2


def build_model(cfg, vocab_size, seed):
    rng = np.random.default_rng(seed)
    upstream = UpstreamModel(
        cfg.upstream_layers, cfg.dim, cfg.upstream_heads, cfg.upstream_ffn, rng
    )
    featurizer = Featurizer(cfg.upstream_layers)
    downstream = DownstreamModel(
        cfg.dim, cfg.d_proj, cfg.d_down, cfg.down_layers, cfg.down_heads,
        cfg.down_ffn, vocab_size, cfg.subsample, rng,
    )
    return AsrModel(upstream, featurizer, downstream)
