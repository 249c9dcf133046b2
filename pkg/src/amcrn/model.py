"""The speaker embedding network and its AAM-softmax output head.

Structure: initial dilated-free convolution, a stack of multi-scale
convolutional blocks with temporal attention, a residual BLSTM block,
channel attentive statistics pooling, and a fully connected embedding
layer with normalization. The output head is only used during training.
"""

import dataclasses
import io
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, DegenerateInput, InputTooShort, ShapeError


@dataclass
class AmcrnConfig:
    """Architecture hyperparameters, including the ablation switches."""

    n_mels: int = 80
    initial_kernel: int = 5
    initial_channels: int = 512
    n_mcb: int = 3
    mcb_channels: tuple = (512, 512, 512)
    mcb_kernel: tuple = (3, 3, 3)
    mcb_dilations: tuple = (2, 3, 4)
    n_scales: int = 8
    ta_kernel: int = 7
    fusion_kernel: int = 3
    blstm_hidden: int = 450
    blstm_layers: int = 2
    blstm_dropout: float = 0.2
    pool_bottleneck: int = 128
    embedding_dim: int = 256
    n_classes: int = 2
    aam_margin: float = 0.2
    aam_scale: float = 30.0
    # Structural ablation switches.
    use_temporal_attention: bool = True
    use_blstm: bool = True
    standard_conv: bool = False  # forces dilation 1 in every convolution

    def __post_init__(self):
        self.mcb_channels = tuple(self.mcb_channels)
        self.mcb_kernel = tuple(self.mcb_kernel)
        self.mcb_dilations = tuple(self.mcb_dilations)
        self.validate()

    def validate(self):
        lists = (self.mcb_channels, self.mcb_kernel, self.mcb_dilations)
        if any(len(l) != self.n_mcb for l in lists):
            raise ConfigError("per-block lists must have length n_mcb")
        if self.n_scales < 1:
            raise ConfigError("n_scales must be >= 1")
        for c in self.mcb_channels:
            if c % self.n_scales:
                raise ConfigError(f"channels {c} not divisible by n_scales {self.n_scales}")
        if self.initial_channels != self.mcb_channels[0]:
            raise ConfigError("initial_channels must match the first block's channels")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be positive")

    def dilation(self, i):
        return 1 if self.standard_conv else self.mcb_dilations[i]

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AmcrnConfig":
        kwargs = {}
        types = {f.name: f for f in dataclasses.fields(cls)}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            default = types[key].default
            if isinstance(default, bool):
                kwargs[key] = val.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[key] = int(val)
            elif isinstance(default, float):
                kwargs[key] = float(val)
            else:
                kwargs[key] = tuple(int(x) for x in val.split(","))
        return cls(**kwargs)


def tiny_config(n_mels=8, channels=16, n_scales=2, hidden=8, **overrides) -> AmcrnConfig:
    """A desk-scale configuration for tests and gradient checks."""
    kwargs = dict(
        n_mels=n_mels,
        initial_channels=channels,
        mcb_channels=(channels,) * 3,
        n_scales=n_scales,
        blstm_hidden=hidden,
        pool_bottleneck=max(4, hidden // 2),
        embedding_dim=16,
        n_classes=4,
    )
    kwargs.update(overrides)
    return AmcrnConfig(**kwargs)


@dataclass
class SpeakerEmbedding:
    """Fixed-length speaker representation."""

    values: np.ndarray
    speaker_id: str = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


# ----------------------------------------------------------------------
# Layers
# ----------------------------------------------------------------------


def _uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=shape)


class Conv1d:
    """Dilated 1-D convolution layer with "same" padding."""

    def __init__(self, name, k, c_in, c_out, dilation, rng):
        self.dilation = dilation
        self.kernel = Parameter(_uniform(rng, (k, c_in, c_out), k * c_in), f"{name}.kernel")
        self.bias = Parameter(np.zeros(c_out), f"{name}.bias")

    def __call__(self, x):
        return ad.conv1d_dilated(x, self.kernel, self.bias, self.dilation)

    def params(self):
        return [self.kernel, self.bias]


class Linear:
    def __init__(self, name, d_in, d_out, rng):
        self.weight = Parameter(_uniform(rng, (d_in, d_out), d_in), f"{name}.weight")
        self.bias = Parameter(np.zeros(d_out), f"{name}.bias")

    def __call__(self, x):
        return ad.linear(x, self.weight, self.bias)

    def params(self):
        return [self.weight, self.bias]


class BatchNorm:
    """Per-channel normalization over the time axis.

    Train mode normalizes with batch statistics (eps 1e-5) and updates the
    running statistics with momentum 0.1; eval mode uses the running
    statistics.
    """

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, name, channels, rng=None):
        self.name = name
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels), f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def __call__(self, x, mode):
        if mode == "train":
            mean = ad.tmean(x, axis=0)
            var = ad.tmean((x - mean) ** 2, axis=0)
            self.running_mean = (1 - self.MOMENTUM) * self.running_mean + self.MOMENTUM * mean.data
            self.running_var = (1 - self.MOMENTUM) * self.running_var + self.MOMENTUM * var.data
            xhat = (x - mean) / ad.sqrt(var + self.EPS)
        else:
            xhat = (x - Tensor(self.running_mean)) / Tensor(np.sqrt(self.running_var + self.EPS))
        return self.gamma * xhat + self.beta

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", "running_mean"),
                (f"{self.name}.running_var", "running_var")]


class VectorNorm:
    """Normalization for a single vector using tracked population statistics.

    A per-sample batch statistic is degenerate for a lone embedding, so
    both modes normalize with the running estimates; train mode updates
    them as exponential moving averages over samples.
    """

    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, name, dim, rng=None):
        self.name = name
        self.gamma = Parameter(np.ones(dim), f"{name}.gamma")
        self.beta = Parameter(np.zeros(dim), f"{name}.beta")
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def __call__(self, x, mode):
        if mode == "train":
            delta = x.data - self.running_mean
            self.running_mean = self.running_mean + self.MOMENTUM * delta
            self.running_var = (1 - self.MOMENTUM) * self.running_var + self.MOMENTUM * delta**2
        xhat = (x - Tensor(self.running_mean)) / Tensor(np.sqrt(self.running_var + self.EPS))
        return self.gamma * xhat + self.beta

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return [(f"{self.name}.running_mean", "running_mean"),
                (f"{self.name}.running_var", "running_var")]


# ----------------------------------------------------------------------
# Blocks
# ----------------------------------------------------------------------


def temporal_attention(x, kernel, bias):
    """Frame-level gating from channel mean/max statistics.

    Returns (coefficients A in (0,1) of shape T x 1, gated map A * x).
    """
    avg = ad.tmean(x, axis=1, keepdims=True)
    mx = ad.tmax(x, axis=1, keepdims=True)
    stats = ad.concat([avg, mx], axis=1)
    a = ad.sigmoid(ad.conv1d_dilated(stats, kernel, bias, dilation=1))
    return a, a * x


class TemporalAttention:
    def __init__(self, name, k, rng):
        self.kernel = Parameter(_uniform(rng, (k, 2, 1), 2 * k), f"{name}.kernel")
        self.bias = Parameter(np.zeros(1), f"{name}.bias")

    def __call__(self, x):
        return temporal_attention(x, self.kernel, self.bias)

    def params(self):
        return [self.kernel, self.bias]


class McbBlock:
    """Multi-scale convolutional block with residual connection.

    The block input is convolved, split into channel subsets that are
    hierarchically convolved with information flowing between adjacent
    subsets, fused by a second convolution, gated by temporal attention,
    and summed back onto the block input.
    """

    def __init__(self, name, config: AmcrnConfig, index: int, rng):
        c = config.mcb_channels[index]
        k = config.mcb_kernel[index]
        r = config.dilation(index)
        n = config.n_scales
        sub = c // n
        self.n_scales = n
        self.conv_pre = Conv1d(f"{name}.pre", k, c, c, r, rng)
        self.bn_pre = BatchNorm(f"{name}.bn_pre", c, rng)
        self.scale_convs = [
            Conv1d(f"{name}.scale{j}", 3, sub, sub, r, rng) for j in range(1, n)
        ]
        self.conv_post = Conv1d(f"{name}.post", config.fusion_kernel, c, c, r, rng)
        self.bn_post = BatchNorm(f"{name}.bn_post", c, rng)
        self.attention = TemporalAttention(f"{name}.ta", config.ta_kernel, rng) \
            if config.use_temporal_attention else None

    def __call__(self, s, mode):
        p = ad.relu(self.bn_pre(self.conv_pre(s), mode))
        subsets = ad.split(p, self.n_scales, axis=1)
        fused = [subsets[0]]
        prev = None
        for j in range(1, self.n_scales):
            inp = subsets[j] if prev is None else subsets[j] + prev
            prev = self.scale_convs[j - 1](inp)
            fused.append(prev)
        x = self.bn_post(self.conv_post(ad.concat(fused, axis=1) if len(fused) > 1 else fused[0]), mode)
        if self.attention is not None:
            _, x = self.attention(x)
        return ad.relu(s + x)

    def params(self):
        out = self.conv_pre.params() + self.bn_pre.params()
        for conv in self.scale_convs:
            out += conv.params()
        out += self.conv_post.params() + self.bn_post.params()
        if self.attention is not None:
            out += self.attention.params()
        return out

    def buffers(self):
        return self.bn_pre.buffers() + self.bn_post.buffers()

    def bn_layers(self):
        return [self.bn_pre, self.bn_post]


class LstmDirection:
    """One direction of an LSTM layer (gate order: input, forget, cell, output)."""

    def __init__(self, name, d_in, hidden, rng):
        self.hidden = hidden
        self.w_x = Parameter(_uniform(rng, (d_in, 4 * hidden), d_in), f"{name}.w_x")
        self.w_h = Parameter(_uniform(rng, (hidden, 4 * hidden), hidden), f"{name}.w_h")
        bias = np.zeros(4 * hidden)
        bias[hidden : 2 * hidden] = 1.0  # forget-gate bias
        self.bias = Parameter(bias, f"{name}.bias")

    def __call__(self, x, reverse):
        t_len = x.shape[0]
        h_dim = self.hidden
        xw = x @ self.w_x
        h = Tensor(np.zeros((1, h_dim)))
        c = Tensor(np.zeros((1, h_dim)))
        outs = [None] * t_len
        steps = range(t_len - 1, -1, -1) if reverse else range(t_len)
        for t in steps:
            pre = ad.narrow(xw, 0, t, 1) + (h @ self.w_h) + self.bias
            gi = ad.sigmoid(ad.narrow(pre, 1, 0, h_dim))
            gf = ad.sigmoid(ad.narrow(pre, 1, h_dim, h_dim))
            gc = ad.tanh(ad.narrow(pre, 1, 2 * h_dim, h_dim))
            go = ad.sigmoid(ad.narrow(pre, 1, 3 * h_dim, h_dim))
            c = gf * c + gi * gc
            h = go * ad.tanh(c)
            outs[t] = h
        return ad.concat(outs, axis=0)

    def params(self):
        return [self.w_x, self.w_h, self.bias]


class BlstmLayer:
    """Bidirectional LSTM: per-frame concatenation of both directions."""

    def __init__(self, name, d_in, hidden, rng):
        self.fwd = LstmDirection(f"{name}.fwd", d_in, hidden, rng)
        self.bwd = LstmDirection(f"{name}.bwd", d_in, hidden, rng)

    def __call__(self, x):
        return ad.concat([self.fwd(x, reverse=False), self.bwd(x, reverse=True)], axis=1)

    def params(self):
        return self.fwd.params() + self.bwd.params()


class ResidualBlstm:
    """Two BLSTM layers with dropout between them, a linear projection
    back to the input width, and a residual connection."""

    def __init__(self, name, channels, hidden, dropout_p, rng):
        self.dropout_p = dropout_p
        self.blstm1 = BlstmLayer(f"{name}.blstm1", channels, hidden, rng)
        self.blstm2 = BlstmLayer(f"{name}.blstm2", 2 * hidden, hidden, rng)
        self.proj = Linear(f"{name}.proj", 2 * hidden, channels, rng)

    def __call__(self, x, mode, rng=None):
        h1 = self.blstm1(x)
        d = ad.dropout(h1, self.dropout_p, mode, rng) if rng is not None else h1
        h2 = self.blstm2(d)
        return x + self.proj(h2)

    def params(self):
        return self.blstm1.params() + self.blstm2.params() + self.proj.params()


class AttentiveStatPool:
    """Channel-wise attentive mean and standard deviation over time."""

    VAR_FLOOR = 1e-9

    def __init__(self, name, channels, bottleneck, rng):
        self.score1 = Linear(f"{name}.score1", channels, bottleneck, rng)
        self.score2 = Linear(f"{name}.score2", bottleneck, channels, rng)

    def __call__(self, h):
        if h.shape[0] < 2:
            raise InputTooShort("attentive pooling needs at least 2 frames")
        scores = self.score2(ad.tanh(self.score1(h)))
        alpha = ad.softmax(scores, axis=0)
        mean = ad.tsum(alpha * h, axis=0)
        second = ad.tsum(alpha * h * h, axis=0)
        std = ad.sqrt(ad.clamp_min(second - mean * mean, self.VAR_FLOOR))
        return ad.concat([mean, std], axis=0)

    def params(self):
        return self.score1.params() + self.score2.params()


def aam_logits(embedding, class_weights, label, margin, scale):
    """Additive-angular-margin logits for one embedding.

    Non-target logits are scale * cos(theta); the target logit is
    scale * cos(theta + margin), computed from cos/sin identities.
    """
    emb = ad.as_tensor(embedding)
    w = ad.as_tensor(class_weights)
    n_classes, dim = w.shape
    if np.linalg.norm(emb.data) == 0.0:
        raise DegenerateInput("zero-norm embedding")
    row_norm_sq = ad.tsum(w * w, axis=1)
    if np.any(row_norm_sq.data == 0.0):
        raise DegenerateInput("zero-norm class weight row")
    emb_norm = ad.sqrt(ad.tsum(emb * emb))
    dots = (emb.reshape(1, dim) @ transpose(w)).reshape(n_classes)
    cos = dots / (ad.sqrt(row_norm_sq) * emb_norm)
    target_cos = ad.narrow(cos, 0, int(label), 1)
    sin_t = ad.sqrt(ad.clamp_min(1.0 - target_cos * target_cos, 1e-12))
    cos_margin = target_cos * math.cos(margin) - sin_t * math.sin(margin)
    onehot = Tensor(np.eye(n_classes)[int(label)])
    return scale * (cos + onehot * (cos_margin - target_cos))


def transpose(x):
    x = ad.as_tensor(x)
    out = Tensor(x.data.T, _parents=(x,))

    def bwd(g):
        if x.requires_grad:
            x._accum(g.T)

    out._backward = bwd
    return out


# ----------------------------------------------------------------------
# Full model
# ----------------------------------------------------------------------


class AmcrnModel:
    """Speaker embedding network plus the training-time classifier head."""

    def __init__(self, config: AmcrnConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        c0 = config.initial_channels
        self.initial_conv = Conv1d("initial.conv", config.initial_kernel,
                                   config.n_mels, c0, 1, rng)
        self.initial_bn = BatchNorm("initial.bn", c0, rng)
        self.blocks = [McbBlock(f"mcb{i}", config, i, rng) for i in range(config.n_mcb)]
        last_c = config.mcb_channels[-1]
        self.rblstm = ResidualBlstm("rblstm", last_c, config.blstm_hidden,
                                    config.blstm_dropout, rng) if config.use_blstm else None
        self.pool = AttentiveStatPool("pool", last_c, config.pool_bottleneck, rng)
        self.emb_linear = Linear("embed.linear", 2 * last_c, config.embedding_dim, rng)
        self.emb_norm = VectorNorm("embed.norm", config.embedding_dim, rng)
        self.head = Parameter(_uniform(rng, (config.n_classes, config.embedding_dim),
                                       config.embedding_dim), "head.weight")

    # -- forward --------------------------------------------------------

    def embed_tensor(self, lms, mode="eval", rng=None):
        """Differentiable embedding of a T x n_mels feature matrix."""
        x = ad.as_tensor(lms)
        if x.data.ndim != 2 or x.data.shape[1] != self.config.n_mels:
            raise ShapeError(f"expected T x {self.config.n_mels} features")
        x = ad.relu(self.initial_bn(self.initial_conv(x), mode))
        for block in self.blocks:
            x = block(x, mode)
        if self.rblstm is not None:
            x = self.rblstm(x, mode, rng)
        pooled = self.pool(x)
        emb = self.emb_linear(pooled.reshape(1, -1)).reshape(self.config.embedding_dim)
        return self.emb_norm(emb, mode)

    def embed(self, lms_values, speaker_id=None) -> SpeakerEmbedding:
        """Deterministic eval-mode embedding as plain numpy."""
        return SpeakerEmbedding(self.embed_tensor(lms_values, mode="eval").data.copy(),
                                speaker_id)

    def classify_loss(self, lms_values, label, mode="train", rng=None):
        """AAM-softmax cross-entropy loss for one labeled utterance."""
        emb = self.embed_tensor(lms_values, mode=mode, rng=rng)
        logits = aam_logits(emb, self.head, label,
                            self.config.aam_margin, self.config.aam_scale)
        return ad.cross_entropy(logits, label)

    # -- parameter access ----------------------------------------------

    def parameters(self, include_head=True):
        out = self.initial_conv.params() + self.initial_bn.params()
        for block in self.blocks:
            out += block.params()
        if self.rblstm is not None:
            out += self.rblstm.params()
        out += self.pool.params() + self.emb_linear.params() + self.emb_norm.params()
        if include_head:
            out.append(self.head)
        return out

    def _buffer_owners(self):
        owners = [self.initial_bn] + [bn for b in self.blocks for bn in b.bn_layers()]
        owners.append(self.emb_norm)
        return owners

    def buffers(self):
        out = []
        for owner in self._buffer_owners():
            for name, attr in owner.buffers():
                out.append((name, owner, attr))
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def n_params(self, include_head=True):
        return sum(p.data.size for p in self.parameters(include_head))


# ----------------------------------------------------------------------
# Checkpoint I/O
# ----------------------------------------------------------------------

CHECKPOINT_MAGIC = b"AMCRN1"


def _checkpoint_entries(model):
    entries = [(p.name, p.data) for p in model.parameters()]
    entries += [(name, getattr(owner, attr)) for name, owner, attr in model.buffers()]
    return entries


def checkpoint_bytes(model) -> bytes:
    """Serialize parameters and normalization statistics.

    Layout: magic, then per entry: u16 LE name length, UTF-8 name, u8
    rank, u32 LE dims, raw little-endian float32 values; trailing u32
    entry count.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    entries = _checkpoint_entries(model)
    for name, data in entries:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", data.ndim))
        for dim in data.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    buf.write(struct.pack("<I", len(entries)))
    return buf.getvalue()


def save_checkpoint(path, model) -> None:
    """Write the checkpoint and a `<path>.cfg` sidecar, atomically."""
    _atomic_write(path, checkpoint_bytes(model))
    _atomic_write(str(path) + ".cfg", model.config.to_text().encode())


def load_checkpoint(path) -> AmcrnModel:
    with open(str(path) + ".cfg", encoding="utf-8") as fh:
        config = AmcrnConfig.from_text(fh.read())
    with open(path, "rb") as fh:
        blob = fh.read()
    return restore_model(blob, config)


def restore_model(blob: bytes, config: AmcrnConfig) -> AmcrnModel:
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ConfigError("not a recognized checkpoint file")
    values = {}
    pos = len(CHECKPOINT_MAGIC)
    end = len(blob) - 4
    while pos < end:
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).astype(np.float64)
        pos += 4 * count
        values[name] = arr.reshape(shape)
    (n_entries,) = struct.unpack_from("<I", blob, end)
    if n_entries != len(values):
        raise ConfigError(f"checkpoint entry count mismatch: {n_entries} != {len(values)}")
    model = AmcrnModel(config, seed=0)
    for p in model.parameters():
        if p.name not in values:
            raise ConfigError(f"checkpoint missing parameter {p.name}")
        if values[p.name].shape != p.data.shape:
            raise ConfigError(f"shape mismatch for {p.name}")
        p.data = values[p.name].copy()
    for name, owner, attr in model.buffers():
        if name not in values:
            raise ConfigError(f"checkpoint missing buffer {name}")
        setattr(owner, attr, values[name].copy())
    return model


def _atomic_write(path, payload: bytes) -> None:
    path = str(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
