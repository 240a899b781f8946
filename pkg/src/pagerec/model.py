"""Model assembly: CNN feature stack, flatten-transpose bridge, two-layer
sequence back-end (transformer encoder or BLSTM), symbol projection.

The page pathway is the line pathway with a taller input: a page rescaled
to height 64*L runs through the same convolutions, the [C, L, W'] feature
map is read row-major into a length L*W' sequence of channel vectors, and
the back-end + CTC see an ordinary (long) line.

The default convolution stack keeps the published kernel sizes and
channel widths, with one arithmetic correction: an aggregate height
stride of 64 (not 32) is required for height 64*L to land on exactly L
feature rows, so the last layer strides (2,1), and per-layer paddings are
chosen to make every strided layer an exact halving.  The resulting
closed-form shape law is H' = H/64, W' = W/8 for H a multiple of 64 and W
a multiple of 8, locked in by output_lengths tests.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .autodiff import Tensor, add, dropout, permute, relu, reshape

CONFIG_FORMAT_VERSION = 1


@dataclass(frozen=True)
class CnnLayerSpec:
    kernel: tuple
    stride: tuple
    out_channels: int
    padding: tuple


# kernels / strides / channels follow the published table; layer 8's height
# stride is 2 (see module docstring) and paddings solve the exact-halving
# constraint per layer
DEFAULT_CNN = (
    CnnLayerSpec((3, 3), (2, 1), 64, (1, 1)),
    CnnLayerSpec((5, 5), (2, 2), 128, (2, 2)),
    CnnLayerSpec((3, 3), (2, 2), 128, (1, 1)),
    CnnLayerSpec((3, 3), (1, 2), 256, (1, 1)),
    CnnLayerSpec((3, 3), (2, 1), 256, (1, 1)),
    CnnLayerSpec((3, 3), (1, 1), 512, (1, 1)),
    CnnLayerSpec((3, 5), (2, 1), 512, (1, 2)),
    CnnLayerSpec((2, 7), (2, 1), 512, (0, 3)),
)

HEIGHT_FACTOR = 64  # aggregate height stride of the default stack
WIDTH_FACTOR = 8  # aggregate width stride ("W' == W/8")


def scaled_cnn(divisor):
    return tuple(
        CnnLayerSpec(s.kernel, s.stride, max(1, s.out_channels // divisor), s.padding)
        for s in DEFAULT_CNN
    )


@dataclass
class ModelConfig:
    n_symbols: int
    backend: str = "transformer"  # "transformer" (model I) or "blstm" (model II)
    oversample_L: int = 1
    cnn: tuple = DEFAULT_CNN
    backend_layers: int = 2
    hidden_dim: int = 512  # transformer width (== CNN channels) / LSTM per direction
    n_heads: int = 8
    ff_dim: int = 768
    dropout: float = 0.1
    profile: str = "paper"

    def __post_init__(self):
        if self.backend not in ("transformer", "blstm"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.n_symbols < 2:
            raise ValueError("need at least one real symbol plus blank")
        if self.oversample_L < 1:
            raise ValueError(f"oversample_L must be >= 1, got {self.oversample_L}")
        if self.backend == "transformer" and self.hidden_dim % self.n_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by {self.n_heads} heads"
            )

    @property
    def cnn_channels(self):
        return self.cnn[-1].out_channels

    def to_dict(self):
        return {
            "format_version": CONFIG_FORMAT_VERSION,
            "n_symbols": self.n_symbols,
            "backend": self.backend,
            "oversample_L": self.oversample_L,
            "cnn": [
                {
                    "kernel": list(s.kernel),
                    "stride": list(s.stride),
                    "out_channels": s.out_channels,
                    "padding": list(s.padding),
                }
                for s in self.cnn
            ],
            "backend_layers": self.backend_layers,
            "hidden_dim": self.hidden_dim,
            "n_heads": self.n_heads,
            "ff_dim": self.ff_dim,
            "dropout": self.dropout,
            "profile": self.profile,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d):
        version = d.get("format_version")
        if version != CONFIG_FORMAT_VERSION:
            raise ValueError(
                f"config format_version {version} unsupported "
                f"(expected {CONFIG_FORMAT_VERSION})"
            )
        cnn = tuple(
            CnnLayerSpec(
                tuple(s["kernel"]), tuple(s["stride"]), s["out_channels"],
                tuple(s["padding"])
            )
            for s in d["cnn"]
        )
        return cls(
            n_symbols=d["n_symbols"],
            backend=d["backend"],
            oversample_L=d["oversample_L"],
            cnn=cnn,
            backend_layers=d["backend_layers"],
            hidden_dim=d["hidden_dim"],
            n_heads=d["n_heads"],
            ff_dim=d["ff_dim"],
            dropout=d["dropout"],
            profile=d.get("profile", "custom"),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def make_config(profile, backend, n_symbols, oversample_L=1):
    """toy: channels/4 and hidden/4 of the full-scale 'paper' profile."""
    if profile == "paper":
        hidden = 512 if backend == "transformer" else 256
        return ModelConfig(
            n_symbols=n_symbols, backend=backend, oversample_L=oversample_L,
            cnn=DEFAULT_CNN, hidden_dim=hidden, n_heads=8, ff_dim=768,
            profile="paper",
        )
    if profile == "toy":
        hidden = 128 if backend == "transformer" else 64
        return ModelConfig(
            n_symbols=n_symbols, backend=backend, oversample_L=oversample_L,
            cnn=scaled_cnn(4), hidden_dim=hidden, n_heads=4, ff_dim=192,
            profile="toy",
        )
    raise ValueError(f"unknown profile {profile!r} (expected 'toy' or 'paper')")


def output_lengths(config, h, w):
    """Closed-form (H', W') after the full CNN stack; errors on collapse."""
    if h < 1 or w < 1:
        raise ValueError(f"input extents must be positive, got {h}x{w}")
    for i, spec in enumerate(config.cnn):
        h = layers.conv_output_extent(h, spec.kernel[0], spec.stride[0], spec.padding[0])
        w = layers.conv_output_extent(w, spec.kernel[1], spec.stride[1], spec.padding[1])
        if h < 1 or w < 1:
            raise ValueError(
                f"input collapses inside the CNN: layer {i + 1} would emit "
                f"{h}x{w}"
            )
    return h, w


class PageModel:
    """Owns named parameters, batch-norm buffers, and the forward pass."""

    def __init__(self, config, rng):
        self.config = config
        self.params = {}
        self.bn_stats = []
        c_in = 1
        for i, spec in enumerate(config.cnn):
            kh, kw = spec.kernel
            fan_in = c_in * kh * kw
            self.params[f"cnn{i}.w"] = layers.kaiming_uniform(
                rng, (spec.out_channels, c_in, kh, kw), fan_in
            )
            self.params[f"cnn{i}.b"] = layers.zeros_param((spec.out_channels,))
            bn_params, stats = layers.init_batch_norm(spec.out_channels)
            self.params[f"cnn{i}.bn_g"] = bn_params["gamma"]
            self.params[f"cnn{i}.bn_b"] = bn_params["beta"]
            self.bn_stats.append(stats)
            c_in = spec.out_channels
        d = config.cnn_channels
        if config.backend == "transformer":
            if d != config.hidden_dim:
                raise ValueError(
                    f"transformer width {config.hidden_dim} must equal CNN "
                    f"channels {d}"
                )
            for i in range(config.backend_layers):
                for name, t in layers.init_transformer_layer(
                    rng, d, config.ff_dim
                ).items():
                    self.params[f"enc{i}.{name}"] = t
            head_in = d
        else:
            d_in = d
            for i in range(config.backend_layers):
                for name, t in layers.init_blstm_layer(
                    rng, d_in, config.hidden_dim
                ).items():
                    self.params[f"lstm{i}.{name}"] = t
                d_in = 2 * config.hidden_dim
            head_in = d_in
        head = layers.init_dense(rng, head_in, config.n_symbols)
        self.params["head.w"] = head["w"]
        self.params["head.b"] = head["b"]
        self._pe_cache = np.zeros((0, d))

    # --- named access ------------------------------------------------------

    def named_parameters(self):
        return self.params

    def named_buffers(self):
        out = {}
        for i, stats in enumerate(self.bn_stats):
            out[f"cnn{i}.bn_mean"] = stats["mean"]
            out[f"cnn{i}.bn_var"] = stats["var"]
        return out

    def parameter_count(self):
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    # --- forward pieces ----------------------------------------------------

    def cnn_forward(self, image, training=False):
        """[1, H, W] -> [C, H', W'] through conv/BN/ReLU blocks."""
        x = image
        for i, spec in enumerate(self.config.cnn):
            x = layers.conv2d(
                x, self.params[f"cnn{i}.w"], self.params[f"cnn{i}.b"],
                spec.stride, spec.padding,
            )
            x = layers.batch_norm(
                x, self.params[f"cnn{i}.bn_g"], self.params[f"cnn{i}.bn_b"],
                self.bn_stats[i], training,
            )
            x = relu(x)
        return x

    def _positions(self, t_len, d):
        if self._pe_cache.shape[0] < t_len:
            self._pe_cache = layers.sinusoidal_encoding(t_len, d)
        return Tensor(self._pe_cache[:t_len])

    def forward(self, image, training=False, rng=None):
        """[1, 64*L, W] image -> [L*W', n_symbols] unnormalized logits."""
        c, h, w = image.data.shape
        if c != 1:
            raise ValueError(f"expected a single-channel image, got {c} channels")
        expected_h = 64 * self.config.oversample_L
        if h != expected_h:
            raise ValueError(
                f"image height {h} does not match 64*L = {expected_h} "
                f"(L={self.config.oversample_L})"
            )
        if w % WIDTH_FACTOR:
            raise ValueError(f"image width {w} not a multiple of {WIDTH_FACTOR}")
        feat = self.cnn_forward(image, training)
        seq = flatten_transpose(feat)
        cfg = self.config
        if cfg.backend == "transformer":
            seq = add(seq, self._positions(seq.data.shape[0], cfg.cnn_channels))
            seq = dropout(seq, cfg.dropout, rng, training)
            for i in range(cfg.backend_layers):
                p = {
                    k.split(".", 1)[1]: v
                    for k, v in self.params.items()
                    if k.startswith(f"enc{i}.")
                }
                seq = layers.transformer_encoder_layer(
                    seq, p, cfg.n_heads, rng, cfg.dropout, training
                )
        else:
            for i in range(cfg.backend_layers):
                p = {
                    k.split(".", 1)[1]: v
                    for k, v in self.params.items()
                    if k.startswith(f"lstm{i}.")
                }
                seq = layers.blstm_layer(seq, p)
                seq = dropout(seq, cfg.dropout, rng, training)
        return layers.dense(seq, self.params["head.w"], self.params["head.b"])


def flatten_transpose(featmap):
    """[C, L, W'] -> [(L*W'), C]: bands left-to-right, top band first."""
    c, l_rows, w = featmap.data.shape
    return reshape(permute(featmap, (1, 2, 0)), (l_rows * w, c))


def unflatten_transpose(seq, l_rows, w):
    """Inverse of flatten_transpose (used to verify the bijection)."""
    t_len, c = seq.data.shape
    if t_len != l_rows * w:
        raise ValueError(f"sequence length {t_len} != {l_rows}*{w}")
    return permute(reshape(seq, (l_rows, w, c)), (2, 0, 1))


@dataclass
class BootstrapReport:
    copied: list = field(default_factory=list)
    reinitialized: list = field(default_factory=list)

    def to_text(self):
        return (
            f"copied {len(self.copied)} tensors: {', '.join(self.copied)}\n"
            f"reinitialized {len(self.reinitialized)} tensors: "
            f"{', '.join(self.reinitialized) or '(none)'}"
        )


def bootstrap_from_line_model(line_model, page_config, rng):
    """Start a page model from a converged line model's weights.

    CNN tensors (weights and batch-norm statistics) are copied bit-exactly;
    back-end and head tensors copy wherever shapes agree and are freshly
    initialized elsewhere.  Returns (page_model, report).  Refuses when the
    CNN specs differ (naming the first differing layer) or the alphabets
    disagree.
    """
    line_cfg = line_model.config
    for i, (a, b) in enumerate(zip(line_cfg.cnn, page_config.cnn)):
        if a != b:
            raise ValueError(
                f"CNN spec mismatch at layer {i + 1}: line {a} vs page {b}"
            )
    if len(line_cfg.cnn) != len(page_config.cnn):
        raise ValueError(
            f"CNN depth mismatch: {len(line_cfg.cnn)} vs {len(page_config.cnn)}"
        )
    if line_cfg.n_symbols != page_config.n_symbols:
        raise ValueError(
            f"alphabet mismatch: line {line_cfg.n_symbols} vs page "
            f"{page_config.n_symbols} symbols"
        )
    page_model = PageModel(page_config, rng)
    report = BootstrapReport()
    for name, tensor in page_model.params.items():
        src = line_model.params.get(name)
        if src is not None and src.data.shape == tensor.data.shape:
            tensor.data[...] = src.data
            report.copied.append(name)
        else:
            report.reinitialized.append(name)
    for i, stats in enumerate(page_model.bn_stats):
        stats["mean"][:] = line_model.bn_stats[i]["mean"]
        stats["var"][:] = line_model.bn_stats[i]["var"]
    return page_model, report
