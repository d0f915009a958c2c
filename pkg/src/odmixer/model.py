"""The dual-branch OD-pair mixer network.

Every OD pair's recent flow sequence is embedded independently into a
d-channel feature, giving an (n, n, d) feature cube per branch.  A stack of
interaction blocks alternates

* a channel mixer: a residual two-layer MLP over the channel axis, shared
  by all n^2 pairs, followed by layer normalization;
* a multi-view mixer: one MLP mixing across all pairs that share an origin
  (over the destination axis) plus one mixing across all pairs that share a
  destination (over the origin axis), fused with the channel-mixer output
  through a residual sum and layer normalization.

The two branches (previous day, current day) share all embedding and block
weights.  After the stack, a bidirectional trend unit lets each branch gate
itself on a fused view of both branches; its two halves are symmetric but
have independent weights.  A shared affine head maps each pair's feature to
one flow value.

Mixer and trend weights carry no bias terms; only the output head has one.
Every structural choice is switchable for ablation studies, so variants
are runtime flags on a single implementation.
"""

import struct
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import ConfigError, DataError, ShapeError

LAYER_NORM_EPS = 1e-5

_CKPT_MAGIC = b"ODMX1"
_CKPT_VERSION = 1

_ABLATION_FIELDS = (
    "use_omp",
    "use_channel_mixer",
    "use_origin_mixer",
    "use_des_mixer",
    "use_multiview",
    "use_btl",
    "use_prev_branch",
)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters and ablation switches.

    ``horizon`` input intervals are embedded into ``channels`` features per
    OD pair; ``layers`` interaction blocks follow.  Hidden widths of all
    mixer MLPs are twice the channel count.
    """

    n: int
    horizon: int = 4
    channels: int = 16
    layers: int = 5
    activation: str = "gelu"
    use_omp: bool = True
    use_channel_mixer: bool = True
    use_origin_mixer: bool = True
    use_des_mixer: bool = True
    use_multiview: bool = True
    use_btl: bool = True
    use_prev_branch: bool = True

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError(f"need at least 2 stations, got n={self.n}")
        if self.horizon < 1 or self.channels < 1 or self.layers < 1:
            raise ConfigError(
                f"horizon/channels/layers must be >= 1, got "
                f"{self.horizon}/{self.channels}/{self.layers}"
            )
        if self.activation not in ad.ACTIVATIONS:
            raise ConfigError(
                f"unknown activation {self.activation!r}; choose from {sorted(ad.ACTIVATIONS)}"
            )

    @property
    def hidden(self):
        return 2 * self.channels

    def ablated(self, **flags):
        return replace(self, **flags)


def expected_param_count(cfg):
    """Closed-form parameter count; linear in n and layers, and independent
    of the horizon beyond the embedding."""
    d, n = cfg.channels, cfg.n
    embed = d * cfg.horizon
    per_block = 4 * d * d + 4 * (2 * d) * n + 4 * d
    trend = 2 * (2 * d * d + 2 * d * d)
    head = d + 1
    return embed + cfg.layers * per_block + trend + head


class ODMixer:
    """Dual-branch mixer over all n^2 OD pairs.

    Forward input is one window per branch, shaped (n, n, horizon) or
    batched (B, n, n, horizon); outputs are flow matrices of matching
    leading shape.  A model instance is single-writer: one forward/backward
    at a time, while frozen parameters may serve concurrent readers.
    """

    def __init__(self, config, dtype=np.float32, seed=0):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        self._params = {}
        self._build(np.random.default_rng(np.random.SeedSequence([self.seed, 0x11])))

    # -- parameters ---------------------------------------------------------

    def _add(self, name, shape, rng, fan_in=None):
        if fan_in:
            bound = 1.0 / np.sqrt(fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        else:
            values = np.zeros(shape)
        self._params[name] = Parameter(name, values.astype(self.dtype))

    def _add_layer_norm(self, prefix):
        d = self.config.channels
        self._params[f"{prefix}.gamma"] = Parameter(f"{prefix}.gamma", np.ones(d, dtype=self.dtype))
        self._params[f"{prefix}.beta"] = Parameter(f"{prefix}.beta", np.zeros(d, dtype=self.dtype))

    def _build(self, rng):
        cfg = self.config
        d, h, n = cfg.channels, cfg.hidden, cfg.n
        self._add("embed.w", (d, cfg.horizon), rng, fan_in=cfg.horizon)
        for layer in range(cfg.layers):
            pfx = f"block{layer}"
            self._add(f"{pfx}.cm.w1", (h, d), rng, fan_in=d)
            self._add(f"{pfx}.cm.w2", (d, h), rng, fan_in=h)
            self._add_layer_norm(f"{pfx}.cm.ln")
            self._add(f"{pfx}.om.w1", (h, n), rng, fan_in=n)
            self._add(f"{pfx}.om.w2", (n, h), rng, fan_in=h)
            self._add(f"{pfx}.dm.w1", (h, n), rng, fan_in=n)
            self._add(f"{pfx}.dm.w2", (n, h), rng, fan_in=h)
            self._add_layer_norm(f"{pfx}.fuse.ln")
        for half in ("prev", "cur"):
            self._add(f"btl.{half}.mix_w", (d, h), rng, fan_in=h)
            self._add(f"btl.{half}.gate_w", (d, d), rng, fan_in=d)
            self._add(f"btl.{half}.proj_w", (d, d), rng, fan_in=d)
        self._add("head.w", (1, d), rng, fan_in=d)
        self._add("head.b", (1,), rng)

    def parameters(self):
        """Parameters in creation order (stable across runs)."""
        return list(self._params.values())

    def named_parameters(self):
        return dict(self._params)

    def param(self, name):
        return self._params[name]

    def param_count(self):
        return sum(p.tensor.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.tensor.grad = None

    # -- blocks ---------------------------------------------------------------

    def _act(self, x):
        return ad.ACTIVATIONS[self.config.activation](x)

    def _as_batched(self, x, feature_dim):
        x = ad.as_tensor(x)
        n = self.config.n
        if x.shape[-3:] != (n, n, feature_dim):
            raise ShapeError(
                f"expected trailing shape ({n}, {n}, {feature_dim}), got {x.shape}"
            )
        if x.ndim == 3:
            return ad.reshape(x, (1,) + x.shape), True
        if x.ndim == 4:
            return x, False
        raise ShapeError(f"expected 3-D or 4-D input, got shape {x.shape}")

    def _maybe_unbatch(self, x, squeeze):
        return ad.reshape(x, x.shape[1:]) if squeeze else x

    def embed(self, window):
        """Per-pair embedding of the flow sequence: (..., horizon) -> (..., channels)."""
        x, squeeze = self._as_batched(window, self.config.horizon)
        out = ad.linear(x, self.param("embed.w"))
        return self._maybe_unbatch(out, squeeze)

    def channel_mixer(self, h, layer):
        """Residual MLP over the channel axis, shared by all pairs."""
        x, squeeze = self._as_batched(h, self.config.channels)
        pfx = f"block{layer}"
        hidden = self._act(ad.linear(x, self.param(f"{pfx}.cm.w1")))
        mixed = ad.linear(hidden, self.param(f"{pfx}.cm.w2"))
        out = ad.layer_norm(
            ad.add(x, mixed),
            self.param(f"{pfx}.cm.ln.gamma"),
            self.param(f"{pfx}.cm.ln.beta"),
            eps=LAYER_NORM_EPS,
        )
        return self._maybe_unbatch(out, squeeze)

    def _axis_mixer(self, h, w1_name, w2_name, mix_origins):
        """MLP over one station axis: the destination axis per
        (origin, channel) row, or the origin axis per (destination, channel)
        row when ``mix_origins`` is set."""
        x, squeeze = self._as_batched(h, self.config.channels)
        # (B, origin, dest, c) -> rows whose last axis is the mixed one
        perm = (0, 2, 3, 1) if mix_origins else (0, 1, 3, 2)
        rows = ad.permute(x, perm)
        mixed = ad.linear(self._act(ad.linear(rows, self.param(w1_name))), self.param(w2_name))
        inverse = (0, 3, 1, 2) if mix_origins else (0, 1, 3, 2)
        out = ad.permute(mixed, inverse)
        return self._maybe_unbatch(out, squeeze)

    def origin_mixer(self, h, layer):
        """Mix across all pairs sharing an origin; output at one origin slice
        depends only on the input at that slice."""
        pfx = f"block{layer}"
        return self._axis_mixer(h, f"{pfx}.om.w1", f"{pfx}.om.w2", mix_origins=False)

    def des_mixer(self, h, layer):
        """Mix across all pairs sharing a destination; column-local."""
        pfx = f"block{layer}"
        return self._axis_mixer(h, f"{pfx}.dm.w1", f"{pfx}.dm.w2", mix_origins=True)

    def odim_block(self, h, layer):
        """One interaction block: channel mixer, then the fused multi-view sum."""
        cfg = self.config
        x, squeeze = self._as_batched(h, cfg.channels)
        hc = self.channel_mixer(x, layer) if cfg.use_channel_mixer else x
        total = hc
        if cfg.use_multiview:
            if cfg.use_origin_mixer:
                total = ad.add(total, self.origin_mixer(hc, layer))
            if cfg.use_des_mixer:
                total = ad.add(total, self.des_mixer(hc, layer))
        pfx = f"block{layer}"
        out = ad.layer_norm(
            total,
            self.param(f"{pfx}.fuse.ln.gamma"),
            self.param(f"{pfx}.fuse.ln.beta"),
            eps=LAYER_NORM_EPS,
        )
        return self._maybe_unbatch(out, squeeze)

    def odim_stack(self, h):
        for layer in range(self.config.layers):
            h = self.odim_block(h, layer)
        return h

    def btl(self, h_prev, h_cur):
        """Bidirectional trend unit: each branch is gated by a sigmoid read
        off a fused (concatenated, then mixed) view of both branches, with a
        residual path.  The two halves have independent weights."""
        if not self.config.use_btl:
            return h_prev, h_cur

        def half(own, other, which):
            fused = ad.linear(
                ad.concat_last_axis([own, other]), self.param(f"btl.{which}.mix_w")
            )
            gate = ad.sigmoid(ad.linear(fused, self.param(f"btl.{which}.gate_w")))
            proj = ad.linear(own, self.param(f"btl.{which}.proj_w"))
            return ad.add(ad.hadamard(gate, proj), own)

        return half(h_prev, h_cur, "prev"), half(h_cur, h_prev, "cur")

    def output_head(self, h):
        """Shared affine map from each pair's feature to one flow value."""
        x, squeeze = self._as_batched(h, self.config.channels)
        y = ad.linear(x, self.param("head.w"), self.param("head.b"))  # (B, n, n, 1)
        out = ad.reshape(y, y.shape[:-1])
        if squeeze:
            out = ad.reshape(out, out.shape[1:])
        return out

    def forward(self, prev_window, cur_window):
        """Predict next-interval flow for both branches.

        Returns (pred_prev, pred_cur); pred_prev is None when the previous
        branch is ablated away.  The two branches share all embedding and
        block weights; the current branch receives estimated complete
        matrices (or raw incomplete ones under the no-estimation ablation).
        """
        cfg = self.config
        h_cur = self.odim_stack(self.embed(cur_window))
        if not cfg.use_prev_branch:
            return None, self.output_head(h_cur)
        h_prev = self.odim_stack(self.embed(prev_window))
        h_prev, h_cur = self.btl(h_prev, h_cur)
        return self.output_head(h_prev), self.output_head(h_cur)

    # -- checkpoints ----------------------------------------------------------

    def save(self, path):
        save_checkpoint(self, path)


def _pack_config(cfg):
    flags = b"".join(struct.pack("<B", int(getattr(cfg, f))) for f in _ABLATION_FIELDS)
    act = cfg.activation.encode()
    return (
        struct.pack("<4I", cfg.n, cfg.horizon, cfg.channels, cfg.layers)
        + struct.pack("<H", len(act))
        + act
        + flags
    )


def save_checkpoint(model, path):
    """Write config and parameters; loading reproduces predictions bit for bit."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(_pack_config(model.config))
        names = sorted(model.named_parameters())
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            data = np.ascontiguousarray(model.param(name).data, dtype="<f4")
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)) + encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path):
    """Rebuild a float32 model from a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(count):
        nonlocal off
        if off + count > len(blob):
            raise DataError(f"{path}: truncated checkpoint")
        out = blob[off : off + count]
        off += count
        return out

    if take(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4))
    if version != _CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    n, horizon, channels, layers = struct.unpack("<4I", take(16))
    (act_len,) = struct.unpack("<H", take(2))
    activation = take(act_len).decode()
    flags = {f: bool(take(1)[0]) for f in _ABLATION_FIELDS}
    cfg = ModelConfig(
        n=n, horizon=horizon, channels=channels, layers=layers, activation=activation, **flags
    )
    model = ODMixer(cfg, dtype=np.float32)
    (count,) = struct.unpack("<I", take(4))
    seen = set()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        values = np.frombuffer(take(4 * int(np.prod(shape, dtype=np.int64))), dtype="<f4")
        if name not in model.named_parameters():
            raise DataError(f"{path}: unknown parameter {name!r}")
        param = model.param(name)
        if tuple(shape) != param.tensor.shape:
            raise DataError(
                f"{path}: parameter {name!r} has shape {tuple(shape)}, expected {param.tensor.shape}"
            )
        param.tensor.assign_(values.reshape(shape))
        seen.add(name)
    missing = set(model.named_parameters()) - seen
    if missing:
        raise DataError(f"{path}: missing parameters {sorted(missing)}")
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes after parameters")
    return model
