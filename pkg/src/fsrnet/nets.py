"""FSRNet architectures as functions over a flat, named parameter store.

Parameters live in :class:`ModelParams` under hierarchical names such as
``coarse.res1.conv1.weight``. Each network has an ``init_*`` function that
registers its parameters and a ``*_forward`` function that reads them back by
name, so checkpoints are just the name -> array map.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

VARIANTS = ("fsrnet", "baseline_v1", "gt_prior", "gt_prior_baseline")
PRIOR_KINDS = ("both", "landmarks", "parsing")
LAYOUT_VERSION = "res=conv-bn-relu-conv-bn+skip;hg=nearest;dec_in=feat+heads;heads=sigmoid"


class ConfigError(ValueError):
    """Raised for invalid or mismatched configurations."""


@dataclass(frozen=True)
class NetConfig:
    hr_size: int = 64
    scale_factor: int = 8
    base_channels: int = 64
    num_coarse_res_blocks: int = 3
    num_encoder_res_blocks: int = 3
    num_decoder_res_blocks: int = 3
    num_hourglass: int = 2
    hourglass_depth: int = 3
    num_landmarks: int = 5
    num_parsing_maps: int = 5
    priors: str = "both"
    variant: str = "fsrnet"
    disc_channels: tuple[int, ...] = (64, 128, 256, 512)
    phi_channels: tuple[int, ...] = (16, 32, 32, 64, 64)
    phi_seed: int = 20180323

    def __post_init__(self):
        if self.hr_size % self.scale_factor:
            raise ConfigError(f"hr_size {self.hr_size} not divisible by scale_factor {self.scale_factor}")
        if self.hr_size % 2:
            raise ConfigError(f"hr_size must be even, got {self.hr_size}")
        if self.num_hourglass not in (1, 2, 4):
            raise ConfigError(f"num_hourglass must be 1, 2 or 4, got {self.num_hourglass}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.priors not in PRIOR_KINDS:
            raise ConfigError(f"unknown prior kind {self.priors!r}; expected one of {PRIOR_KINDS}")
        if self.prior_spatial % (2 ** self.hourglass_depth) or self.prior_spatial >> self.hourglass_depth < 2:
            raise ConfigError(f"hourglass depth {self.hourglass_depth} too deep for prior maps "
                              f"of size {self.prior_spatial}")
        if len(self.disc_channels) != 4:
            raise ConfigError("discriminator needs exactly four stride-2 stages")
        if len(self.phi_channels) != 5:
            raise ConfigError("perceptual extractor has exactly five conv layers")

    @property
    def prior_spatial(self) -> int:
        return self.hr_size // 2

    @property
    def lr_size(self) -> int:
        return self.hr_size // self.scale_factor

    @property
    def landmark_channels(self) -> int:
        return 0 if self.priors == "parsing" else self.num_landmarks

    @property
    def parsing_channels(self) -> int:
        return 0 if self.priors == "landmarks" else self.num_parsing_maps

    @property
    def prior_map_channels(self) -> int:
        return self.landmark_channels + self.parsing_channels

    @property
    def has_prior_net(self) -> bool:
        return self.variant == "fsrnet"

    @property
    def encoder_channels(self) -> int:
        if self.variant == "gt_prior_baseline":
            return self.base_channels + self.prior_map_channels
        return self.base_channels

    @property
    def decoder_in_channels(self) -> int:
        c = self.base_channels
        if self.variant == "fsrnet":
            return c + c + self.prior_map_channels
        if self.variant == "gt_prior":
            return c + self.prior_map_channels
        return self.encoder_channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disc_channels"] = list(self.disc_channels)
        d["phi_channels"] = list(self.phi_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        for key in ("disc_channels", "phi_channels"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def fingerprint(self, part: str = "generator") -> str:
        blob = json.dumps({"part": part, "layout": LAYOUT_VERSION, **self.to_dict()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


class ModelParams:
    """Ordered name -> Tensor map; buffers (BN running stats) carry requires_grad=False."""

    def __init__(self, fingerprint: str, frozen: bool = False):
        self.fingerprint = fingerprint
        self.frozen = frozen
        self._tensors: dict[str, Tensor] = {}
        self._buffers: set[str] = set()

    def add(self, name: str, value: np.ndarray, buffer: bool = False) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=not (buffer or self.frozen))
        self._tensors[name] = t
        if buffer:
            self._buffers.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_buffer(self, name: str) -> bool:
        return name in self._buffers

    def trainable(self) -> list[tuple[str, Tensor]]:
        if self.frozen:
            return []
        return [(k, t) for k, t in self._tensors.items() if k not in self._buffers]

    def num_trainable(self) -> int:
        return sum(t.data.size for _, t in self.trainable())

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self._tensors):
            missing = sorted(set(self._tensors) - set(state))
            extra = sorted(set(state) - set(self._tensors))
            raise ConfigError(f"parameter names differ: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, arr in state.items():
            t = self._tensors[k]
            if arr.shape != t.shape:
                raise ConfigError(f"parameter {k}: shape {arr.shape} does not match {t.shape}")
            t.data[...] = arr

    def astype(self, dtype) -> "ModelParams":
        out = ModelParams(self.fingerprint, self.frozen)
        for k, t in self._tensors.items():
            out.add(k, t.data.astype(dtype), buffer=k in self._buffers)
        return out

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return next(iter(self._tensors.values())).dtype


class _Init:
    """Registers layers with fan-in scaled uniform initialization."""

    def __init__(self, params: ModelParams, rng: np.random.Generator):
        self.p = params
        self.rng = rng

    def _uniform(self, shape, fan_in):
        bound = np.sqrt(1.0 / fan_in)
        return self.rng.uniform(-bound, bound, size=shape).astype(np.float32)

    def conv(self, name, cin, cout, k):
        fan_in = cin * k * k
        self.p.add(f"{name}.weight", self._uniform((cout, cin, k, k), fan_in))
        self.p.add(f"{name}.bias", self._uniform((cout,), fan_in))

    def deconv(self, name, cin, cout, k):
        fan_in = cin * k * k
        self.p.add(f"{name}.weight", self._uniform((cin, cout, k, k), fan_in))
        self.p.add(f"{name}.bias", self._uniform((cout,), fan_in))

    def bn(self, name, c):
        self.p.add(f"{name}.gamma", np.ones(c, np.float32))
        self.p.add(f"{name}.beta", np.zeros(c, np.float32))
        self.p.add(f"{name}.running_mean", np.zeros(c, np.float32), buffer=True)
        self.p.add(f"{name}.running_var", np.ones(c, np.float32), buffer=True)

    def conv_bn(self, name, cin, cout, k):
        self.conv(f"{name}.conv", cin, cout, k)
        self.bn(f"{name}.bn", cout)

    def residual(self, name, c):
        self.conv(f"{name}.conv1", c, c, 3)
        self.bn(f"{name}.bn1", c)
        self.conv(f"{name}.conv2", c, c, 3)
        self.bn(f"{name}.bn2", c)


# ------------------------------------------------------------------ layer forwards


def conv(p: ModelParams, name: str, x: Tensor, stride: int = 1, padding: int | None = None) -> Tensor:
    w = p[f"{name}.weight"]
    if padding is None:
        padding = w.shape[2] // 2
    return T.conv2d(x, w, p[f"{name}.bias"], stride=stride, padding=padding)


def bn(p: ModelParams, name: str, x: Tensor, training: bool) -> Tensor:
    return T.batch_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"], p[f"{name}.running_mean"],
                        p[f"{name}.running_var"], training)


def conv_bn_relu(p, name, x, training, stride=1):
    return T.relu(bn(p, f"{name}.bn", conv(p, f"{name}.conv", x, stride=stride), training))


def residual_block(x: Tensor, p: ModelParams, name: str, training: bool = True) -> Tensor:
    """x + BN(Conv(ReLU(BN(Conv(x)))))."""
    c = p[f"{name}.conv1.weight"].shape[1]
    if x.shape[1] != c:
        raise ShapeError(f"residual block {name}: width {c} but input has {x.shape[1]} channels")
    h = T.relu(bn(p, f"{name}.bn1", conv(p, f"{name}.conv1", x), training))
    h = bn(p, f"{name}.bn2", conv(p, f"{name}.conv2", h), training)
    return T.add(x, h)


# -------------------------------------------------------------------- generator


def _init_coarse(init: _Init, cfg: NetConfig):
    c = cfg.base_channels
    init.conv_bn("coarse.head", 3, c, 3)
    for i in range(cfg.num_coarse_res_blocks):
        init.residual(f"coarse.res{i + 1}", c)
    init.conv("coarse.tail", c, 3, 3)


def coarse_sr_forward(x: Tensor, p: ModelParams, cfg: NetConfig, training: bool = True) -> Tensor:
    _check_image(x, cfg.hr_size, "coarse SR input")
    h = conv_bn_relu(p, "coarse.head", x, training)
    for i in range(cfg.num_coarse_res_blocks):
        h = residual_block(h, p, f"coarse.res{i + 1}", training)
    return conv(p, "coarse.tail", h)


def _init_hourglass(init: _Init, name: str, c: int, depth: int):
    init.residual(f"{name}.up", c)
    init.residual(f"{name}.down", c)
    if depth > 1:
        _init_hourglass(init, f"{name}.inner", c, depth - 1)
    else:
        init.residual(f"{name}.inner", c)
    init.residual(f"{name}.after", c)


def hourglass_forward(x: Tensor, p: ModelParams, name: str, depth: int, training: bool) -> Tensor:
    up = residual_block(x, p, f"{name}.up", training)
    low = residual_block(T.downsample_nearest(x, 2), p, f"{name}.down", training)
    if depth > 1:
        low = hourglass_forward(low, p, f"{name}.inner", depth - 1, training)
    else:
        low = residual_block(low, p, f"{name}.inner", training)
    low = residual_block(low, p, f"{name}.after", training)
    return T.add(up, T.upsample_nearest(low, 2))


def _init_prior(init: _Init, cfg: NetConfig):
    c = cfg.base_channels
    init.conv_bn("prior.stem", 3, c, 3)
    init.residual("prior.pre", c)
    for s in range(cfg.num_hourglass):
        name = f"prior.stack{s + 1}"
        _init_hourglass(init, f"{name}.hg", c, cfg.hourglass_depth)
        init.residual(f"{name}.res", c)
        init.conv_bn(f"{name}.post", c, c, 1)
        if cfg.landmark_channels:
            init.conv(f"{name}.landmark_head", c, cfg.landmark_channels, 1)
        if cfg.parsing_channels:
            init.conv(f"{name}.parsing_head", c, cfg.parsing_channels, 1)
        if s < cfg.num_hourglass - 1:
            init.conv(f"{name}.merge_feat", c, c, 1)
            init.conv(f"{name}.merge_maps", cfg.prior_map_channels, c, 1)


class PriorOutput(NamedTuple):
    landmark_heatmaps: Tensor | None
    parsing_maps: Tensor | None
    feature: Tensor
    stacks: list[tuple[Tensor | None, Tensor | None]]

    def maps(self) -> Tensor:
        return _cat_present(self.landmark_heatmaps, self.parsing_maps)

    def decoder_input(self) -> Tensor:
        return _cat_present(self.feature, self.landmark_heatmaps, self.parsing_maps)


def _cat_present(*xs: Tensor | None) -> Tensor:
    xs = [x for x in xs if x is not None]
    return xs[0] if len(xs) == 1 else T.concat_channels(*xs)


def prior_net_forward(y_c: Tensor, p: ModelParams, cfg: NetConfig, training: bool = True) -> PriorOutput:
    _check_image(y_c, cfg.hr_size, "prior net input")
    x = conv_bn_relu(p, "prior.stem", y_c, training, stride=2)
    x = residual_block(x, p, "prior.pre", training)
    stacks = []
    for s in range(cfg.num_hourglass):
        name = f"prior.stack{s + 1}"
        h = hourglass_forward(x, p, f"{name}.hg", cfg.hourglass_depth, training)
        h = residual_block(h, p, f"{name}.res", training)
        feat = conv_bn_relu(p, f"{name}.post", h, training)
        heat = T.sigmoid(conv(p, f"{name}.landmark_head", feat)) if cfg.landmark_channels else None
        parse = T.sigmoid(conv(p, f"{name}.parsing_head", feat)) if cfg.parsing_channels else None
        stacks.append((heat, parse))
        if s < cfg.num_hourglass - 1:
            maps = _cat_present(heat, parse)
            x = T.add(T.add(x, conv(p, f"{name}.merge_feat", feat)), conv(p, f"{name}.merge_maps", maps))
    heat, parse = stacks[-1]
    return PriorOutput(heat, parse, feat, stacks)


def _init_encoder(init: _Init, cfg: NetConfig):
    c = cfg.encoder_channels
    init.conv_bn("encoder.head", 3, c, 3)
    for i in range(cfg.num_encoder_res_blocks):
        init.residual(f"encoder.res{i + 1}", c)


def fine_encoder_forward(y_c: Tensor, p: ModelParams, cfg: NetConfig, training: bool = True) -> Tensor:
    _check_image(y_c, cfg.hr_size, "fine encoder input")
    f = conv_bn_relu(p, "encoder.head", y_c, training, stride=2)
    for i in range(cfg.num_encoder_res_blocks):
        f = residual_block(f, p, f"encoder.res{i + 1}", training)
    return f


def _init_decoder(init: _Init, cfg: NetConfig):
    c = cfg.base_channels
    init.conv_bn("decoder.reduce", cfg.decoder_in_channels, c, 3)
    init.deconv("decoder.up", c, c, 4)
    init.bn("decoder.up_bn", c)
    for i in range(cfg.num_decoder_res_blocks):
        init.residual(f"decoder.res{i + 1}", c)
    init.conv("decoder.tail", c, 3, 3)


def fine_decoder_forward(f: Tensor, priors: Tensor | None, p: ModelParams, cfg: NetConfig,
                         training: bool = True) -> Tensor:
    if priors is not None:
        if priors.shape[0] != f.shape[0] or priors.shape[2:] != f.shape[2:]:
            raise ShapeError(f"decoder: feature {f.shape} and prior {priors.shape} disagree on N/H/W")
        h = T.concat_channels(f, priors)
    else:
        h = f
    if h.shape[1] != cfg.decoder_in_channels:
        raise ShapeError(f"decoder expects {cfg.decoder_in_channels} input channels, got {h.shape[1]}")
    h = conv_bn_relu(p, "decoder.reduce", h, training)
    h = T.deconv2d(h, p["decoder.up.weight"], p["decoder.up.bias"], stride=2, padding=1)
    h = T.relu(bn(p, "decoder.up_bn", h, training))
    for i in range(cfg.num_decoder_res_blocks):
        h = residual_block(h, p, f"decoder.res{i + 1}", training)
    return conv(p, "decoder.tail", h)


def init_generator(cfg: NetConfig, seed: int) -> ModelParams:
    p = ModelParams(cfg.fingerprint("generator"))
    init = _Init(p, np.random.default_rng(seed))
    _init_coarse(init, cfg)
    if cfg.has_prior_net:
        _init_prior(init, cfg)
    _init_encoder(init, cfg)
    _init_decoder(init, cfg)
    return p


class FSRNetOutput(NamedTuple):
    coarse: Tensor
    prior: PriorOutput | None
    fine: Tensor


def fsrnet_forward(x_bicubic: Tensor, p: ModelParams, cfg: NetConfig, mode: str = "full",
                   priors: Tensor | None = None, training: bool = True) -> FSRNetOutput:
    """Coarse SR -> (prior net, fine encoder) -> fine decoder.

    ``mode="gt_prior"`` bypasses the prior net and feeds ``priors`` (ground-truth
    maps, or any tensor of the decoder's prior width) straight into the decoder.
    ``"no_prior_supervision"`` runs the same graph as ``"full"``; the caller drops the prior loss.
    """
    if mode not in ("full", "gt_prior", "no_prior_supervision"):
        raise ConfigError(f"unknown forward mode {mode!r}")
    if mode == "gt_prior" and priors is None:
        raise ConfigError("gt_prior mode needs ground-truth prior maps")
    if cfg.variant == "gt_prior" and mode != "gt_prior":
        raise ConfigError("the gt_prior variant can only run in gt_prior mode")
    y_c = coarse_sr_forward(x_bicubic, p, cfg, training)
    f = fine_encoder_forward(y_c, p, cfg, training)
    prior_out = None
    if mode == "gt_prior":
        dec_priors = priors
    elif cfg.has_prior_net:
        prior_out = prior_net_forward(y_c, p, cfg, training)
        dec_priors = prior_out.decoder_input()
    else:
        dec_priors = None
    y = fine_decoder_forward(f, dec_priors, p, cfg, training)
    return FSRNetOutput(y_c, prior_out, y)


# --------------------------------------------------------------- discriminator, phi


def init_discriminator(cfg: NetConfig, seed: int) -> ModelParams:
    p = ModelParams(cfg.fingerprint("discriminator"))
    init = _Init(p, np.random.default_rng(seed))
    cin = 6
    for i, c in enumerate(cfg.disc_channels):
        init.conv(f"disc.stage{i + 1}.conv", cin, c, 4)
        if i > 0:
            init.bn(f"disc.stage{i + 1}.bn", c)
        cin = c
    init.conv("disc.out", cin, 1, 3)
    return p


def discriminator_forward(hr_candidate: Tensor, x_bicubic: Tensor, p: ModelParams, cfg: NetConfig,
                          training: bool = True) -> Tensor:
    """Patch discriminator: one real/fake probability per hr/16 x hr/16 cell."""
    if cfg.hr_size % 16:
        raise ConfigError(f"discriminator needs hr divisible by 16, got {cfg.hr_size}")
    _check_image(hr_candidate, cfg.hr_size, "discriminator candidate")
    _check_image(x_bicubic, cfg.hr_size, "discriminator condition")
    h = T.concat_channels(x_bicubic, hr_candidate)
    for i in range(len(cfg.disc_channels)):
        h = conv(p, f"disc.stage{i + 1}.conv", h, stride=2, padding=1)
        if i > 0:
            h = bn(p, f"disc.stage{i + 1}.bn", h, training)
        h = T.leaky_relu(h, 0.2)
    return T.sigmoid(conv(p, "disc.out", h))


def init_phi(cfg: NetConfig) -> ModelParams:
    """Frozen random conv stack standing in for a pretrained feature network."""
    p = ModelParams(cfg.fingerprint("phi"), frozen=True)
    init = _Init(p, np.random.default_rng(cfg.phi_seed))
    cin = 3
    for i, c in enumerate(cfg.phi_channels):
        init.conv(f"phi.conv{i + 1}", cin, c, 3)
        # He-uniform bound so feature magnitudes survive five ReLU layers
        p[f"phi.conv{i + 1}.weight"].data *= np.float32(np.sqrt(6.0))
        cin = c
    return p


def perceptual_extract(img: Tensor, phi: ModelParams) -> Tensor:
    h = img
    for i in range(5):
        h = T.relu(conv(phi, f"phi.conv{i + 1}", h, stride=2 if i in (1, 3) else 1))
    return h


def _check_image(x: Tensor, hr: int, what: str):
    if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (hr, hr):
        raise ShapeError(f"{what} must be [N,3,{hr},{hr}], got {x.shape}")
