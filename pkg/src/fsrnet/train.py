"""Losses, RMSprop and the FSRNet / FSRGAN training loops."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import __version__
from . import tensor as T
from .checkpoint import load_arrays, save_arrays, save_params
from .nets import (ConfigError, ModelParams, NetConfig, PriorOutput, discriminator_forward,
                   fsrnet_forward, init_discriminator, init_generator, init_phi, perceptual_extract)
from .synth import DIHEDRAL, Corpus, Sample
from .tensor import Tensor

log = logging.getLogger(__name__)

TRAIN_MODES = ("fsrnet", "fsrgan", "baseline_v1", "baseline_v2", "gt_prior", "gt_prior_baseline")
_VARIANT = {"fsrnet": "fsrnet", "fsrgan": "fsrnet", "baseline_v2": "fsrnet",
            "baseline_v1": "baseline_v1", "gt_prior": "gt_prior", "gt_prior_baseline": "gt_prior_baseline"}


class NumericalError(ArithmeticError):
    """Non-finite values reached the optimizer."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2.5e-4
    batch_size: int = 8
    lambda_prior: float = 1.0
    gamma_c: float = 1e-3
    gamma_p: float = 1e-1
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 1e-8
    max_steps: int = 1000
    seed: int = 0
    mode: str = "fsrnet"
    augment: bool = True
    checkpoint_every: int = 0
    saturating_gan: bool = False
    freeze_generator: bool = False
    warm_start: str = ""

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}; expected one of {TRAIN_MODES}")
        for name in ("lambda_prior", "gamma_c", "gamma_p", "learning_rate"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.rmsprop_decay < 1:
            raise ConfigError(f"rmsprop_decay must be in [0, 1), got {self.rmsprop_decay}")

    @property
    def effective_lambda(self) -> float:
        return 0.0 if self.mode == "baseline_v2" else self.lambda_prior


def net_config_for(mode: str, net: NetConfig) -> NetConfig:
    """The architecture variant a training mode runs on."""
    if mode not in TRAIN_MODES:
        raise ConfigError(f"unknown training mode {mode!r}")
    return replace(net, variant=_VARIANT[mode])


# ----------------------------------------------------------------------- losses


class LossTerms(NamedTuple):
    total: Tensor
    coarse: Tensor
    fine: Tensor
    prior: Tensor | None


def stack_maps(heat: Tensor | None, parse: Tensor | None) -> Tensor:
    present = [t for t in (heat, parse) if t is not None]
    return present[0] if len(present) == 1 else T.concat_channels(*present)


def fsrnet_loss(y_c: Tensor, y: Tensor, prior_out: PriorOutput | None, y_gt: Tensor,
                p_gt: Tensor | None, lam: float) -> LossTerms:
    """Coarse + fine image MSE plus lambda-weighted prior MSE, halved.

    Each squared-error term is averaged over its own element count, and every
    hourglass stack's maps enter the prior term with equal weight.
    """
    if lam < 0:
        raise ConfigError(f"prior weight must be >= 0, got {lam}")
    coarse = T.mse_loss(y_c, y_gt)
    fine = T.mse_loss(y, y_gt)
    prior = None
    if prior_out is not None and p_gt is not None:
        per_stack = [T.mse_loss(stack_maps(h, p), p_gt) for h, p in prior_out.stacks]
        prior = T.scale(T.stack_sum(per_stack), 1.0 / len(per_stack))
    total = T.add(coarse, fine)
    if prior is not None and lam > 0:
        total = T.add(total, T.scale(prior, lam))
    return LossTerms(T.scale(total, 0.5), coarse, fine, prior)


def _check_probabilities(c: Tensor, what: str):
    d = c.data
    if not np.all(np.isfinite(d)) or d.min() < 0 or d.max() > 1:
        raise ValueError(f"{what} must hold probabilities in [0, 1]")


def adversarial_losses(c_real: Tensor, c_fake: Tensor, saturating: bool = False,
                       eps: float = 1e-7) -> tuple[Tensor, Tensor]:
    """(discriminator loss, generator loss) from patch probabilities.

    The generator term is the non-saturating ``-log C(fake)`` unless
    ``saturating`` asks for ``log(1 - C(fake))``.
    """
    _check_probabilities(c_real, "C(real)")
    _check_probabilities(c_fake, "C(fake)")
    one_minus_fake = T.sub(Tensor(np.ones(c_fake.shape, c_fake.dtype)), c_fake)
    d_loss = T.scale(T.add(T.mean(T.log(c_real, eps)), T.mean(T.log(one_minus_fake, eps))), -1.0)
    if saturating:
        g_loss = T.mean(T.log(one_minus_fake, eps))
    else:
        g_loss = T.scale(T.mean(T.log(c_fake, eps)), -1.0)
    return d_loss, g_loss


def perceptual_loss(y: Tensor, y_gt: Tensor, phi: ModelParams) -> Tensor:
    """Mean squared distance between frozen feature maps."""
    if not phi.frozen:
        raise ConfigError("perceptual features must come from frozen parameters")
    return T.mse_loss(perceptual_extract(y, phi), perceptual_extract(y_gt, phi))


# -------------------------------------------------------------------- optimizer


def rmsprop_step(params: ModelParams, accum: dict[str, np.ndarray], lr: float,
                 decay: float = 0.99, eps: float = 1e-8) -> None:
    """v <- decay*v + (1-decay)*g^2 ; theta <- theta - lr*g/(sqrt(v)+eps), in place."""
    grads = {}
    for name, t in params.trainable():
        if not np.all(np.isfinite(t.grad)):
            raise NumericalError(f"non-finite gradient in {name}; step aborted")
        grads[name] = t.grad
    for name, t in params.trainable():
        g = grads[name]
        v = accum[name]
        v *= decay
        v += (1 - decay) * g * g
        t.data -= t.dtype.type(lr) * g / (np.sqrt(v) + t.dtype.type(eps))


class RMSprop:
    def __init__(self, params: ModelParams, lr: float, decay: float = 0.99, eps: float = 1e-8):
        if params.frozen:
            raise ConfigError("frozen parameters cannot be registered with an optimizer")
        self.params = params
        self.lr, self.decay, self.eps = lr, decay, eps
        self.accum = {name: np.zeros_like(t.data) for name, t in params.trainable()}

    def step(self) -> None:
        rmsprop_step(self.params, self.accum, self.lr, self.decay, self.eps)

    def zero_grad(self) -> None:
        self.params.zero_grad()


# ------------------------------------------------------------------------ state


@dataclass
class TrainState:
    net: NetConfig
    train: TrainConfig
    generator: ModelParams
    opt_g: RMSprop
    rng: np.random.Generator
    corpus_hash: str
    discriminator: ModelParams | None = None
    opt_d: RMSprop | None = None
    step: int = 0
    history: list[dict] = field(default_factory=list)


def init_state(net: NetConfig, cfg: TrainConfig, corpus_hash: str) -> TrainState:
    net = net_config_for(cfg.mode, net)
    gen = init_generator(net, seed=cfg.seed)
    if cfg.warm_start:
        _, arrays, _ = load_arrays(cfg.warm_start)
        gen.load_state({k[2:]: v for k, v in arrays.items() if k.startswith("G/")} or arrays)
    state = TrainState(net, cfg, gen, RMSprop(gen, cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_eps),
                       np.random.default_rng([cfg.seed, 7]), corpus_hash)
    if cfg.mode == "fsrgan":
        state.discriminator = init_discriminator(net, seed=cfg.seed + 1_000_003)
        state.opt_d = RMSprop(state.discriminator, cfg.learning_rate, cfg.rmsprop_decay, cfg.rmsprop_eps)
    return state


def _state_meta(state: TrainState) -> dict:
    return {"kind": "train_state", "step": state.step, "net": state.net.to_dict(),
            "train": asdict(state.train), "corpus_hash": state.corpus_hash,
            "rng": state.rng.bit_generator.state, "version": __version__}


def save_state(path: str | Path, state: TrainState) -> None:
    arrays = {f"G/{k}": v for k, v in state.generator.state().items()}
    arrays.update({f"opt.G/{k}": v for k, v in state.opt_g.accum.items()})
    if state.discriminator is not None:
        arrays.update({f"D/{k}": v for k, v in state.discriminator.state().items()})
        arrays.update({f"opt.D/{k}": v for k, v in state.opt_d.accum.items()})
    save_arrays(path, state.generator.fingerprint, arrays, _state_meta(state))


def load_state(path: str | Path, corpus_hash: str | None = None) -> TrainState:
    fingerprint, arrays, meta = load_arrays(path)
    if meta.get("kind") != "train_state":
        raise ConfigError(f"{path} is not a training-state checkpoint")
    net = NetConfig.from_dict(meta["net"])
    cfg = TrainConfig(**meta["train"])
    if corpus_hash is not None and corpus_hash != meta["corpus_hash"]:
        raise ConfigError(f"{path} was trained on corpus {meta['corpus_hash'][:12]}, "
                          f"not {corpus_hash[:12]}")
    state = init_state(replace(net), replace(cfg, warm_start=""), meta["corpus_hash"])
    if fingerprint != state.generator.fingerprint:
        raise ConfigError(f"{path}: fingerprint does not match its recorded configuration")

    def part(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    state.generator.load_state(part("G/"))
    for k, v in part("opt.G/").items():
        state.opt_g.accum[k][...] = v
    if state.discriminator is not None:
        state.discriminator.load_state(part("D/"))
        for k, v in part("opt.D/").items():
            state.opt_d.accum[k][...] = v
    state.rng.bit_generator.state = meta["rng"]
    state.step = meta["step"]
    return state


def export_generator(path: str | Path, state: TrainState, extra: dict | None = None) -> None:
    meta = {"kind": "generator", "mode": state.train.mode, "net": state.net.to_dict(),
            "train": asdict(state.train), "corpus_hash": state.corpus_hash, "step": state.step,
            "version": __version__, **(extra or {})}
    save_params(path, state.generator, meta)


# ---------------------------------------------------------------------- batches


@dataclass
class Batch:
    x: Tensor
    y: Tensor
    priors: Tensor | None


def prior_targets(samples: Sequence[Sample], net: NetConfig) -> np.ndarray | None:
    parts = []
    if net.landmark_channels:
        parts.append(np.stack([s.heatmaps for s in samples]))
    if net.parsing_channels:
        parts.append(np.stack([s.parsing for s in samples]))
    if not parts:
        return None
    return np.concatenate(parts, axis=1)


def make_batch(samples: Sequence[Sample], net: NetConfig, dtype=np.float32) -> Batch:
    x = np.stack([s.lr_bicubic for s in samples]).astype(dtype)
    y = np.stack([s.hr for s in samples]).astype(dtype)
    p = prior_targets(samples, net)
    return Batch(Tensor(x), Tensor(y), None if p is None else Tensor(p.astype(dtype)))


def draw_batch(state: TrainState, samples: Sequence[Sample]) -> list[Sample]:
    cfg = state.train
    idx = state.rng.choice(len(samples), size=min(cfg.batch_size, len(samples)), replace=False)
    ops = state.rng.integers(0, len(DIHEDRAL), size=len(idx))
    batch = [samples[i] for i in idx]
    if cfg.augment:
        batch = [s.transformed(*DIHEDRAL[o]) for s, o in zip(batch, ops)]
    return batch


# ------------------------------------------------------------------------- loop


def _forward_mode(mode: str) -> str:
    return {"gt_prior": "gt_prior", "baseline_v2": "no_prior_supervision"}.get(mode, "full")


def generator_losses(state: TrainState, batch: Batch):
    out = fsrnet_forward(batch.x, state.generator, state.net, mode=_forward_mode(state.train.mode),
                         priors=batch.priors, training=True)
    terms = fsrnet_loss(out.coarse, out.fine, out.prior, batch.y, batch.priors, state.train.effective_lambda)
    return out, terms


def _d_accuracy(c_real: Tensor, c_fake: Tensor) -> float:
    return float(0.5 * (np.mean(c_real.data > 0.5) + np.mean(c_fake.data < 0.5)))


def train_step(state: TrainState, samples: Sequence[Sample], phi: ModelParams | None = None) -> dict:
    cfg = state.train
    batch = make_batch(draw_batch(state, samples), state.net, state.generator.dtype)
    state.generator.zero_grad()
    out, terms = generator_losses(state, batch)
    record = {"step": state.step + 1}
    total = terms.total
    if cfg.mode == "fsrgan":
        disc, net = state.discriminator, state.net
        disc.zero_grad()
        c_real = discriminator_forward(batch.y, batch.x, disc, net)
        c_fake = discriminator_forward(out.fine.detach(), batch.x, disc, net)
        d_loss, _ = adversarial_losses(c_real, c_fake, cfg.saturating_gan)
        d_loss.backward()
        state.opt_d.step()
        record["loss_d"] = d_loss.item()
        record["d_acc"] = _d_accuracy(c_real, c_fake)
        if cfg.gamma_c > 0:
            # batch statistics as usual, but D's running averages belong to the D step
            saved = {k: disc[k].data.copy() for k in disc if disc.is_buffer(k)}
            c_gen = discriminator_forward(out.fine, batch.x, disc, net)
            for k, v in saved.items():
                disc[k].data[...] = v
            _, g_adv = adversarial_losses(c_real.detach(), c_gen, cfg.saturating_gan)
            total = T.add(total, T.scale(g_adv, cfg.gamma_c))
            record["loss_adv"] = g_adv.item()
        if cfg.gamma_p > 0:
            if phi is None:
                phi = init_phi(net)
            l_p = perceptual_loss(out.fine, batch.y, phi)
            total = T.add(total, T.scale(l_p, cfg.gamma_p))
            record["loss_perc"] = l_p.item()
    if not cfg.freeze_generator:
        total.backward()
        state.opt_g.step()
    state.step += 1
    record.update(loss_total=total.item(), loss_coarse=terms.coarse.item(), loss_fine=terms.fine.item(),
                  loss_prior=None if terms.prior is None else terms.prior.item())
    if not np.isfinite(record["loss_total"]):
        raise NumericalError(f"loss became non-finite at step {state.step}")
    return record


def run_training(corpus: Corpus, net: NetConfig, cfg: TrainConfig, state: TrainState | None = None,
                 steps: int | None = None, out_dir: str | Path | None = None,
                 on_step: Callable[[dict], None] | None = None) -> TrainState:
    """Train until ``state.step`` reaches ``cfg.max_steps`` (or ``steps`` more steps)."""
    if not corpus.train:
        raise ConfigError("corpus has no training samples")
    if state is None:
        state = init_state(net, cfg, corpus.hash)
    elif state.corpus_hash != corpus.hash:
        raise ConfigError("resume state was trained on a different corpus")
    phi = init_phi(state.net) if cfg.mode == "fsrgan" and cfg.gamma_p > 0 else None
    target = state.step + steps if steps is not None else cfg.max_steps
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "a" if state.step else "w")
    try:
        while state.step < target:
            record = train_step(state, corpus.train, phi)
            state.history.append(record)
            if log_file is not None:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
            if on_step is not None:
                on_step(record)
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_state(out / f"state_{state.step:06d}.fsrt", state)
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        save_state(out / "state.fsrt", state)
        export_generator(out / "model.fsrt", state)
    return state


def train_fsrnet(corpus: Corpus, net: NetConfig, cfg: TrainConfig, **kwargs) -> TrainState:
    if cfg.mode == "fsrgan":
        raise ConfigError("use train_fsrgan for the adversarial mode")
    return run_training(corpus, net, cfg, **kwargs)


def train_fsrgan(corpus: Corpus, net: NetConfig, cfg: TrainConfig, **kwargs) -> TrainState:
    if cfg.mode != "fsrgan":
        raise ConfigError(f"train_fsrgan needs mode='fsrgan', got {cfg.mode!r}")
    return run_training(corpus, net, cfg, **kwargs)
