"""Finite-difference verification of every differentiable op and of the end-to-end losses.

Analytic gradients are computed in the working precision (float32, or float64
with ``f64=True``). The finite-difference reference is always a float64 central
difference of the same function (step 1e-3 for a float32 op check, 1e-5 for
float64, 1e-6 for the end-to-end losses), so a float32 check measures the error of
the float32 backward pass rather than float32 forward rounding noise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .nets import NetConfig, discriminator_forward, fsrnet_forward, init_discriminator, init_generator, init_phi
from .tensor import Tensor
from .train import adversarial_losses, fsrnet_loss, perceptual_loss

TOL_F32 = 1e-3
TOL_F64 = 1e-6
FD_STEP_F32 = 1e-3
FD_STEP_F64 = 1e-5
# whole-model checks: a 1e-3 nudge to one weight moves ReLU pre-activations across
# zero downstream, so the difference quotient stops approximating the derivative
FD_STEP_MODEL = 1e-6
DEFAULT_SEEDS = (0, 1, 2, 3, 4)


@dataclass
class CheckResult:
    name: str
    seed: int
    dtype: str
    max_rel_err: float
    tolerance: float
    probes: int

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_err) and self.max_rel_err <= self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| / max(max|a|, max|n|); zero when both are identically zero."""
    analytic, numeric = np.asarray(analytic, np.float64), np.asarray(numeric, np.float64)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


# A case builds float64 input arrays and a function of Tensors returning any-shape output.
Case = Callable[[np.random.Generator], tuple[list[np.ndarray], Callable[..., Tensor]]]


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _bn_train(x, g, b):
    c = x.shape[1]
    return T.batch_norm(x, g, b, Tensor(np.zeros(c, x.dtype)), Tensor(np.ones(c, x.dtype)), training=True)


def _bn_eval(x, g, b):
    c = x.shape[1]
    mean = Tensor(np.linspace(-0.2, 0.2, c).astype(x.dtype))
    var = Tensor(np.linspace(0.5, 1.5, c).astype(x.dtype))
    return T.batch_norm(x, g, b, mean, var, training=False)


def op_cases() -> dict[str, Case]:
    n = lambda rng, *s: rng.standard_normal(s)
    return {
        "conv2d_3x3": lambda r: ([n(r, 2, 3, 5, 5), n(r, 4, 3, 3, 3), n(r, 4)],
                                 lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1)),
        "conv2d_stride2": lambda r: ([n(r, 2, 2, 6, 6), n(r, 3, 2, 4, 4), n(r, 3)],
                                     lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1)),
        "conv2d_1x1": lambda r: ([n(r, 2, 3, 4, 4), n(r, 2, 3, 1, 1), n(r, 2)],
                                 lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=0)),
        "deconv2d": lambda r: ([n(r, 2, 3, 3, 3), n(r, 3, 2, 4, 4), n(r, 2)],
                               lambda x, w, b: T.deconv2d(x, w, b, stride=2, padding=1)),
        "batch_norm_train": lambda r: ([n(r, 3, 2, 3, 3), 1 + 0.3 * n(r, 2), n(r, 2)], _bn_train),
        "batch_norm_eval": lambda r: ([n(r, 3, 2, 3, 3), 1 + 0.3 * n(r, 2), n(r, 2)], _bn_eval),
        "relu": lambda r: ([_away_from_zero(r, (2, 2, 3, 3))], T.relu),
        "leaky_relu": lambda r: ([_away_from_zero(r, (2, 2, 3, 3))], lambda x: T.leaky_relu(x, 0.2)),
        "sigmoid": lambda r: ([3 * n(r, 2, 2, 3, 3)], T.sigmoid),
        "log": lambda r: ([r.uniform(0.2, 2.0, size=(2, 2, 3, 3))], T.log),
        "add": lambda r: ([n(r, 2, 2, 3, 3), n(r, 2, 2, 3, 3)], T.add),
        "sub": lambda r: ([n(r, 2, 2, 3, 3), n(r, 2, 2, 3, 3)], T.sub),
        "mul": lambda r: ([n(r, 2, 2, 3, 3), n(r, 2, 2, 3, 3)], T.mul),
        "scale": lambda r: ([n(r, 2, 2, 3, 3)], lambda x: T.scale(x, -1.7)),
        "concat_channels": lambda r: ([n(r, 2, 1, 3, 3), n(r, 2, 3, 3, 3)], T.concat_channels),
        "downsample_nearest": lambda r: ([n(r, 2, 2, 4, 4)], T.downsample_nearest),
        "upsample_nearest": lambda r: ([n(r, 2, 2, 3, 3)], T.upsample_nearest),
        "sum": lambda r: ([n(r, 2, 2, 3, 3)], T.tsum),
        "mean": lambda r: ([n(r, 2, 2, 3, 3)], T.mean),
        "mse_loss": lambda r: ([n(r, 2, 2, 3, 3), n(r, 2, 2, 3, 3)], T.mse_loss),
    }


def _projected(fn, tensors, weights):
    return T.tsum(T.mul(fn(*tensors), Tensor(weights.astype(tensors[0].dtype))))


def _fd_value(fn, arrays, weights) -> float:
    with T.no_grad():
        out = fn(*[Tensor(a) for a in arrays])
    return float(np.sum(out.data.astype(np.float64) * weights))


def check_case(name: str, case: Case, seed: int, f64: bool = False, max_probes: int = 40) -> CheckResult:
    rng = np.random.default_rng(seed)
    arrays, fn = case(rng)
    arrays = [np.asarray(a, np.float64) for a in arrays]
    dtype = np.float64 if f64 else np.float32
    step = FD_STEP_F64 if f64 else FD_STEP_F32
    with T.no_grad():
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
    weights = rng.standard_normal(out_shape)
    # the float64 copies of float32 inputs are what the reference differentiates
    arrays = [a.astype(dtype).astype(np.float64) for a in arrays]
    tensors = [Tensor(a.astype(dtype), requires_grad=True) for a in arrays]
    _projected(fn, tensors, weights).backward()
    analytic, numeric = [], []
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        picks = rng.choice(flat.size, size=min(max_probes, flat.size), replace=False)
        for j in picks:
            old = flat[j]
            flat[j] = old + step
            up = _fd_value(fn, arrays, weights)
            flat[j] = old - step
            down = _fd_value(fn, arrays, weights)
            flat[j] = old
            numeric.append((up - down) / (2 * step))
            analytic.append(tensors[i].grad.reshape(-1)[j])
    return CheckResult(name, seed, np.dtype(dtype).name, relative_error(analytic, numeric),
                       TOL_F64 if f64 else TOL_F32, len(analytic))


# ------------------------------------------------------------------- end to end


def toy_net_config() -> NetConfig:
    return NetConfig(hr_size=16, scale_factor=4, base_channels=4, num_coarse_res_blocks=1,
                     num_encoder_res_blocks=1, num_decoder_res_blocks=1, num_hourglass=2,
                     hourglass_depth=2, disc_channels=(4, 4, 4, 4), phi_channels=(4, 4, 4, 4, 4))


def _generator_loss_fn(cfg: NetConfig, x, y, p_gt, lam=1.0):
    def loss(params):
        c = lambda a: Tensor(a.astype(params.dtype))
        out = fsrnet_forward(c(x), params, cfg, training=True)
        return fsrnet_loss(out.coarse, out.fine, out.prior, c(y), c(p_gt), lam).total
    return loss


def _gan_loss_fn(cfg: NetConfig, x, y, p_gt, disc, phi):
    def loss(params):
        c = lambda a: Tensor(a.astype(params.dtype))
        xt, yt = c(x), c(y)
        out = fsrnet_forward(xt, params, cfg, training=True)
        base = fsrnet_loss(out.coarse, out.fine, out.prior, yt, c(p_gt), 1.0).total
        d = disc.astype(params.dtype)
        c_real = discriminator_forward(yt, xt, d, cfg)
        c_fake = discriminator_forward(out.fine, xt, d, cfg)
        _, g_adv = adversarial_losses(c_real, c_fake)
        perc = perceptual_loss(out.fine, yt, phi.astype(params.dtype))
        return T.add(T.add(base, T.scale(g_adv, 1e-3)), T.scale(perc, 1e-1))
    return loss


def check_model_loss(name: str, seed: int, f64: bool = False, probes: int = 120,
                     gan: bool = False) -> CheckResult:
    """Gradient of a full training objective w.r.t. a random sample of generator parameters."""
    cfg = toy_net_config()
    rng = np.random.default_rng(seed)
    dtype = np.float64 if f64 else np.float32
    step = FD_STEP_MODEL
    # one sample, as in training on a single image; the discriminator's 1x1 BN stages need two
    batch = 2 if gan else 1
    x = rng.uniform(0, 1, size=(batch, 3, cfg.hr_size, cfg.hr_size)).astype(dtype)
    y = rng.uniform(0, 1, size=x.shape).astype(dtype)
    p_gt = rng.uniform(0, 1, size=(batch, cfg.prior_map_channels, cfg.prior_spatial, cfg.prior_spatial)).astype(dtype)
    if gan:
        loss_of = _gan_loss_fn(cfg, x, y, p_gt, init_discriminator(cfg, seed + 1), init_phi(cfg))
    else:
        loss_of = _generator_loss_fn(cfg, x, y, p_gt)
    work = init_generator(cfg, seed=seed).astype(dtype)
    work.zero_grad()
    loss_of(work).backward()
    ref = work.astype(np.float64)
    names = [k for k, _ in ref.trainable()]
    sizes = np.array([ref[k].data.size for k in names])
    bounds = np.cumsum(sizes)
    flat_index = rng.choice(bounds[-1], size=min(probes, bounds[-1]), replace=False)
    analytic, numeric = [], []
    for gi in flat_index:
        pi = int(np.searchsorted(bounds, gi, side="right"))
        j = int(gi - (bounds[pi - 1] if pi else 0))
        flat = ref[names[pi]].data.reshape(-1)
        old = flat[j]
        with T.no_grad():
            flat[j] = old + step
            up = loss_of(ref).data.astype(np.float64).item()
            flat[j] = old - step
            down = loss_of(ref).data.astype(np.float64).item()
        flat[j] = old
        numeric.append((up - down) / (2 * step))
        analytic.append(work[names[pi]].grad.reshape(-1)[j])
    return CheckResult(name, seed, np.dtype(dtype).name, relative_error(analytic, numeric),
                       TOL_F64 if f64 else TOL_F32, len(analytic))


def run_suite(seeds: Sequence[int] = DEFAULT_SEEDS, f64: bool = False,
              include_model: bool = True) -> list[CheckResult]:
    results = []
    for name, case in op_cases().items():
        for s in seeds:
            results.append(check_case(name, case, s, f64))
    if include_model:
        for s in seeds:
            results.append(check_model_loss("fsrnet_loss_end_to_end", s, f64))
            results.append(check_model_loss("fsrgan_loss_end_to_end", s, f64, gan=True))
    return results


def format_table(results: Sequence[CheckResult], elapsed: float | None = None) -> str:
    lines = [f"{'check':<28} {'seed':>4} {'dtype':>8} {'max rel err':>12} {'tol':>8}  result"]
    for r in results:
        lines.append(f"{r.name:<28} {r.seed:>4} {r.dtype:>8} {r.max_rel_err:>12.3e} "
                     f"{r.tolerance:>8.0e}  {'PASS' if r.passed else 'FAIL'}")
    failed = sum(not r.passed for r in results)
    tail = f"{len(results) - failed}/{len(results)} passed"
    if elapsed is not None:
        tail += f" in {elapsed:.1f}s"
    return "\n".join(lines + [tail])


def main(seeds=DEFAULT_SEEDS, f64=False) -> tuple[bool, str]:
    start = time.perf_counter()
    results = run_suite(seeds, f64)
    return all(r.passed for r in results), format_table(results, time.perf_counter() - start)
