"""Command-line entry point: gen-data, train, infer, eval, ablate, gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import gradcheck as gc
from .ablation import SWEEPS, format_table, run_sweep
from .evaluate import Generator, evaluate, write_report
from .imageio import read_ppm, write_pgm, write_ppm
from .metrics import tta_fuse
from .nets import ConfigError, NetConfig
from .synth import CorpusConfig, DataError, bicubic_resize, build_corpus, corpus_hash, load_corpus, quantize
from .train import NumericalError, TrainConfig, load_state, run_training

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

# Desk-scale architecture: narrow and shallow enough that a full ablation fits in minutes on one core.
DESK_NET = dict(base_channels=16, num_coarse_res_blocks=1, num_encoder_res_blocks=1,
                num_decoder_res_blocks=1, hourglass_depth=2)
DESK_TRAIN = dict(batch_size=8, max_steps=1500)
PAPER_NET = dict(hr_size=128, scale_factor=8)
PAPER_TRAIN = dict(batch_size=14)


@dataclass(frozen=True)
class RunConfig:
    net: NetConfig = field(default_factory=lambda: NetConfig(**DESK_NET))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**DESK_TRAIN))
    corpus: str = ""
    out_dir: str = ""

    def to_flat(self) -> dict:
        flat = {f"net.{k}": v for k, v in self.net.to_dict().items()}
        flat.update({f"train.{k}": v for k, v in asdict(self.train).items()})
        flat.update(corpus=self.corpus, out_dir=self.out_dir)
        return dict(sorted(flat.items()))

    @classmethod
    def from_flat(cls, flat: dict, base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        net, train, top = base.net.to_dict(), asdict(base.train), {"corpus": base.corpus, "out_dir": base.out_dir}
        for key, value in flat.items():
            section, _, name = key.partition(".")
            target = {"net": net, "train": train}.get(section) if name else top
            if target is None or (name or key) not in target:
                raise ConfigError(f"unknown config key {key!r}")
            target[name or key] = value
        return cls(NetConfig.from_dict(net), TrainConfig(**train), **top)

    def dumps(self) -> str:
        return json.dumps(self.to_flat(), indent=1, sort_keys=True) + "\n"


def _load_run_config(args) -> RunConfig:
    base = RunConfig()
    if getattr(args, "paper_scale", False):
        base = RunConfig(NetConfig(**PAPER_NET), TrainConfig(**PAPER_TRAIN))
    if getattr(args, "config", None):
        try:
            flat = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
        base = RunConfig.from_flat(flat, base)
    overrides = {}
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "no_augment", False):
        overrides["train.augment"] = False
    for attr, key in (("corpus", "corpus"), ("out", "out_dir")):
        if getattr(args, attr, None):
            overrides[key] = getattr(args, attr)
    return RunConfig.from_flat(overrides, base)


_TRAIN_FLAGS = {
    "mode": "train.mode", "lr": "train.learning_rate", "lam": "train.lambda_prior",
    "gamma_c": "train.gamma_c", "gamma_p": "train.gamma_p", "steps": "train.max_steps",
    "batch_size": "train.batch_size", "seed": "train.seed", "checkpoint_every": "train.checkpoint_every",
    "warm_start": "train.warm_start", "base_channels": "net.base_channels",
    "hourglass": "net.num_hourglass", "hourglass_depth": "net.hourglass_depth", "priors": "net.priors",
}


def _fit_to_corpus(net: NetConfig, cfg: CorpusConfig) -> NetConfig:
    """Image size and prior channel counts always follow the corpus."""
    return replace(net, hr_size=cfg.hr_size, scale_factor=cfg.scale_factor,
                   num_landmarks=cfg.num_landmarks, num_parsing_maps=cfg.num_parsing_maps)


# ------------------------------------------------------------------ commands


def cmd_gen_data(args) -> int:
    hr, scale = (128, 8) if args.paper_scale and args.hr is None else (args.hr or 64, args.scale)
    try:
        cfg = CorpusConfig(hr_size=hr, scale_factor=scale, num_landmarks=args.landmarks, parsing=args.parsing)
    except DataError as e:
        raise ConfigError(str(e)) from e
    root = build_corpus(args.out, args.n_train, args.n_test, args.seed, cfg, overwrite=args.force,
                        threads=args.threads)
    print(f"corpus {root}: {args.n_train} train + {args.n_test} test samples, hr={hr} scale={scale}, "
          f"K={cfg.num_landmarks} P={cfg.num_parsing_maps}")
    print(f"corpus hash {corpus_hash(root)}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = _load_run_config(args)
    if not run.corpus:
        raise ConfigError("train needs --corpus")
    if not run.out_dir:
        raise ConfigError("train needs --out")
    corpus = load_corpus(run.corpus, threads=args.threads)
    net = _fit_to_corpus(run.net, corpus.config)
    state = None
    if args.resume:
        # the checkpoint's own configuration wins over flags
        state = load_state(args.resume, corpus.hash)
        run = replace(run, train=state.train, net=state.net)
        net = state.net
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(replace(run, net=net).dumps())
    every = max(1, run.train.max_steps // 20)

    def report(rec):
        if rec["step"] % every == 0 or rec["step"] == 1:
            print(" ".join(f"{k}={v:.5g}" if isinstance(v, float) else f"{k}={v}"
                           for k, v in sorted(rec.items())), flush=True)

    state = run_training(corpus, net, run.train, state=state, out_dir=out, on_step=report)
    print(f"wrote {out / 'model.fsrt'} after {state.step} steps")
    return EXIT_OK


def cmd_infer(args) -> int:
    model = Generator.load(args.checkpoint)
    if model.needs_priors:
        raise ConfigError("inference needs a model that estimates its own priors")
    img = read_ppm(args.input) / 255.0
    hr = model.net.hr_size
    if img.shape[-1] != hr or img.shape[-2] != hr:
        if img.shape[-1] != img.shape[-2] or img.shape[-1] * model.net.scale_factor != hr:
            raise DataError(f"input is {img.shape[-2]}x{img.shape[-1]}; expected {model.net.lr_size} "
                            f"(pre-upscaled by {model.net.scale_factor}) or {hr}")
        img = np.clip(bicubic_resize(img, hr), 0.0, 1.0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    x = img[None].astype(np.float32)
    start = time.perf_counter()
    pred = model.predict_arrays(x)[0]
    fine = tta_fuse(model, x)[0] if args.tta else pred.fine
    elapsed = time.perf_counter() - start
    write_ppm(out / "fine.ppm", quantize(fine))
    write_ppm(out / "coarse.ppm", quantize(pred.coarse))
    for sub, maps in (("heatmaps", pred.heatmaps), ("parsing", pred.parsing)):
        if maps is not None:
            (out / sub).mkdir(exist_ok=True)
            for k, m in enumerate(maps):
                write_pgm(out / sub / f"{k:02d}.pgm", quantize(m))
    print(f"inference: {elapsed * 1000:.3f} ms/image{' (8-way fused)' if args.tta else ''}")
    return EXIT_OK


def cmd_eval(args) -> int:
    corpus = load_corpus(args.corpus, threads=args.threads)
    targets = []
    if args.baseline:
        targets.append((args.baseline, args.baseline))
    for path in ([args.checkpoint] if args.checkpoint else []) + (args.compare or []):
        targets.append((path, Generator.load(path)))
    if not targets:
        raise ConfigError("eval needs --checkpoint, --compare or --baseline")
    reports = {}
    for i, (name, model) in enumerate(targets):
        grid_dir = None
        if args.grids:
            grid_dir = Path(args.grids) / f"{i:02d}_{Path(name).stem}" if len(targets) > 1 else Path(args.grids)
        reports[name] = evaluate(corpus, model, split=args.split, tta=args.tta, grid_dir=grid_dir,
                                 threads=args.threads)
    if len(reports) == 1:
        doc = next(iter(reports.values()))
    else:
        keys = ("psnr", "ssim", "nrmse", "parsing_psnr", "parsing_ssim", "parsing_mse")
        doc = {"table": [{"run": n, **{k: r["aggregate"][k] for k in keys}} for n, r in reports.items()],
               "reports": reports}
    for name, r in reports.items():
        a = r["aggregate"]
        print(f"{name}: psnr={a['psnr']} ssim={a['ssim']} nrmse={a['nrmse']} parsing_mse={a['parsing_mse']}")
    if args.out:
        write_report(args.out, doc)
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = _load_run_config(args)
    if not run.corpus:
        raise ConfigError("ablate needs --corpus")
    corpus = load_corpus(run.corpus, threads=args.threads)
    print(f"corpus hash {corpus.hash}", flush=True)
    net = _fit_to_corpus(run.net, corpus.config)
    summary = run_sweep(args.sweep, corpus, net, run.train, args.seeds, out_dir=run.out_dir or None,
                        threads=args.threads, progress=lambda m: print(m, flush=True))
    print(format_table(summary))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok, table = gc.main(seeds=tuple(range(args.seeds)), f64=args.f64)
    print(table)
    return EXIT_OK if ok else EXIT_NUMERICAL


# -------------------------------------------------------------------- parser


def _add_model_flags(p):
    p.add_argument("--config", help="flat dotted-key JSON config; flags override it")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--mode", choices=["fsrnet", "fsrgan", "baseline_v1", "baseline_v2", "gt_prior",
                                      "gt_prior_baseline"])
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--gamma-c", type=float)
    p.add_argument("--gamma-p", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--hourglass", type=int, help="number of stacked hourglass blocks")
    p.add_argument("--hourglass-depth", type=int)
    p.add_argument("--priors", choices=["both", "landmarks", "parsing"])
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--paper-scale", action="store_true", help="128 px faces, batch 14")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsrnet", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for data and scoring")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic face corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-test", type=int, default=64)
    p.add_argument("--hr", type=int)
    p.add_argument("--scale", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--landmarks", type=int, default=5)
    p.add_argument("--parsing", choices=["global", "local"], default="global")
    p.add_argument("--force", action="store_true", help="replace an existing corpus directory")
    p.add_argument("--paper-scale", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a generator")
    _add_model_flags(p)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--warm-start", help="initialize the generator from a checkpoint")
    p.add_argument("--resume", help="continue from a training-state checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="LR or pre-upscaled PPM")
    p.add_argument("--out", required=True)
    p.add_argument("--tta", action="store_true", help="fuse outputs over the 8 dihedral transforms")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score checkpoints or baselines on a corpus split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--compare", nargs="+", metavar="CKPT")
    p.add_argument("--baseline", choices=["bicubic", "oracle"])
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--tta", action="store_true")
    p.add_argument("--grids", help="directory for {id}_grid.ppm side-by-side images")
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare variants with shared seeds")
    _add_model_flags(p)
    p.add_argument("--sweep", required=True, choices=sorted(SWEEPS))
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--f64", action="store_true", help="64-bit analytic gradients, tolerance 1e-6")
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
