"""Controlled comparisons: several model variants trained on one corpus with shared seeds."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .evaluate import Generator, evaluate, write_report
from .nets import ConfigError, NetConfig
from .synth import Corpus
from .train import TrainConfig, export_generator, run_training


@dataclass(frozen=True)
class Variant:
    label: str
    mode: str
    net_overrides: tuple[tuple[str, object], ...] = ()

    def configs(self, net: NetConfig, train: TrainConfig, seed: int) -> tuple[NetConfig, TrainConfig]:
        return replace(net, **dict(self.net_overrides)), replace(train, mode=self.mode, seed=seed)


def _priors(kind: str) -> tuple[tuple[str, object], ...]:
    return (("priors", kind),)


SWEEPS: dict[str, tuple[Variant, ...]] = {
    "supervision": (
        Variant("baseline_v1", "baseline_v1"),
        Variant("baseline_v2", "baseline_v2"),
        Variant("fsrnet", "fsrnet"),
    ),
    "priors": (
        Variant("baseline_v1", "baseline_v1"),
        *(Variant(f"{mode}/{kind}", mode, _priors(kind))
          for mode in ("baseline_v2", "fsrnet") for kind in ("landmarks", "parsing", "both")),
    ),
    "hourglass": tuple(Variant(f"h={h}", "fsrnet", (("num_hourglass", h),)) for h in (1, 2, 4)),
    "gt-prior": (
        Variant("gt_prior", "gt_prior"),
        Variant("gt_prior_baseline", "gt_prior_baseline"),
    ),
}


# modules whose code determines sweep numbers; a change to any of them makes archived results stale
RESULT_MODULES = ("tensor", "nets", "synth", "train", "evaluate", "metrics", "ablation")


def source_fingerprint() -> str:
    h = hashlib.sha256()
    for name in RESULT_MODULES:
        h.update((Path(__file__).parent / f"{name}.py").read_bytes())
    return h.hexdigest()


def run_sweep(name: str, corpus: Corpus, net: NetConfig, train: TrainConfig, seeds: int | list[int] = 3,
              out_dir: str | Path | None = None, threads: int = 1,
              progress: Callable[[str], None] | None = None) -> dict:
    """Train and evaluate every variant of sweep ``name`` once per seed.

    Returns a JSON-ready dict with per-seed test PSNR/SSIM and their medians.
    """
    if name not in SWEEPS:
        raise ConfigError(f"unknown sweep {name!r}; expected one of {sorted(SWEEPS)}")
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    out = Path(out_dir) if out_dir is not None else None
    results = []
    for variant in SWEEPS[name]:
        row = {"label": variant.label, "mode": variant.mode, "seeds": seed_list, "psnr": [], "ssim": []}
        for seed in seed_list:
            v_net, v_train = variant.configs(net, train, seed)
            start = time.perf_counter()
            state = run_training(corpus, v_net, v_train)
            report = evaluate(corpus, Generator(state.generator, state.net, v_train.mode), threads=threads)
            row["psnr"].append(report["aggregate"]["psnr"])
            row["ssim"].append(report["aggregate"]["ssim"])
            if out is not None:
                run_dir = out / variant.label.replace("/", "_").replace("=", "") / f"seed{seed}"
                run_dir.mkdir(parents=True, exist_ok=True)
                export_generator(run_dir / "model.fsrt", state)
                write_report(run_dir / "report.json", report)
            if progress is not None:
                progress(f"{variant.label} seed={seed} psnr={row['psnr'][-1]:.3f} dB "
                         f"ssim={row['ssim'][-1]:.4f} ({time.perf_counter() - start:.0f}s)")
        row["psnr_median"] = float(np.median(row["psnr"]))
        row["ssim_median"] = float(np.median(row["ssim"]))
        results.append(row)
    summary = {"sweep": name, "corpus_hash": corpus.hash, "source_sha256": source_fingerprint(),
               "net": net.to_dict(), "train": asdict(train), "rows": results}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        (out / "table.md").write_text(format_table(summary) + "\n")
    return summary


def format_table(summary: dict) -> str:
    seeds = summary["rows"][0]["seeds"]
    head = ["variant"] + [f"PSNR s{s}" for s in seeds] + ["median PSNR", "median SSIM"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in summary["rows"]:
        cells = [r["label"]] + [f"{p:.3f}" for p in r["psnr"]] + [f"{r['psnr_median']:.3f}",
                                                                   f"{r['ssim_median']:.4f}"]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)
