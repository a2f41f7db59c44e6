"""Running trained generators over a corpus split and scoring them."""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .checkpoint import file_hash, load_arrays
from .imageio import write_ppm
from .metrics import (NRMSE_SCALE, PARSING_MSE_SCALE, SSIM_WINDOW, interocular, landmarks_from_heatmaps,
                      nrmse, parsing_metrics, psnr, ssim, tta_fuse)
from .nets import ConfigError, ModelParams, NetConfig, fsrnet_forward, init_generator
from .synth import Corpus, Sample, quantize, to_grid
from .tensor import Tensor, no_grad
from .train import prior_targets

BASELINES = ("bicubic", "oracle")


@dataclass
class Prediction:
    fine: np.ndarray
    coarse: np.ndarray | None = None
    heatmaps: np.ndarray | None = None
    parsing: np.ndarray | None = None


class Generator:
    """An inference-mode generator: BN uses running statistics, no tape is recorded."""

    def __init__(self, params: ModelParams, net: NetConfig, mode: str = "fsrnet", name: str = ""):
        self.params, self.net, self.mode, self.name = params, net, mode, name

    @classmethod
    def load(cls, path: str | Path) -> "Generator":
        fingerprint, arrays, meta = load_arrays(path)
        if meta.get("kind") == "train_state":
            arrays = {k[2:]: v for k, v in arrays.items() if k.startswith("G/")}
        elif meta.get("kind") != "generator":
            raise ConfigError(f"{path}: checkpoint metadata does not describe a generator")
        net = NetConfig.from_dict(meta["net"])
        params = init_generator(net, seed=0)
        if fingerprint != params.fingerprint:
            raise ConfigError(f"{path}: fingerprint does not match the configuration stored with it")
        params.load_state(arrays)
        return cls(params, net, meta["train"]["mode"], name=file_hash(path))

    @property
    def needs_priors(self) -> bool:
        return self.net.variant == "gt_prior"

    def predict(self, samples: Sequence[Sample]) -> list[Prediction]:
        x = np.stack([s.lr_bicubic for s in samples])
        return self.predict_arrays(x, prior_targets(samples, self.net) if self.needs_priors else None)

    def predict_arrays(self, x: np.ndarray, priors: np.ndarray | None = None) -> list[Prediction]:
        if self.needs_priors and priors is None:
            raise ConfigError("a ground-truth-prior model needs prior maps")
        with no_grad():
            dt = self.params.dtype
            out = fsrnet_forward(Tensor(x.astype(dt)), self.params, self.net,
                                 mode="gt_prior" if self.needs_priors else "full",
                                 priors=None if priors is None else Tensor(priors.astype(dt)), training=False)
        preds = []
        for i in range(x.shape[0]):
            p = Prediction(out.fine.data[i], out.coarse.data[i])
            if out.prior is not None:
                if out.prior.landmark_heatmaps is not None:
                    p.heatmaps = out.prior.landmark_heatmaps.data[i]
                if out.prior.parsing_maps is not None:
                    p.parsing = out.prior.parsing_maps.data[i]
            preds.append(p)
        return preds

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Fine output for a batch of bicubic inputs."""
        if self.needs_priors:
            raise ConfigError("a ground-truth-prior model cannot run on images alone")
        with no_grad():
            out = fsrnet_forward(Tensor(x.astype(self.params.dtype)), self.params, self.net, training=False)
        return out.fine.data


def _finite(v):
    return None if v is None else ("inf" if math.isinf(v) else v)


def score_sample(sample: Sample, pred: Prediction) -> dict:
    row = {"id": sample.id, "psnr": psnr(pred.fine, sample.hr), "ssim": ssim(pred.fine, sample.hr),
           "nrmse": None, "landmarks_flagged": 0,
           "parsing_psnr": None, "parsing_ssim": None, "parsing_mse": None}
    if pred.coarse is not None:
        row["coarse_psnr"] = psnr(pred.coarse, sample.hr)
    if pred.heatmaps is not None:
        k = pred.heatmaps.shape[0]
        coords, flagged = landmarks_from_heatmaps(pred.heatmaps)
        # references live on the heatmap grid, rounded to the pixel the heatmap peaks on
        ref = np.floor(to_grid(sample.landmarks[:k], sample.hr.shape[-1] / pred.heatmaps.shape[-1]) + 0.5)
        keep = ~flagged
        if keep.any():
            row["nrmse"] = nrmse(coords[keep], ref[keep], interocular(ref))
        row["landmarks_flagged"] = int(flagged.sum())
    if pred.parsing is not None:
        m = parsing_metrics(pred.parsing, sample.parsing[:pred.parsing.shape[0]])
        row.update(parsing_psnr=m["psnr"], parsing_ssim=m["ssim"], parsing_mse=m["mse"])
    return row


def baseline_prediction(sample: Sample, kind: str) -> Prediction:
    if kind == "bicubic":
        return Prediction(sample.lr_bicubic)
    if kind == "oracle":
        return Prediction(sample.hr, sample.hr, sample.heatmaps, sample.parsing)
    raise ConfigError(f"unknown baseline {kind!r}; expected one of {BASELINES}")


def aggregate(rows: list[dict]) -> dict:
    """Means over finite values; infinite and missing entries are counted, not averaged."""
    keys = [k for k in rows[0] if k not in ("id", "landmarks_flagged")] if rows else []
    agg = {"count": len(rows)}
    for k in keys:
        vals = [r[k] for r in rows if r.get(k) is not None]
        finite = [v for v in vals if math.isfinite(v)]
        agg[k] = float(np.mean(finite)) if finite else None
        agg[f"{k}_median"] = float(np.median(finite)) if finite else None
        agg[f"{k}_excluded_inf"] = len(vals) - len(finite)
        agg[f"{k}_missing"] = len(rows) - len(vals)
    agg["landmarks_flagged"] = sum(r["landmarks_flagged"] for r in rows)
    return agg


def _grid_image(sample: Sample, pred: Prediction) -> np.ndarray:
    panels = [sample.lr_bicubic, pred.coarse if pred.coarse is not None else sample.lr_bicubic,
              pred.fine, sample.hr]
    return np.concatenate([quantize(p) for p in panels], axis=-1)


def evaluate(corpus: Corpus, model: Generator | str, split: str = "test", tta: bool = False,
             batch_size: int = 16, grid_dir: str | Path | None = None, threads: int = 1) -> dict:
    """Score ``model`` (a Generator or a baseline name) on ``split`` and build the report dict."""
    samples = sorted(corpus.split(split), key=lambda s: s.id)
    if not samples:
        raise ConfigError(f"split {split!r} is empty")
    if isinstance(model, str):
        preds = [baseline_prediction(s, model) for s in samples]
        model_desc = {"baseline": model}
    else:
        if tta and model.needs_priors:
            raise ConfigError("test-time augmentation needs a model that estimates its own priors")
        preds = []
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            part = model.predict(chunk)
            if tta:
                fused = tta_fuse(model, np.stack([s.lr_bicubic for s in chunk]))
                for p, f in zip(part, fused):
                    p.fine = f
            preds.extend(part)
        model_desc = {"checkpoint_sha256": model.name, "mode": model.mode, "net": model.net.to_dict()}
    # scoring is independent per image; rows come back in id order either way
    with ThreadPoolExecutor(max(1, threads)) as pool:
        rows = list(pool.map(score_sample, samples, preds))
    if grid_dir is not None:
        out = Path(grid_dir)
        out.mkdir(parents=True, exist_ok=True)
        for s, p in zip(samples, preds):
            write_ppm(out / f"{s.id}_grid.ppm", _grid_image(s, p))
    report = {
        "meta": {
            "split": split, "corpus_hash": corpus.hash, "model": model_desc, "tta": tta,
            "version": __version__, "hr_size": samples[0].hr.shape[-1],
            "notes": {
                "psnr": "dB on RGB clamped to [0,1]; identical images score inf and are excluded from means",
                "ssim": f"BT.601 luma, {SSIM_WINDOW}x{SSIM_WINDOW} box window",
                "nrmse": f"x{NRMSE_SCALE:g}, normalized by inter-ocular distance on the heatmap grid; "
                         "landmarks from the model's own prior estimates",
                "parsing_mse": f"x{PARSING_MSE_SCALE:g}",
            },
        },
        "rows": [{k: _finite(v) if isinstance(v, float) else v for k, v in r.items()} for r in rows],
        "aggregate": {k: _finite(v) if isinstance(v, float) else v for k, v in aggregate(rows).items()},
    }
    report["meta"]["rows_sha256"] = hashlib.sha256(json.dumps(report["rows"], sort_keys=True).encode()).hexdigest()
    return report


def write_report(path: str | Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
