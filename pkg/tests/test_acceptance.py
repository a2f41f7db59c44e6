"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5-7 read the sweep archives written by ``scripts/run_experiments.py``.
An archive only counts if its corpus hash matches a fresh rebuild of the
experiment corpus and its source fingerprint matches the current code.

    pytest tests/test_acceptance.py -v
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from fsrnet import gradcheck as gc
from fsrnet import tensor as T
from fsrnet.ablation import source_fingerprint
from fsrnet.cli import DESK_NET, main as cli
from fsrnet.evaluate import Generator, evaluate
from fsrnet.metrics import landmarks_from_heatmaps, nrmse, psnr, ssim, tta_fuse
from fsrnet.nets import (NetConfig, PriorOutput, discriminator_forward, fsrnet_forward, init_discriminator,
                         init_generator, init_phi)
from fsrnet.synth import (CorpusConfig, build_corpus, canonical_scene, in_memory_corpus, load_corpus,
                          render_heatmaps, render_image, to_grid)
from fsrnet.tensor import Tensor
from fsrnet.train import TrainConfig, adversarial_losses, fsrnet_loss, make_batch, perceptual_loss, run_training

RESULTS = Path(__file__).resolve().parent.parent / "results"
EXPERIMENT_CORPUS = dict(n_train=512, n_test=64, seed=7, cfg=CorpusConfig(hr_size=32, scale_factor=8))
RERUN = "regenerate with: python scripts/run_experiments.py"


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def experiment_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("exp") / "corpus"
    c = EXPERIMENT_CORPUS
    build_corpus(root, c["n_train"], c["n_test"], c["seed"], c["cfg"])
    return load_corpus(root)


def archived_sweep(name: str, corpus) -> tuple[dict | None, str]:
    path = RESULTS / name / "sweep.json"
    if not path.exists():
        return None, f"{path} missing; {RERUN}"
    summary = json.loads(path.read_text())
    if summary["corpus_hash"] != corpus.hash:
        return None, f"{path} was produced on a different corpus; {RERUN}"
    if summary["source_sha256"] != source_fingerprint():
        return None, f"{path} predates the current code; {RERUN}"
    return summary, ""


def medians(summary: dict) -> dict[str, float]:
    return {r["label"]: r["psnr_median"] for r in summary["rows"]}


# ------------------------------------------------------------------ 1


def test_criterion_1_gradient_correctness(verdict):
    seeds = tuple(range(5))
    parts, ok = [], True
    for f64 in (False, True):
        start = time.perf_counter()
        results = gc.run_suite(seeds, f64=f64)
        elapsed = time.perf_counter() - start
        passed = all(r.passed for r in results)
        worst = max(r.max_rel_err for r in results)
        ok &= passed and elapsed < 120
        parts.append(f"{'f64' if f64 else 'f32'} {sum(r.passed for r in results)}/{len(results)} "
                     f"worst {worst:.1e} in {elapsed:.0f}s")
    verdict(1, ok, "; ".join(parts) + f" ({len(seeds)} seeds, limit 120s each)")


# ------------------------------------------------------------------ 2


def test_criterion_2_loss_identities(verdict):
    corpus = in_memory_corpus(2, 1, 3, CorpusConfig(hr_size=32, scale_factor=8))
    net = NetConfig(hr_size=32, scale_factor=8, **DESK_NET)
    batch = make_batch(corpus.train, net)
    heat = Tensor(batch.priors.data[:, :net.landmark_channels])
    parse = Tensor(batch.priors.data[:, net.landmark_channels:])
    prior = PriorOutput(heat, parse, None, [(heat, parse)] * net.num_hourglass)
    total = fsrnet_loss(batch.y, batch.y, prior, batch.y, batch.priors, lam=1.0).total.item()
    half = Tensor(np.full((2, 1, 2, 2), 0.5, np.float32))
    d_loss = adversarial_losses(half, half)[0].item()
    lp = perceptual_loss(batch.y, batch.y, init_phi(net)).item()
    ok = abs(total) <= 1e-6 and abs(d_loss - 2 * math.log(2)) <= 1e-6 and abs(lp) <= 1e-6
    verdict(2, ok, f"loss(gt)={total:.1e}, d_loss(0.5)-2log2={d_loss - 2 * math.log(2):.1e}, "
                   f"L_P(y,y)={lp:.1e}")


# ------------------------------------------------------------------ 3


def test_criterion_3_shape_contracts(verdict):
    small = dict(base_channels=4, num_coarse_res_blocks=1, num_encoder_res_blocks=1, num_decoder_res_blocks=1,
                 hourglass_depth=2)
    problems = []
    for hr in (32, 64):
        for scale in (4, 8):
            for h in (1, 2):
                cfg = NetConfig(hr_size=hr, scale_factor=scale, num_hourglass=h, **small)
                x = Tensor(np.random.default_rng(0).uniform(size=(2, 3, hr, hr)).astype(np.float32))
                with T.no_grad():
                    out = fsrnet_forward(x, init_generator(cfg, 0), cfg)
                # the decoder sees encoder features (base channels) alongside the prior branch output
                prior_width = cfg.decoder_in_channels - cfg.base_channels
                expect = {"coarse": (2, 3, hr, hr), "fine": (2, 3, hr, hr),
                          "prior": (2, cfg.base_channels + 5 + 5, hr // 2, hr // 2),
                          "decoder input": (2, prior_width, hr // 2, hr // 2)}
                got = {"coarse": out.coarse.shape, "fine": out.fine.shape,
                       "prior": out.prior.decoder_input().shape,
                       "decoder input": out.prior.decoder_input().shape}
                problems += [f"hr{hr}/x{scale}/h{h} {k} {got[k]}" for k in expect if got[k] != expect[k]]
    cells = {}
    for hr in (64, 128):
        cfg = NetConfig(hr_size=hr, scale_factor=8, disc_channels=(4, 4, 4, 4), **small)
        img = Tensor(np.zeros((1, 3, hr, hr), np.float32))
        with T.no_grad():
            cells[hr] = discriminator_forward(img, img, init_discriminator(cfg, 0), cfg).shape[-2:]
    widths = {v: NetConfig(hr_size=32, variant=v, **small).decoder_in_channels
              for v in ("gt_prior", "gt_prior_baseline")}
    ok = not problems and cells == {64: (4, 4), 128: (8, 8)} and len(set(widths.values())) == 1
    verdict(3, ok, f"shape chain {'ok' if not problems else problems}; D cells {cells}; "
                   f"decoder widths {widths}")


# ------------------------------------------------------------------ 4


def test_criterion_4_overfit_smoke(verdict):
    corpus = in_memory_corpus(4, 1, 0, CorpusConfig(hr_size=32, scale_factor=4))
    net = NetConfig(hr_size=32, scale_factor=4, **DESK_NET)
    start = time.perf_counter()
    state = run_training(corpus, net, TrainConfig(batch_size=4, max_steps=500, augment=False))
    elapsed = time.perf_counter() - start
    fine = [r["loss_fine"] for r in state.history]
    drop = 1 - fine[-1] / fine[0]
    verdict(4, drop >= 0.9 and elapsed < 600,
            f"fine loss {fine[0]:.4f} -> {fine[-1]:.4f} ({drop:.1%} drop) in {elapsed:.0f}s")


# ------------------------------------------------------------------ 5-7


def test_criterion_5_prior_benefit(verdict, experiment_corpus):
    summary, why = archived_sweep("gt-prior", experiment_corpus)
    if summary is None:
        verdict(5, False, why)
    m = medians(summary)
    gap = m["gt_prior"] - m["gt_prior_baseline"]
    verdict(5, gap >= 0.2, f"median PSNR gt_prior {m['gt_prior']:.3f} vs baseline "
                           f"{m['gt_prior_baseline']:.3f} dB (gap {gap:+.3f}, need >= +0.2)")


def test_criterion_6_supervision_ordering(verdict, experiment_corpus):
    summary, why = archived_sweep("supervision", experiment_corpus)
    if summary is None:
        verdict(6, False, why)
    m = medians(summary)
    v1, v2, full = m["baseline_v1"], m["baseline_v2"], m["fsrnet"]
    ok = v1 <= v2 + 0.05 and v2 <= full + 0.05
    verdict(6, ok, f"median PSNR v1 {v1:.3f} <= v2 {v2:.3f} <= fsrnet {full:.3f} dB (0.05 dB tie band)")


def test_criterion_7_hourglass_table(verdict, experiment_corpus):
    summary, why = archived_sweep("hourglass", experiment_corpus)
    if summary is None:
        verdict(7, False, why)
    table = (RESULTS / "hourglass" / "table.md").read_text()
    labels = [r["label"] for r in summary["rows"]]
    complete = all(len(r["psnr"]) == 3 for r in summary["rows"])
    ok = labels == ["h=1", "h=2", "h=4"] and complete and all(f"| {lab} |" in table for lab in labels)
    m = medians(summary)
    verdict(7, ok, "archived " + ", ".join(f"{k} {v:.3f} dB" for k, v in m.items()))


# ------------------------------------------------------------------ 8


def test_criterion_8_tta_fusion(verdict, experiment_corpus):
    x = np.random.default_rng(0).uniform(size=(2, 3, 32, 32)).astype(np.float32)
    identity_exact = tta_fuse(lambda a: a, x).tobytes() == x.tobytes()
    model = RESULTS / "supervision" / "fsrnet" / "seed0" / "model.fsrt"
    summary, why = archived_sweep("supervision", experiment_corpus)
    if summary is None or not model.exists():
        verdict(8, False, why or f"{model} missing; {RERUN}")
    g = Generator.load(model)
    single = evaluate(experiment_corpus, g)["aggregate"]["psnr"]
    fused = evaluate(experiment_corpus, g, tta=True)["aggregate"]["psnr"]
    verdict(8, identity_exact and fused >= single - 0.05,
            f"test PSNR fused {fused:.3f} vs single {single:.3f} dB; identity fusion exact: {identity_exact}")


# ------------------------------------------------------------------ 9


def test_criterion_9_metric_suite(verdict):
    x = np.full((3, 8, 8), 0.2)
    fixture = render_image(canonical_scene(64))
    scene = canonical_scene(64)
    ref = np.floor(to_grid(scene.landmarks(5), 2) + 0.5)
    heat, _ = render_heatmaps(ref, 32, sigma=2.0)
    back, flags = landmarks_from_heatmaps(heat)
    cases = {
        "psnr 20 dB": abs(psnr(x, x + 0.1) - 20.0) <= 1e-9,
        "ssim self": abs(ssim(fixture, fixture) - 1.0) <= 1e-12,
        "nrmse self": nrmse(ref, ref) == 0.0,
        "heatmap roundtrip": not flags.any() and np.array_equal(back, ref),
    }
    noise = np.random.default_rng(0).uniform(-1, 1, fixture.shape)
    noisy = [np.clip(fixture + a * noise, 0, 1) for a in (0.02, 0.05, 0.1, 0.2, 0.3)]
    p = [psnr(n, fixture) for n in noisy]
    s = [ssim(n, fixture) for n in noisy]
    cases["monotone psnr"] = all(a > b for a, b in zip(p, p[1:]))
    cases["monotone ssim"] = all(a > b for a, b in zip(s, s[1:]))
    failed = [k for k, v in cases.items() if not v]
    verdict(9, not failed, f"{len(cases) - len(failed)}/{len(cases)} metric cases" +
            (f", failed {failed}" if failed else ""))


# ------------------------------------------------------------------ 10


def test_criterion_10_determinism(verdict, tmp_path):
    def gen(name, threads):
        out = tmp_path / name
        assert cli(["--threads", str(threads), "gen-data", "--out", str(out), "--n-train", "24", "--n-test", "8",
                    "--hr", "32", "--scale", "8", "--seed", "5"]) == 0
        return out

    def tree(root: Path) -> dict[str, bytes]:
        return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    corpora = [gen("c1", 1), gen("c2", 1), gen("c3", 4)]
    same_data = tree(corpora[0]) == tree(corpora[1]) == tree(corpora[2])

    runs = []
    for name, threads in (("r1", 1), ("r2", 1), ("r3", 4)):
        out = tmp_path / name
        assert cli(["--threads", str(threads), "train", "--corpus", str(corpora[0]), "--out", str(out),
                    "--steps", "100"]) == 0
        assert cli(["--threads", str(threads), "eval", "--corpus", str(corpora[0]), "--checkpoint",
                    str(out / "model.fsrt"), "--out", str(out / "eval.json")]) == 0
        runs.append(out)
    files = ("model.fsrt", "state.fsrt", "train_log.jsonl", "eval.json")
    mismatched = [f for f in files if len({(r / f).read_bytes() for r in runs}) != 1]
    verdict(10, same_data and not mismatched,
            f"gen-data identical: {same_data}; train/eval artifacts differing: {mismatched or 'none'} "
            f"(2 runs at 1 thread + 1 run at 4 threads)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
