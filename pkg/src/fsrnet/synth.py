"""Procedural face corpus with exact landmark and parsing ground truth.

A face is a handful of ellipses (face oval, eyes with pupils, nose, mouth) in a
face-aligned frame, rotated about the face centre. Everything downstream is
rendered from that closed-form description, so landmark coordinates and masks
are exact rather than annotated.

Coordinates are ``(row, col)`` in pixel-index units: integer ``k`` is the
centre of pixel ``k``.
"""

from __future__ import annotations

import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .imageio import read_pgm, read_ppm, write_pgm, write_ppm

log = logging.getLogger(__name__)

LANDMARK_NAMES = (
    "left_eye", "right_eye", "nose_tip", "mouth_left", "mouth_right",
    "left_eye_outer", "left_eye_inner", "right_eye_inner", "right_eye_outer",
    "mouth_top", "mouth_bottom", "chin", "forehead",
)
GLOBAL_PARSING = ("skin", "eyes", "nose", "mouth", "background")
LOCAL_PARSING = ("eyes", "nose", "mouth", "background")

# label ids used while rasterizing; later layers overwrite earlier ones
_BG, _SKIN, _NOSE, _EYE, _PUPIL, _MOUTH = range(6)


class DataError(RuntimeError):
    """Invalid, missing or colliding corpus data."""


@dataclass(frozen=True)
class FaceScene:
    size: int
    center: tuple[float, float]
    face_axes: tuple[float, float]  # (vertical, horizontal) semi-axes
    rotation: float  # degrees, counter-clockwise on screen
    eye_offset: tuple[float, float]  # (up, sideways) from face centre
    eye_axes: tuple[float, float]
    pupil_radius: float
    nose_offset: float
    nose_axes: tuple[float, float]
    mouth_offset: float
    mouth_axes: tuple[float, float]
    background: tuple[float, float, float]
    skin: tuple[float, float, float]
    eye_white: tuple[float, float, float]
    pupil: tuple[float, float, float]
    nose_color: tuple[float, float, float]
    lips: tuple[float, float, float]
    seed: int = -1

    def __post_init__(self):
        cy, cx = self.center
        ay, ax = self.face_axes
        t = np.deg2rad(self.rotation)
        # half-extents of the rotated face ellipse
        half_h = np.hypot(ay * np.cos(t), ax * np.sin(t))
        half_w = np.hypot(ay * np.sin(t), ax * np.cos(t))
        lo, hi = -0.5, self.size - 0.5
        if cy - half_h < lo or cy + half_h > hi or cx - half_w < lo or cx + half_w > hi:
            raise DataError(f"face ellipse leaves the {self.size}px frame (seed {self.seed})")

    # components in the face frame: (du, dv) offsets with u down, v right
    def _components(self):
        ey, ex = self.eye_offset
        return {
            "left_eye": (-ey, -ex),
            "right_eye": (-ey, ex),
            "nose": (self.nose_offset, 0.0),
            "mouth": (self.mouth_offset, 0.0),
        }

    def to_image(self, du, dv):
        """Face-frame offsets -> image (row, col)."""
        t = np.deg2rad(self.rotation)
        c, s = np.cos(t), np.sin(t)
        return self.center[0] + c * du - s * dv, self.center[1] + s * du + c * dv

    def to_face(self, rows, cols):
        t = np.deg2rad(self.rotation)
        c, s = np.cos(t), np.sin(t)
        r, q = rows - self.center[0], cols - self.center[1]
        return c * r + s * q, -s * r + c * q

    def landmarks(self, k: int = 5) -> np.ndarray:
        if not 1 <= k <= len(LANDMARK_NAMES):
            raise ValueError(f"num_landmarks must be in [1, {len(LANDMARK_NAMES)}], got {k}")
        comp = self._components()
        ey, ex = self.eye_offset
        eay, eax = self.eye_axes
        mu = self.mouth_offset
        may, max_ = self.mouth_axes
        pts = [
            comp["left_eye"], comp["right_eye"],
            (self.nose_offset + 0.6 * self.nose_axes[0], 0.0),
            (mu, -max_), (mu, max_),
            (-ey, -ex - eax), (-ey, -ex + eax), (-ey, ex - eax), (-ey, ex + eax),
            (mu - may, 0.0), (mu + may, 0.0),
            (self.face_axes[0], 0.0), (-self.face_axes[0], 0.0),
        ][:k]
        return np.array([self.to_image(du, dv) for du, dv in pts], dtype=np.float64)

    def label_map(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Component label at each (row, col) sample point."""
        u, v = self.to_face(rows, cols)
        label = np.full(u.shape, _BG, dtype=np.uint8)

        def inside(center, axes):
            return ((u - center[0]) / axes[0]) ** 2 + ((v - center[1]) / axes[1]) ** 2 <= 1.0

        comp = self._components()
        label[inside((0.0, 0.0), self.face_axes)] = _SKIN
        label[inside(comp["nose"], self.nose_axes)] = _NOSE
        for eye in ("left_eye", "right_eye"):
            label[inside(comp[eye], self.eye_axes)] = _EYE
            label[inside(comp[eye], (self.pupil_radius, self.pupil_radius))] = _PUPIL
        label[inside(comp["mouth"], self.mouth_axes)] = _MOUTH
        return label

    def palette(self) -> np.ndarray:
        return np.array([self.background, self.skin, self.nose_color, self.eye_white,
                         self.pupil, self.lips], dtype=np.float64)


def sample_scene(seed: int, size: int) -> FaceScene:
    """Draw a random valid face; identical (seed, size) -> identical scene."""
    rng = np.random.default_rng(seed)
    for _ in range(100):
        ay = rng.uniform(0.30, 0.38) * size
        ax = rng.uniform(0.72, 0.86) * ay
        rot = rng.uniform(-25.0, 25.0)
        cy = size / 2 - 0.5 + rng.uniform(-0.06, 0.06) * size
        cx = size / 2 - 0.5 + rng.uniform(-0.06, 0.06) * size
        skin = rng.uniform([0.45, 0.30, 0.20], [0.95, 0.80, 0.70])
        eye_ay = rng.uniform(0.07, 0.11) * ay
        try:
            return FaceScene(
                size=size,
                center=(cy, cx),
                face_axes=(ay, ax),
                rotation=rot,
                eye_offset=(rng.uniform(0.18, 0.32) * ay, rng.uniform(0.34, 0.46) * ax),
                eye_axes=(eye_ay, rng.uniform(1.6, 2.3) * eye_ay),
                pupil_radius=rng.uniform(0.55, 0.9) * eye_ay,
                nose_offset=rng.uniform(0.02, 0.15) * ay,
                nose_axes=(rng.uniform(0.14, 0.22) * ay, rng.uniform(0.08, 0.13) * ax),
                mouth_offset=rng.uniform(0.45, 0.58) * ay,
                mouth_axes=(rng.uniform(0.07, 0.13) * ay, rng.uniform(0.28, 0.45) * ax),
                background=tuple(rng.uniform(0.0, 1.0, 3)),
                skin=tuple(skin),
                eye_white=tuple(rng.uniform(0.85, 1.0, 3)),
                pupil=tuple(rng.uniform(0.0, 0.3, 3)),
                nose_color=tuple(skin * rng.uniform(0.55, 0.8)),
                lips=tuple(rng.uniform([0.55, 0.05, 0.1], [0.9, 0.3, 0.35])),
                seed=seed,
            )
        except DataError:
            continue
    raise DataError(f"could not place a face for seed {seed}")


def canonical_scene(size: int) -> FaceScene:
    """Centred, unrotated reference face."""
    ay = 0.34 * size
    ax = 0.8 * ay
    return FaceScene(
        size=size, center=(size / 2 - 0.5, size / 2 - 0.5), face_axes=(ay, ax), rotation=0.0,
        eye_offset=(0.25 * ay, 0.4 * ax), eye_axes=(0.09 * ay, 0.18 * ay), pupil_radius=0.07 * ay,
        nose_offset=0.08 * ay, nose_axes=(0.18 * ay, 0.1 * ax), mouth_offset=0.52 * ay,
        mouth_axes=(0.1 * ay, 0.36 * ax), background=(0.2, 0.3, 0.5), skin=(0.8, 0.6, 0.5),
        eye_white=(0.95, 0.95, 0.95), pupil=(0.1, 0.1, 0.15), nose_color=(0.6, 0.45, 0.37),
        lips=(0.75, 0.2, 0.25),
    )


def _grid(size: int, step: float, sub: int):
    """Sample positions (pixel-index units at full res) for a size x size grid of cells."""
    offs = (np.arange(sub) + 0.5) / sub - 0.5
    centers = (np.arange(size) + 0.5) * step - 0.5
    pts = (centers[:, None] + offs[None, :] * step).reshape(-1)
    return pts


def render_image(scene: FaceScene, supersample: int = 4) -> np.ndarray:
    """Anti-aliased RGB image, float64 [3, size, size] in [0, 1]."""
    n, s = scene.size, supersample
    pts = _grid(n, 1.0, s)
    rows, cols = np.meshgrid(pts, pts, indexing="ij")
    rgb = scene.palette()[scene.label_map(rows, cols)]
    rgb = rgb.reshape(n, s, n, s, 3).mean(axis=(1, 3))
    return np.clip(rgb.transpose(2, 0, 1), 0.0, 1.0)


def render_parsing(scene: FaceScene, size: int, mode: str = "global") -> np.ndarray:
    """Binary masks at ``size`` x ``size``; channels sum to 1 at every pixel."""
    pts = _grid(size, scene.size / size, 1)
    rows, cols = np.meshgrid(pts, pts, indexing="ij")
    lab = scene.label_map(rows, cols)
    eyes = (lab == _EYE) | (lab == _PUPIL)
    parts = {"skin": lab == _SKIN, "eyes": eyes, "nose": lab == _NOSE, "mouth": lab == _MOUTH}
    if mode == "global":
        names = GLOBAL_PARSING
    elif mode == "local":
        names = LOCAL_PARSING
    else:
        raise ValueError(f"parsing mode must be 'global' or 'local', got {mode!r}")
    fg = [parts[k] for k in names[:-1]]
    bg = ~np.logical_or.reduce(fg)
    return np.stack(fg + [bg]).astype(np.float64)


def render_scene(scene: FaceScene, num_landmarks: int = 5, parsing: str = "global"):
    """(HR image [3,n,n], landmarks [K,2] at HR scale, parsing masks at n/2)."""
    return (render_image(scene), scene.landmarks(num_landmarks),
            render_parsing(scene, scene.size // 2, parsing))


def to_grid(coords: np.ndarray, factor: float) -> np.ndarray:
    """Map pixel-index coordinates to a grid ``factor`` times coarser."""
    return (np.asarray(coords, dtype=np.float64) + 0.5) / factor - 0.5


def render_heatmaps(landmarks: np.ndarray, size: int, sigma: float):
    """One unnormalized Gaussian per landmark, peak 1 at the rounded location.

    Returns ``(heatmaps [K,size,size], out_of_frame [K] bool)``; an out-of-frame
    landmark gets an all-zero channel.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    landmarks = np.asarray(landmarks, dtype=np.float64).reshape(-1, 2)
    centers = np.floor(landmarks + 0.5)
    ax = np.arange(size, dtype=np.float64)
    out = np.zeros((len(landmarks), size, size))
    flags = np.zeros(len(landmarks), dtype=bool)
    for k, (r, c) in enumerate(centers):
        if not (0 <= r < size and 0 <= c < size):
            flags[k] = True
            log.warning("landmark %d at (%.1f, %.1f) is outside the %d grid", k, r, c, size)
            continue
        gr = np.exp(-((ax - r) ** 2) / (2 * sigma * sigma))
        gc = np.exp(-((ax - c) ** 2) / (2 * sigma * sigma))
        out[k] = gr[:, None] * gc[None, :]
    return out, flags


# ------------------------------------------------------------------- resampling


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """[n_out, n_in] Catmull-Rom resampling matrix, antialiased on downscale, edge-clamped."""
    scale = n_out / n_in
    kscale = min(scale, 1.0)
    support = 2.0 / kscale
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        u = (i + 0.5) / scale - 0.5
        taps = np.arange(int(np.floor(u - support)), int(np.ceil(u + support)) + 1)
        k = _cubic((u - taps) * kscale)
        np.add.at(w[i], np.clip(taps, 0, n_in - 1), k)
    return w / w.sum(axis=1, keepdims=True)


def bicubic_resize(img: np.ndarray, out_size: int) -> np.ndarray:
    """Resize the last two (square) axes of ``img`` to ``out_size``."""
    n = img.shape[-1]
    if img.shape[-2] != n:
        raise ValueError(f"bicubic_resize expects square images, got {img.shape}")
    if n < 4 or out_size < 4:
        raise ValueError(f"bicubic_resize needs sizes >= 4, got {n} -> {out_size}")
    if out_size == n:
        return img.copy()
    w = resize_weights(n, out_size)
    return np.einsum("ij,...jk,lk->...il", w, img, w)


def degrade(hr: np.ndarray, scale_factor: int) -> np.ndarray:
    """Bicubic down by ``scale_factor`` then back up to the HR size."""
    n = hr.shape[-1]
    if n % scale_factor:
        raise ValueError(f"image size {n} not divisible by scale factor {scale_factor}")
    lr = bicubic_resize(hr, n // scale_factor)
    return bicubic_resize(lr, n)


# ----------------------------------------------------------------- augmentation


def _rot90_coords(coords: np.ndarray, size: int, k: int) -> np.ndarray:
    out = np.asarray(coords, dtype=np.float64).copy()
    for _ in range(k % 4):
        out = np.stack([size - 1 - out[:, 1], out[:, 0]], axis=1)
    return out


def _hflip_coords(coords: np.ndarray, size: int) -> np.ndarray:
    out = np.asarray(coords, dtype=np.float64).copy()
    out[:, 1] = size - 1 - out[:, 1]
    return out


def dihedral(arr: np.ndarray, k: int, flip: bool) -> np.ndarray:
    """Apply ``rot90^k o hflip^flip`` to the last two axes."""
    if flip:
        arr = arr[..., ::-1]
    return np.ascontiguousarray(np.rot90(arr, k, axes=(-2, -1)))


def dihedral_inverse(arr: np.ndarray, k: int, flip: bool) -> np.ndarray:
    arr = np.rot90(arr, -k, axes=(-2, -1))
    if flip:
        arr = arr[..., ::-1]
    return np.ascontiguousarray(arr)


DIHEDRAL = tuple((k, f) for f in (False, True) for k in range(4))
AUGMENT_OPS = {"identity": (0, False), "rot90": (1, False), "rot180": (2, False),
               "rot270": (3, False), "hflip": (0, True)}


@dataclass
class Sample:
    lr_bicubic: np.ndarray  # [3, hr, hr]
    hr: np.ndarray  # [3, hr, hr]
    heatmaps: np.ndarray  # [K, hr/2, hr/2]
    parsing: np.ndarray  # [P, hr/2, hr/2]
    landmarks: np.ndarray  # [K, 2] at HR scale
    id: str = ""
    seed: int = -1

    @property
    def size(self) -> int:
        return self.hr.shape[-1]

    def transformed(self, k: int, flip: bool) -> "Sample":
        n = self.size
        coords = self.landmarks
        if flip:
            coords = _hflip_coords(coords, n)
        coords = _rot90_coords(coords, n, k)
        return replace(self, lr_bicubic=dihedral(self.lr_bicubic, k, flip), hr=dihedral(self.hr, k, flip),
                       heatmaps=dihedral(self.heatmaps, k, flip), parsing=dihedral(self.parsing, k, flip),
                       landmarks=coords)


def augment(sample: Sample, op: str) -> Sample:
    if op not in AUGMENT_OPS:
        raise ValueError(f"unknown augmentation {op!r}; expected one of {sorted(AUGMENT_OPS)}")
    return sample.transformed(*AUGMENT_OPS[op])


# ---------------------------------------------------------------------- corpus


@dataclass(frozen=True)
class CorpusConfig:
    hr_size: int = 64
    scale_factor: int = 8
    num_landmarks: int = 5
    parsing: str = "global"

    def __post_init__(self):
        if self.hr_size % self.scale_factor:
            raise DataError(f"hr size {self.hr_size} not divisible by scale {self.scale_factor}")
        if self.hr_size // self.scale_factor < 4:
            raise DataError(f"LR size {self.hr_size // self.scale_factor} below the 4px resampling minimum")
        if self.parsing not in ("global", "local"):
            raise DataError(f"parsing mode must be global or local, got {self.parsing!r}")
        if not 1 <= self.num_landmarks <= len(LANDMARK_NAMES):
            raise DataError(f"num_landmarks must be in [1, {len(LANDMARK_NAMES)}]")

    @property
    def sigma(self) -> float:
        return self.hr_size / 32

    @property
    def num_parsing_maps(self) -> int:
        return len(GLOBAL_PARSING if self.parsing == "global" else LOCAL_PARSING)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(img) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def make_sample(seed: int, cfg: CorpusConfig, sample_id: str = "") -> Sample:
    """Render one sample; images pass through 8-bit quantization exactly as on disk."""
    scene = sample_scene(seed, cfg.hr_size)
    hr_img, landmarks, parsing = render_scene(scene, cfg.num_landmarks, cfg.parsing)
    # dyadic grid: the flip/rotate coordinate maps are then exact in float64
    landmarks = np.round(landmarks * 2.0**20) / 2.0**20
    hr_q = quantize(hr_img)
    lr_q = quantize(np.clip(degrade(hr_q / 255.0, cfg.scale_factor), 0.0, 1.0))
    heat, flags = render_heatmaps(to_grid(landmarks, 2), cfg.hr_size // 2, cfg.sigma)
    if flags.any():
        raise DataError(f"scene {seed}: landmarks {np.flatnonzero(flags).tolist()} fall outside the frame")
    return Sample(lr_bicubic=lr_q / 255.0, hr=hr_q / 255.0, heatmaps=quantize(heat) / 255.0,
                  parsing=parsing, landmarks=landmarks, id=sample_id, seed=seed)


def scene_seeds(seed: int, n: int) -> list[int]:
    seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32).tolist()
    if len(set(seeds)) != n:
        raise DataError("scene seed collision; choose another corpus seed")
    return seeds


def _write_sample(root: Path, sample: Sample) -> list[str]:
    d = root / "samples" / sample.id
    d.mkdir(parents=True, exist_ok=True)
    write_ppm(d / "hr.ppm", quantize(sample.hr))
    write_ppm(d / "lr.ppm", quantize(sample.lr_bicubic))
    names = ["hr.ppm", "lr.ppm"]
    for k, ch in enumerate(sample.heatmaps):
        write_pgm(d / f"heat_{k:02d}.pgm", quantize(ch))
        names.append(f"heat_{k:02d}.pgm")
    for k, ch in enumerate(sample.parsing):
        write_pgm(d / f"parse_{k:02d}.pgm", quantize(ch))
        names.append(f"parse_{k:02d}.pgm")
    return [f"samples/{sample.id}/{n}" for n in names]


def build_corpus(out_dir: str | Path, n_train: int, n_test: int, seed: int,
                 cfg: CorpusConfig = CorpusConfig(), overwrite: bool = False, threads: int = 1) -> Path:
    """Render and write a seeded train/test corpus plus ``manifest.jsonl``."""
    if n_train < 1 or n_test < 1:
        raise DataError(f"need at least one train and one test sample, got {n_train}/{n_test}")
    root = Path(out_dir)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise DataError(f"{root} already exists; pass overwrite/--force to replace it")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)
    seeds = scene_seeds(seed, n_train + n_test)
    jobs = [(f"train_{i:05d}", s, "train") for i, s in enumerate(seeds[:n_train])]
    jobs += [(f"test_{i:05d}", s, "test") for i, s in enumerate(seeds[n_train:])]

    def render(job):
        sid, s, _ = job
        return make_sample(s, cfg, sid)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        samples = list(pool.map(render, jobs))
    lines = []
    for (sid, s, split), sample in zip(jobs, samples):
        files = _write_sample(root, sample)
        lines.append(json.dumps({"id": sid, "seed": s, "split": split, "files": files,
                                 "landmarks": sample.landmarks.tolist()}, sort_keys=True))
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    meta = {"config": asdict(cfg), "seed": seed, "n_train": n_train, "n_test": n_test,
            "version": __version__}
    (root / "corpus.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return root


@dataclass
class Corpus:
    root: Path
    config: CorpusConfig
    train: list[Sample]
    test: list[Sample]
    hash: str

    def split(self, name: str) -> list[Sample]:
        if name not in ("train", "test"):
            raise DataError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test


def corpus_hash(root: str | Path) -> str:
    import hashlib

    root = Path(root)
    h = hashlib.sha256()
    for name in ("corpus.json", "manifest.jsonl"):
        h.update((root / name).read_bytes())
    return h.hexdigest()


def load_corpus(root: str | Path, threads: int = 1) -> Corpus:
    root = Path(root)
    if not (root / "manifest.jsonl").exists() or not (root / "corpus.json").exists():
        raise DataError(f"{root} is not a corpus directory (manifest.jsonl/corpus.json missing)")
    meta = json.loads((root / "corpus.json").read_text())
    cfg = CorpusConfig(**meta["config"])
    entries = [json.loads(line) for line in (root / "manifest.jsonl").read_text().splitlines() if line]

    def load(entry):
        files = {Path(f).name: root / f for f in entry["files"]}
        heat = [read_pgm(files[f"heat_{k:02d}.pgm"]) for k in range(cfg.num_landmarks)]
        parse = [read_pgm(files[f"parse_{k:02d}.pgm"]) for k in range(cfg.num_parsing_maps)]
        return Sample(lr_bicubic=read_ppm(files["lr.ppm"]) / 255.0, hr=read_ppm(files["hr.ppm"]) / 255.0,
                      heatmaps=np.stack(heat) / 255.0, parsing=np.stack(parse) / 255.0,
                      landmarks=np.asarray(entry["landmarks"], dtype=np.float64),
                      id=entry["id"], seed=entry["seed"])

    try:
        with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
            samples = list(pool.map(load, entries))
    except (KeyError, FileNotFoundError) as e:
        raise DataError(f"corpus {root} is incomplete: {e}") from e
    train = [s for s, e in zip(samples, entries) if e["split"] == "train"]
    test = [s for s, e in zip(samples, entries) if e["split"] == "test"]
    return Corpus(root, cfg, train, test, corpus_hash(root))


def in_memory_corpus(n_train: int, n_test: int, seed: int, cfg: CorpusConfig = CorpusConfig()) -> Corpus:
    """Same samples as :func:`build_corpus` would write, without touching disk."""
    seeds = scene_seeds(seed, n_train + n_test)
    train = [make_sample(s, cfg, f"train_{i:05d}") for i, s in enumerate(seeds[:n_train])]
    test = [make_sample(s, cfg, f"test_{i:05d}") for i, s in enumerate(seeds[n_train:])]
    return Corpus(Path("<memory>"), cfg, train, test, f"memory:{seed}:{n_train}:{n_test}:{cfg}")
