"""Synthetic co-registered camera / gated / lidar frames under weather.

Every random draw comes from a Philox stream keyed by
``(seed, frame, object, field)``, so any frame can be regenerated on its own.
Degradation is a contrast attenuation ``exp(-distance / visibility)`` with a
per-sensor effective visibility:

* camera: ``visibility`` by day, ``visibility * night_gain`` at night
* gated: ``3 * visibility``, unaffected by night
* lidar: ``visibility``, plus near-range speckle clutter in fog and snow
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from gla.detection import BoxSet, Difficulty, read_ground_truth, write_ground_truth
from gla.model import ModalityBundle
from gla.serialize import load_tensor, save_tensor

WEATHERS = ("Clear", "LightFog", "DenseFog", "Snow")
DAYTIMES = ("Day", "Night")
SENSORS = ("camera", "gated", "lidar")

# rng field ids
F_COUNT, F_CLASS, F_DISTANCE, F_POSITION, F_OCCLUSION, F_REFLECTIVITY = range(6)
F_NOISE = {"camera": 10, "gated": 11, "lidar": 12}
F_CLUTTER = 13
F_SPLIT = 20
FRAME_SLOT = 0xFFFF

# class size priors: height in metres, width / height
CLASS_HEIGHT_M = (1.5, 1.75, 3.2, 1.6)
CLASS_ASPECT = (1.8, 0.45, 2.2, 0.9)
CAMERA_COLOR = np.array(
    [[0.85, 0.15, 0.10], [0.15, 0.75, 0.25], [0.90, 0.80, 0.10], [0.20, 0.30, 0.90]], dtype=np.float64
)


@dataclass(frozen=True)
class WeatherParams:
    visibility: float
    clutter_rate: float = 0.0
    night_gain: float = 0.15

    def __post_init__(self):
        if self.visibility <= 0:
            raise ValueError("visibility must be positive")
        if not (0 < self.night_gain <= 1):
            raise ValueError("night_gain must lie in (0, 1]")


DEFAULT_WEATHER = {
    "Clear": WeatherParams(1000.0, 0.0, 0.15),
    "LightFog": WeatherParams(120.0, 0.03, 0.15),
    "DenseFog": WeatherParams(40.0, 0.08, 0.15),
    "Snow": WeatherParams(200.0, 0.12, 0.15),
}


@dataclass
class SimConfig:
    height: int = 60
    width: int = 120
    focal_px: float = 200.0
    horizon: float = 36.0
    camera_height_m: float = 0.5
    noise_sigma: float = 0.02
    class_prior: tuple = (0.5, 0.2, 0.15, 0.15)
    max_objects: int = 6
    weather: dict = field(default_factory=lambda: dict(DEFAULT_WEATHER))


@dataclass
class SceneObject:
    class_id: int
    distance: float
    box: np.ndarray
    occlusion: float
    reflectivity: float

    @property
    def height_px(self) -> float:
        return float(self.box[3] - self.box[1])

    @property
    def difficulty(self) -> Difficulty:
        return difficulty_of(self)


def stream(seed: int, frame: int, obj: int, fld: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, int(frame), int(obj), int(fld)]))


def difficulty_of(obj: SceneObject) -> Difficulty:
    h, occ = obj.height_px, obj.occlusion
    if h >= 40 and occ <= 0.15:
        return Difficulty.EASY
    if h >= 25 and occ <= 0.50:
        return Difficulty.MODERATE
    return Difficulty.HARD


def sample_scene(seed: int, index: int, cfg: SimConfig = SimConfig(), n_objects: Optional[int] = None) -> list:
    """Objects for one frame, sorted far to near (painter order)."""
    if n_objects is None:
        n_objects = int(stream(seed, index, FRAME_SLOT, F_COUNT).integers(1, cfg.max_objects + 1))
    cum = np.cumsum(cfg.class_prior) / np.sum(cfg.class_prior)
    objs = []
    for k in range(n_objects):
        cls = int(np.searchsorted(cum, stream(seed, index, k, F_CLASS).random(), side="right"))
        cls = min(cls, len(cum) - 1)
        u = stream(seed, index, k, F_DISTANCE).random()
        dist = 5.0 + 75.0 * u * u
        h = max(4.0, cfg.focal_px * CLASS_HEIGHT_M[cls] / dist)
        w = max(2.0, h * CLASS_ASPECT[cls])
        bottom = min(cfg.horizon + cfg.focal_px * cfg.camera_height_m / dist, cfg.height - 1.0)
        xc = stream(seed, index, k, F_POSITION).random() * cfg.width
        box = np.array([xc - w / 2, bottom - h, xc + w / 2, bottom])
        box[[0, 2]] = np.clip(box[[0, 2]], 0.0, cfg.width)
        box[[1, 3]] = np.clip(box[[1, 3]], 0.0, cfg.height)
        occ = 0.8 * stream(seed, index, k, F_OCCLUSION).random()
        refl = 0.3 + 0.7 * stream(seed, index, k, F_REFLECTIVITY).random()
        objs.append(SceneObject(cls, float(dist), box, float(occ), float(refl)))
    objs.sort(key=lambda o: -o.distance)
    return objs


def effective_visibility(sensor: str, weather: WeatherParams, daytime: str) -> float:
    if sensor == "camera":
        return weather.visibility * (weather.night_gain if daytime == "Night" else 1.0)
    if sensor == "gated":
        return 3.0 * weather.visibility
    if sensor == "lidar":
        return weather.visibility
    raise ValueError(f"unknown sensor {sensor!r}")


def attenuation(sensor: str, distance: float, weather: WeatherParams, daytime: str) -> float:
    return float(np.exp(-distance / effective_visibility(sensor, weather, daytime)))


# --------------------------------------------------------------------------
# rendering
# --------------------------------------------------------------------------


def _backgrounds(cfg: SimConfig, daytime: str):
    h, w = cfg.height, cfg.width
    rows = np.arange(h, dtype=np.float64)[:, None] * np.ones((1, w))
    ground = rows >= cfg.horizon
    cam = np.empty((3, h, w))
    for c, (sky, road) in enumerate(((0.55, 0.35), (0.65, 0.35), (0.80, 0.37))):
        cam[c] = np.where(ground, road, sky)
    if daytime == "Night":
        cam = cam * 0.4
    gated = np.full((3, h, w), 0.05)
    lidar = np.zeros((3, h, w))
    with np.errstate(divide="ignore"):
        d_ground = cfg.focal_px * cfg.camera_height_m / np.maximum(rows - cfg.horizon, 1e-9)
    lidar[0] = np.where(ground, np.clip(1.0 - d_ground / 100.0, 0.0, 1.0), 0.0)
    lidar[2] = np.where(ground, 0.2, 0.0)
    scan = (np.arange(h) % 2 == 0)[:, None]
    lidar *= scan
    return {"camera": cam, "gated": gated, "lidar": lidar}


def _texture(cls: int, hh: int, ww: int) -> np.ndarray:
    y, x = np.mgrid[0:hh, 0:ww]
    if cls == 0:
        return np.where((y // 2) % 2 == 0, 0.12, -0.12)
    if cls == 1:
        return np.where(x % 2 == 0, 0.12, -0.12)
    if cls == 2:
        return np.where(((y // 3) + (x // 3)) % 2 == 0, 0.12, -0.12)
    return np.where(((x + y) // 2) % 2 == 0, 0.12, -0.12)


def object_pattern(sensor: str, obj: SceneObject, hh: int, ww: int, day_bg: np.ndarray) -> np.ndarray:
    """Unattenuated object signal minus the daytime background, (3, hh, ww)."""
    if sensor == "camera":
        col = CAMERA_COLOR[obj.class_id][:, None, None] * (1.0 + _texture(obj.class_id, hh, ww))[None]
        return col - day_bg
    if sensor == "gated":
        gates = np.exp(-(((obj.distance - np.array([12.0, 35.0, 65.0])) / 28.0) ** 2))
        level = (0.35 + 0.6 * obj.reflectivity) * gates
        return level[:, None, None] * np.ones((1, hh, ww)) - day_bg
    rel_h = np.linspace(1.0, 0.0, hh)[:, None] * np.ones((1, ww))
    sig = np.stack(
        [
            np.full((hh, ww), np.clip(1.0 - obj.distance / 100.0, 0.0, 1.0)),
            rel_h * CLASS_HEIGHT_M[obj.class_id] / 4.0,
            np.full((hh, ww), obj.reflectivity),
        ]
    )
    return sig - day_bg


def render_modalities(
    scene: list,
    weather: WeatherParams,
    daytime: str,
    seed: int = 0,
    index: int = 0,
    cfg: SimConfig = SimConfig(),
):
    """Render one frame. Returns ``({sensor: (3, H, W) float32}, BoxSet)``."""
    bgs = _backgrounds(cfg, daytime)
    day_bgs = _backgrounds(cfg, "Day")
    scan = (np.arange(cfg.height) % 2 == 0)[:, None]
    out = {}
    for sensor in SENSORS:
        img = bgs[sensor].copy()
        for obj in scene:
            x0, y0 = int(np.floor(obj.box[0])), int(np.floor(obj.box[1]))
            x1, y1 = int(np.ceil(obj.box[2])), int(np.ceil(obj.box[3]))
            vis_w = max(1, int(round((x1 - x0) * (1.0 - obj.occlusion))))
            x1v = x0 + vis_w
            hh, ww = y1 - y0, x1v - x0
            if hh <= 0 or ww <= 0:
                continue
            a = attenuation(sensor, obj.distance, weather, daytime)
            pat = object_pattern(sensor, obj, hh, ww, day_bgs[sensor][:, y0:y1, x0:x1v])
            region = bgs[sensor][:, y0:y1, x0:x1v] + a * pat
            if sensor == "lidar":
                mask = scan[y0:y1]
                img[:, y0:y1, x0:x1v] = np.where(mask[None], region, img[:, y0:y1, x0:x1v])
            else:
                img[:, y0:y1, x0:x1v] = region
        if sensor == "lidar" and weather.clutter_rate > 0:
            r = stream(seed, index, FRAME_SLOT, F_CLUTTER)
            hit = (r.random((cfg.height, cfg.width)) < weather.clutter_rate) & scan
            vals = np.stack([r.uniform(0.85, 1.0, hit.shape), r.uniform(0.0, 0.3, hit.shape), r.uniform(0.0, 0.4, hit.shape)])
            img = np.where(hit[None], vals, img)
        if cfg.noise_sigma > 0:
            img = img + stream(seed, index, FRAME_SLOT, F_NOISE[sensor]).normal(0.0, cfg.noise_sigma, img.shape)
        out[sensor] = np.clip(img, 0.0, 1.0).astype(np.float32)
    gt = BoxSet(
        np.array([o.box for o in scene]).reshape(-1, 4),
        [o.class_id for o in scene],
        difficulty=[int(o.difficulty) for o in scene],
    )
    return out, gt


# --------------------------------------------------------------------------
# datasets on disk
# --------------------------------------------------------------------------


@dataclass
class FrameInfo:
    index: int
    split: str
    weather: str
    daytime: str


@dataclass
class DatasetManifest:
    seed: int
    height: int
    width: int
    frames: list
    frames_per_cell: int = 0
    test_fraction: float = 0.2
    root: Optional[Path] = None

    @property
    def frame_count(self) -> int:
        return len(self.frames)

    def split(self, name: str) -> list:
        return [f for f in self.frames if f.split == name]

    def to_text(self) -> str:
        lines = [
            "format = gla-dataset-1",
            f"seed = {self.seed}",
            f"height = {self.height}",
            f"width = {self.width}",
            f"frames_per_cell = {self.frames_per_cell}",
            f"test_fraction = {self.test_fraction}",
            f"frame_count = {self.frame_count}",
            f"train_count = {len(self.split('train'))}",
            f"test_count = {len(self.split('test'))}",
        ]
        lines += [f"frame_{f.index:05d} = {f.split} {f.weather} {f.daytime}" for f in self.frames]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, root=None) -> "DatasetManifest":
        kv = {}
        frames = []
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            k, v = (s.strip() for s in line.split("=", 1))
            if k.startswith("frame_") and k[6:].isdigit():
                split, weather, daytime = v.split()
                frames.append(FrameInfo(int(k[6:]), split, weather, daytime))
            else:
                kv[k] = v
        m = cls(
            int(kv["seed"]),
            int(kv["height"]),
            int(kv["width"]),
            frames,
            int(kv.get("frames_per_cell", 0)),
            float(kv.get("test_fraction", 0.2)),
            Path(root) if root else None,
        )
        if "frame_count" in kv and int(kv["frame_count"]) != len(frames):
            raise ValueError(f"manifest lists {len(frames)} frames but frame_count = {kv['frame_count']}")
        return m


def frame_files(index: int) -> dict:
    names = {s: f"frame_{index:05d}_{s}.glat" for s in SENSORS}
    names["gt"] = f"frame_{index:05d}.gt"
    return names


def split_cells(frames_per_cell: int, test_fraction: float, seed: int) -> list:
    """Per-frame (split, weather, daytime), stratified by cell."""
    n_test = int(np.floor(frames_per_cell * test_fraction + 0.5))
    out = []
    cell = 0
    for weather in WEATHERS:
        for daytime in DAYTIMES:
            perm = stream(seed, cell, FRAME_SLOT, F_SPLIT).permutation(frames_per_cell)
            test = set(perm[:n_test].tolist())
            out += [("test" if i in test else "train", weather, daytime) for i in range(frames_per_cell)]
            cell += 1
    return out


def render_frame(seed: int, info: FrameInfo, cfg: SimConfig):
    scene = sample_scene(seed, info.index, cfg)
    return render_modalities(scene, cfg.weather[info.weather], info.daytime, seed, info.index, cfg)


def make_dataset(out_dir, frames_per_cell: int = 100, seed: int = 7, cfg: SimConfig = SimConfig(), test_fraction=0.2):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = [FrameInfo(i, *t) for i, t in enumerate(split_cells(frames_per_cell, test_fraction, seed))]
    for info in frames:
        tensors, gt = render_frame(seed, info, cfg)
        names = frame_files(info.index)
        for s in SENSORS:
            save_tensor(out / names[s], tensors[s])
        write_ground_truth(out / names["gt"], gt)
    manifest = DatasetManifest(seed, cfg.height, cfg.width, frames, frames_per_cell, test_fraction, out)
    (out / "manifest.txt").write_text(manifest.to_text())
    return manifest


class Dataset:
    """In-memory view of a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        mpath = self.root / "manifest.txt"
        if not mpath.exists():
            raise FileNotFoundError(f"no dataset manifest at {mpath}")
        self.manifest = DatasetManifest.from_text(mpath.read_text(), self.root)
        self.info = {f.index: f for f in self.manifest.frames}
        self._cache: dict = {}

    def indices(self, split: Optional[str] = None) -> list:
        return [f.index for f in self.manifest.frames if split is None or f.split == split]

    def frame(self, index: int):
        if index not in self._cache:
            names = frame_files(index)
            tensors = {s: load_tensor(self.root / names[s]) for s in SENSORS}
            gt = read_ground_truth(self.root / names["gt"])
            self._cache[index] = (tensors, gt)
        return self._cache[index]

    def ground_truth(self, index: int) -> BoxSet:
        return self.frame(index)[1]

    def bundle(self, indices) -> ModalityBundle:
        frames = [self.frame(i)[0] for i in indices]
        return ModalityBundle(
            *(np.stack([f[s] for f in frames]) for s in SENSORS),
            weather=[self.info[i].weather for i in indices],
            daytime=[self.info[i].daytime for i in indices],
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for p in sorted(self.root.iterdir()):
            if p.is_file():
                h.update(p.name.encode())
                h.update(p.read_bytes())
        return h.hexdigest()
