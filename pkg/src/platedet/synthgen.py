"""Seeded procedural generator of X-ray style battery scenes.

A scene is a row of near-vertical dark plate strokes on a bright
background. Anode strokes reach lowest; each cathode stroke sits between
two anodes and ends higher by a positive overhang. Eight attribute
classes control interference: P (pure), T (tilt), A (aberrant: a plate
occluded and missing from the annotation), PI (a clipped neighbouring
battery at the border), BI (bifurcated plates), TRI (tray band), TAI
(tab blobs), SI (a low-contrast separator band across the endpoints).

Everything is a pure function of (seed, config), so datasets are
bit-reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import RenderConfig
from .errors import ConfigurationError
from .imageio import write_pgm

ATTRIBUTES = ("P", "T", "A", "PI", "BI", "TRI", "TAI", "SI")
INTERFERENCE = ("T", "A", "PI", "BI", "TRI", "TAI", "SI")
SHOTS = ("close", "medium", "long")
SPLITS = ("regular", "difficult", "tough")

_MASK63 = (1 << 63) - 1
_GEOMETRY_SALT = 0x5CE11E
_NOISE_SALT = 0x9015E
_ROLE_SALT = 0x8071E


def _seed_of(*parts: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([p & _MASK63 for p in parts])


@dataclass(frozen=True)
class BatteryScene:
    """Ground truth for one synthetic image."""

    anode_endpoints: tuple[tuple[int, int], ...]
    cathode_endpoints: tuple[tuple[int, int], ...]
    attributes: frozenset[str]
    shot: str
    split: str
    image_size: tuple[int, int]
    seed: int

    @property
    def n_anode(self) -> int:
        return len(self.anode_endpoints)

    @property
    def n_cathode(self) -> int:
        return len(self.cathode_endpoints)

    @property
    def mean_pitch(self) -> float:
        xs = [x for x, _ in self.anode_endpoints]
        if len(xs) < 2:
            return float("inf")
        return float(np.mean(np.diff(xs)))


def assign_split(scene: BatteryScene, cfg: RenderConfig | None = None) -> str:
    """Difficulty split from the attribute set and plate density."""
    threshold = (cfg or RenderConfig()).density_tough_pitch
    interference = set(scene.attributes) - {"P"}
    if ("SI" in interference or "A" in interference or len(interference) >= 3
            or scene.mean_pitch < threshold):
        return "tough"
    if interference:
        return "difficult"
    return "regular"


def _normalize_attrs(forced) -> frozenset[str]:
    attrs = frozenset(forced)
    if not attrs or not attrs <= set(ATTRIBUTES):
        raise ConfigurationError(f"attributes must be a non-empty subset of {ATTRIBUTES}, got {sorted(attrs)}")
    if "P" in attrs and len(attrs) > 1:
        raise ConfigurationError("attribute P means no interference and excludes the others")
    return attrs


def sample_scene(rng_seed: int, cfg: RenderConfig, forced_attrs=None) -> BatteryScene:
    """Deterministically sample endpoints and attributes for one scene."""
    cfg.validate()
    seed = rng_seed & _MASK63
    rng = np.random.default_rng(_seed_of(seed))
    h, w = cfg.image_size

    shot = str(rng.choice(SHOTS, p=cfg.shot_probs))
    if forced_attrs is not None:
        attrs = _normalize_attrs(forced_attrs)
    elif rng.uniform() < cfg.pure_prob:
        attrs = frozenset({"P"})
    else:
        k = int(rng.choice([1, 2, 3], p=cfg.attr_count_weights))
        picks = rng.choice(len(INTERFERENCE), size=k, replace=False)
        attrs = frozenset(INTERFERENCE[i] for i in picks)

    pitch_lo = cfg.pitch_range[0] * cfg.shot_pitch_scale[shot]
    pitch_hi = cfg.pitch_range[1] * cfg.shot_pitch_scale[shot]
    count_lo = max(3, round(cfg.count_range[0] * cfg.shot_count_scale[shot]))
    count_hi = max(count_lo, round(cfg.count_range[1] * cfg.shot_count_scale[shot]))

    usable = w - 2 * cfg.margin_x
    n_max = int(usable // pitch_lo) + 1
    if n_max < 3:
        raise ConfigurationError(
            f"pitch {pitch_lo:.1f} and margin {cfg.margin_x} leave room for only {n_max} plates in width {w}")
    n_anode = int(rng.integers(min(count_lo, n_max), min(count_hi, n_max) + 1))

    gap_hi = min(pitch_hi, usable / (n_anode - 1))
    gaps = rng.uniform(pitch_lo, gap_hi, size=n_anode - 1)
    x0 = cfg.margin_x + (usable - gaps.sum()) / 2.0
    anode_x = x0 + np.concatenate([[0.0], np.cumsum(gaps)])

    base_y = rng.uniform(*cfg.anode_y_frac) * h
    anode_y = base_y + rng.normal(0.0, cfg.anode_y_jitter, size=n_anode)
    anode_y = np.clip(anode_y, 0.45 * h, 0.88 * h)

    jf = cfg.cathode_x_jitter_frac
    cathode_x = (anode_x[:-1] + anode_x[1:]) / 2.0 + rng.uniform(-jf, jf, size=n_anode - 1) * gaps
    overhangs = rng.uniform(*cfg.overhang_range, size=n_anode - 1)
    top_limit = cfg.top_y_frac[1] * h + 2.0
    cathode_y = np.maximum(np.minimum(anode_y[:-1], anode_y[1:]) - overhangs, top_limit)

    anode = tuple((int(round(x)), int(round(y))) for x, y in zip(anode_x, anode_y))
    cathode = [(int(round(x)), int(round(y))) for x, y in zip(cathode_x, cathode_y)]
    if "A" in attrs and len(cathode) >= 3:
        cathode.pop(int(rng.integers(1, len(cathode) - 1)))

    scene = BatteryScene(
        anode_endpoints=anode,
        cathode_endpoints=tuple(cathode),
        attributes=attrs,
        shot=shot,
        split="regular",
        image_size=(h, w),
        seed=seed,
    )
    return BatteryScene(**{**scene.__dict__, "split": assign_split(scene, cfg)}) if False else \
        _with_split(scene, assign_split(scene, cfg))


def _with_split(scene: BatteryScene, split: str) -> BatteryScene:
    return BatteryScene(
        anode_endpoints=scene.anode_endpoints,
        cathode_endpoints=scene.cathode_endpoints,
        attributes=scene.attributes,
        shot=scene.shot,
        split=split,
        image_size=scene.image_size,
        seed=scene.seed,
    )


# ---------------------------------------------------------------------------
# Rendering


@dataclass(frozen=True)
class SceneGeometry:
    """All rasterizable shapes, derived deterministically from the scene."""

    strokes: tuple[tuple[tuple[float, float], tuple[float, float]], ...]
    forks: tuple[tuple[tuple[float, float], tuple[float, float]], ...]
    phantom: tuple[tuple[tuple[float, float], tuple[float, float]], ...]
    trays: tuple[tuple[int, int, int, int], ...]        # x0, x1, y0, y1
    tabs: tuple[tuple[float, float, float, float], ...]  # cx, cy, rx, ry
    occluders: tuple[tuple[int, int, int, int], ...]
    si_band: tuple[int, int] | None
    stroke_value: float
    thickness: int
    strong_blur: bool


def fork_tips(geom: SceneGeometry) -> list[tuple[int, int]]:
    return [(int(round(x)), int(round(y))) for _, (x, y) in geom.forks]


def scene_geometry(scene: BatteryScene, cfg: RenderConfig) -> SceneGeometry:
    rng = np.random.default_rng(_seed_of(scene.seed, _GEOMETRY_SALT))
    h, w = scene.image_size
    attrs = scene.attributes

    stroke_value = float(rng.uniform(*cfg.stroke_level))
    thickness = int(rng.integers(cfg.thickness_range[0], cfg.thickness_range[1] + 1))
    strong_blur = bool(rng.uniform() < cfg.strong_blur_prob)

    endpoints = list(scene.anode_endpoints) + list(scene.cathode_endpoints)
    tops = rng.uniform(cfg.top_y_frac[0], cfg.top_y_frac[1], size=len(endpoints)) * h

    slopes = np.zeros(len(endpoints))
    if "T" in attrs and endpoints:
        n_tilt = max(1, len(endpoints) // 3)
        picked = rng.choice(len(endpoints), size=n_tilt, replace=False)
        slopes[picked] = rng.uniform(0.08, cfg.tilt_max, size=n_tilt) * rng.choice([-1.0, 1.0], size=n_tilt)

    strokes = []
    for (x_e, y_e), y_top, slope in zip(endpoints, tops, slopes):
        x_top = float(np.clip(x_e - slope * (y_e - y_top), 1.0, w - 2.0))
        strokes.append(((x_top, float(y_top)), (float(x_e), float(y_e))))

    pitch = scene.mean_pitch if np.isfinite(scene.mean_pitch) else 8.0
    endpoint_set = set(scene.anode_endpoints) | set(scene.cathode_endpoints)

    forks = []
    if "BI" in attrs and scene.n_anode:
        n_fork = int(rng.integers(1, max(2, scene.n_anode // 4) + 1))
        picked = rng.choice(scene.n_anode, size=min(n_fork, scene.n_anode), replace=False)
        for idx in picked:
            (x_top, y_top), (x_e, y_e) = strokes[idx]
            t = rng.uniform(0.35, 0.6)
            start = (x_top + t * (x_e - x_top), y_top + t * (y_e - y_top))
            dx = float(rng.uniform(0.25, 0.45) * pitch * rng.choice([-1.0, 1.0]))
            tip = (x_e + dx, y_e - float(rng.uniform(2.0, 6.0)))
            while (int(round(tip[0])), int(round(tip[1]))) in endpoint_set:
                tip = (tip[0] + 1.0, tip[1])
            forks.append((start, tip))

    phantom = []
    if "PI" in attrs:
        left = bool(rng.uniform() < 0.5)
        for _ in range(int(rng.integers(2, 5))):
            x = float(rng.uniform(1.0, max(2.0, cfg.margin_x - 4.0)))
            if not left:
                x = w - 1.0 - x
            y_top = float(rng.uniform(cfg.top_y_frac[0], cfg.top_y_frac[1]) * h)
            y_end = float(rng.uniform(0.5, 0.85) * h)
            phantom.append(((x, y_top), (x, y_end)))

    trays = []
    if "TRI" in attrs and scene.n_anode:
        first_x = scene.anode_endpoints[0][0]
        last_x = scene.anode_endpoints[-1][0]
        sides = ["left", "right", "both"][int(rng.integers(0, 3))]
        y0, y1 = int(0.10 * h), int(0.90 * h)
        if sides in ("left", "both"):
            x1 = max(1, int(first_x - 0.6 * pitch))
            trays.append((max(0, x1 - cfg.tray_width), x1, y0, y1))
        if sides in ("right", "both"):
            x0 = min(w - 2, int(last_x + 0.6 * pitch))
            trays.append((x0, min(w - 1, x0 + cfg.tray_width), y0, y1))

    tabs = []
    if "TAI" in attrs and scene.n_anode:
        picked = rng.choice(scene.n_anode, size=max(1, scene.n_anode // 3), replace=False)
        for idx in picked:
            (x_top, y_top), _ = strokes[idx]
            tabs.append((x_top, y_top - cfg.tab_height / 2.0,
                         0.45 * pitch, cfg.tab_height / 2.0))

    occluders = []
    if "A" in attrs and scene.n_anode >= 2:
        # The missing cathode is recoverable from the annotation: it is
        # the anode gap with no cathode inside.
        cx = [x for x, _ in scene.cathode_endpoints]
        for (xa0, ya0), (xa1, ya1) in zip(scene.anode_endpoints[:-1], scene.anode_endpoints[1:]):
            if not any(xa0 < x < xa1 for x in cx):
                y_lo = int(min(ya0, ya1) - cfg.overhang_range[1] - 4)
                y_hi = int(max(ya0, ya1) + 3)
                occluders.append((xa0 + 1, xa1 - 1, max(0, y_lo), min(h - 1, y_hi)))

    si_band = None
    if "SI" in attrs and scene.n_cathode and scene.n_anode:
        ys = [y for _, y in scene.anode_endpoints] + [y for _, y in scene.cathode_endpoints]
        si_band = (max(0, min(ys) - 3), min(h - 1, max(ys) + 3))

    return SceneGeometry(
        strokes=tuple(strokes),
        forks=tuple(forks),
        phantom=tuple(phantom),
        trays=tuple(trays),
        tabs=tuple(tabs),
        occluders=tuple(occluders),
        si_band=si_band,
        stroke_value=stroke_value,
        thickness=thickness,
        strong_blur=strong_blur,
    )


def _paint_segment(canvas: np.ndarray, p0, p1, thickness: float, value: float) -> None:
    h, w = canvas.shape
    (x0, y0), (x1, y1) = p0, p1
    r = max(0.5, thickness / 2.0)
    xa = max(0, int(np.floor(min(x0, x1) - r - 1)))
    xb = min(w - 1, int(np.ceil(max(x0, x1) + r + 1)))
    ya = max(0, int(np.floor(min(y0, y1) - r - 1)))
    yb = min(h - 1, int(np.ceil(max(y0, y1) + r + 1)))
    if xa > xb or ya > yb:
        return
    yy, xx = np.mgrid[ya:yb + 1, xa:xb + 1]
    dx, dy = x1 - x0, y1 - y0
    denom = dx * dx + dy * dy
    if denom == 0:
        dist = np.hypot(xx - x0, yy - y0)
    else:
        t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / denom, 0.0, 1.0)
        dist = np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
    region = canvas[ya:yb + 1, xa:xb + 1]
    np.minimum(region, np.where(dist <= r, value, region), out=region)


def _paint_ellipse(canvas: np.ndarray, cx, cy, rx, ry, value: float) -> None:
    h, w = canvas.shape
    xa = max(0, int(np.floor(cx - rx)))
    xb = min(w - 1, int(np.ceil(cx + rx)))
    ya = max(0, int(np.floor(cy - ry)))
    yb = min(h - 1, int(np.ceil(cy + ry)))
    if xa > xb or ya > yb:
        return
    yy, xx = np.mgrid[ya:yb + 1, xa:xb + 1]
    inside = ((xx - cx) / max(rx, 1e-6)) ** 2 + ((yy - cy) / max(ry, 1e-6)) ** 2 <= 1.0
    region = canvas[ya:yb + 1, xa:xb + 1]
    np.minimum(region, np.where(inside, value, region), out=region)


def render(scene: BatteryScene, cfg: RenderConfig) -> np.ndarray:
    """Rasterize a scene to an 8-bit grayscale image."""
    geom = scene_geometry(scene, cfg)
    h, w = scene.image_size
    yy = np.arange(h, dtype=np.float64)[:, None]
    canvas = np.full((h, w), cfg.bg_level) + cfg.bg_gradient * (0.5 - yy / max(h - 1, 1))
    canvas = np.broadcast_to(canvas, (h, w)).copy()

    for x0, x1, y0, y1 in geom.trays:
        region = canvas[y0:y1 + 1, x0:x1 + 1]
        np.minimum(region, geom.stroke_value + 25.0, out=region)
    for cx, cy, rx, ry in geom.tabs:
        _paint_ellipse(canvas, cx, cy, rx, ry, max(20.0, geom.stroke_value - 10.0))
    for p0, p1 in geom.phantom:
        _paint_segment(canvas, p0, p1, geom.thickness, geom.stroke_value + 15.0)
    for p0, p1 in geom.strokes:
        _paint_segment(canvas, p0, p1, geom.thickness, geom.stroke_value)
    for p0, p1 in geom.forks:
        _paint_segment(canvas, p0, p1, max(1.0, geom.thickness - 1.0), geom.stroke_value + 10.0)
    for x0, x1, y0, y1 in geom.occluders:
        region = canvas[y0:y1 + 1, x0:x1 + 1]
        np.minimum(region, geom.stroke_value + 45.0, out=region)
    if geom.si_band is not None:
        y0, y1 = geom.si_band
        band = canvas[y0:y1 + 1]
        canvas[y0:y1 + 1] = band * (1.0 - cfg.si_strength) + geom.stroke_value * cfg.si_strength

    sigma = cfg.blur_sigma_strong if geom.strong_blur else cfg.blur_sigma
    if sigma > 0:
        canvas = gaussian_filter(canvas, sigma=sigma, mode="nearest")
    noise_rng = np.random.default_rng(_seed_of(scene.seed, _NOISE_SALT))
    canvas = canvas + noise_rng.normal(0.0, cfg.noise_sigma, size=canvas.shape)
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Dataset files


def scene_to_annotation(scene: BatteryScene) -> dict:
    return {
        "seed": scene.seed,
        "shot": scene.shot,
        "attributes": sorted(scene.attributes),
        "split": scene.split,
        "anode": [[x, y] for x, y in scene.anode_endpoints],
        "cathode": [[x, y] for x, y in scene.cathode_endpoints],
    }


def load_annotation(path: str | Path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        ann = json.load(fh)
    for key in ("anode", "cathode", "split"):
        if key not in ann:
            raise ConfigurationError(f"annotation {path} is missing {key!r}")
    return ann


def _dump_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def generate_dataset(n: int, seed: int, cfg: RenderConfig, out_dir: str | Path,
                     labels: str = "ada:0.3") -> list[dict]:
    """Write n images, annotations, supervision masks, and a manifest.

    The first eight scenes force one attribute class each so that every
    class is covered regardless of n; the rest follow the configured
    attribute mix. Returns the manifest entry list.
    """
    from . import labelgen  # late import: labelgen depends on this module

    if n < 1:
        raise ConfigurationError(f"need n >= 1, got {n}")
    cfg.validate()
    strategy = labelgen.parse_strategy(labels)
    out = Path(out_dir)
    for sub in ("images", "annotations", "labels"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    coverage = [("P",), ("T",), ("A",), ("PI",), ("BI",), ("TRI",), ("TAI",), ("SI",)]
    manifest = []
    for i in range(n):
        forced = coverage[i] if i < len(coverage) else None
        scene = sample_scene((seed & _MASK63) ^ i, cfg, forced_attrs=forced)
        stem = f"img_{i:05d}"

        image_rel = f"images/{stem}.pgm"
        write_pgm(out / image_rel, render(scene, cfg))

        ann_rel = f"annotations/{stem}.json"
        _dump_json(out / ann_rel, scene_to_annotation(scene))

        label_set = labelgen.label_set(scene, strategy)
        label_rels = {}
        for suffix, mask in (("point_a", label_set.point_a), ("point_c", label_set.point_c),
                             ("line_a", label_set.line_a), ("line_c", label_set.line_c)):
            rel = f"labels/{stem}.{suffix}.pgm"
            write_pgm(out / rel, mask.astype(np.uint8) * 255)
            label_rels[suffix] = rel

        role_rng = np.random.default_rng(_seed_of(seed, i, _ROLE_SALT))
        role = "train" if role_rng.uniform() < cfg.train_fraction else "test"
        manifest.append({
            "image": image_rel,
            "annotation": ann_rel,
            "split": scene.split,
            "role": role,
            "labels": label_rels,
        })

    _dump_json(out / "manifest.json", manifest)
    return manifest


def load_manifest(path: str | Path) -> tuple[Path, list[dict]]:
    """Read a manifest; returns (dataset root, entries)."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, list):
        raise ConfigurationError(f"manifest {path} must be a JSON list")
    return path.parent, entries
