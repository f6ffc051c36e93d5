"""Synthetic households with a planted latent SEP, used in place of private survey data.

Each household gets a latent SEP value ``z``. Asset answers follow ordered
probit models in ``z``; income and expenditure are log-normal in ``z``; every
image type renders visual cues (brightness, stripe frequency, a bright blob)
driven by a per-type cue ``s*z + sqrt(1-s^2)*eps`` so that ``s`` is the
correlation between cue and latent. Satellite cues are painted into a single
georeferenced raster (roof brightness for the 25 m view, yard cover for the
100 m view) that the preprocessing stage later clips and crops.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr
from scipy.stats import norm

from .dataset import (
    IMAGE_TYPES,
    INDOOR_TYPES,
    OUTDOOR_TYPES,
    PHOTO_TYPES,
    SATELLITE_TYPES,
    HouseholdRecord,
    ImageType,
)
from .errors import ValidationError
from .imagery import Raster
from .rng import substream

# categories ordered from low to high SEP; cumulative shares of the lower categories at z = 0
ASSET_SCHEMA: dict[str, tuple[str, ...]] = {
    "water_source": ("surface", "well", "public_tap", "piped"),
    "floor": ("earth", "wood", "cement", "tile"),
    "roof": ("thatch", "zinc", "tile"),
    "wall": ("reed", "mud", "block"),
    "cooking_fuel": ("wood", "charcoal", "gas"),
    "latrine": ("none", "pit", "improved", "flush"),
    "electricity": ("no", "yes"),
    "radio": ("no", "yes"),
    "television": ("no", "yes"),
    "fridge": ("no", "yes"),
    "bicycle": ("no", "yes"),
    "motorbike": ("no", "yes"),
    "car": ("no", "yes"),
    "mobile_phone": ("no", "yes"),
}
_ASSET_CUTS: dict[str, tuple[float, ...]] = {
    "water_source": (0.15, 0.45, 0.7),
    "floor": (0.35, 0.45, 0.85),
    "roof": (0.3, 0.85),
    "wall": (0.25, 0.55),
    "cooking_fuel": (0.55, 0.9),
    "latrine": (0.15, 0.6, 0.85),
    "electricity": (0.5,),
    "radio": (0.45,),
    "television": (0.6,),
    "fridge": (0.75,),
    "bicycle": (0.55,),
    "motorbike": (0.85,),
    "car": (0.93,),
    "mobile_phone": (0.2,),
}
DEFAULT_ANCHOR = ("water_source", "piped")
INCOME_SOURCES = ("salary", "farming", "business", "remittances", "pension")
EXPENDITURE_SOURCES = ("food", "transport", "education", "health", "utilities", "other")

_PALETTE = {
    ImageType.FRONT_DOOR: (0.55, 0.42, 0.30),
    ImageType.WALL: (0.70, 0.62, 0.50),
    ImageType.STREET_VIEW: (0.50, 0.60, 0.70),
    ImageType.ROOF: (0.60, 0.60, 0.62),
    ImageType.FLOOR: (0.62, 0.52, 0.40),
    ImageType.LIGHT_SOURCE: (0.75, 0.75, 0.80),
    ImageType.KITCHEN: (0.58, 0.48, 0.38),
    ImageType.STOVE: (0.45, 0.45, 0.45),
    ImageType.BATHROOM: (0.60, 0.70, 0.75),
    ImageType.LATRINE: (0.55, 0.50, 0.42),
    ImageType.WATER_SOURCE: (0.45, 0.60, 0.75),
}

INDOOR_DOMINANT_SIGNAL = {
    **{t.value: 0.35 for t in SATELLITE_TYPES},
    **{t.value: 0.45 for t in OUTDOOR_TYPES},
    **{t.value: 0.3 for t in INDOOR_TYPES},
    ImageType.LIGHT_SOURCE.value: 0.97,
}


@dataclass(frozen=True)
class SyntheticConfig:
    n_households: int = 975
    image_size: int = 64
    missing_rate: float = 0.03
    signal: dict[str, float] = field(default_factory=lambda: dict(INDOOR_DOMINANT_SIGNAL))
    asset_loading: float = 1.6
    neighbourhood_share: float = 0.4
    income_log_mean: float = 8.6
    income_log_slope: float = 0.45
    income_log_sd: float = 0.75
    expenditure_log_mean: float = 8.0
    expenditure_log_slope: float = 0.55
    expenditure_log_sd: float = 0.5
    asset_missing_rate: float = 0.0
    spacing_m: float = 80.0
    pixel_size_m: float = 2.0
    margin_m: float = 120.0

    def __post_init__(self):
        for name in ("missing_rate", "asset_missing_rate", "neighbourhood_share"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        for k, v in self.signal.items():
            ImageType(k)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"signal for {k} must lie in [0, 1], got {v}")
        if self.n_households < 1 or self.image_size < 4:
            raise ValidationError("need n_households >= 1 and image_size >= 4")

    def strength(self, itype: ImageType) -> float:
        return float(self.signal.get(ImageType(itype).value, 0.0))


@dataclass
class SyntheticCohort:
    records: list[HouseholdRecord]
    latent: dict[str, float]
    photos: dict[ImageType, dict[str, np.ndarray]]
    raster: Raster | None
    config: SyntheticConfig


def household_ids(n: int) -> list[str]:
    width = max(4, len(str(n)))
    return [f"hh{i + 1:0{width}d}" for i in range(n)]


def _layout(n: int, config: SyntheticConfig, seed: int) -> np.ndarray:
    cols = math.ceil(math.sqrt(n))
    rng = substream(seed, "layout")
    idx = np.arange(n)
    jitter = rng.uniform(-0.12, 0.12, size=(n, 2)) * config.spacing_m
    x = config.margin_m + (idx % cols + 0.5) * config.spacing_m + jitter[:, 0]
    y = config.margin_m + (idx // cols + 0.5) * config.spacing_m + jitter[:, 1]
    return np.column_stack([x, y])


def _neighbourhood_field(xy: np.ndarray, seed: int) -> np.ndarray:
    rng = substream(seed, "neighbourhood")
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    centers = rng.uniform(lo, hi, size=(12, 2))
    widths = rng.uniform(250.0, 600.0, size=12)
    heights = rng.normal(size=12)
    d2 = ((xy[:, None, :] - centers[None]) ** 2).sum(-1)
    f = (heights * np.exp(-d2 / (2 * widths**2))).sum(axis=1)
    sd = f.std()
    return (f - f.mean()) / sd if sd > 0 else np.zeros(len(xy))


def _ordered_probit(z: float, loading: float, cuts: tuple[float, ...], e: float) -> int:
    scale = math.sqrt(loading**2 + 1.0)
    v = loading * z + e
    return int(np.searchsorted(norm.ppf(cuts) * scale, v))


def _split_amount(total: float, names: tuple[str, ...], rng: np.random.Generator) -> dict[str, float]:
    active = rng.random(len(names)) < 0.6
    if not active.any():
        active[rng.integers(len(names))] = True
    shares = rng.dirichlet(np.ones(int(active.sum())))
    out = dict.fromkeys(names, 0.0)
    for name, share in zip(np.array(names)[active], shares):
        out[str(name)] = round(float(total * share), 2)
    return out


def generate_population(config: SyntheticConfig, seed: int, n: int | None = None):
    """Household records without images, plus latent SEP and geocodes."""
    n = config.n_households if n is None else n
    ids = household_ids(n)
    xy = _layout(n, config, seed)
    field_ = _neighbourhood_field(xy, seed)
    rho = config.neighbourhood_share
    records, latent = [], {}
    for k, hid in enumerate(ids):
        rng = substream(seed, "household", hid)
        z = math.sqrt(rho) * field_[k] + math.sqrt(1 - rho) * rng.normal()
        latent[hid] = z
        assets = {}
        for var, cats in ASSET_SCHEMA.items():
            e = rng.normal()
            assets[var] = cats[_ordered_probit(z, config.asset_loading, _ASSET_CUTS[var], e)]
            if rng.random() < config.asset_missing_rate:
                assets[var] = None
        income = math.exp(config.income_log_mean + config.income_log_slope * z
                          + config.income_log_sd * rng.normal())
        spend = math.exp(config.expenditure_log_mean + config.expenditure_log_slope * z
                         + config.expenditure_log_sd * rng.normal())
        records.append(HouseholdRecord(
            id=hid,
            geocode=(float(xy[k, 0]), float(xy[k, 1])),
            assets=assets,
            income_sources=_split_amount(income, INCOME_SOURCES, rng),
            expenditure_sources=_split_amount(spend, EXPENDITURE_SOURCES, rng),
        ))
    return records, latent


def image_cue(z: float, strength: float, hid: str, itype: ImageType, seed: int) -> float:
    eps = substream(seed, "cue", hid, ImageType(itype).value).normal()
    return strength * z + math.sqrt(max(0.0, 1.0 - strength**2)) * eps


def render_photo(cue: float, itype: ImageType, size: int, rng: np.random.Generator) -> np.ndarray:
    """Render one household photograph whose appearance is driven by ``cue``."""
    u = float(ndtr(cue))
    palette = np.array(_PALETTE[ImageType(itype)])
    light = 0.35 + 0.45 * u + 0.03 * rng.normal()
    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    freq = 1.0 + 5.0 * u
    stripes = 0.08 * np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    img = (light + stripes)[..., None] * palette[None, None, :] * 1.4
    blob_on, cy, cx = rng.random(), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)
    if blob_on < u:
        disc = ((yy - cy) ** 2 + (xx - cx) ** 2) < 0.12**2
        img[disc] = (0.95, 0.9, 0.6)
    img = img + 0.04 * rng.normal(size=img.shape)
    return np.clip(np.rint(np.clip(img, 0, 1) * 255), 0, 255).astype(np.uint8)


def render_photos(ids, latent: dict[str, float], config: SyntheticConfig, seed: int):
    """Photographs per photo type; missing images are omitted and reported."""
    photos: dict[ImageType, dict[str, np.ndarray]] = {t: {} for t in PHOTO_TYPES}
    missing: dict[str, set[ImageType]] = {}
    for hid in ids:
        miss_rng = substream(seed, "missing", hid)
        draws = miss_rng.random(len(PHOTO_TYPES))
        for itype, d in zip(PHOTO_TYPES, draws):
            if d < config.missing_rate:
                missing.setdefault(hid, set()).add(itype)
                continue
            cue = image_cue(latent[hid], config.strength(itype), hid, itype, seed)
            rng = substream(seed, "image", hid, itype.value)
            photos[itype][hid] = render_photo(cue, itype, config.image_size, rng)
    return photos, missing


def render_raster(records, latent: dict[str, float], config: SyntheticConfig, seed: int) -> Raster:
    """Paint yards (100 m cue) and roofs (25 m cue) of every household into one raster.

    A small fraction of pixels are saturated glints so percentile clipping has
    something to remove.
    """
    ps = config.pixel_size_m
    xy = np.array([r.geocode for r in records])
    extent = xy.max(axis=0) + config.margin_m
    W = int(math.ceil(extent[0] / ps))
    H = int(math.ceil(extent[1] / ps))
    origin_x, origin_y = 0.0, H * ps
    rng = substream(seed, "raster")
    ground = np.array([0.62, 0.55, 0.42])
    img = ground[None, None, :] * (0.9 + 0.1 * rng.random((H, W, 1)))
    yard_r = min(0.44 * config.spacing_m, 35.0)
    roof_half = 5.0
    for rec in records:
        hid = rec.id
        x, y = rec.geocode
        u_yard = float(ndtr(image_cue(latent[hid], config.strength(ImageType.SATELLITE_100M), hid,
                                      ImageType.SATELLITE_100M, seed)))
        u_roof = float(ndtr(image_cue(latent[hid], config.strength(ImageType.SATELLITE_25M), hid,
                                      ImageType.SATELLITE_25M, seed)))
        col, row = (x - origin_x) / ps, (origin_y - y) / ps
        rad = yard_r / ps
        r0, r1 = max(0, int(row - rad)), min(H, int(row + rad) + 1)
        c0, c1 = max(0, int(col - rad)), min(W, int(col + rad) + 1)
        rr, cc = np.mgrid[r0:r1, c0:c1]
        yard = ((rr + 0.5 - row) ** 2 + (cc + 0.5 - col) ** 2) < rad**2
        green, built = np.array([0.25, 0.45, 0.2]), np.array([0.7, 0.7, 0.68])
        img[r0:r1, c0:c1][yard] = green + u_yard * (built - green)
        half = roof_half / ps * (0.7 + 0.6 * u_roof)
        rr0, rr1 = max(0, int(round(row - half))), min(H, int(round(row + half)))
        cc0, cc1 = max(0, int(round(col - half))), min(W, int(round(col + half)))
        img[rr0:rr1, cc0:cc1] = 0.3 + 0.6 * u_roof
    img = img * 0.8 + 0.02 * rng.normal(size=img.shape)
    pixels = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    glint = rng.random((H, W)) < 5e-4
    pixels[glint] = 255
    return Raster(pixels, origin_x, origin_y, ps)


def generate_synthetic_cohort(config: SyntheticConfig, seed: int, with_raster: bool = True) -> SyntheticCohort:
    records, latent = generate_population(config, seed)
    return attach_images(records, latent, config, seed, with_raster=with_raster)


def attach_images(records, latent, config: SyntheticConfig, seed: int, with_raster: bool = True) -> SyntheticCohort:
    """Render images for ``records`` and fill in their image manifests."""
    ids = [r.id for r in records]
    photos, missing = render_photos(ids, latent, config, seed)
    out = []
    for rec in records:
        images = {}
        for itype in IMAGE_TYPES:
            gone = itype in missing.get(rec.id, ())
            images[itype] = None if gone else f"images/{itype.value}/{rec.id}.png"
        out.append(HouseholdRecord(rec.id, rec.geocode, rec.assets, rec.income_sources,
                                   rec.expenditure_sources, images))
    raster = render_raster(records, latent, config, seed) if with_raster else None
    return SyntheticCohort(out, {h: latent[h] for h in ids}, photos, raster, config)
