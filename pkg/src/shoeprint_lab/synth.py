"""Parametric synthetic shoeprints with age and gender pressure trends.

Every number below is an artifact constant chosen so the generated cohort
shows pressure rising to age 40 at the inner sites and rising then
plateauing at the outer sites. Nothing here is a measured value.

Dataset layout under an output directory::

    A/manifest.csv, A/images/s00012_L.pgm ...   raw prints
    B/...   segmented and resized prints
    C/, D/  left-only / right-only (segmented)
    E/      side-by-side pairs, one image per subject
    F/, G/  pairs balanced by gender / by age decade through augmentation
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import imaging as I
from .pgm import read_pgm, write_pgm

GENDERS = ("male", "female")
VERSIONS = ("A", "B", "C", "D", "E", "F", "G")
SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ("subject_id", "side", "age", "gender", "height_cm", "weight_kg",
                   "path", "split", "provenance")
AGE_MIN, AGE_MAX = 7, 80

# (age, weight) breakpoints; linear in between
INNER_PROFILE = ((7, 0.3), (25, 0.8), (40, 1.0), (50, 0.65), (80, 0.45))
OUTER_PROFILE = ((7, 0.3), (40, 1.0), (80, 1.0))
FEMALE_HEEL_EXTRA = ((7, 0.0), (20, 0.0), (40, 0.1), (80, 0.35))
INNER_SITES = frozenset({0, 1, 3, 5})
OUTER_SITES = frozenset({2, 4, 6, 7})


@dataclass
class SynthConfig:
    canvas_hw: tuple = (64, 32)
    base_level: float = 30.0
    amplitude: float = 95.0
    spread: float = 0.15  # bump sigma as a fraction of the print width
    spread_growth: float = 0.25  # relative widening of bumps from age 7 to 80
    noise_sigma: float = 4.0
    female_frac: float = 0.35
    male_length: tuple = (0.95, 0.025)
    female_length: tuple = (0.86, 0.025)
    female_width: float = 0.9
    male_gain: float = 1.1
    female_toe_gain: float = 1.25
    subject_jitter: float = 0.08
    age_dist: str = "lognormal"  # or "uniform"
    age_mu: float = 3.02
    age_sigma: float = 0.5
    val_frac: float = 0.10
    test_frac: float = 0.20
    threshold: int = I.DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.age_dist not in ("lognormal", "uniform"):
            raise ValueError(f"unknown age distribution {self.age_dist!r}")
        if not 0 <= self.female_frac <= 1:
            raise ValueError("female_frac must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        self.canvas_hw = tuple(int(v) for v in self.canvas_hw)


@dataclass
class SubjectProfile:
    subject_id: int
    age: int
    gender: str
    height: float
    weight: float
    rng_seed: int
    length: float = 0.95
    gain: float = 1.0

    def __post_init__(self):
        if not AGE_MIN <= self.age <= AGE_MAX:
            raise ValueError(f"age {self.age} outside [{AGE_MIN}, {AGE_MAX}]")
        if self.gender not in GENDERS:
            raise ValueError(f"gender must be male or female, got {self.gender!r}")


@dataclass
class PressureField:
    site_weights: np.ndarray
    site_centers: np.ndarray  # (8, 2) row, col in pixels
    site_spreads: np.ndarray
    noise_sigma: float

    def __post_init__(self):
        if not np.all(np.isfinite(self.site_weights)) or np.any(self.site_weights < 0):
            raise ValueError("site weights must be finite and non-negative")
        if np.any(self.site_spreads <= 0):
            raise ValueError("site spreads must be positive")


def _interp(age: float, table) -> float:
    xs, ys = zip(*table)
    return float(np.interp(age, xs, ys))


def age_weight_profile(age: float, gender: str, region_id: int) -> float:
    if not AGE_MIN <= age <= AGE_MAX:
        raise ValueError(f"age {age} outside [{AGE_MIN}, {AGE_MAX}]")
    if gender not in GENDERS:
        raise ValueError(f"gender must be male or female, got {gender!r}")
    if not 0 <= region_id <= 7:
        raise ValueError(f"region id must be 0..7, got {region_id}")
    w = _interp(age, INNER_PROFILE if region_id in INNER_SITES else OUTER_PROFILE)
    if gender == "female" and region_id == 6:
        w += _interp(age, FEMALE_HEEL_EXTRA)
    return w


def profile_table(ages=range(AGE_MIN, AGE_MAX + 1)) -> list:
    """(age, gender, region, weight) rows, the published generator reference."""
    return [(a, g, r, age_weight_profile(a, g, r)) for a in ages for g in GENDERS for r in range(8)]


# --------------------------------------------------------------------------
# single print
# --------------------------------------------------------------------------

def _geometry(cfg: SynthConfig, p: SubjectProfile):
    h, w = cfg.canvas_hw
    top = 0.03 * h
    length = p.length * h
    width_scale = cfg.female_width if p.gender == "female" else 1.0
    return h, w, top, length, width_scale


def sole_mask(cfg: SynthConfig, p: SubjectProfile, side: str) -> np.ndarray:
    """Forefoot and heel ellipses joined by an arch band cut on the medial side."""
    h, w, top, length, ws = _geometry(cfg, p)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    v = (rr + 0.5 - top) / length  # 0 toe .. 1 heel
    u = (cc + 0.5) / w
    if side == "right":
        u = 1.0 - u  # right prints mirror left ones
    # left print: medial (big toe, arch) is toward u = 1
    fore = ((v - 0.3) / 0.3) ** 2 + ((u - 0.5) / (0.42 * ws)) ** 2 <= 1
    heel = ((v - 0.8) / 0.2) ** 2 + ((u - 0.5) / (0.3 * ws)) ** 2 <= 1
    arch = (v >= 0.45) & (v <= 0.7) & (u >= 0.5 - 0.32 * ws) & (u <= 0.5 + 0.1 * ws)
    return fore | heel | arch


def pressure_field(cfg: SynthConfig, p: SubjectProfile, side: str) -> PressureField:
    h, w, top, length, ws = _geometry(cfg, p)
    weights = np.array([age_weight_profile(p.age, p.gender, r) for r in range(8)])
    if p.gender == "female":
        weights[0] *= cfg.female_toe_gain
    weights *= p.gain
    centers = np.zeros((8, 2))
    for r in range(8):
        band, lateral = divmod(r, 2)
        centers[r, 0] = top + (band + 0.5) / 4 * length
        u = 0.5 + (-0.17 if lateral else 0.17) * ws
        if side == "right":
            u = 1.0 - u
        centers[r, 1] = u * w - 0.5
    grow = 1.0 + cfg.spread_growth * (p.age - AGE_MIN) / (AGE_MAX - AGE_MIN)
    spreads = np.full(8, cfg.spread * w * grow)
    return PressureField(weights, centers, spreads, cfg.noise_sigma)


def render_field(field_: PressureField, shape, mask: np.ndarray, base: float, amplitude: float) -> np.ndarray:
    rr, cc = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    total = np.zeros(shape)
    for wgt, (r0, c0), s in zip(field_.site_weights, field_.site_centers, field_.site_spreads):
        total += wgt * np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * s * s))
    return np.where(mask, base + amplitude * total, 0.0)


def _side_index(side: str) -> int:
    return I.SIDES.index(side)


def generate_print(profile: SubjectProfile, side: str, cfg: SynthConfig | None = None,
                   noise: bool = True) -> I.ShoeprintImage:
    cfg = cfg or SynthConfig()
    if side not in I.SIDES:
        raise ValueError(f"side must be left or right, got {side!r}")
    mask = sole_mask(cfg, profile, side)
    clean = render_field(pressure_field(cfg, profile, side), cfg.canvas_hw, mask,
                         cfg.base_level, cfg.amplitude)
    if noise and cfg.noise_sigma > 0:
        rng = np.random.default_rng([profile.rng_seed, profile.subject_id, _side_index(side)])
        clean = clean + np.where(mask, rng.normal(0.0, cfg.noise_sigma, clean.shape), 0.0)
    # keep the sole above the segmentation threshold so it is never cut
    px = np.where(mask, np.clip(np.rint(clean), cfg.threshold + 1, 255), 0).astype(np.uint8)
    return I.ShoeprintImage(px, side)


# --------------------------------------------------------------------------
# cohort
# --------------------------------------------------------------------------

def sample_age(rng, cfg: SynthConfig) -> int:
    if cfg.age_dist == "uniform":
        return int(rng.integers(AGE_MIN, AGE_MAX + 1))
    while True:  # truncated shifted log-normal
        a = int(round(AGE_MIN + rng.lognormal(cfg.age_mu, cfg.age_sigma)))
        if a <= AGE_MAX:
            return a


def make_subject(subject_id: int, seed: int, cfg: SynthConfig, age: int | None = None,
                 gender: str | None = None) -> SubjectProfile:
    rng = np.random.default_rng([int(seed), int(subject_id), 99])
    a = sample_age(rng, cfg)
    g = "female" if rng.random() < cfg.female_frac else "male"
    age = a if age is None else age
    gender = g if gender is None else gender
    male = gender == "male"
    growth = min(1.0, 0.6 + 0.4 * (age - AGE_MIN) / 11)  # children are smaller
    height = rng.normal(172 if male else 160, 7) * growth
    weight = rng.normal(70 if male else 57, 9) * growth ** 2
    mu, sd = cfg.male_length if male else cfg.female_length
    length = float(np.clip(rng.normal(mu, sd), 0.7, 0.96))
    gain = rng.normal(1.0, cfg.subject_jitter) * (cfg.male_gain if male else 1.0)
    return SubjectProfile(int(subject_id), int(age), gender, round(float(height), 1),
                          round(float(max(weight, 15.0)), 1), int(seed), length, float(max(gain, 0.5)))


def make_cohort(n: int, seed: int, cfg: SynthConfig | None = None) -> list:
    if n < 1:
        raise ValueError("cohort needs at least one subject")
    cfg = cfg or SynthConfig()
    return [make_subject(i, seed, cfg) for i in range(n)]


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

@dataclass
class ManifestRow:
    subject_id: int
    side: str  # left, right or pair
    age: int
    gender: str
    height_cm: float
    weight_kg: float
    path: str
    split: str = "train"
    provenance: str = "original"

    def as_list(self) -> list:
        return [self.subject_id, self.side, self.age, self.gender, f"{self.height_cm:.1f}",
                f"{self.weight_kg:.1f}", self.path, self.split, self.provenance]


@dataclass
class DatasetManifest:
    rows: list = field(default_factory=list)
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.rows)

    def where(self, **kw) -> "DatasetManifest":
        rows = [r for r in self.rows if all(getattr(r, k) == v for k, v in kw.items())]
        return DatasetManifest(rows, self.root)

    def subjects(self) -> list:
        return sorted({r.subject_id for r in self.rows})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for r in self.rows:
            w.writerow(r.as_list())
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    def image(self, row: ManifestRow) -> np.ndarray:
        return read_pgm(Path(self.root) / row.path)

    def unmatched_subjects(self) -> list:
        """Subjects whose original left or right print is missing."""
        sides: dict = {}
        for r in self.rows:
            if r.side in I.SIDES and r.provenance == "original":
                sides.setdefault(r.subject_id, set()).add(r.side)
        return sorted(sid for sid, s in sides.items() if len(s) != 2)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != MANIFEST_HEADER:
            raise ValueError(f"{path}: unexpected manifest header {header}")
        rows = []
        for rec in reader:
            sid, side, age, gender, h, w, p, split, prov = rec
            rows.append(ManifestRow(int(sid), side, int(age), gender, float(h), float(w), p, split, prov))
    return DatasetManifest(rows, path.parent)


def decade(age: int) -> int:
    """Decade bin 1..7 (10s..70s); ages under 10 join the 10s, 80 joins the 70s."""
    return min(max(int(age), 10), 79) // 10


def _largest_remainder(total: int, weights: list) -> list:
    s = sum(weights)
    quotas = [total * w / s for w in weights] if s else [0.0] * len(weights)
    base = [int(np.floor(q)) for q in quotas]
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[: total - sum(base)]:
        base[i] += 1
    return base


def split(manifest: DatasetManifest, val_frac: float = 0.10, test_frac: float = 0.20,
          seed: int = 0) -> DatasetManifest:
    """Subject-level split stratified by age decade; augmented rows stay out of test."""
    if val_frac < 0 or test_frac < 0 or val_frac + test_frac >= 1:
        raise ValueError(f"invalid split fractions val={val_frac} test={test_frac}")
    ages = {}
    for r in manifest.rows:
        if r.provenance == "original":
            ages[r.subject_id] = r.age
    strata: dict = {}
    for sid in sorted(ages):
        strata.setdefault(decade(ages[sid]), []).append(sid)
    keys = sorted(strata)
    n = len(ages)
    sizes = [len(strata[k]) for k in keys]
    n_test = _largest_remainder(round(test_frac * n), sizes)
    n_val = _largest_remainder(round(val_frac * n), sizes)
    rng = np.random.default_rng([int(seed), 7])
    assign = {}
    for k, nt, nv in zip(keys, n_test, n_val):
        ids = list(rng.permutation(strata[k]))
        nt = min(nt, len(ids))
        nv = min(nv, len(ids) - nt)
        for i, sid in enumerate(ids):
            assign[int(sid)] = "test" if i < nt else ("val" if i < nt + nv else "train")
    rows = []
    for r in manifest.rows:
        s = assign.get(r.subject_id, "train")
        if r.provenance != "original" and s == "test":
            raise ValueError(f"augmented row of test subject {r.subject_id}")
        rows.append(replace(r, split=s))
    return DatasetManifest(rows, manifest.root)


# --------------------------------------------------------------------------
# dataset generation and derived versions
# --------------------------------------------------------------------------

def _name(sid: int, side: str, tag: str = "") -> str:
    code = {"left": "L", "right": "R", "pair": "P"}[side]
    return f"images/s{sid:05d}_{code}{tag}.pgm"


def _row(p: SubjectProfile, side: str, path: str, prov: str = "original") -> ManifestRow:
    return ManifestRow(p.subject_id, side, p.age, p.gender, p.height, p.weight, path, "train", prov)


def generate_dataset(n_subjects: int, seed: int, out_dir, cfg: SynthConfig | None = None) -> DatasetManifest:
    """Version A: two raw prints per subject, split assigned, manifest written."""
    cfg = cfg or SynthConfig()
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc
    rows = []
    for p in make_cohort(n_subjects, seed, cfg):
        for side in I.SIDES:
            rel = _name(p.subject_id, side)
            write_pgm(root / rel, generate_print(p, side, cfg).pixels)
            rows.append(_row(p, side, rel))
    man = split(DatasetManifest(rows, root), cfg.val_frac, cfg.test_frac, seed)
    man.write(root / "manifest.csv")
    return man


def _pairs(man: DatasetManifest) -> dict:
    out: dict = {}
    for r in man.rows:
        out.setdefault(r.subject_id, {})[r.side] = r
    return out


def _augment_pair(pixels: np.ndarray, rng) -> np.ndarray:
    op = ("gaussian_noise", "rotate", "crop")[int(rng.integers(3))]
    seed = int(rng.integers(2 ** 31))
    img = I.ShoeprintImage(pixels, "left")
    if op == "gaussian_noise":
        return I.augment(img, op, seed, sigma=5.0).pixels
    if op == "rotate":
        return I.augment(img, op, seed, theta=float(rng.uniform(-15, 15))).pixels
    return I.augment(img, op, seed, frac=float(rng.uniform(0.85, 1.0))).pixels


def _balance(pairs: list, key, root: Path, seed: int, images: dict) -> list:
    """Add augmented copies of non-test pairs until every group reaches the largest one."""
    groups: dict = {}
    for r in pairs:
        groups.setdefault(key(r), []).append(r)
    target = max(len(g) for g in groups.values())
    rng = np.random.default_rng([int(seed), 11])
    extra = []
    for k in sorted(groups):
        src = [r for r in groups[k] if r.split != "test"]
        need = target - len(groups[k])
        if need and not src:
            raise ValueError(f"group {k!r} has no non-test subjects to augment")
        for i in range(need):
            r = src[i % len(src)]
            px = _augment_pair(images[r.subject_id], rng)
            rel = _name(r.subject_id, "pair", f"_aug{i // len(src):03d}")
            write_pgm(root / rel, px)
            extra.append(replace(r, path=rel, provenance="augmented"))
    return pairs + extra


def derive_versions(manifest: DatasetManifest, versions, out_dir, seed: int = 0,
                    cfg: SynthConfig | None = None) -> dict:
    """Write the requested derived versions next to version A.

    B segments every print and resizes it back to the canvas; C and D keep
    one side of B; E joins each subject's segmented left and right prints
    side by side; F and G add augmented E pairs to balance gender or age
    decade.
    """
    cfg = cfg or SynthConfig()
    versions = list(dict.fromkeys(versions))
    bad = [v for v in versions if v not in VERSIONS or v == "A"]
    if bad:
        raise ValueError(f"unknown or non-derivable version(s) {bad}; choose from B..G")
    root = Path(out_dir)
    h, w = cfg.canvas_hw
    segmented = {}
    for r in manifest.rows:
        if r.side in I.SIDES and r.provenance == "original":
            img = I.ShoeprintImage(manifest.image(r), r.side)
            segmented[(r.subject_id, r.side)] = I.segment(img, (h, w), cfg.threshold).pixels
    out = {}

    def emit(v: str, rows: list, files: dict) -> None:
        vdir = root / v
        (vdir / "images").mkdir(parents=True, exist_ok=True)
        for rel, px in files.items():
            write_pgm(vdir / rel, px)
        out[v] = DatasetManifest(rows, vdir)

    singles = [r for r in manifest.rows if r.side in I.SIDES and r.provenance == "original"]
    for v, keep in (("B", I.SIDES), ("C", ("left",)), ("D", ("right",))):
        if v in versions:
            rows = [r for r in singles if r.side in keep]
            emit(v, rows, {r.path: segmented[(r.subject_id, r.side)] for r in rows})

    pair_rows, pair_px = [], {}
    for sid, sides in sorted(_pairs(manifest.where(provenance="original")).items()):
        if "left" in sides and "right" in sides:
            r = sides["left"]
            pair_px[sid] = np.hstack([segmented[(sid, "left")], segmented[(sid, "right")]])
            pair_rows.append(replace(r, side="pair", path=_name(sid, "pair")))
    base_files = {r.path: pair_px[r.subject_id] for r in pair_rows}
    if "E" in versions:
        emit("E", list(pair_rows), base_files)
    for v, key in (("F", lambda r: r.gender), ("G", lambda r: decade(r.age))):
        if v in versions:
            vdir = root / v
            (vdir / "images").mkdir(parents=True, exist_ok=True)
            rows = _balance(list(pair_rows), key, vdir, seed + ord(v), pair_px)
            emit(v, rows, base_files)
    for v, man in out.items():
        man.write(man.root / "manifest.csv")
    return out


# --------------------------------------------------------------------------
# loading for training
# --------------------------------------------------------------------------

def load_arrays(manifest: DatasetManifest, split_name: str | None = None, side: str | None = None):
    """Images scaled to [0, 1] with ages and gender labels (0 male, 1 female)."""
    rows = [r for r in manifest.rows
            if (split_name is None or r.split == split_name) and (side is None or r.side == side)]
    if not rows:
        return np.zeros((0, 1, 1)), np.zeros(0), np.zeros(0, dtype=np.int64)
    X = np.stack([manifest.image(r) for r in rows]).astype(np.float64) / 255.0
    ages = np.array([r.age for r in rows], dtype=np.float64)
    genders = np.array([GENDERS.index(r.gender) for r in rows], dtype=np.int64)
    return X, ages, genders
