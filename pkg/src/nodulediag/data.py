"""Dataset model: per-rater ordinal annotations, aggregation and
binarization rules, nodule-level splitting, directory IO, and a parametric
synthetic nodule generator for desk-scale end-to-end runs.

On-disk layout:

    <dir>/format.json            {"schema_version": 1, "kind": "nodule-dataset"}
    <dir>/images/<nodule>_<k>.png  8-bit grayscale, loaded as float in [0, 1]
    <dir>/annotations.jsonl      one object per rater per nodule
    <dir>/split.json             optional {"train": [...], "test": [...], "excluded": [...]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1

# ordinal score ranges, in canonical order
ATTRIBUTES: dict[str, tuple[int, int]] = {
    "subtlety": (1, 5),
    "internalStructure": (1, 4),
    "calcification": (1, 6),
    "sphericity": (1, 5),
    "margin": (1, 5),
    "lobulation": (1, 5),
    "spiculation": (1, 5),
    "texture": (1, 5),
}
# internalStructure is carried in the data model but left out of reported accuracy
REPORTED_ATTRIBUTES = [a for a in ATTRIBUTES if a != "internalStructure"]
MALIGNANCY_RANGE = (1, 5)

BENIGN, MALIGNANT = 0, 1


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotationRecord:
    rater: str
    malignancy: int
    attributes: dict[str, int]

    def validate(self) -> None:
        lo, hi = MALIGNANCY_RANGE
        if not lo <= self.malignancy <= hi:
            raise DataError(f"malignancy={self.malignancy} outside {lo}..{hi}")
        for name, (alo, ahi) in ATTRIBUTES.items():
            if name not in self.attributes:
                raise DataError(f"missing attribute {name!r}")
            v = self.attributes[name]
            if not alo <= v <= ahi:
                raise DataError(f"{name}={v} outside {alo}..{ahi}")


@dataclass(frozen=True)
class AggregatedLabels:
    malignancy_score: int
    malignancy_class: int | None  # BENIGN / MALIGNANT / None when excluded
    attributes: dict[str, int]


@dataclass
class Nodule:
    nodule_id: str
    records: list[AnnotationRecord]
    aggregated: AggregatedLabels | None = None
    split: str | None = None


@dataclass
class Sample:
    sample_id: str
    nodule_id: str
    image: np.ndarray  # float64 in [0, 1]


def _round_half_up(x: float) -> int:
    # ties round toward the higher score, away from the benign end of the scale
    return int(math.floor(x + 0.5))


def aggregate_labels(records: list[AnnotationRecord]) -> AggregatedLabels:
    """Median across raters per task; needs at least three raters."""
    if len(records) < 3:
        raise DataError(f"need >= 3 rater records to aggregate, got {len(records)}")
    mal = _round_half_up(float(np.median([r.malignancy for r in records])))
    attrs = {name: _round_half_up(float(np.median([r.attributes[name] for r in records])))
             for name in ATTRIBUTES}
    return AggregatedLabels(malignancy_score=mal,
                            malignancy_class=malignancy_class(mal),
                            attributes=attrs)


def binarize_malignancy(median_score: int) -> str:
    """>3 malignant, <3 benign, ==3 excluded."""
    lo, hi = MALIGNANCY_RANGE
    if not lo <= median_score <= hi:
        raise DataError(f"malignancy score {median_score} outside {lo}..{hi}")
    if median_score > 3:
        return "malignant"
    if median_score < 3:
        return "benign"
    return "excluded"


def malignancy_class(median_score: int) -> int | None:
    label = binarize_malignancy(median_score)
    return {"benign": BENIGN, "malignant": MALIGNANT, "excluded": None}[label]


def split_nodule_level(nodules: list[Nodule], ratio: float = 0.7,
                       seed: int = 0) -> dict[str, str]:
    """Random nodule partition, stratified by binarized malignancy.

    Every image of a nodule follows its nodule. Nodules with a median score
    of 3 are tagged "excluded" and belong to neither side.
    """
    if not 0.0 < ratio < 1.0:
        raise DataError(f"split ratio {ratio} outside (0, 1)")
    assignment: dict[str, str] = {}
    strata: dict[int, list[str]] = {BENIGN: [], MALIGNANT: []}
    for nod in nodules:
        agg = nod.aggregated
        if agg is None or agg.malignancy_class is None:
            assignment[nod.nodule_id] = "excluded"
        else:
            strata[agg.malignancy_class].append(nod.nodule_id)
    rng = np.random.default_rng(seed)
    for ids in strata.values():
        ids.sort()
        order = rng.permutation(len(ids))
        n_train = _round_half_up(ratio * len(ids))
        for rank, idx in enumerate(order):
            assignment[ids[idx]] = "train" if rank < n_train else "test"
    return assignment


class NoduleDataset:
    def __init__(self, nodules: dict[str, Nodule], samples: list[Sample],
                 root: Path | None = None):
        self.nodules = nodules
        self.samples = sorted(samples, key=lambda s: s.sample_id)
        self.root = root
        self._by_id = {s.sample_id: s for s in self.samples}

    def __len__(self) -> int:
        return len(self.samples)

    def sample(self, sample_id: str) -> Sample:
        if sample_id not in self._by_id:
            raise DataError(f"unknown sample id {sample_id!r}")
        return self._by_id[sample_id]

    def labels_for(self, sample_id: str) -> AggregatedLabels:
        nod = self.nodules[self.sample(sample_id).nodule_id]
        if nod.aggregated is None:
            raise DataError(f"nodule {nod.nodule_id} has no aggregated labels")
        return nod.aggregated

    def split_samples(self, split: str) -> list[Sample]:
        return [s for s in self.samples if self.nodules[s.nodule_id].split == split]

    def apply_split(self, assignment: dict[str, str]) -> None:
        for nid, tag in assignment.items():
            self.nodules[nid].split = tag

    def ensure_split(self, ratio: float = 0.7, seed: int = 0) -> None:
        if all(n.split is None for n in self.nodules.values()):
            self.apply_split(split_nodule_level(list(self.nodules.values()), ratio, seed))


# -- synthetic generation ---------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Generative parameters for one rendered nodule.

    Score mappings are deterministic and monotone in each parameter; the
    directions are recorded in SCORE_DIRECTIONS.
    """

    radius: float
    offset: tuple[float, float]
    eccentricity: float          # 0 round .. 0.6 elongated
    angle: float
    margin_width: float          # edge softness in px; sharp edges score high
    spike_count: int
    lobe_count: int
    calc_intensity: float        # 0 none .. 1 dense bright core
    texture_noise: float         # 0 solid .. 1 heavily mottled
    contrast: float
    internal_kind: int           # 0..3 -> internalStructure 1..4
    noise_seed: int

# +1 means the score grows with the parameter, -1 means it shrinks
SCORE_DIRECTIONS = {
    "subtlety": ("contrast", +1),
    "internalStructure": ("internal_kind", +1),
    "calcification": ("calc_intensity", +1),
    "sphericity": ("eccentricity", -1),
    "margin": ("margin_width", -1),
    "lobulation": ("lobe_count", +1),
    "spiculation": ("spike_count", +1),
    "texture": ("texture_noise", -1),
}

# malignancy = thresholded weighted sum of spiculation, lobulation and margin
# irregularity minus calcification (all rescaled to [0, 1])
MALIGNANCY_WEIGHTS = {"spiculation": 0.4, "lobulation": 0.3,
                      "margin_irregularity": 0.3, "calcification": -0.25}
MALIGNANCY_THRESHOLDS = (0.08, 0.20, 0.35, 0.55)  # upper edges for scores 1..4


def scores_from_spec(spec: SyntheticSpec) -> dict[str, int]:
    subtlety = 1 + _round_half_up(4 * (spec.contrast - 0.2) / 0.7)
    calcification = 1 + _round_half_up(5 * spec.calc_intensity)
    sphericity = 5 - _round_half_up(4 * spec.eccentricity / 0.6)
    margin = 5 - _round_half_up(4 * (spec.margin_width - 0.5) / 5.5)
    lobulation = 1 + min(4, math.ceil(spec.lobe_count * 4 / 6))
    spiculation = 1 + min(4, math.ceil(spec.spike_count / 2))
    texture = 5 - _round_half_up(4 * spec.texture_noise)
    scores = {
        "subtlety": int(np.clip(subtlety, 1, 5)),
        "internalStructure": int(np.clip(spec.internal_kind + 1, 1, 4)),
        "calcification": int(np.clip(calcification, 1, 6)),
        "sphericity": int(np.clip(sphericity, 1, 5)),
        "margin": int(np.clip(margin, 1, 5)),
        "lobulation": int(np.clip(lobulation, 1, 5)),
        "spiculation": int(np.clip(spiculation, 1, 5)),
        "texture": int(np.clip(texture, 1, 5)),
    }
    scores["malignancy"] = _malignancy_score(scores)
    return scores


def _malignancy_score(scores: dict[str, int]) -> int:
    raw = (MALIGNANCY_WEIGHTS["spiculation"] * (scores["spiculation"] - 1) / 4
           + MALIGNANCY_WEIGHTS["lobulation"] * (scores["lobulation"] - 1) / 4
           + MALIGNANCY_WEIGHTS["margin_irregularity"] * (5 - scores["margin"]) / 4
           + MALIGNANCY_WEIGHTS["calcification"] * (scores["calcification"] - 1) / 5)
    for level, edge in enumerate(MALIGNANCY_THRESHOLDS, start=1):
        if raw < edge:
            return level
    return 5


def render_spec(spec: SyntheticSpec, image_size: int) -> np.ndarray:
    """Grayscale patch in [0, 1]: soft ellipse + spikes + lobes + core + noise."""
    rng = np.random.default_rng(spec.noise_seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    cy = image_size / 2 + spec.offset[0]
    cx = image_size / 2 + spec.offset[1]
    dy, dx = yy - cy, xx - cx
    ca, sa = math.cos(spec.angle), math.sin(spec.angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    a = spec.radius * (1 + spec.eccentricity)
    b = spec.radius * (1 - spec.eccentricity)
    d = np.sqrt((u / a) ** 2 + (v / b) ** 2)  # 1.0 on the boundary

    img = 0.12 + 0.02 * rng.standard_normal((image_size, image_size))
    body = 1.0 / (1.0 + np.exp(-(1.0 - d) * spec.radius / spec.margin_width))

    theta = np.arctan2(v, u)
    rad = d * spec.radius  # isotropic-ish radial distance in px
    for j in range(spec.spike_count):
        phi = spec.angle + 2 * math.pi * j / max(spec.spike_count, 1) + rng.uniform(-0.2, 0.2)
        dtheta = np.angle(np.exp(1j * (theta - phi)))
        tangential = np.abs(dtheta) * np.maximum(rad, 1e-6)
        ray = np.exp(-0.5 * (tangential / 1.3) ** 2) * np.exp(-((rad - spec.radius) / (0.8 * spec.radius)) ** 2)
        ray[d < 0.8] = 0.0
        body = np.maximum(body, 0.9 * ray)
    for j in range(spec.lobe_count):
        psi = spec.angle + 2 * math.pi * (j + 0.5) / max(spec.lobe_count, 1) + rng.uniform(-0.15, 0.15)
        ly = cy + math.sin(psi) * spec.radius
        lx = cx + math.cos(psi) * spec.radius
        lr = 0.38 * spec.radius
        ld = np.sqrt((yy - ly) ** 2 + (xx - lx) ** 2) / lr
        lobe = 1.0 / (1.0 + np.exp(-(1.0 - ld) * 4.0))
        body = np.maximum(body, lobe)

    nodule = spec.contrast * body
    if spec.texture_noise > 0:
        mottle = rng.standard_normal((image_size, image_size))
        nodule = nodule * (1.0 + 0.35 * spec.texture_noise * mottle * (body > 0.3))
    kind_shift = {0: 0.0, 1: -0.08, 2: -0.04, 3: -0.12}[spec.internal_kind]
    nodule = nodule + kind_shift * (body > 0.5)
    img = img + nodule
    if spec.calc_intensity > 0.1:
        core = np.sqrt((u / (0.3 * a)) ** 2 + (v / (0.3 * b)) ** 2)
        img = img + 0.9 * spec.calc_intensity * np.exp(-(core ** 2))
    return np.clip(img, 0.0, 1.0)


def draw_spec(rng: np.random.Generator) -> SyntheticSpec:
    """Mixture of a smooth-looking and an aggressive-looking nodule mode.

    The mode only shapes the parameter distribution; every label still comes
    deterministically from the rendered parameters.
    """
    aggressive = rng.random() < 0.5
    if aggressive:
        spike_count = int(rng.integers(4, 9))
        lobe_count = int(rng.integers(3, 7))
        margin_width = float(rng.uniform(3.0, 6.0))
        calc_intensity = float(rng.uniform(0.0, 0.12))
    else:
        spike_count = int(rng.integers(0, 2))
        lobe_count = int(rng.integers(0, 2))
        margin_width = float(rng.uniform(0.5, 2.0))
        calc_intensity = float(rng.uniform(0.3, 1.0)) if rng.random() < 0.7 else float(rng.uniform(0.0, 0.1))
    return SyntheticSpec(
        radius=float(rng.uniform(10.0, 20.0)),
        offset=(float(rng.uniform(-6, 6)), float(rng.uniform(-6, 6))),
        eccentricity=float(rng.uniform(0.0, 0.6)),
        angle=float(rng.uniform(0.0, 2 * math.pi)),
        margin_width=margin_width,
        spike_count=spike_count,
        lobe_count=lobe_count,
        calc_intensity=calc_intensity,
        texture_noise=float(rng.uniform(0.0, 1.0)),
        contrast=float(rng.uniform(0.35, 0.9)),
        internal_kind=int(rng.choice(4, p=[0.85, 0.05, 0.05, 0.05])),
        noise_seed=int(rng.integers(0, 2**31 - 1)),
    )

# rater noise: mostly faithful, occasionally off by one, clipped to range
RATER_JITTER = ((-1, 0.15), (0, 0.70), (1, 0.15))


def simulate_raters(scores: dict[str, int], rng: np.random.Generator,
                    n_raters: int = 3) -> list[AnnotationRecord]:
    deltas = np.array([d for d, _ in RATER_JITTER])
    probs = np.array([p for _, p in RATER_JITTER])

    def jitter(value: int, lo: int, hi: int) -> int:
        return int(np.clip(value + rng.choice(deltas, p=probs), lo, hi))

    records = []
    for r in range(n_raters):
        mal = jitter(scores["malignancy"], *MALIGNANCY_RANGE)
        attrs = {name: jitter(scores[name], lo, hi) for name, (lo, hi) in ATTRIBUTES.items()}
        records.append(AnnotationRecord(rater=f"r{r}", malignancy=mal, attributes=attrs))
    return records


def quantize_image(img: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid used on disk, keeping save/load an identity."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_synthetic(n: int, seed: int, image_size: int = 64,
                       n_raters: int = 3, split_ratio: float = 0.7) -> NoduleDataset:
    if n < 1:
        raise DataError("need n >= 1")
    rng = np.random.default_rng(seed)
    nodules: dict[str, Nodule] = {}
    samples: list[Sample] = []
    width = max(4, len(str(n)))
    for i in range(n):
        nid = f"syn{i:0{width}d}"
        spec = draw_spec(rng)
        scores = scores_from_spec(spec)
        records = simulate_raters(scores, rng, n_raters)
        image = quantize_image(render_spec(spec, image_size))
        nodules[nid] = Nodule(nodule_id=nid, records=records,
                              aggregated=aggregate_labels(records))
        samples.append(Sample(sample_id=f"{nid}_0", nodule_id=nid, image=image))
    ds = NoduleDataset(nodules, samples)
    ds.apply_split(split_nodule_level(list(nodules.values()), split_ratio, seed))
    return ds


# -- directory IO -----------------------------------------------------------


def save_dataset(ds: NoduleDataset, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "format.json").write_text(json.dumps(
        {"schema_version": SCHEMA_VERSION, "kind": "nodule-dataset"}, sort_keys=True))
    for s in ds.samples:
        arr = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(out / "images" / f"{s.sample_id}.png")
    with open(out / "annotations.jsonl", "w") as fh:
        for nid in sorted(ds.nodules):
            for rec in ds.nodules[nid].records:
                fh.write(json.dumps({"nodule_id": nid, "rater": rec.rater,
                                     "malignancy": rec.malignancy,
                                     "attributes": rec.attributes}, sort_keys=True) + "\n")
    split: dict[str, list[str]] = {"train": [], "test": [], "excluded": []}
    for nid in sorted(ds.nodules):
        tag = ds.nodules[nid].split
        if tag in split:
            split[tag].append(nid)
    if any(split.values()):
        (out / "split.json").write_text(json.dumps(split, sort_keys=True))


def load_dataset(root: str | Path) -> NoduleDataset:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    fmt = root / "format.json"
    if fmt.exists():
        meta = json.loads(fmt.read_text())
        if meta.get("schema_version") != SCHEMA_VERSION:
            raise DataError(f"unsupported dataset schema {meta.get('schema_version')}")

    nodules: dict[str, Nodule] = {}
    ann = root / "annotations.jsonl"
    if ann.exists():
        with open(ann) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"annotations.jsonl line {lineno}: {exc}") from None
                try:
                    rec = AnnotationRecord(rater=str(obj["rater"]),
                                           malignancy=int(obj["malignancy"]),
                                           attributes={k: int(v) for k, v in obj["attributes"].items()})
                    rec.validate()
                except DataError as exc:
                    raise DataError(f"annotations.jsonl line {lineno}: {exc}") from None
                except (KeyError, TypeError, ValueError) as exc:
                    raise DataError(f"annotations.jsonl line {lineno}: malformed record ({exc})") from None
                nid = str(obj["nodule_id"])
                nodules.setdefault(nid, Nodule(nodule_id=nid, records=[])).records.append(rec)
    for nod in nodules.values():
        if len(nod.records) >= 3:
            nod.aggregated = aggregate_labels(nod.records)

    samples: list[Sample] = []
    img_dir = root / "images"
    if img_dir.is_dir():
        for path in sorted(img_dir.glob("*.png")):
            sid = path.stem
            nid = sid.rsplit("_", 1)[0]
            arr = np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0
            if nid not in nodules:
                nodules[nid] = Nodule(nodule_id=nid, records=[])
            samples.append(Sample(sample_id=sid, nodule_id=nid, image=arr))

    ds = NoduleDataset(nodules, samples, root=root)
    split_file = root / "split.json"
    if split_file.exists():
        split = json.loads(split_file.read_text())
        for tag, ids in split.items():
            for nid in ids:
                if nid in ds.nodules:
                    ds.nodules[nid].split = tag
    return ds


def write_oracle(ds: NoduleDataset, path: str | Path,
                 sample_ids: list[str] | None = None) -> None:
    """Ground-truth answer file consumed by the file-based annotation source."""
    ids = sample_ids if sample_ids is not None else [s.sample_id for s in ds.samples]
    with open(path, "w") as fh:
        for sid in sorted(ids):
            nod = ds.nodules[ds.sample(sid).nodule_id]
            if nod.aggregated is None or nod.aggregated.malignancy_class is None:
                continue
            fh.write(json.dumps({"sample_id": sid,
                                 "malignancy": nod.aggregated.malignancy_class,
                                 "attributes": nod.aggregated.attributes},
                                sort_keys=True) + "\n")
