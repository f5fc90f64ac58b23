"""Datasets: volume files, manifests, fold plans, class weights and the
synthetic paired-volume generator."""

from __future__ import annotations

import contextlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, FormatError
from .preprocess import (
    CT_RANGE,
    MODALITIES,
    PET_RANGE,
    AcquisitionMeta,
    Volume,
    preprocess_study,
    suv_factor,
)

# ---------------------------------------------------------------------------
# MVOL volume files
# ---------------------------------------------------------------------------

MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1
_MVOL_HEADER = struct.Struct("<4sIIII3f3fBB")
_MAX_VOXELS = 2**31


def write_mvol(v: Volume, path) -> None:
    d, h, w = v.shape
    header = _MVOL_HEADER.pack(
        MVOL_MAGIC,
        MVOL_VERSION,
        d,
        h,
        w,
        *v.spacing,
        *v.origin,
        MODALITIES.index(v.modality),
        1 if v.photometric == "inverted" else 0,
    )
    Path(path).write_bytes(header + np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def read_mvol(path) -> Volume:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MVOL_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}", 0)
    if len(buf) < _MVOL_HEADER.size:
        raise FormatError(f"{path}: header truncated", len(buf))
    _, version, d, h, w, sx, sy, sz, ox, oy, oz, mod, photo = _MVOL_HEADER.unpack_from(buf)
    if version != MVOL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    n = d * h * w
    if n == 0 or n >= _MAX_VOXELS:
        raise FormatError(f"{path}: dimension overflow {d}x{h}x{w}", 8)
    if mod >= len(MODALITIES):
        raise FormatError(f"{path}: unknown modality code {mod}", _MVOL_HEADER.size - 2)
    if photo > 1:
        raise FormatError(f"{path}: unknown photometric flag {photo}", _MVOL_HEADER.size - 1)
    need = _MVOL_HEADER.size + 4 * n
    if len(buf) < need:
        raise FormatError(f"{path}: payload truncated, header declares {n} voxels", len(buf))
    if len(buf) > need:
        raise FormatError(f"{path}: {len(buf) - need} trailing bytes", need)
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_MVOL_HEADER.size).reshape(d, h, w)
    try:
        return Volume(
            data.astype(np.float32),
            (sx, sy, sz),
            (ox, oy, oz),
            MODALITIES[mod],
            "inverted" if photo else "standard",
        )
    except (ConfigError, DataError) as exc:
        raise FormatError(f"{path}: {exc}", 8) from exc


# ---------------------------------------------------------------------------
# manifests and studies
# ---------------------------------------------------------------------------


@dataclass
class Study:
    id: str
    label: int
    ct_path: str | None = None
    pet_path: str | None = None
    mask_path: str | None = None
    meta: AcquisitionMeta = field(default_factory=AcquisitionMeta)

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"study {self.id}: label must be 0 or 1, got {self.label}")


def _meta_to_json(m: AcquisitionMeta) -> dict:
    d = asdict(m)
    d.pop("tracer_half_life_min")
    return d


def write_manifest(studies: Sequence[Study], path) -> None:
    entries = [
        {
            "id": s.id,
            "ct_path": s.ct_path,
            "pet_path": s.pet_path,
            "mask_path": s.mask_path,
            "label": s.label,
            "meta": _meta_to_json(s.meta),
        }
        for s in studies
    ]
    Path(path).write_text(json.dumps(entries, indent=1) + "\n")


def read_manifest(path) -> list[Study]:
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed manifest: {exc}") from exc
    if not isinstance(entries, list):
        raise ConfigError(f"{path}: manifest must be a JSON array")
    studies, seen = [], set()
    for e in entries:
        try:
            meta = AcquisitionMeta(**e.get("meta", {}))
            s = Study(str(e["id"]), int(e["label"]), e["ct_path"], e["pet_path"], e.get("mask_path"), meta)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"{path}: bad manifest entry {e!r}: {exc}") from exc
        if s.id in seen:
            raise DataError(f"{path}: duplicate study id {s.id}")
        seen.add(s.id)
        # relative paths are relative to the manifest
        for attr in ("ct_path", "pet_path", "mask_path"):
            p = getattr(s, attr)
            if p is not None and not Path(p).is_absolute():
                setattr(s, attr, str(path.parent / p))
        studies.append(s)
    return studies


# ---------------------------------------------------------------------------
# in-memory dataset
# ---------------------------------------------------------------------------


class ArrayDataset:
    """Preprocessed studies held as stacked arrays.

    Index access goes through :meth:`batch`, which logs every index it
    serves and refuses indices that are currently withheld. The training
    harness relies on this to prove test splits stay untouched.
    """

    def __init__(self, ids: Sequence[str], ct: np.ndarray, pet: np.ndarray, labels: Sequence[int]):
        self.ids = list(ids)
        self.ct = np.asarray(ct, dtype=np.float32)
        self.pet = np.asarray(pet, dtype=np.float32)
        self._labels = np.asarray(labels, dtype=np.int64)
        n = len(self.ids)
        if not (self.ct.shape[0] == self.pet.shape[0] == self._labels.shape[0] == n):
            raise DataError("ids, volumes and labels disagree in length")
        if self.ct.shape != self.pet.shape:
            raise DataError("CT and PET stacks differ in shape")
        if len(set(self.ids)) != n:
            raise DataError("study ids must be unique")
        self._withheld: frozenset[int] = frozenset()
        self.access_log: set[int] = set()

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return tuple(self.ct.shape[1:])

    def _guard(self, idx: np.ndarray) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        if self._withheld and not self._withheld.isdisjoint(idx.tolist()):
            raise DataError("access to a withheld (test) study")
        self.access_log.update(idx.tolist())
        return idx

    def labels(self, idx) -> np.ndarray:
        return self._labels[self._guard(idx)]

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self._guard(idx)
        return self.ct[idx, None], self.pet[idx, None], self._labels[idx]

    @contextlib.contextmanager
    def withheld(self, idx) -> Iterator[None]:
        prev = self._withheld
        self._withheld = frozenset(int(i) for i in idx) | prev
        try:
            yield
        finally:
            self._withheld = prev

    def all_labels(self) -> np.ndarray:
        """Label vector for fold planning (planning precedes any training)."""
        return self._labels.copy()

    def subset(self, idx) -> "ArrayDataset":
        idx = np.asarray(idx)
        return ArrayDataset([self.ids[i] for i in idx], self.ct[idx], self.pet[idx], self._labels[idx])


def load_studies(studies: Sequence[Study], out_shape: Sequence[int], preprocessed: bool = False) -> ArrayDataset:
    """Read (and unless already done, preprocess) every study into memory."""
    cts, pets = [], []
    for s in studies:
        ct, pet = read_mvol(s.ct_path), read_mvol(s.pet_path)
        if not preprocessed:
            if s.mask_path is None:
                raise DataError(f"study {s.id}: a lung mask is required for preprocessing")
            pair = preprocess_study(ct, pet, read_mvol(s.mask_path), s.meta, out_shape)
            ct, pet = pair.ct, pair.pet
        if ct.shape != tuple(out_shape) or pet.shape != tuple(out_shape):
            raise DataError(f"study {s.id}: volume shape {ct.shape} != configured {tuple(out_shape)}")
        cts.append(ct.data)
        pets.append(pet.data)
    return ArrayDataset([s.id for s in studies], np.stack(cts), np.stack(pets), [s.label for s in studies])


# ---------------------------------------------------------------------------
# folds and weights
# ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    k: int
    seed: int
    groups: list[list[int]]

    def test(self, fold: int) -> list[int]:
        return sorted(self.groups[fold])

    def validation(self, fold: int) -> list[int]:
        return sorted(self.groups[(fold + 1) % self.k])

    def train(self, fold: int) -> list[int]:
        skip = {fold, (fold + 1) % self.k}
        return sorted(i for g, members in enumerate(self.groups) if g not in skip for i in members)

    def splits(self, fold: int) -> tuple[list[int], list[int], list[int]]:
        return self.train(fold), self.validation(fold), self.test(fold)

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "groups": [sorted(g) for g in self.groups]}


def _spread(extra: int, k: int, offset: int) -> np.ndarray:
    """0/1 flags marking which of ``k`` groups take one of ``extra`` leftovers.

    The flags form a balanced cyclic sequence: any run of ``m`` consecutive
    groups holds floor or ceil of ``m * extra / k`` leftovers.
    """
    j = (np.arange(k) - offset) % k
    return (j + 1) * extra // k - j * extra // k


def stratified_kfold(labels: Sequence[int], k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle, then split each class into ``k`` groups of near-equal size.

    Fold ``i`` tests on group ``i``, validates on group ``i + 1 mod k`` and
    trains on the rest (60/20/20 for ``k = 5``). Leftover members of a
    class are spread evenly around the ring of groups, so every split is
    within one sample of its share of each class.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("labels must be 0 or 1")
    counts = np.bincount(labels, minlength=2)
    if counts.min() < k:
        raise DataError(f"every class needs at least k={k} members, got counts {counts.tolist()}")
    order = np.random.default_rng(seed).permutation(len(labels))
    extra0 = _spread(int(counts[0] % k), k, 0)
    # rotate the second class's leftovers to even out total group sizes
    rot = min(range(k), key=lambda o: np.ptp(extra0 + _spread(int(counts[1] % k), k, o)))
    groups: list[list[int]] = [[] for _ in range(k)]
    for c, extra in ((0, extra0), (1, _spread(int(counts[1] % k), k, rot))):
        members = order[labels[order] == c]
        sizes = counts[c] // k + extra
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        for g in range(k):
            groups[g].extend(int(i) for i in members[bounds[g] : bounds[g + 1]])
    return FoldPlan(k, seed, groups)


def class_weights(labels: Sequence[int]) -> tuple[float, float]:
    """``n / (2 n_c)``: balanced classes weigh 1, the rarer class weighs more."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=2)
    if len(counts) != 2 or counts.min() == 0:
        raise DataError(f"class weights need both classes present, got counts {counts.tolist()}")
    n = counts.sum()
    return (float(n / (2 * counts[0])), float(n / (2 * counts[1])))


# ---------------------------------------------------------------------------
# synthetic XOR volumes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthParams:
    """Paired volumes whose label is carried only by the cross-modal amplitude product.

    Each study draws a label ``y`` and a sign ``s``; a blob at the same spot
    in both volumes has CT amplitude ``s*delta + noise`` and PET amplitude
    ``s*(2y-1)*delta + noise``. Either modality alone is label-independent.
    Intensities are expressed in normalized [0, 1] units and written out as
    HU / Bq/ml so the full preprocessing pipeline recovers them.
    """

    n_studies: int = 600
    shape: tuple[int, int, int] = (32, 32, 32)
    blob_radius: float = 6.0
    amplitude: float = 0.3
    noise_sigma: float = 0.15
    balance: float = 0.5
    seed: int = 0
    spacing: tuple[float, float, float] = (0.977, 0.977, 3.27)
    background_ct: float = 0.5
    background_pet: float = 0.4
    texture: float = 0.04

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.amplitude <= 0:
            raise ConfigError("amplitude must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be non-negative")
        if not 0 < self.balance < 1:
            raise ConfigError("balance must lie in (0, 1)")
        if self.n_studies < 1:
            raise ConfigError("n_studies must be positive")
        if min(self.shape) < 2 * self.blob_radius + 4:
            raise ConfigError(f"shape {self.shape} too small for blob radius {self.blob_radius}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["spacing"] = list(self.spacing)
        return d


@dataclass
class SynthStudy:
    id: str
    label: int
    sign: int
    amp_ct: float
    amp_pet: float
    center: tuple[float, float, float]
    ct: Volume | None = None
    pet: Volume | None = None
    mask: Volume | None = None
    meta: AcquisitionMeta = field(default_factory=AcquisitionMeta)


def _study_rng(p: SynthParams, index: int) -> np.random.Generator:
    return np.random.default_rng([p.seed & 0xFFFFFFFF, p.seed >> 32, index])


def _lung_mask(shape) -> np.ndarray:
    # one ellipsoid filling the central ~80% of each axis
    grids = np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")
    r2 = sum((g / 0.85) ** 2 for g in grids)
    return (r2 <= 1.0).astype(np.float32)


def _latent(p: SynthParams, index: int, rng: np.random.Generator) -> SynthStudy:
    y = int(rng.random() < p.balance)
    s = 1 if rng.random() < 0.5 else -1
    n_ct, n_pet = rng.standard_normal(2) * p.noise_sigma
    amp_ct = s * p.amplitude + n_ct
    amp_pet = s * (2 * y - 1) * p.amplitude + n_pet
    # blob centre inside the mask ellipsoid, shrunk by the radius
    shape = np.array(p.shape, dtype=np.float64)
    half = (shape - 1) / 2
    while True:
        u = rng.uniform(-1, 1, 3)
        if (u**2).sum() <= 1:
            break
    reach = np.maximum(0.85 * half - p.blob_radius - 1, 0)
    center = tuple(float(c) for c in half + u * reach)
    return SynthStudy(f"synth-{index:05d}", y, s, float(amp_ct), float(amp_pet), center)


def synth_latents(p: SynthParams) -> list[SynthStudy]:
    """Labels, signs, amplitudes and blob centres without rendering volumes."""
    return [_latent(p, i, _study_rng(p, i)) for i in range(p.n_studies)]


def _texture(rng, shape, scale) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=1.5, mode="nearest")
    return noise / (noise.std() + 1e-12) * scale


def render_study(p: SynthParams, index: int) -> SynthStudy:
    rng = _study_rng(p, index)
    st = _latent(p, index, rng)
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in p.shape], indexing="ij")
    dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, st.center)))
    blob = np.where(dist < p.blob_radius, 0.5 * (1 + np.cos(np.pi * dist / p.blob_radius)), 0.0)
    mask = _lung_mask(p.shape)
    ct = p.background_ct + _texture(rng, p.shape, p.texture) + st.amp_ct * blob
    pet = p.background_pet + _texture(rng, p.shape, p.texture) + st.amp_pet * blob
    ct = np.clip(ct, 0.0, 1.0)
    pet = np.clip(pet, 0.0, 1.0)
    # normalized units -> scanner units: CT stored with slope 1 / intercept -1024
    meta = AcquisitionMeta(rescale_slope=1.0, rescale_intercept=-1024.0)
    ct_raw = ct * (CT_RANGE[1] - CT_RANGE[0])
    pet_raw = pet * (PET_RANGE[1] - PET_RANGE[0]) / suv_factor(meta)
    st.ct = Volume(ct_raw.astype(np.float32), p.spacing, (0.0, 0.0, 0.0), "CT")
    st.pet = Volume(pet_raw.astype(np.float32), p.spacing, (0.0, 0.0, 0.0), "PET")
    st.mask = Volume(mask, p.spacing, (0.0, 0.0, 0.0), "MASK")
    st.meta = meta
    return st


def synth_generate(p: SynthParams) -> list[SynthStudy]:
    return [render_study(p, i) for i in range(p.n_studies)]


def synth_dataset(p: SynthParams, out_shape: Sequence[int]) -> ArrayDataset:
    """Render every study and push it through the preprocessing pipeline."""
    ids, cts, pets, labels = [], [], [], []
    for i in range(p.n_studies):
        st = render_study(p, i)
        pair = preprocess_study(st.ct, st.pet, st.mask, st.meta, out_shape)
        ids.append(st.id)
        cts.append(pair.ct.data)
        pets.append(pair.pet.data)
        labels.append(st.label)
    return ArrayDataset(ids, np.stack(cts), np.stack(pets), labels)


def write_synth(p: SynthParams, out_dir) -> list[Study]:
    """Write MVOL triples plus ``manifest.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    studies = []
    for i in range(p.n_studies):
        st = render_study(p, i)
        paths = {}
        for kind, v in (("ct", st.ct), ("pet", st.pet), ("mask", st.mask)):
            rel = f"volumes/{st.id}_{kind}.mvol"
            write_mvol(v, out_dir / rel)
            paths[kind] = rel
        studies.append(Study(st.id, st.label, paths["ct"], paths["pet"], paths["mask"], st.meta))
    write_manifest(studies, out_dir / "manifest.json")
    return studies
