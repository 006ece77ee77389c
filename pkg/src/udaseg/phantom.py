"""Synthetic two-modality "abdominal" phantoms, preprocessing and augmentation.

Anatomy is a stack of axial slices: an elliptical body containing ``K - 1``
disjoint ellipsoidal organs.  A domain style maps tissue classes to
intensities, multiplies by a smooth bias field, blurs and adds noise.  Style A
and style B use inverted look-up tables (``1 - value``), so every tissue
contrast flips between the two domains.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import storage

DOMAIN_TAGS = ("A", "B", "synthetic_AB", "pseudo_B")

AIR, BODY = 0, 1  # tissue indices; organ k lives at tissue index k + 1


class InfeasibleSpecError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    grid_shape: tuple = (8, 64, 64)
    num_classes: int = 5
    organ_scale: tuple = (1.0, 0.85, 0.75, 0.65)
    spacing: tuple = (4.0, 1.5, 1.5)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", tuple(int(g) for g in self.grid_shape))
        object.__setattr__(self, "organ_scale", tuple(float(s) for s in self.organ_scale))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.grid_shape) != 3 or min(self.grid_shape[1:]) < 16:
            raise ValueError(f"grid_shape must be (slices, H, W) with H, W >= 16, got {self.grid_shape}")
        if self.grid_shape[0] < 1:
            raise ValueError("need at least one slice")
        if any(not 0.0 < s <= 1.0 for s in self.organ_scale):
            raise ValueError(f"organ_scale entries must lie in (0, 1], got {self.organ_scale}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    def scale_for(self, organ: int) -> float:
        # organ is 1-based; reuse the last scale when K exceeds the table
        return self.organ_scale[min(organ - 1, len(self.organ_scale) - 1)]


@dataclass
class LabeledVolume:
    intensities: np.ndarray | None
    labels: np.ndarray
    spacing: tuple
    domain_tag: str = "A"
    id: str = ""
    meta: dict = field(default_factory=dict)
    tissue: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.intensities is not None:
            self.intensities = np.asarray(self.intensities)
            if self.intensities.shape != self.labels.shape:
                raise ValueError(
                    f"intensities shape {self.intensities.shape} != labels shape {self.labels.shape}"
                )
        if len(self.spacing) != self.labels.ndim or min(self.spacing) <= 0:
            raise ValueError(f"spacing {self.spacing} invalid for shape {self.labels.shape}")
        if self.domain_tag not in DOMAIN_TAGS:
            raise ValueError(f"unknown domain_tag {self.domain_tag!r}")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    @property
    def shape(self):
        return self.labels.shape

    def save(self, path, extra=None):
        storage.write_volume(path, self.intensities, self.labels, self.spacing, self.domain_tag,
                             meta={"id": self.id, **self.meta}, extra=extra)

    @classmethod
    def load(cls, path) -> "LabeledVolume":
        d = storage.read_volume(path)
        meta = d["meta"]
        vid = meta.pop("id", "")
        v = cls(d["intensities"], d["labels"], d["spacing"], d["domain_tag"], vid, meta)
        if "confidence" in d:
            v.meta["confidence"] = d["confidence"]
        return v


@dataclass(frozen=True)
class DomainStyle:
    name: str
    intensity_lut: tuple  # indexed by tissue: air, body, organ 1, organ 2, ...
    bias_amplitude: float = 0.0
    bias_order: int = 2
    noise_sigma: float = 0.0
    blur_sigma: float = 0.0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("noise_sigma and blur_sigma must be >= 0")
        if not 0 <= self.bias_amplitude < 1:
            raise ValueError("bias_amplitude must lie in [0, 1)")


def organ_levels(num_classes: int, body: float = 0.35) -> np.ndarray:
    """Evenly spaced organ intensities in [0.1, 0.9], skipping the level nearest ``body``."""
    n = num_classes - 1
    grid = np.linspace(0.9, 0.1, n + 1)
    return np.delete(grid, int(np.argmin(np.abs(grid - body))))


def default_styles(num_classes: int = 5) -> tuple[DomainStyle, DomainStyle]:
    """CT-like style A and an MRI-like style B whose LUT is A's inverted (1 - value)."""
    lut_a = np.array([0.0, 0.35, *organ_levels(num_classes, 0.35)])
    a = DomainStyle("A", tuple(lut_a), bias_amplitude=0.05, noise_sigma=0.02, blur_sigma=0.5)
    b = DomainStyle("B", tuple(1.0 - lut_a), bias_amplitude=0.25, noise_sigma=0.04, blur_sigma=0.8)
    return a, b


def _ellipse_grid(shape):
    d, h, w = shape
    z, y, x = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    return z.astype(float), y.astype(float), x.astype(float)


def generate_anatomy(spec: PhantomSpec, seed: int, max_tries: int = 200) -> LabeledVolume:
    d, h, w = spec.grid_shape
    k = spec.num_classes
    rng = np.random.default_rng([int(spec.seed), int(seed)])
    z, y, x = _ellipse_grid(spec.grid_shape)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    by, bx = 0.42 * h, 0.46 * w
    body2d = ((y[0] - cy) / by) ** 2 + ((x[0] - cx) / bx) ** 2 <= 1.0

    base = 0.14 * min(h, w)
    organ_area = sum(np.pi * (base * spec.scale_for(o)) ** 2 for o in range(1, k))
    if organ_area > 0.55 * np.pi * by * bx or base * spec.scale_for(k - 1) < 1.5:
        raise InfeasibleSpecError(f"grid {spec.grid_shape} too small to fit {k - 1} organs")

    labels = np.zeros(spec.grid_shape, dtype=np.uint8)
    # one-voxel margin keeps organs apart
    occupied = np.zeros(spec.grid_shape, dtype=bool)
    for organ in range(1, k):
        r = base * spec.scale_for(organ)
        for _ in range(max_tries):
            ry = r * rng.uniform(0.8, 1.2)
            rx = r * rng.uniform(0.8, 1.2)
            rz = d * rng.uniform(0.5, 0.9)
            theta = rng.uniform(0, np.pi)
            oy = cy + rng.uniform(-1, 1) * max(by - ry, 0) * 0.8
            ox = cx + rng.uniform(-1, 1) * max(bx - rx, 0) * 0.8
            oz = (d - 1) / 2 + rng.uniform(-0.25, 0.25) * d
            ct, st = np.cos(theta), np.sin(theta)
            u = ((y - oy) * ct + (x - ox) * st) / ry
            v = (-(y - oy) * st + (x - ox) * ct) / rx
            blob = u**2 + v**2 + ((z - oz) / rz) ** 2 <= 1.0
            blob &= body2d[None]
            if blob.sum() < 4 or (blob & occupied).any():
                continue
            # keep the largest component so every organ is one connected blob
            lab, n = ndimage.label(blob)
            if n > 1:
                sizes = ndimage.sum(blob, lab, range(1, n + 1))
                blob = lab == (1 + int(np.argmax(sizes)))
            labels[blob] = organ
            occupied |= ndimage.binary_dilation(blob)
            break
        else:
            raise InfeasibleSpecError(f"could not place organ {organ} after {max_tries} tries")

    tissue = np.where(body2d[None], BODY, AIR).astype(np.uint8)
    tissue = np.where(labels > 0, labels + 1, tissue).astype(np.uint8)
    return LabeledVolume(None, labels, spec.spacing, "A", f"seed{seed}", {"anatomy_seed": int(seed)}, tissue)


def _bias_field(shape, style: DomainStyle, rng) -> np.ndarray:
    if style.bias_amplitude == 0:
        return np.ones(shape)
    _, h, w = shape
    yy = np.linspace(-1, 1, h)[:, None]
    xx = np.linspace(-1, 1, w)[None, :]
    f = np.zeros((h, w))
    for i in range(style.bias_order + 1):
        for j in range(style.bias_order + 1 - i):
            if i + j:
                f += rng.normal() * np.cos(np.pi * i * (yy + 1) / 2) * np.cos(np.pi * j * (xx + 1) / 2)
    f /= max(np.abs(f).max(), 1e-12)
    return np.broadcast_to(1.0 + style.bias_amplitude * f, shape)


def render_modality(anatomy: LabeledVolume, style: DomainStyle, seed: int) -> LabeledVolume:
    if anatomy.tissue is None:
        raise ValueError("anatomy has no tissue map; build it with generate_anatomy")
    lut = np.asarray(style.intensity_lut, dtype=float)
    if lut.size < int(anatomy.tissue.max()) + 1:
        raise ValueError(f"style {style.name} LUT has {lut.size} entries, anatomy needs {anatomy.tissue.max() + 1}")
    rng = np.random.default_rng(seed)
    img = lut[anatomy.tissue] * _bias_field(anatomy.shape, style, rng)
    if style.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(0, style.blur_sigma, style.blur_sigma), mode="nearest")
    if style.noise_sigma > 0:
        img = img + rng.normal(0.0, style.noise_sigma, size=img.shape)
    return replace(anatomy, intensities=img.astype(np.float32), labels=anatomy.labels.copy(),
                   domain_tag=style.name if style.name in ("A", "B") else anatomy.domain_tag,
                   meta={**anatomy.meta, "style": style.name, "render_seed": int(seed)})


@dataclass
class VolumeRef:
    id: str
    path: str
    domain_tag: str
    seed: int


@dataclass
class DatasetManifest:
    root: str
    spec: dict
    seed: int
    source_train: list
    target_train: list
    paired_oracle: list  # list of (A ref, B ref)

    def all_ids(self):
        return {
            "source_train": [r.id for r in self.source_train],
            "target_train": [r.id for r in self.target_train],
            "paired_oracle": [a.id for a, _ in self.paired_oracle],
        }

    def check(self):
        ids = self.all_ids()
        for a, b in (("source_train", "target_train"), ("source_train", "paired_oracle"),
                     ("target_train", "paired_oracle")):
            shared = set(ids[a]) & set(ids[b])
            if shared:
                raise ValueError(f"anatomy ids shared between {a} and {b}: {sorted(shared)}")
        for ra, rb in self.paired_oracle:
            if ra.id != rb.id:
                raise ValueError(f"oracle pair mismatch {ra.id} / {rb.id}")

    def load(self, ref: VolumeRef) -> LabeledVolume:
        return LabeledVolume.load(Path(self.root) / ref.path)

    def to_dict(self):
        return {
            "spec": self.spec,
            "seed": self.seed,
            "source_train": [asdict(r) for r in self.source_train],
            "target_train": [asdict(r) for r in self.target_train],
            "paired_oracle": [[asdict(a), asdict(b)] for a, b in self.paired_oracle],
        }

    def digest(self) -> str:
        return storage.hash_obj(self.to_dict())

    def save(self, path=None):
        path = Path(path or Path(self.root) / "manifest.json")
        path.write_text(json.dumps({**self.to_dict(), "hash": self.digest()}, indent=2))
        return path

    @classmethod
    def load_file(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        m = cls(
            root=str(path.parent),
            spec=d["spec"],
            seed=d["seed"],
            source_train=[VolumeRef(**r) for r in d["source_train"]],
            target_train=[VolumeRef(**r) for r in d["target_train"]],
            paired_oracle=[(VolumeRef(**a), VolumeRef(**b)) for a, b in d["paired_oracle"]],
        )
        m.check()
        return m


def build_dataset(spec: PhantomSpec, n_source: int, n_target: int, n_oracle: int, seed: int,
                  out_dir, styles=None) -> DatasetManifest:
    if min(n_source, n_target, n_oracle) < 1:
        raise ValueError("n_source, n_target and n_oracle must all be >= 1")
    style_a, style_b = styles or default_styles(spec.num_classes)
    out_dir = Path(out_dir)
    n_total = n_source + n_target + n_oracle
    anat_seeds = np.random.SeedSequence([int(seed), int(spec.seed)]).generate_state(n_total)
    render_seeds = np.random.SeedSequence([int(seed), int(spec.seed), 1]).generate_state(2 * n_total)
    splits = {"source_train": [], "target_train": [], "paired_oracle": []}

    def emit(i, style, split):
        anat = generate_anatomy(spec, int(anat_seeds[i]))
        vid = f"anat{i:04d}"
        rs = int(render_seeds[2 * i + (style.name == "B")])
        vol = render_modality(anat, style, rs)
        vol.id = vid
        rel = f"volumes/{split}/{vid}_{style.name}.vol"
        vol.save(out_dir / rel)
        return VolumeRef(vid, rel, style.name, rs)

    for i in range(n_total):
        if i < n_source:
            splits["source_train"].append(emit(i, style_a, "source_train"))
        elif i < n_source + n_target:
            splits["target_train"].append(emit(i, style_b, "target_train"))
        else:
            splits["paired_oracle"].append((emit(i, style_a, "paired_oracle"), emit(i, style_b, "paired_oracle")))

    manifest = DatasetManifest(str(out_dir), {**asdict(spec), "styles": [asdict(style_a), asdict(style_b)]},
                               int(seed), **splits)
    manifest.check()
    manifest.save()
    return manifest


def _resize_slices(arr, size, order):
    d, h, w = arr.shape
    th, tw = size
    # center-crop to target aspect ratio before resizing
    if h * tw != w * th:
        if h * tw > w * th:
            nh = int(round(w * th / tw))
            o = (h - nh) // 2
            arr = arr[:, o : o + nh]
        else:
            nw = int(round(h * tw / th))
            o = (w - nw) // 2
            arr = arr[:, :, o : o + nw]
        d, h, w = arr.shape
    if (h, w) == (th, tw):
        return arr, (h, w)
    out = ndimage.zoom(arr, (1, th / h, tw / w), order=order, mode="nearest", grid_mode=True)
    return out, (h, w)


def zscore(x: np.ndarray, scope: str = "volume", mask=None):
    """Return ``(normalised, constant_flag)``."""
    x = x.astype(np.float64)
    if scope == "volume":
        mu, sd = x.mean(), x.std()
    elif scope == "slice":
        mu = x.mean(axis=(-2, -1), keepdims=True)
        sd = x.std(axis=(-2, -1), keepdims=True)
    elif scope == "foreground":
        sel = x[mask] if mask is not None and mask.any() else x
        mu, sd = sel.mean(), sel.std()
    else:
        raise ValueError(f"unknown z-score scope {scope!r}")
    sd = np.asarray(sd)
    if np.any(sd < 1e-12):
        if scope == "slice":
            safe = np.where(sd < 1e-12, 1.0, sd)
            return np.where(sd < 1e-12, 0.0, (x - mu) / safe), True
        return np.zeros_like(x), True
    return (x - mu) / sd, False


def preprocess(v: LabeledVolume, target_size=(64, 64), zscore_scope: str = "volume") -> LabeledVolume:
    img, (h0, w0) = _resize_slices(np.asarray(v.intensities, dtype=np.float64), target_size, order=1)
    lab, _ = _resize_slices(v.labels, target_size, order=0)
    sz, sy, sx = v.spacing
    spacing = (sz, sy * h0 / target_size[0], sx * w0 / target_size[1])
    mask = (lab > 0) if zscore_scope == "foreground" else None
    img, constant = zscore(img, zscore_scope, mask)
    meta = dict(v.meta)
    if constant:
        warnings.warn(f"volume {v.id!r} has constant intensity; z-score output zero-filled", RuntimeWarning)
        meta["zscore_warning"] = True
    return replace(v, intensities=img.astype(np.float32), labels=lab.astype(v.labels.dtype),
                   spacing=spacing, meta=meta)


@dataclass(frozen=True)
class AugmentConfig:
    p_rotate: float = 0.2
    rotate_range: tuple = (-30.0, 30.0)
    p_scale: float = 0.2
    scale_range: tuple = (0.85, 1.25)
    p_noise: float = 0.15
    noise_range: tuple = (0.0, 0.1)
    p_blur: float = 0.1
    blur_range: tuple = (0.5, 1.0)
    p_brightness: float = 0.15
    brightness_range: tuple = (0.75, 1.25)
    p_contrast: float = 0.15
    contrast_range: tuple = (0.75, 1.25)
    p_mirror: float = 0.5
    mirror_axes: tuple = (-1, -2)

    @classmethod
    def disabled(cls):
        return cls(p_rotate=0, p_scale=0, p_noise=0, p_blur=0, p_brightness=0, p_contrast=0, p_mirror=0)


def _inplane_affine(arr, matrix, order, cval, mode):
    h, w = arr.shape[-2:]
    c = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = c - matrix @ c
    out = np.empty_like(arr)
    for idx in np.ndindex(arr.shape[:-2]):
        out[idx] = ndimage.affine_transform(arr[idx], matrix, offset=offset, order=order, mode=mode, cval=cval)
    return out


def augment_arrays(img: np.ndarray, lab: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator):
    """Augment an intensity/label pair; geometry acts on the last two axes."""
    img = np.asarray(img, dtype=np.float32)
    lab = np.asarray(lab)
    if rng.random() < cfg.p_rotate:
        angle = rng.uniform(*cfg.rotate_range)
        if np.isclose(angle % 90, 0) or np.isclose(angle % 90, 90):
            k = int(round(angle / 90)) % 4
            img = np.rot90(img, k, axes=(-2, -1)).copy()
            lab = np.rot90(lab, k, axes=(-2, -1)).copy()
        else:
            t = np.deg2rad(angle)
            m = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
            img = _inplane_affine(img, m, 1, 0.0, "nearest")
            lab = _inplane_affine(lab, m, 0, 0, "constant")
    if rng.random() < cfg.p_scale:
        s = rng.uniform(*cfg.scale_range)
        m = np.eye(2) / s
        img = _inplane_affine(img, m, 1, 0.0, "nearest")
        lab = _inplane_affine(lab, m, 0, 0, "constant")
    if rng.random() < cfg.p_noise:
        img = img + rng.normal(0, rng.uniform(*cfg.noise_range), img.shape).astype(np.float32)
    if rng.random() < cfg.p_blur:
        sig = rng.uniform(*cfg.blur_range)
        img = ndimage.gaussian_filter(img, sigma=[0] * (img.ndim - 2) + [sig, sig])
    if rng.random() < cfg.p_brightness:
        img = img * rng.uniform(*cfg.brightness_range)
    if rng.random() < cfg.p_contrast:
        mu = img.mean()
        img = (img - mu) * rng.uniform(*cfg.contrast_range) + mu
    for ax in cfg.mirror_axes:
        if rng.random() < cfg.p_mirror:
            img = np.flip(img, axis=ax)
            lab = np.flip(lab, axis=ax)
    return np.ascontiguousarray(img, dtype=np.float32), np.ascontiguousarray(lab)


def augment(v: LabeledVolume, cfg: AugmentConfig, seed: int) -> LabeledVolume:
    img, lab = augment_arrays(v.intensities, v.labels, cfg, np.random.default_rng(seed))
    return replace(v, intensities=img, labels=lab.astype(v.labels.dtype), meta=dict(v.meta))
