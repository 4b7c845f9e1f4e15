"""Procedural multi-domain segmentation scenes.

Scenes are a sky band over a ground plane with axis-aligned blocks and discs
drawn on top, so every label boundary is known exactly. Target domains are
made by parametric appearance shifts whose magnitudes go into a sidecar file
that only evaluation code reads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from .blob import atomic_write
from .errors import InvalidInputError, ParameterError
from .spectrum import Image

CLASS_NAMES = ("background", "ground", "block", "disc")
SHIFT_KINDS = ("brightness", "color_cast", "gaussian_noise", "blur", "gamma")

# base RGB per class; per-scene jitter and pixel texture are added on top
_PALETTE = np.array([
    [0.55, 0.70, 0.90],
    [0.45, 0.40, 0.25],
    [0.75, 0.30, 0.25],
    [0.30, 0.65, 0.35],
])
_CAST = np.array([0.6, 0.15, -0.45])


def derive_seed(root: int, *names) -> int:
    """Stable 63-bit seed from a root seed and a path of names."""
    key = "/".join([str(int(root))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    cls: int = 4
    seed: int = 0
    n_blocks: tuple = (1, 3)
    n_discs: tuple = (1, 2)
    block_size: tuple = (8, 20)
    disc_radius: tuple = (4, 9)
    ground: bool = True
    horizon: tuple = (0.40, 0.55)
    texture: float = 0.03
    jitter: float = 0.05

    def __post_init__(self):
        if self.height < 2 or self.width < 2:
            raise ParameterError("scene must be at least 2x2")
        if self.cls != len(CLASS_NAMES):
            raise ParameterError(f"the scene renderer draws {len(CLASS_NAMES)} classes")


@dataclass(frozen=True)
class DomainShift:
    kind: str
    magnitude: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ParameterError(f"unknown shift kind {self.kind!r}; expected one of {SHIFT_KINDS}")
        if not self.magnitude >= 0:
            raise ParameterError(f"shift magnitude must be >= 0, got {self.magnitude}")


def disc_mask(height: int, width: int, cy: float, cx: float, radius: float) -> np.ndarray:
    rr, cc = np.mgrid[0:height, 0:width]
    return (rr - cy) ** 2 + (cc - cx) ** 2 <= radius ** 2


def render_scene(spec: SceneSpec, rng: np.random.Generator, tag: Optional[str] = None) -> Image:
    h, w = spec.height, spec.width
    labels = np.zeros((h, w), dtype=np.int64)
    if spec.ground:
        horizon = int(round(rng.uniform(*spec.horizon) * h))
        labels[horizon:] = 1
    for _ in range(rng.integers(spec.n_blocks[0], spec.n_blocks[1] + 1)):
        bh, bw = rng.integers(spec.block_size[0], spec.block_size[1] + 1, size=2)
        r0 = rng.integers(0, max(1, h - bh + 1))
        c0 = rng.integers(0, max(1, w - bw + 1))
        labels[r0:r0 + bh, c0:c0 + bw] = 2
    for _ in range(rng.integers(spec.n_discs[0], spec.n_discs[1] + 1)):
        rad = rng.uniform(*spec.disc_radius)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        labels[disc_mask(h, w, cy, cx, rad)] = 3

    palette = np.clip(_PALETTE + rng.uniform(-spec.jitter, spec.jitter, _PALETTE.shape), 0, 1)
    pixels = palette[labels]
    # sky darkens slightly toward the top
    shade = np.linspace(-0.08, 0.0, h)[:, None, None]
    pixels = np.where((labels == 0)[..., None], pixels + shade, pixels)
    pixels = pixels + rng.normal(0.0, spec.texture, pixels.shape)
    return Image(np.clip(pixels, 0.0, 1.0), labels, tag)


def gen_source(spec: SceneSpec, n: int, stream: str = "source") -> list[Image]:
    """``n`` labelled scenes; image i depends only on (spec.seed, stream, i)."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    return [render_scene(spec, np.random.default_rng(derive_seed(spec.seed, stream, i)), "source")
            for i in range(n)]


def apply_shift(image: Image, shift: DomainShift) -> Image:
    """Appearance-only transform; labels pass through untouched."""
    m = float(shift.magnitude)
    if m == 0:
        return Image(image.pixels.copy(), image.labels, image.domain_tag)
    px = image.pixels
    if shift.kind == "brightness":
        out = px * (1.0 + m)
    elif shift.kind == "color_cast":
        out = px + m * _CAST[: px.shape[2]]
    elif shift.kind == "gaussian_noise":
        out = px + np.random.default_rng(shift.seed).normal(0.0, m, px.shape)
    elif shift.kind == "blur":
        out = ndimage.gaussian_filter(px, sigma=(m, m, 0), mode="reflect")
    else:  # gamma
        out = np.power(px, 1.0 + m)
    return Image(np.clip(out, 0.0, 1.0), image.labels, image.domain_tag)


# ---------------------------------------------------------------- benchmark

@dataclass(frozen=True)
class ShiftPlan:
    kind: str
    magnitudes: tuple
    count: int

    def magnitude_for(self, i: int) -> float:
        return float(self.magnitudes[i % len(self.magnitudes)])


def default_compound_plan() -> list[ShiftPlan]:
    return [
        ShiftPlan("brightness", tuple(np.round(np.linspace(0.1, 1.2, 12), 4)), 12),
        ShiftPlan("color_cast", tuple(np.round(np.linspace(0.05, 0.6, 12), 4)), 12),
        ShiftPlan("gamma", tuple(np.round(np.linspace(0.2, 2.4, 12), 4)), 12),
    ]


def default_open_plan() -> list[ShiftPlan]:
    return [ShiftPlan("gaussian_noise", tuple(np.round(np.linspace(0.02, 0.3, 12), 4)), 12)]


def _to_u8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)


def save_image(path, pixels: np.ndarray) -> None:
    PILImage.fromarray(_to_u8(pixels)).save(path)


def save_labels(path, labels: np.ndarray) -> None:
    PILImage.fromarray(labels.astype(np.uint8), mode="L").save(path)


def load_image(path) -> np.ndarray:
    """PNG or PPM (8-bit) as an H x W x 3 float array in [0, 1]."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def load_labels(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im, dtype=np.int64)


def gen_benchmark(spec: SceneSpec, n_source: int = 40,
                  compound_plan: Sequence[ShiftPlan] = None,
                  open_plan: Sequence[ShiftPlan] = None,
                  out_dir=None):
    """Generate source/compound/open splits.

    Returns ``(manifest, sidecar, images)`` where ``images`` maps id -> Image
    (with labels, for in-memory use). When ``out_dir`` is given the images,
    label maps, ``manifest.json`` and ``sidecar.json`` are written there; the
    manifest is written last so a failed run never leaves one behind.
    """
    compound_plan = list(compound_plan if compound_plan is not None else default_compound_plan())
    open_plan = list(open_plan if open_plan is not None else default_open_plan())
    if not compound_plan or not open_plan:
        raise ParameterError("compound and open plans must be non-empty")
    for p in compound_plan + open_plan:
        DomainShift(p.kind, max(p.magnitudes))

    entries, hidden, images = [], {}, {}
    for i, im in enumerate(gen_source(spec, n_source)):
        iid = f"source_{i:04d}"
        images[iid] = im
        entries.append({"id": iid, "split": "source", "image": f"images/{iid}.png",
                        "labels": f"labels/{iid}.png"})
    for split, plan in (("compound", compound_plan), ("open", open_plan)):
        for p in plan:
            for i in range(p.count):
                iid = f"{split}_{p.kind}_{i:04d}"
                base = render_scene(spec, np.random.default_rng(derive_seed(spec.seed, split, p.kind, i)))
                shift = DomainShift(p.kind, p.magnitude_for(i), derive_seed(spec.seed, "shift", iid))
                im = apply_shift(base, shift)
                images[iid] = Image(im.pixels, im.labels, f"{split}:{p.kind}")
                entries.append({"id": iid, "split": split, "image": f"images/{iid}.png"})
                hidden[iid] = {"kind": p.kind, "magnitude": shift.magnitude, "shift_seed": shift.seed,
                               "labels": f"labels/{iid}.png"}

    manifest = {
        "scene": json.loads(json.dumps(asdict(spec))),
        "counts": {s: sum(e["split"] == s for e in entries) for s in ("source", "compound", "open")},
        "entries": entries,
    }
    sidecar = {"plans": {"compound": [asdict(p) for p in compound_plan],
                         "open": [asdict(p) for p in open_plan]},
               "images": hidden}
    if out_dir is not None:
        write_benchmark(out_dir, manifest, sidecar, images)
    return manifest, sidecar, images


def write_benchmark(out_dir, manifest: dict, sidecar: dict, images: dict) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for iid, im in images.items():
        save_image(out / "images" / f"{iid}.png", im.pixels)
        save_labels(out / "labels" / f"{iid}.png", im.labels)
    atomic_write(out / "sidecar.json", json.dumps(sidecar, indent=1, sort_keys=True))
    atomic_write(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))


def load_benchmark(root, with_hidden: bool = False):
    """Read a benchmark directory back as ``(manifest, sidecar, images)``.

    Target images come without labels unless ``with_hidden`` is set, in which
    case the sidecar is read too and its label maps are attached. Only
    evaluation should ask for that.
    """
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise InvalidInputError(f"no manifest.json under {root}")
    manifest = json.loads(mpath.read_text())
    sidecar = None
    if with_hidden:
        spath = root / "sidecar.json"
        if not spath.exists():
            raise InvalidInputError(f"no sidecar.json under {root}")
        sidecar = json.loads(spath.read_text())
    images = {}
    for e in manifest["entries"]:
        px = load_image(root / e["image"])
        labels = None
        if "labels" in e:
            labels = load_labels(root / e["labels"])
        elif sidecar is not None:
            labels = load_labels(root / sidecar["images"][e["id"]]["labels"])
        images[e["id"]] = Image(px, labels, e["split"])
    return manifest, sidecar, images


def split_images(manifest: dict, images: dict, split: str) -> dict:
    return {e["id"]: images[e["id"]] for e in manifest["entries"] if e["split"] == split}


def far_ids(sidecar: dict, ids: Sequence[str], fraction: float = 1 / 3) -> list[str]:
    """Images whose magnitude is in the top ``fraction`` of their kind's grid."""
    if not 0 < fraction <= 1:
        raise ParameterError("fraction must be in (0, 1]")
    by_kind: dict[str, set] = {}
    for i in ids:
        h = sidecar["images"][i]
        by_kind.setdefault(h["kind"], set()).add(h["magnitude"])
    cut = {}
    for kind, mags in by_kind.items():
        mags = sorted(mags)
        cut[kind] = mags[len(mags) - max(1, int(round(len(mags) * fraction)))]
    return [i for i in ids if sidecar["images"][i]["magnitude"] >= cut[sidecar["images"][i]["kind"]]]


def eval_domains(manifest: dict, sidecar: dict, images: dict) -> dict:
    """Labelled evaluation sets: compound, its far third, open, and C+O."""
    comp = sorted(split_images(manifest, images, "compound"))
    opn = sorted(split_images(manifest, images, "open"))
    for i in comp + opn:
        if images[i].labels is None:
            raise InvalidInputError(f"{i} has no labels; load the benchmark with its sidecar")
    pick = lambda ids: [images[i] for i in ids]
    return {"compound": pick(comp), "compound_far": pick(far_ids(sidecar, comp)),
            "open": pick(opn), "C+O": pick(comp + opn)}
