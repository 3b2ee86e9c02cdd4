"""Detector training patches.

Three kinds of 5-channel (RGB + coordinate) 34x34 patches are produced:

* positive: a normal image and its coordinate map cropped at one position;
* coord-mismatch negative: a normal image crop paired with the coordinate
  crop of a *different* position;
* generated negative: a PatchDiff sample and its coordinate map cropped at
  one position.

All images are float tensors in [-1, 1] with shape (3, H, W).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
import torchvision.transforms.v2.functional as TF

from .config import AugmentPolicy

PATCH = 34
POSITIVE, NEGATIVE = 0, 1


@dataclass
class PatchBatch:
    patches: torch.Tensor  # (N, 5, 34, 34)
    labels: torch.Tensor  # (N,) long, POSITIVE or NEGATIVE
    provenance: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def positive(self) -> torch.Tensor:
        return self.labels == POSITIVE

    def histogram(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for tag in self.provenance:
            out[tag] = out.get(tag, 0) + 1
        return out


def make_coordinate_map(width: int, height: int) -> torch.Tensor:
    """(2, height, width) map; channel 0 is x, channel 1 is y, both spanning [-1, 1]."""
    if width < 2 or height < 2:
        raise ValueError(f"coordinate map needs at least 2 pixels per axis, got {width}x{height}")
    # (2i - (n - 1)) / (n - 1) in float64 is exactly symmetric, with 0 at an odd centre
    xs = ((2 * torch.arange(width, dtype=torch.float64) - (width - 1)) / (width - 1)).float()
    ys = ((2 * torch.arange(height, dtype=torch.float64) - (height - 1)) / (height - 1)).float()
    return torch.stack([xs.expand(height, width), ys[:, None].expand(height, width)])


def _check_size(image: torch.Tensor, size: int) -> None:
    h, w = image.shape[-2:]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than the {size}x{size} patch")


def random_offset(h: int, w: int, size: int, generator: torch.Generator | None) -> tuple[int, int]:
    top = int(torch.randint(0, h - size + 1, (1,), generator=generator))
    left = int(torch.randint(0, w - size + 1, (1,), generator=generator))
    return top, left


def _cut(x: torch.Tensor, pos: tuple[int, int], size: int) -> torch.Tensor:
    return x[:, pos[0]:pos[0] + size, pos[1]:pos[1] + size]


def crop_positive(image: torch.Tensor, coord: torch.Tensor, generator: torch.Generator | None = None,
                  size: int = PATCH) -> torch.Tensor:
    _check_size(image, size)
    pos = random_offset(*image.shape[-2:], size, generator)
    return torch.cat([_cut(image, pos, size), _cut(coord, pos, size)])


def crop_negative_mismatch(image: torch.Tensor, coord: torch.Tensor,
                           generator: torch.Generator | None = None, size: int = PATCH) -> torch.Tensor:
    """Content and coordinates cut at independently drawn, distinct positions."""
    _check_size(image, size)
    h, w = image.shape[-2:]
    if h == size and w == size:
        raise ValueError("a single crop position admits no coordinate mismatch")
    pos = random_offset(h, w, size, generator)
    other = random_offset(h, w, size, generator)
    while other == pos:
        other = random_offset(h, w, size, generator)
    return torch.cat([_cut(image, pos, size), _cut(coord, other, size)])


def crop_negative_generated(gen_image: torch.Tensor, coord: torch.Tensor,
                            generator: torch.Generator | None = None, size: int = PATCH) -> torch.Tensor:
    return crop_positive(gen_image, coord, generator, size)


# -- augmentation --------------------------------------------------------------

def _uniform(generator, lo: float, hi: float) -> float:
    return lo + (hi - lo) * float(torch.rand((), generator=generator))


def rotate(image: torch.Tensor, degrees: float) -> torch.Tensor:
    """Rotate about the centre with bilinear sampling and reflection padding."""
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    h, w = image.shape[-2:]
    # grid_sample works in normalised coords; correct for non-square aspect.
    mat = torch.tensor([[c, -s * h / w, 0.0], [s * w / h, c, 0.0]], dtype=image.dtype)
    grid = F.affine_grid(mat[None], [1, *image.shape], align_corners=False)
    return F.grid_sample(image[None], grid, mode="bilinear", padding_mode="reflection",
                         align_corners=False)[0]


def color_jitter(image: torch.Tensor, strength: float, generator: torch.Generator | None = None) -> torch.Tensor:
    """Random brightness/contrast/saturation in [1 - s, 1 + s] and hue shift in [-s/2, s/2]."""
    if strength <= 0:
        return image
    x = (image + 1) / 2
    lo, hi = max(0.0, 1 - strength), 1 + strength
    x = TF.adjust_brightness(x, _uniform(generator, lo, hi))
    x = TF.adjust_contrast(x, _uniform(generator, lo, hi))
    x = TF.adjust_saturation(x, _uniform(generator, lo, hi))
    hue = min(strength / 2, 0.5)
    x = TF.adjust_hue(x, _uniform(generator, -hue, hue))
    return (x.clamp(0, 1) * 2 - 1)


def augment(image: torch.Tensor, policy: AugmentPolicy, generator: torch.Generator | None = None) -> torch.Tensor:
    """Vertical flip, horizontal flip, rotation, then colour jitter with probability ``jitter_p``."""
    if policy.vflip and float(torch.rand((), generator=generator)) < 0.5:
        image = image.flip(-2)
    if policy.hflip and float(torch.rand((), generator=generator)) < 0.5:
        image = image.flip(-1)
    if policy.rotation > 0:
        angle = _uniform(generator, -policy.rotation, policy.rotation)
        image = rotate(image, angle)
    if policy.jitter_p > 0 and float(torch.rand((), generator=generator)) < policy.jitter_p:
        image = color_jitter(image, policy.jitter_strength, generator)
    return image


def resize(image: torch.Tensor, size: int) -> torch.Tensor:
    if image.shape[-1] == size and image.shape[-2] == size:
        return image
    squeeze = image.dim() == 3
    x = image[None] if squeeze else image
    x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False,
                      antialias=x.shape[-1] > size)
    return x[0] if squeeze else x


# -- batches -------------------------------------------------------------------

def _pick(pool, count: int, generator) -> list:
    if len(pool) < count:
        raise ValueError(f"need at least {count} source images, got {len(pool)}")
    return [pool[int(i)] for i in torch.randperm(len(pool), generator=generator)[:count]]


def build_batch(normal_imgs, generated_imgs_by_level: dict[int, list], generator: torch.Generator | None = None,
                *, input_size: int | None = None, augment_normal: AugmentPolicy | None = None,
                augment_generated: AugmentPolicy | None = None, patches_per_group: int = 128,
                images_per_group: int = 4, k: int | None = None) -> PatchBatch:
    """Assemble one training batch of ``patches_per_group * (k + 2)`` patches.

    Groups: positives from ``images_per_group`` normal images, mismatch
    negatives from another draw of normal images, and one group of generated
    negatives per PatchDiff level.  Each source image is augmented, resized to
    ``input_size`` and then cropped ``patches_per_group / images_per_group``
    times.
    """
    if k is not None and k != len(generated_imgs_by_level):
        raise ValueError(f"k={k} but {len(generated_imgs_by_level)} generated levels were given")
    if patches_per_group % images_per_group:
        raise ValueError("patches_per_group must be a multiple of images_per_group")
    per_image = patches_per_group // images_per_group

    def prepare(img, policy):
        if policy is not None:
            img = augment(img, policy, generator)
        return resize(img, input_size) if input_size else img

    patches, labels, prov = [], [], []
    coords: dict[tuple[int, int], torch.Tensor] = {}

    def coord_for(img):
        key = tuple(img.shape[-2:])
        if key not in coords:
            coords[key] = make_coordinate_map(key[1], key[0])
        return coords[key]

    groups = [("normal", POSITIVE, normal_imgs, augment_normal, crop_positive),
              ("coord-mismatch", NEGATIVE, normal_imgs, augment_normal, crop_negative_mismatch)]
    for level in sorted(generated_imgs_by_level):
        groups.append((f"generated-level-{level}", NEGATIVE, generated_imgs_by_level[level],
                       augment_generated, crop_negative_generated))
    for tag, label, pool, policy, crop in groups:
        for img in _pick(pool, images_per_group, generator):
            img = prepare(img, policy)
            coord = coord_for(img)
            for _ in range(per_image):
                patches.append(crop(img, coord, generator))
        labels += [label] * patches_per_group
        prov += [tag] * patches_per_group
    return PatchBatch(torch.stack(patches), torch.tensor(labels), prov)
