"""Image I/O and the MVTec-style dataset layout.

    <root>/<category>/train/good/*.png
    <root>/<category>/test/<defect>/*.png
    <root>/<category>/ground_truth/<defect>/<stem>_mask.png   (not for "good")
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class DatasetError(FileNotFoundError):
    pass


def to_tensor(img: Image.Image) -> torch.Tensor:
    arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1) / 127.5 - 1.0


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """Map a (3, H, W) tensor in [-1, 1] to an (H, W, 3) uint8 array."""
    arr = ((x.detach().cpu().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def load_image(path: str | Path, size: int | None = None) -> torch.Tensor:
    with Image.open(path) as img:
        if size is not None and img.size != (size, size):
            img = img.convert("RGB").resize((size, size), Image.BILINEAR)
        return to_tensor(img)


def save_image(x: torch.Tensor, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(x)).save(path)


def load_mask(path: str | Path, size: int | None = None) -> np.ndarray:
    with Image.open(path) as img:
        img = img.convert("L")
        if size is not None and img.size != (size, size):
            img = img.resize((size, size), Image.NEAREST)
        return np.asarray(img) > 127


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8) * 255).save(path)


def save_heatmap(values: np.ndarray, path: str | Path, vmin: float, vmax: float, cmap: str = "inferno") -> None:
    from matplotlib import colormaps

    norm = np.clip((values - vmin) / max(vmax - vmin, 1e-12), 0, 1)
    rgb = (colormaps[cmap](norm)[..., :3] * 255).round().astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path)


def _images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def train_images(root: str | Path, category: str) -> list[Path]:
    folder = Path(root) / category / "train" / "good"
    if not folder.is_dir():
        raise DatasetError(f"missing training folder {folder}")
    return _images(folder)


@dataclass
class TestItem:
    __test__ = False  # keep pytest from collecting this

    defect: str
    path: Path
    mask_path: Path | None  # None for defect-free images

    @property
    def anomalous(self) -> bool:
        return self.defect != "good"


def test_items(root: str | Path, category: str) -> list[TestItem]:
    base = Path(root) / category
    test_dir = base / "test"
    if not test_dir.is_dir():
        raise DatasetError(f"missing test folder {test_dir}")
    items = []
    for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        defect = defect_dir.name
        for img in _images(defect_dir):
            mask = None
            if defect != "good":
                mask = base / "ground_truth" / defect / f"{img.stem}_mask.png"
                if not mask.exists():
                    raise DatasetError(f"missing mask {mask} for defect folder {defect!r}")
            items.append(TestItem(defect, img, mask))
    return items
