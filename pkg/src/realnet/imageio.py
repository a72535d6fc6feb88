"""Image and score-map files: 8-bit PNG, 16-bit PGM, MVTec-style directory layout."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def load_image(path: str | Path, size: int | None = None) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return np.asarray(img, dtype=np.float32) / 255.0


def load_mask(path: str | Path, size: int | None = None) -> np.ndarray:
    img = Image.open(path).convert("L")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.NEAREST)
    return (np.asarray(img) > 127).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path)


def save_mask_png(path: str | Path, mask: np.ndarray) -> None:
    save_png(path, (np.asarray(mask) > 0).astype(np.float32))


def save_pgm16(path: str | Path, scores: np.ndarray) -> None:
    """Binary 16-bit PGM, linear map of [0, 1] onto [0, 65535]."""
    q = np.clip(np.round(np.asarray(scores, dtype=np.float64) * 65535.0), 0, 65535).astype(">u2")
    h, w = q.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        f.write(q.tobytes())


def load_pgm16(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    raw = np.frombuffer(parts[4][: 2 * w * h], dtype=">u2").reshape(h, w)
    return raw.astype(np.float64) / maxval


def save_heat_overlay(path: str | Path, img: np.ndarray, scores: np.ndarray, alpha: float = 0.5) -> None:
    s = np.clip(np.asarray(scores, dtype=np.float32), 0, 1)[..., None]
    heat = np.concatenate([s, 1 - np.abs(2 * s - 1), 1 - s], axis=-1)
    save_png(path, (1 - alpha) * img + alpha * heat)


@dataclass
class Record:
    path: Path
    category: str
    defect: str
    mask_path: Path | None

    @property
    def relpath(self) -> str:
        return f"{self.category}/{self.path.parent.parent.name}/{self.defect}/{self.path.stem}"


def _images(d: Path) -> list[Path]:
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES) if d.is_dir() else []


def list_train(root: str | Path, category: str) -> list[Record]:
    d = Path(root) / category / "train" / "good"
    return [Record(p, category, "good", None) for p in _images(d)]


def list_test(root: str | Path, category: str) -> list[Record]:
    base = Path(root) / category
    out = []
    test_dir = base / "test"
    if not test_dir.is_dir():
        return out
    for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir()):
        for p in _images(defect_dir):
            mask = None
            if defect_dir.name != "good":
                mask = base / "ground_truth" / defect_dir.name / f"{p.stem}_mask.png"
            out.append(Record(p, category, defect_dir.name, mask))
    return out
