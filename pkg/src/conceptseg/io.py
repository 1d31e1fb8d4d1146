"""File formats: PNG rasters and the binary field / segment-map / codebook files."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

FIELD_MAGIC = b"EMBF"
SEG_MAGIC = b"SEGM"


def save_rgb(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(image, mode="RGB").save(path, optimize=False)


def load_rgb(path) -> np.ndarray:
    """RGB image as float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def label_palette(n: int = 256) -> list[int]:
    """Deterministic distinct colours for indexed label PNGs (0 is black)."""
    rng = np.random.default_rng(12345)
    pal = rng.integers(40, 256, size=(n, 3))
    pal[0] = 0
    fixed = [(128, 0, 0), (0, 128, 0), (128, 128, 0), (0, 0, 128), (128, 0, 128),
             (0, 128, 128), (128, 128, 128), (64, 0, 0)]
    pal[1:1 + len(fixed)] = fixed
    pal[255] = (255, 255, 255)
    return pal.astype(np.uint8).ravel().tolist()


def save_label(path, label: np.ndarray) -> None:
    """8-bit indexed-colour PNG; values must fit in 0..255."""
    label = np.asarray(label)
    if label.min() < 0 or label.max() > 255:
        raise ValueError("labels must be in 0..255 for an 8-bit PNG")
    im = Image.fromarray(label.astype(np.uint8), mode="P")
    im.putpalette(label_palette())
    im.save(path, optimize=False)


def load_label(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise ValueError(f"{path} is not an indexed or grayscale label image")
        return np.asarray(im, dtype=np.uint8).copy()


def id_colors(ids: np.ndarray) -> np.ndarray:
    """Colour image with one pseudo-random colour per id."""
    n = int(ids.max()) + 1
    rng = np.random.default_rng(0)
    pal = rng.integers(0, 256, size=(n, 3), dtype=np.uint8)
    return pal[ids]


def save_segment_map(path, seg) -> None:
    """Writes ``path`` (id-coloured PNG) and ``path.bin`` sidecar.

    The sidecar is three little-endian u32 (width, height, segment_count)
    followed by row-major u32 ids.
    """
    path = Path(path)
    save_rgb(path, id_colors(seg.ids))
    h, w = seg.ids.shape
    with open(str(path) + ".bin", "wb") as f:
        f.write(SEG_MAGIC + struct.pack("<III", w, h, seg.segment_count))
        f.write(seg.ids.astype("<u4").tobytes())


def load_segment_map(path):
    from .pseudoseg import SegmentMap

    path = Path(path)
    sidecar = path if path.suffix == ".bin" else Path(str(path) + ".bin")
    raw = sidecar.read_bytes()
    if raw[:4] != SEG_MAGIC:
        raise ValueError(f"{sidecar} is not a segment map file")
    w, h, count = struct.unpack("<III", raw[4:16])
    ids = np.frombuffer(raw[16:], dtype="<u4").reshape(h, w).astype(np.int64)
    return SegmentMap(ids, count)


def save_field(path, values: np.ndarray) -> None:
    """Header: magic, endianness tag, u32 width/height/dim; then row-major float32."""
    h, w, d = values.shape
    with open(path, "wb") as f:
        f.write(FIELD_MAGIC + b"<" + struct.pack("<III", w, h, d))
        f.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def load_field(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FIELD_MAGIC:
        raise ValueError(f"{path} is not an embedding field file")
    endian = raw[4:5].decode()
    if endian not in "<>":
        raise ValueError(f"bad endianness tag {endian!r}")
    w, h, d = struct.unpack(endian + "III", raw[5:17])
    return np.frombuffer(raw[17:], dtype=endian + "f4").reshape(h, w, d).astype(np.float32)


def save_codebook(path, codebook) -> None:
    """One JSON header line, then the (K, D) little-endian float64 block."""
    header = {"K": codebook.size, "dim": codebook.dim, "dtype": "<f8",
              "usage": codebook.usage.tolist(), "staleness": codebook.staleness.tolist()}
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        f.write(np.ascontiguousarray(codebook.vectors, dtype="<f8").tobytes())


def load_codebook(path):
    from .concepts import Codebook

    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = json.loads(raw[:nl])
    vectors = np.frombuffer(raw[nl + 1:], dtype=header["dtype"]).reshape(
        header["K"], header["dim"]).astype(np.float64)
    return Codebook(vectors, np.asarray(header["usage"], dtype=np.int64),
                    np.asarray(header["staleness"], dtype=np.int64))


def save_encoder(path, encoder) -> None:
    state = encoder.state()
    arrays = {k: np.asarray(v) for k, v in state.items() if k not in ("kind", "dim")}
    np.savez(path, kind=np.array(state["kind"]), dim=np.array(state["dim"]), **arrays)


def load_encoder(path):
    from .encoder import encoder_from_state

    with np.load(path) as data:
        state = {k: data[k] for k in data.files}
    state["kind"] = str(state["kind"])
    state["dim"] = int(state["dim"])
    return encoder_from_state(state)


def save_index(path, index) -> None:
    np.savez(path, vectors=index.vectors, classes=index.classes)


def load_index(path):
    from .inference import RetrievalIndex

    with np.load(path) as data:
        index = RetrievalIndex(data["vectors"], data["classes"])
        # stored rows are already unit length; keep them bit-exact
        index.vectors = data["vectors"]
    return index


def save_model(out_dir, result) -> Path:
    """Write a trained model: config.json, encoder.npz, codebook.bin."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(result.config.to_dict(), indent=1))
    save_encoder(out / "encoder.npz", result.encoder)
    save_codebook(out / "codebook.bin", result.codebook)
    return out


def load_model(model_dir):
    """(encoder, codebook, TrainConfig) from a directory written by ``save_model``."""
    from .trainer import TrainConfig

    root = Path(model_dir)
    for name in ("config.json", "encoder.npz", "codebook.bin"):
        if not (root / name).exists():
            raise FileNotFoundError(f"model file missing: {root / name}")
    config = TrainConfig.from_dict(json.loads((root / "config.json").read_text()))
    return load_encoder(root / "encoder.npz"), load_codebook(root / "codebook.bin"), config
