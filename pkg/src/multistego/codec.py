"""File-level encode/decode through a trained model, plus an LSB baseline."""
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .image_data import StegoBatch, load_image
from .metrics import mse, psnr_from_mse
from .stego_net import decode_all, encode_forward

FLOAT_PASSTHROUGH = "float-passthrough"
QUANTIZE_8BIT = "quantize-8bit"


@dataclass(frozen=True)
class QuantPolicy:
    """How the float container becomes a file.

    ``quantize-8bit`` clamps to [0, 1] and rounds to the 8-bit grid before
    anything else sees the container. ``float-passthrough`` additionally keeps
    the raw float container in a ``.npy`` sidecar next to the PNG, and
    :func:`decode_file` prefers the sidecar when it is given.
    """

    mode: str = QUANTIZE_8BIT
    clamp_range: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.mode not in (FLOAT_PASSTHROUGH, QUANTIZE_8BIT):
            raise ValueError(f"unknown quantization mode {self.mode!r}")


def quantize(x, clamp_range=(0.0, 1.0)):
    """round(clamp(x) * 255) / 255; idempotent."""
    lo, hi = clamp_range
    return np.round(np.clip(x, lo, hi) * 255.0) / 255.0


def to_uint8(x):
    return np.round(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(x, path):
    """Write one (H, W, 3) or (1, H, W, 3) float image in [0, 1] as an 8-bit RGB PNG."""
    arr = np.asarray(x)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError("save_image takes a single image")
        arr = arr[0]
    Image.fromarray(to_uint8(arr)).save(path, format="PNG")
    return Path(path)


@dataclass
class EncodeSummary:
    """Cover-vs-container distortion, per-element MSE, before and after quantization."""

    out_path: Path
    mse_float: float
    mse_quantized: float
    psnr_float: float
    psnr_quantized: float
    sidecar: Path = None


def _model_input(arr, model):
    return torch.from_numpy(np.asarray(arr)).to(model.dtype)


def encode_file(model, cover_path, secret_paths, out_path, policy=QuantPolicy()):
    if len(secret_paths) != model.k:
        raise ValueError(f"model hides {model.k} secrets, got {len(secret_paths)} secret images")
    cover = load_image(cover_path)
    secrets = [load_image(p) for p in secret_paths]
    batch = StegoBatch(_model_input(cover, model), [_model_input(s, model) for s in secrets])
    model.eval()
    with torch.no_grad():
        container = encode_forward(model, batch).double().numpy()
    q = quantize(container, policy.clamp_range)
    out_path = Path(out_path)
    save_image(q, out_path)
    sidecar = None
    if policy.mode == FLOAT_PASSTHROUGH:
        sidecar = out_path.with_suffix(".npy")
        np.save(sidecar, container.astype(np.float32))
    m_float, m_quant = mse(cover, container), mse(cover, q)
    return EncodeSummary(out_path, m_float, m_quant, psnr_from_mse(m_float),
                         psnr_from_mse(m_quant), sidecar)


def load_container(path):
    """(1, 64, 64, 3) container from a PNG or a float ``.npy`` sidecar."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path)
        if arr.ndim == 3:
            arr = arr[None]
        return arr.astype(np.float32)
    return load_image(path)


def decode_file(model, container_path, out_dir):
    """Write ``secret_1.png`` .. ``secret_k.png`` into ``out_dir``; returns the paths."""
    container = load_container(container_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    with torch.no_grad():
        decoded = decode_all(model, _model_input(container, model))
    paths = []
    for i, d in enumerate(decoded, 1):
        p = out_dir / f"secret_{i}.png"
        save_image(np.clip(d.double().numpy(), 0.0, 1.0), p)
        paths.append(p)
    return paths


# -- LSB baseline -------------------------------------------------------------

@dataclass(frozen=True)
class LsbPlan:
    """Bit layout of one container byte.

    The top ``cover_bits_kept`` bits belong to the cover; below them each
    secret in turn contributes its own top ``bits_per_secret`` bits, secret 1
    in the highest remaining slot.
    """

    k: int
    bits_per_secret: int

    def __post_init__(self):
        if self.k < 1 or self.bits_per_secret < 1:
            raise ValueError("k and bits_per_secret must be >= 1")
        if self.k * self.bits_per_secret > 7:
            raise ValueError(
                f"{self.k} secrets x {self.bits_per_secret} bits exceeds the 7-bit budget"
            )

    @property
    def cover_bits_kept(self):
        return 8 - self.k * self.bits_per_secret

    @classmethod
    def default(cls, k):
        return cls(k, min(4, 7 // k))

    def shift(self, i):
        """Bit position of the lowest bit of secret ``i``'s slot (0-based)."""
        return (self.k - 1 - i) * self.bits_per_secret


def lsb_embed(cover, secrets, plan):
    cover = np.asarray(cover, dtype=np.uint8)
    if len(secrets) != plan.k:
        raise ValueError(f"plan is for {plan.k} secrets, got {len(secrets)}")
    b = plan.bits_per_secret
    out = cover & np.uint8((0xFF << (8 - plan.cover_bits_kept)) & 0xFF)
    for i, s in enumerate(secrets):
        s = np.asarray(s, dtype=np.uint8)
        if s.shape != cover.shape:
            raise ValueError(f"secret {i + 1} shape {s.shape} != cover shape {cover.shape}")
        out |= ((s >> (8 - b)) << plan.shift(i)).astype(np.uint8)
    return out


def lsb_extract(container, plan):
    container = np.asarray(container, dtype=np.uint8)
    b = plan.bits_per_secret
    mask = (1 << b) - 1
    return [(((container >> plan.shift(i)) & mask) << (8 - b)).astype(np.uint8)
            for i in range(plan.k)]


def read_rgb8(path):
    img = Image.open(path)
    return np.asarray(img.convert("RGB") if img.mode != "RGB" else img, dtype=np.uint8)


def lsb_encode_file(cover_path, secret_paths, out_path, plan=None):
    plan = plan or LsbPlan.default(len(secret_paths))
    container = lsb_embed(read_rgb8(cover_path), [read_rgb8(p) for p in secret_paths], plan)
    Image.fromarray(container).save(out_path, format="PNG")
    return Path(out_path)


def lsb_decode_file(container_path, out_dir, plan):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(lsb_extract(read_rgb8(container_path), plan), 1):
        p = out_dir / f"secret_{i}.png"
        Image.fromarray(s).save(p, format="PNG")
        paths.append(p)
    return paths
