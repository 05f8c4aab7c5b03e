"""Image-pair quality metrics and dataset-level evaluation.

``mse`` here is the per-element mean squared error (the convention PSNR
expects). The training loss in :mod:`multistego.training` sums over pixels
instead; see ``loss_sse`` there.
"""
import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

SSIM_WINDOW = 8


@dataclass
class PairMetrics:
    mse: float
    psnr: float
    ssim: float


def _np(x):
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def _pair(a, b):
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(value, max_value=1.0):
    if value == 0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / value)


def psnr(a, b, max_value=1.0):
    """PSNR in dB; identical inputs give ``math.inf``."""
    return psnr_from_mse(mse(a, b), max_value)


def ssim(a, b, max_value=1.0, window=SSIM_WINDOW):
    """Mean SSIM over non-overlapping ``window`` x ``window`` blocks.

    Colour inputs (last axis 3) are reduced to grayscale by channel mean.
    Accepts (H, W), (H, W, C) or (N, H, W, C); the mean runs over every
    window of every image. Statistics use population (1/n) moments; partial
    edge windows are dropped.
    """
    a, b = _pair(a, b)
    if a.ndim >= 3:
        a, b = a.mean(axis=-1), b.mean(axis=-1)
    if a.ndim == 2:
        a, b = a[None], b[None]
    n, h, w = a.shape
    hh, ww = (h // window) * window, (w // window) * window
    if hh == 0 or ww == 0:
        raise ValueError(f"image {h}x{w} smaller than the {window}x{window} window")

    def blocks(x):
        x = x[:, :hh, :ww].reshape(n, hh // window, window, ww // window, window)
        return x.transpose(0, 1, 3, 2, 4).reshape(-1, window * window)

    xa, xb = blocks(a), blocks(b)
    c1, c2 = (0.01 * max_value) ** 2, (0.03 * max_value) ** 2
    mu_a, mu_b = xa.mean(1), xb.mean(1)
    var_a, var_b = xa.var(1), xb.var(1)
    cov = ((xa - mu_a[:, None]) * (xb - mu_b[:, None])).mean(1)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def pair_metrics(a, b, max_value=1.0):
    m = mse(a, b)
    return PairMetrics(m, psnr_from_mse(m, max_value), ssim(a, b, max_value))


def diff_image(a, b, gain=10.0):
    """clamp(|a - b| * gain, 0, 1) as float32."""
    if gain < 1:
        raise ValueError("gain must be >= 1")
    a, b = _pair(a, b)
    return np.clip(np.abs(a - b) * gain, 0.0, 1.0).astype(np.float32)


@dataclass
class EvalReport:
    k: int
    checkpoint: str
    rows: list = field(default_factory=list)

    def add(self, index, role, m):
        self.rows.append({"image": index, "role": role, **asdict(m)})

    def roles(self):
        return ["cover"] + [f"secret_{i + 1}" for i in range(self.k)]

    def aggregate(self):
        """Per role: mean and median of mse/psnr/ssim over rows."""
        out = {}
        for role in self.roles():
            rows = [r for r in self.rows if r["role"] == role]
            if not rows:
                continue
            stats = {"count": len(rows)}
            for key in ("mse", "psnr", "ssim"):
                vals = np.array([r[key] for r in rows], dtype=np.float64)
                stats[f"{key}_mean"] = float(np.mean(vals))
                stats[f"{key}_median"] = float(np.median(vals))
            out[role] = stats
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["image", "role", "mse", "psnr", "ssim"])
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, **{k: repr(float(r[k])) for k in ("mse", "psnr", "ssim")}})

    def summary(self):
        return {"k": self.k, "checkpoint": self.checkpoint, "images": len(self.image_ids()),
                "aggregate": self.aggregate()}

    def image_ids(self):
        return sorted({r["image"] for r in self.rows})

    def write_json(self, path):
        def fix(v):
            if isinstance(v, float) and math.isinf(v):
                return "inf"
            if isinstance(v, dict):
                return {k: fix(x) for k, x in v.items()}
            return v

        Path(path).write_text(json.dumps(fix(self.summary()), indent=2, sort_keys=True) + "\n")


def sample_tuples(split, sample_count, seed=0):
    """Seeded pool indices (same index in every pool) for evaluation."""
    n = len(split)
    if n == 0:
        raise ValueError("cannot evaluate on an empty split")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=min(sample_count, n), replace=False))


def evaluate_dataset(model, split, sample_count=10, seed=0, checkpoint_id="", batch_size=16,
                     keep_images=False):
    """Noiseless encode/decode over sampled tuples -> EvalReport.

    With ``keep_images`` the report gains an ``images`` attribute holding
    (cover, secrets, container, decoded) arrays in row order.
    """
    from .image_data import StegoBatch
    from .stego_net import decode_all, encode_forward

    if split.k != model.k:
        raise ValueError(f"model hides {model.k} secrets but split has {split.k} secret pools")
    idx = sample_tuples(split, sample_count, seed)
    pools = [split.pool_array(i)[idx] for i in range(split.k + 1)]
    report = EvalReport(model.k, checkpoint_id)
    kept = {"cover": [], "secrets": [], "container": [], "decoded": []}
    dtype = model.dtype
    model.eval()
    with torch.no_grad():
        for start in range(0, len(idx), batch_size):
            part = [torch.from_numpy(p[start:start + batch_size]).to(dtype) for p in pools]
            batch = StegoBatch(part[0], part[1:])
            container = encode_forward(model, batch)
            decoded = decode_all(model, container)
            for j in range(len(batch)):
                image = int(idx[start + j])
                report.add(image, "cover", pair_metrics(batch.cover[j], container[j]))
                for i in range(model.k):
                    report.add(image, f"secret_{i + 1}", pair_metrics(batch.secrets[i][j], decoded[i][j]))
            if keep_images:
                kept["cover"].append(batch.cover.numpy())
                kept["secrets"].append(np.stack([s.numpy() for s in batch.secrets], 1))
                kept["container"].append(container.numpy())
                kept["decoded"].append(np.stack([d.numpy() for d in decoded], 1))
    if keep_images:
        report.images = {key: np.concatenate(v) for key, v in kept.items()}
    return report
