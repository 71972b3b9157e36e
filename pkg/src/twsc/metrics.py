"""Image quality metrics and evaluation tables.

PSNR uses peak 1.0 (images live in [0, 1]); a zero-MSE pair is flagged
``exact`` instead of producing an infinite dB value, and batch means are
taken over the non-exact items. SSIM is the windowed form with an 11x11
Gaussian window (sigma 1.5), stability constants K1=0.01 and K2=0.03 on
a unit dynamic range, weighted (not sample-corrected) second moments,
and scores averaged over the valid interior region only.

Evaluation tables are plain rows written as CSV with ``repr`` floats so
a re-run with the same evaluation seed reproduces files byte for byte.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .channel import snr_to_noise_var
from .errors import ContractError
from .rng import numpy_stream
from .surrogate import forbid_generation
from .transceiver import SymbolBlock

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DATA_RANGE = 1.0


def _as_batch(arr) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, ..., None]
    elif arr.ndim == 3:
        # Ambiguity (B,H,W) vs (H,W,C) resolved by the trailing dim:
        # channel counts are tiny, batch/height are not.
        if arr.shape[-1] <= 4:
            arr = arr[None]
        else:
            arr = arr[..., None]
    if arr.ndim != 4:
        raise ContractError(f"expected image array with 2-4 dims, got shape {arr.shape}")
    return arr


def _check_pair(reference, candidate) -> tuple[np.ndarray, np.ndarray]:
    ref = _as_batch(reference)
    cand = _as_batch(candidate)
    if ref.shape != cand.shape:
        raise ContractError(f"image shape mismatch: {ref.shape} vs {cand.shape}")
    return ref, cand


@dataclass
class PsnrResult:
    per_image_db: np.ndarray
    exact: np.ndarray

    @property
    def mean_db(self) -> float | None:
        """Mean over non-exact items; None when every pair is identical."""
        mask = ~self.exact
        if not mask.any():
            return None
        return float(self.per_image_db[mask].mean())


def psnr(reference, candidate) -> PsnrResult:
    """Per-image PSNR in dB against peak value 1.0."""
    ref, cand = _check_pair(reference, candidate)
    mse = np.mean((ref - cand) ** 2, axis=(1, 2, 3))
    exact = mse == 0.0
    values = np.full(mse.shape, np.nan)
    np.divide(DATA_RANGE ** 2, mse, out=values, where=~exact)
    values[~exact] = 10.0 * np.log10(values[~exact])
    return PsnrResult(per_image_db=values, exact=exact)


def _gaussian_kernel() -> np.ndarray:
    half = (SSIM_WINDOW - 1) / 2.0
    coords = np.arange(SSIM_WINDOW) - half
    g = np.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


_KERNEL = _gaussian_kernel()


def _windowed_mean(stack: np.ndarray) -> np.ndarray:
    # stack: (B, H, W) -> (B, H-10, W-10) weighted local means.
    windows = np.lib.stride_tricks.sliding_window_view(
        stack, (SSIM_WINDOW, SSIM_WINDOW), axis=(1, 2))
    return np.einsum("bhwij,ij->bhw", windows, _KERNEL)


@dataclass
class SsimResult:
    per_image: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.per_image.mean())


def ssim(reference, candidate) -> SsimResult:
    """Per-image SSIM, valid-region mean of the local similarity map."""
    ref, cand = _check_pair(reference, candidate)
    if ref.shape[3] != 1:
        raise ContractError(f"ssim expects single-channel images, got {ref.shape[3]} channels")
    if ref.shape[1] < SSIM_WINDOW or ref.shape[2] < SSIM_WINDOW:
        raise ContractError(
            f"images of shape {ref.shape[1:3]} are smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    x = ref[..., 0]
    y = cand[..., 0]
    mu_x = _windowed_mean(x)
    mu_y = _windowed_mean(y)
    var_x = _windowed_mean(x * x) - mu_x ** 2
    var_y = _windowed_mean(y * y) - mu_y ** 2
    cov = _windowed_mean(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    score = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)
             / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)))
    return SsimResult(per_image=score.mean(axis=(1, 2)))


@dataclass
class MetricRow:
    system_kind: str
    train_channel: str
    eval_channel: str
    snr_db: float
    direction: str
    psnr_db: float
    ssim: float
    n_images: int


@dataclass
class MetricTable:
    rows: list

    def filtered(self, **conditions) -> "MetricTable":
        out = [r for r in self.rows
               if all(getattr(r, k) == v for k, v in conditions.items())]
        return MetricTable(out)

    def single(self, **conditions) -> MetricRow:
        hits = self.filtered(**conditions).rows
        if len(hits) != 1:
            raise ContractError(f"expected exactly one row for {conditions}, found {len(hits)}")
        return hits[0]


_ROW_FIELDS = [f.name for f in fields(MetricRow)]


def _render(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def write_metric_csv(path, table: MetricTable) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_ROW_FIELDS)
        for row in table.rows:
            writer.writerow([_render(getattr(row, name)) for name in _ROW_FIELDS])


def read_metric_csv(path) -> MetricTable:
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(MetricRow(
                system_kind=rec["system_kind"],
                train_channel=rec["train_channel"],
                eval_channel=rec["eval_channel"],
                snr_db=float(rec["snr_db"]),
                direction=rec["direction"],
                psnr_db=float(rec["psnr_db"]),
                ssim=float(rec["ssim"]),
                n_images=int(rec["n_images"]),
            ))
    return MetricTable(rows)


def write_metric_json(path, table: MetricTable, meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"meta": meta, "rows": [asdict(r) for r in table.rows]}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _transmit_eval(node_tx, node_rx, images: np.ndarray, noise: np.ndarray,
                   h: np.ndarray | None, batch_size: int) -> np.ndarray:
    """Push images through encode -> real channel -> decode with noise
    and fading drawn up front, so batch partitioning cannot change the
    result. Returns reconstructions as (n, H, W, 1) float arrays."""
    out = []
    n = images.shape[0]
    with torch.no_grad():
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            batch = torch.from_numpy(
                np.ascontiguousarray(images[start:stop].transpose(0, 3, 1, 2)))
            x = node_tx.encode(batch).data
            if h is not None:
                hr = torch.from_numpy(h[start:stop, 0:1]).to(x.dtype)
                hi = torch.from_numpy(h[start:stop, 1:2]).to(x.dtype)
                xr, xi = x[..., 0], x[..., 1]
                x = torch.stack((hr * xr - hi * xi, hr * xi + hi * xr), dim=-1)
            y = x + torch.from_numpy(noise[start:stop]).to(x.dtype)
            recon = node_rx.decode(SymbolBlock(y))
            out.append(recon.permute(0, 2, 3, 1).numpy())
    return np.concatenate(out, axis=0)


def evaluate_sweep(node_a, node_b, test_images: np.ndarray, eval_channel: str,
                   snr_list, eval_seed: int, directions=("a2b", "b2a"),
                   system_kind: str = "twsc", train_channel: str = "awgn",
                   batch_size: int = 250) -> MetricTable:
    """Deterministic PSNR/SSIM sweep over the real channel.

    Surrogate generation is forbidden for the duration: these numbers
    must come from physical channel draws only. Fading (when any) is
    drawn once per SNR point and shared by both directions, matching
    the reciprocal channel model. Per-direction rows are emitted plus
    an ``avg`` row of the direction means.
    """
    if eval_channel not in ("awgn", "rayleigh"):
        raise ContractError(f"unknown eval channel {eval_channel!r}")
    images = np.asarray(test_images, dtype=np.float32)
    if images.ndim == 3:
        images = images[..., None]
    n = images.shape[0]
    symbol_count = node_a.arch.symbol_count
    rows = []
    with forbid_generation():
        for snr_db in snr_list:
            snr_db = float(snr_db)
            var = snr_to_noise_var(snr_db)
            h = None
            if eval_channel == "rayleigh":
                h_rng = numpy_stream(eval_seed, "eval-h", repr(snr_db))
                h = (h_rng.standard_normal((n, 2)) * math.sqrt(0.5)).astype(np.float32)
            per_direction = {}
            for direction in directions:
                tx, rx = (node_a, node_b) if direction == "a2b" else (node_b, node_a)
                if system_kind == "jscc":
                    tx, rx = node_a, node_a
                noise_rng = numpy_stream(eval_seed, "eval-noise", eval_channel,
                                         repr(snr_db), direction)
                noise = (noise_rng.standard_normal((n, symbol_count, 2))
                         * math.sqrt(var / 2.0)).astype(np.float32)
                recon = _transmit_eval(tx, rx, images, noise, h, batch_size)
                psnr_mean = psnr(images, recon).mean_db
                ssim_mean = ssim(images, recon).mean
                per_direction[direction] = (psnr_mean, ssim_mean)
                rows.append(MetricRow(system_kind, train_channel, eval_channel,
                                      snr_db, direction,
                                      float("nan") if psnr_mean is None else psnr_mean,
                                      ssim_mean, n))
            psnrs = [v[0] for v in per_direction.values() if v[0] is not None]
            ssims = [v[1] for v in per_direction.values()]
            rows.append(MetricRow(system_kind, train_channel, eval_channel,
                                  snr_db, "avg",
                                  float(np.mean(psnrs)) if psnrs else float("nan"),
                                  float(np.mean(ssims)), n))
    return MetricTable(rows)
