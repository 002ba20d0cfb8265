"""Self-supervised pretraining: VAE, tile2vec (t2v) and contrastive sensor fusion (csf)."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import encoders
from .checkpoint import save_checkpoint
from .data_model import N_CHANNELS, BandStats, Manifest, compute_band_stats, normalize_patch
from .encoders import UpBlock, build_encoder, pool_embedding, upblock_params
from .geosample import NeighborGraph, NoNeighbor, draw_triplet
from .nn_backend import conv2d_params, set_deterministic

log = logging.getLogger(__name__)

OBJECTIVES = ("none", "vae", "t2v", "csf")
METRIC_COLUMNS = ("epoch", "objective", "encoder", "loss", "loss_recon", "loss_kl", "seconds")
RGB = (3, 2, 1)  # B4, B3, B2 within the S2 block


class VaeHead(nn.Module):
    """1x1 projections to mean/log-variance maps and a decoder back to 14 bands."""

    def __init__(self, latent_channels: int = 32, embed_channels: int = encoders.EMBED_CHANNELS):
        super().__init__()
        self.latent_channels = latent_channels
        self.mu_conv = nn.Conv2d(embed_channels, latent_channels, 1)
        self.logvar_conv = nn.Conv2d(embed_channels, latent_channels, 1)
        c = embed_channels
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, c, 1),
            UpBlock(c),
            UpBlock(c // 2),
            UpBlock(c // 4),
            UpBlock(c // 8),
            nn.Conv2d(c // 16, N_CHANNELS, 1),
        )

    def encode(self, latent):
        return self.mu_conv(latent), self.logvar_conv(latent)

    def decode(self, z):
        return self.decoder(z)


def vae_head_params(latent_channels: int = 32) -> int:
    c = encoders.EMBED_CHANNELS
    return (
        2 * conv2d_params(c, latent_channels, 1, True)
        + conv2d_params(latent_channels, c, 1, True)
        + sum(upblock_params(c >> k) for k in range(4))
        + conv2d_params(c // 16, N_CHANNELS, 1, True)
    )


def build_vae_head(latent_channels: int = 32, seed: int = 0) -> VaeHead:
    head = encoders.init_weights(VaeHead(latent_channels), seed)
    # start at unit posterior variance
    with torch.no_grad():
        head.logvar_conv.weight.zero_()
    return head


class VAE(nn.Module):
    def __init__(self, encoder: encoders.Encoder, head: VaeHead):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, x, noise: torch.Tensor | None = None):
        mu, logvar = self.head.encode(self.encoder(x))
        z = mu if noise is None else mu + torch.exp(0.5 * logvar) * noise
        return self.head.decode(z), mu, logvar


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(N(mu, e^logvar) || N(0, 1)) summed per sample, averaged over the batch."""
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar must have the same shape")
    # expm1 keeps e^l - 1 - l >= 0 for tiny l
    per = 0.5 * (mu.pow(2) + torch.expm1(logvar) - logvar)
    return per.reshape(per.shape[0], -1).sum(dim=1).mean()


def vae_loss(x_norm, network: VAE, beta: float = 1e-3, generator: torch.Generator | None = None,
             sample: bool = True):
    """Reconstruction MSE plus ``beta`` times KL; returns (loss, parts)."""
    latent = network.encoder(x_norm)
    mu, logvar = network.head.encode(latent)
    if sample:
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        z = mu + torch.exp(0.5 * logvar) * eps
    else:
        z = mu
    x_hat = network.head.decode(z)
    recon = torch.mean((x_hat - x_norm) ** 2)
    kl = kl_divergence(mu, logvar)
    loss = recon + beta * kl
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"non-finite VAE loss: recon={recon.item()}, kl={kl.item()}, "
            f"|mu|max={mu.abs().max().item():.3g}, logvar max={logvar.max().item():.3g}"
        )
    return loss, {"recon": recon.detach(), "kl": kl.detach()}


def triplet_loss(z_a, z_n, z_d, margin: float = 1.0) -> torch.Tensor:
    """Batch mean of max(0, |a - n| - |a - d| + margin)."""
    d_pos = torch.linalg.vector_norm(z_a - z_n, dim=-1)
    d_neg = torch.linalg.vector_norm(z_a - z_d, dim=-1)
    return torch.clamp(d_pos - d_neg + margin, min=0.0).mean()


@dataclass(frozen=True)
class CurriculumSchedule:
    warmup_epochs: int = 5
    ramp_epochs: int = 10

    def intensity(self, epoch: int) -> float:
        """Zero during warm-up, then rising linearly to 1 over the ramp (epochs count from 0)."""
        if epoch < self.warmup_epochs:
            return 0.0
        return float(min(1.0, max(0.0, (epoch - self.warmup_epochs + 1) / self.ramp_epochs)))


@dataclass(frozen=True)
class AugmentParams:
    offset: tuple[int, int]
    keep: np.ndarray
    brightness: float
    contrast: float
    saturation: float
    hue: float  # turns


def draw_augment_params(intensity: float, seed, n_channels: int = N_CHANNELS, max_jitter: int = 0) -> AugmentParams:
    if not 0.0 <= intensity <= 1.0:
        raise ValueError("intensity must be in [0, 1]")
    rng = np.random.default_rng(seed)
    j = int(round(intensity * max_jitter))
    offset = tuple(int(v) for v in rng.integers(-j, j + 1, size=2))
    keep = rng.random(n_channels) >= 0.2 * intensity
    pick = int(rng.integers(n_channels))
    if not keep.any():
        keep[pick] = True
    lo, hi = 1.0 - 0.4 * intensity, 1.0 + 0.4 * intensity
    b, c, s = rng.uniform(lo, hi, size=3)
    h = rng.uniform(-0.1 * intensity, 0.1 * intensity)
    return AugmentParams(offset, keep, float(b), float(c), float(s), float(h))


def _hue_rotation(turns: float) -> np.ndarray:
    theta = 2 * np.pi * turns
    u = np.ones(3) / np.sqrt(3.0)
    ux = np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])
    return np.cos(theta) * np.eye(3) + np.sin(theta) * ux + (1 - np.cos(theta)) * np.outer(u, u)


def csf_augment(x_norm: np.ndarray, intensity: float, seed, crop: int = 128) -> np.ndarray:
    """One randomly augmented ``crop`` x ``crop`` view of a normalised [14, H, W] patch.

    Brightness is an additive shift of (factor - 1) standard deviations,
    contrast scales each channel about its view mean, saturation and hue act
    on the RGB bands only (hue as a rotation about the grey axis), and
    dropped bands are set to 0, i.e. their dataset mean.
    """
    x = np.asarray(x_norm, dtype=np.float32)
    size = x.shape[-1]
    crop = min(crop, size)
    c0 = (size - crop) // 2
    p = draw_augment_params(intensity, seed, x.shape[0], max_jitter=c0)
    oy, ox = c0 + p.offset[0], c0 + p.offset[1]
    view = x[:, oy : oy + crop, ox : ox + crop].copy()
    if intensity == 0:
        return view
    v = view.astype(np.float64)
    m = v.mean(axis=(1, 2), keepdims=True)
    v = (v - m) * p.contrast + m + (p.brightness - 1.0)
    rgb = v[list(RGB)]
    grey = rgb.mean(axis=0, keepdims=True)
    rgb = grey + p.saturation * (rgb - grey)
    v[list(RGB)] = np.einsum("ij,jhw->ihw", _hue_rotation(p.hue), rgb)
    v[~p.keep] = 0.0
    return v.astype(np.float32)


def csf_views(batch: np.ndarray, intensity: float, seed, crop: int):
    """Two views per sample plus an in-batch negative index for each sample."""
    b = len(batch)
    seeds = np.random.SeedSequence(seed).spawn(2 * b + 1)
    v1 = np.stack([csf_augment(batch[i], intensity, seeds[2 * i], crop) for i in range(b)])
    v2 = np.stack([csf_augment(batch[i], intensity, seeds[2 * i + 1], crop) for i in range(b)])
    shift = np.random.default_rng(seeds[-1]).integers(1, b, size=b)
    neg = (np.arange(b) + shift) % b
    return v1, v2, neg


def csf_loss(batch, network: nn.Module, intensity: float, margin: float = 1.0, seed=0, crop: int = 128):
    """Triplet loss between two views of each sample and another sample's view."""
    arr = batch.detach().cpu().numpy() if isinstance(batch, torch.Tensor) else np.asarray(batch)
    if len(arr) < 2:
        raise ValueError("csf needs a batch of at least 2 samples")
    v1, v2, neg = csf_views(arr, intensity, seed, crop)
    z = pool_embedding(network(torch.from_numpy(np.concatenate([v1, v2]))))
    z1, z2 = z[: len(arr)], z[len(arr) :]
    return triplet_loss(z1, z2, z2[torch.from_numpy(neg)], margin)


@dataclass
class PretrainConfig:
    objective: str = "vae"
    encoder: str = "resnet18"
    epochs: int = 20
    batch_size: int = 32
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    margin: float = 1.0
    kl_weight: float = 1e-3
    latent_channels: int = 32
    temperature_km: float | None = None
    input_size: int = 128
    warmup_epochs: int = 5
    ramp_epochs: int = 10
    deterministic: bool = True

    MAX_BATCH = 1024

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        self.encoder = encoders.canonical_variant(self.encoder)
        self.validate()

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 1 <= self.batch_size <= self.MAX_BATCH:
            raise ValueError(f"batch_size must be in [1, {self.MAX_BATCH}]")
        if self.input_size % encoders.DOWNSAMPLE:
            raise ValueError(f"input_size must be divisible by {encoders.DOWNSAMPLE}")
        if self.margin < 0 or self.kl_weight < 0:
            raise ValueError("margin and kl_weight must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class PretrainResult:
    checkpoint: Path
    metrics_csv: Path
    history: list[dict] = field(default_factory=list)
    encoder: encoders.Encoder | None = None
    head: VaeHead | None = None


def center_crop(x: np.ndarray, size: int) -> np.ndarray:
    n = x.shape[-1]
    if size > n:
        raise ValueError(f"crop {size} larger than patch {n}")
    o = (n - size) // 2
    return x[..., o : o + size, o : o + size]


def load_normalized(manifest: Manifest, stats: BandStats, crop: int | None = None) -> np.ndarray:
    out = []
    for s in manifest:
        x = normalize_patch(s, stats)
        out.append(np.ascontiguousarray(center_crop(x, crop)) if crop else x)
    return np.stack(out)


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    # near-equal splits avoid a trailing batch of one (batch norm needs >1 value)
    n_batches = max(1, -(-len(order) // batch_size))
    return [b for b in np.array_split(order, n_batches) if len(b)]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], r["objective"], r["encoder"], _fmt(r["loss"]),
                        _fmt(r.get("loss_recon")), _fmt(r.get("loss_kl")),
                        "" if r.get("seconds") is None else f"{r['seconds']:.3f}"])


def pretrain_run(config: PretrainConfig, manifest: Manifest | None, graph: NeighborGraph | None = None,
                 out_dir=".", stats: BandStats | None = None) -> PretrainResult:
    """Train ``config.encoder`` with ``config.objective`` and write checkpoint + metrics CSV.

    In deterministic mode the ``seconds`` column is left empty so reruns are
    byte-identical.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path, csv_path = out / "pretrain.ckpt", out / "pretrain_metrics.csv"
    if config.deterministic:
        set_deterministic()
    enc = build_encoder(config.encoder, seed=config.seed)
    extra = {"objective": config.objective, "config": config.to_dict()}

    if config.objective == "none":
        save_checkpoint(ckpt_path, {"encoder": enc}, extra)
        write_metrics(csv_path, [])
        return PretrainResult(ckpt_path, csv_path, [], enc)

    if manifest is None or len(manifest) == 0:
        raise ValueError("pretraining needs a non-empty manifest")
    if config.objective == "t2v":
        if graph is None:
            raise ValueError("t2v needs a neighbour graph")
        if len(graph) != len(manifest):
            raise ValueError("neighbour graph and manifest sizes differ")
        anchors = graph.anchors()
        if anchors.size == 0:
            raise NoNeighbor("no sample has a neighbour within 1 degree; t2v cannot draw triplets")
    stats = stats or compute_band_stats(manifest)
    size = min(config.input_size, manifest.patch_size)
    if size % encoders.DOWNSAMPLE:
        raise ValueError(f"model input size {size} not divisible by {encoders.DOWNSAMPLE}")
    data = load_normalized(manifest, stats, None if config.objective == "csf" else size)

    head = None
    torch.manual_seed(config.seed)
    if config.objective == "vae":
        head = build_vae_head(config.latent_channels, seed=config.seed + 1)
        model: nn.Module = VAE(enc, head)
    else:
        model = enc
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=config.betas)
    noise_gen = torch.Generator().manual_seed(config.seed)
    schedule = CurriculumSchedule(config.warmup_epochs, config.ramp_epochs)
    history = []

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch, 0x5EED])
        model.train()
        tot = recon_tot = kl_tot = 0.0
        count = 0
        if config.objective == "t2v":
            units = rng.permutation(anchors)
        else:
            units = rng.permutation(len(data))
        for bi, idx in enumerate(_batches(units, config.batch_size)):
            if config.objective == "vae":
                x = torch.from_numpy(data[idx])
                loss, parts = vae_loss(x, model, config.kl_weight, noise_gen)
                recon_tot += parts["recon"].item() * len(idx)
                kl_tot += parts["kl"].item() * len(idx)
            elif config.objective == "t2v":
                draws = [draw_triplet(graph, int(a), [config.seed, epoch, int(a)], config.temperature_km)
                         for a in idx]
                sel = [d.anchor for d in draws] + [d.neighbor for d in draws] + [d.distant for d in draws]
                z = pool_embedding(model(torch.from_numpy(data[sel])))
                za, zn, zd = z.split(len(idx))
                loss = triplet_loss(za, zn, zd, config.margin)
            else:
                if len(idx) < 2:
                    continue
                loss = csf_loss(torch.from_numpy(data[idx]), model, schedule.intensity(epoch),
                                config.margin, [config.seed, epoch, bi], size)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite {config.objective} loss at epoch {epoch}, batch {bi}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
            count += len(idx)
        row = {
            "epoch": epoch,
            "objective": config.objective,
            "encoder": config.encoder,
            "loss": tot / max(count, 1),
            "loss_recon": recon_tot / count if config.objective == "vae" else None,
            "loss_kl": kl_tot / count if config.objective == "vae" else None,
            "seconds": None if config.deterministic else time.perf_counter() - t0,
        }
        history.append(row)
        log.info("pretrain %s/%s epoch %d loss %.5f", config.objective, config.encoder, epoch, row["loss"])

    components = {"encoder": enc}
    if head is not None:
        components["vae_head"] = head
    extra["stats"] = stats.to_dict()
    save_checkpoint(ckpt_path, components, extra)
    write_metrics(csv_path, history)
    return PretrainResult(ckpt_path, csv_path, history, enc, head)


@torch.no_grad()
def triplet_distances(encoder: nn.Module, data: np.ndarray, draws, batch_size: int = 32):
    """Mean anchor-neighbour and anchor-distant distances of pooled embeddings (eval mode)."""
    encoder.eval()
    z = torch.cat([pool_embedding(encoder(torch.from_numpy(data[i : i + batch_size])))
                   for i in range(0, len(data), batch_size)])
    a = torch.tensor([d.anchor for d in draws])
    n = torch.tensor([d.neighbor for d in draws])
    f = torch.tensor([d.distant for d in draws])
    pos = torch.linalg.vector_norm(z[a] - z[n], dim=-1).mean().item()
    neg = torch.linalg.vector_norm(z[a] - z[f], dim=-1).mean().item()
    return pos, neg
