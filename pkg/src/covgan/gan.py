"""Conditional GAN mapping pilot signatures to virtual covariance images.

Generator: dense projection of (z, signature) to a 4x4 feature block,
then stride-2 5x5 transposed convolutions doubling the spatial size up to
M x M x 2, tanh output. Discriminator: stride-2 5x5 convolutions with
spatial batch norm and leaky ReLU down to 4x4, where a dense projection
of the signature is replicated spatially and concatenated in depth, then
a convolution head collapses to one logistic probability. Matched-pair
conditioning only: the discriminator sees (real image, its signature) and
(generated image, same signature).
"""

from __future__ import annotations

import copy
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .dataset import Dataset, atomic_write
from .channel import hermitian_part
from .evaluation import nmse_batch

CKPT_MAGIC = b"CKP1"

_TORCH_DTYPES = {"<f4": torch.float32, "<f8": torch.float64, "<i8": torch.int64}
_NUMPY_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


class GanConfigError(ValueError):
    pass


class NanLossError(RuntimeError):
    """Training diverged to a non-finite loss."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters shared by generator and discriminator."""

    m_antennas: int
    cond_dim: int  # 2 * N * K
    z_dim: int = 100
    base_channels: int | None = None  # None -> 8 * m_antennas
    cond_features: int = 128

    def __post_init__(self):
        if self.z_dim < 1:
            raise GanConfigError("z_dim must be >= 1")
        if self.cond_dim < 1:
            raise GanConfigError("cond_dim must be >= 1")
        n = self.n_stages  # validates m_antennas
        if self.channels0 < 2 ** (n - 1):
            raise GanConfigError("base_channels too small for the deconv stack")

    @property
    def n_stages(self) -> int:
        """Stride-2 stages between 4x4 and MxM; model build requires 4 * 2^n = M."""
        n = int(round(math.log2(self.m_antennas / 4)))
        if n < 1 or 4 * 2 ** n != self.m_antennas:
            raise GanConfigError(
                f"m_antennas must be 4 * 2^n for some n >= 1, got {self.m_antennas}"
            )
        return n

    @property
    def channels0(self) -> int:
        return 8 * self.m_antennas if self.base_channels is None else self.base_channels


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n, c0 = cfg.n_stages, cfg.channels0
        self.project = nn.Linear(cfg.z_dim + cfg.cond_dim, 4 * 4 * c0)
        self.project_bn = nn.BatchNorm2d(c0)
        hidden = []
        ch = c0
        for _ in range(n - 1):
            hidden.append(nn.ConvTranspose2d(ch, ch // 2, 5, stride=2, padding=2, output_padding=1))
            hidden.append(nn.BatchNorm2d(ch // 2))
            ch //= 2
        self.hidden = nn.ModuleList(hidden)
        self.output = nn.ConvTranspose2d(ch, 2, 5, stride=2, padding=2, output_padding=1)

    def forward(self, z: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """(B, Z), (B, 2NK) -> images (B, 2, M, M) in (-1, 1)."""
        if z.shape[-1] != self.cfg.z_dim or cond.shape[-1] != self.cfg.cond_dim:
            raise GanConfigError(
                f"expected z width {self.cfg.z_dim} and condition width "
                f"{self.cfg.cond_dim}, got {z.shape[-1]} and {cond.shape[-1]}"
            )
        x = self.project(torch.cat([z, cond], dim=1))
        x = x.view(-1, self.cfg.channels0, 4, 4)
        x = torch.relu(self.project_bn(x))
        for i in range(0, len(self.hidden), 2):
            x = torch.relu(self.hidden[i + 1](self.hidden[i](x)))
        return torch.tanh(self.output(x))


class Discriminator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        n, c0 = cfg.n_stages, cfg.channels0
        convs = []
        ch = 2
        for i in range(n):
            width = c0 >> (n - 1 - i)
            convs.append(nn.Conv2d(ch, width, 5, stride=2, padding=2))
            convs.append(nn.BatchNorm2d(width))
            ch = width
        self.convs = nn.ModuleList(convs)
        self.cond_proj = nn.Linear(cfg.cond_dim, cfg.cond_features)
        self.head = nn.Conv2d(ch + cfg.cond_features, c0, 4)
        self.out = nn.Linear(c0, 1)

    def forward(self, img: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """(B, 2, M, M), (B, 2NK) -> probability (B,) in (0, 1)."""
        m = self.cfg.m_antennas
        if img.shape[-3:] != (2, m, m):
            raise GanConfigError(f"expected image shape (2, {m}, {m}), got {tuple(img.shape[-3:])}")
        if cond.shape[-1] != self.cfg.cond_dim:
            raise GanConfigError(f"expected condition width {self.cfg.cond_dim}, got {cond.shape[-1]}")
        x = img
        for i in range(0, len(self.convs), 2):
            x = torch.nn.functional.leaky_relu(self.convs[i + 1](self.convs[i](x)), 0.2)
        c = self.cond_proj(cond)[:, :, None, None].expand(-1, -1, 4, 4)
        x = torch.nn.functional.leaky_relu(self.head(torch.cat([x, c], dim=1)), 0.2)
        return torch.sigmoid(self.out(x.flatten(1))).squeeze(1)


def init_weights(module: nn.Module, rng: torch.Generator) -> None:
    """DCGAN-style init: conv/linear N(0, 0.02), batch-norm gain N(1, 0.02)."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=rng) * 0.02)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=rng) * 0.02)
                m.bias.zero_()


PROB_EPS = 1e-7  # probabilities clamped before logs to avoid infinities


def _clamp_prob(p) -> torch.Tensor:
    return torch.as_tensor(p).clamp(PROB_EPS, 1.0 - PROB_EPS)


def _discriminator_loss(d_real, d_fake) -> torch.Tensor:
    return (-torch.log(_clamp_prob(d_real)) - torch.log(1.0 - _clamp_prob(d_fake))).mean()


def _generator_loss(d_fake, saturating: bool) -> torch.Tensor:
    if saturating:
        return torch.log(1.0 - _clamp_prob(d_fake)).mean()
    return (-torch.log(_clamp_prob(d_fake))).mean()


def gan_loss(d_real, d_fake, saturating: bool = False):
    """Adversarial losses from discriminator probabilities.

    loss_d = -log D(real) - log(1 - D(fake)). The generator descends
    -log D(fake) (non-saturating) or log(1 - D(fake)) when ``saturating``.
    Scalars in, scalars out; batches are averaged.
    """
    return _discriminator_loss(d_real, d_fake), _generator_loss(d_fake, saturating)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.5  # Adam momentum
    batch_size: int = 256
    epochs: int = 200
    seed: int = 0
    saturating: bool = False
    z_dim: int = 100
    base_channels: int | None = None
    cond_features: int = 128
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    checkpoint_path: str | None = None
    val_every: int = 1
    device: str = "cpu"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise GanConfigError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise GanConfigError("batch_size and epochs must be >= 1")
        if self.z_dim < 1:
            raise GanConfigError("z_dim must be >= 1")


@dataclass
class EpochStats:
    epoch: int
    loss_d: float
    loss_g: float
    val_nmse: float | None
    seconds: float


@dataclass
class TrainLog:
    entries: list[EpochStats] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"epochs": [asdict(e) for e in self.entries]}, indent=2)


@dataclass
class GanModel:
    """Trained parameter sets plus everything needed to use them."""

    generator: Generator
    discriminator: Discriminator
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    norm_sig: float
    norm_cov: float
    n_bs: int
    k_sub: int
    scene_digest: str


def _dataset_tensors(ds: Dataset) -> tuple[torch.Tensor, torch.Tensor]:
    sig = torch.from_numpy(np.ascontiguousarray(ds.signatures, dtype=np.float32))
    img = torch.from_numpy(np.ascontiguousarray(ds.images, dtype=np.float32))
    return sig, img.permute(0, 3, 1, 2).contiguous()


def _generate_normalized(
    gen: Generator, signatures: np.ndarray, z: torch.Tensor, device, batch: int = 512
) -> np.ndarray:
    """Run the generator in inference mode; returns (B, M, M, 2) numpy images."""
    was_training = gen.training
    gen.eval()
    outs = []
    sig = torch.from_numpy(np.ascontiguousarray(signatures, dtype=np.float32))
    with torch.no_grad():
        for lo in range(0, sig.shape[0], batch):
            hi = min(lo + batch, sig.shape[0])
            out = gen(z[lo:hi].to(device), sig[lo:hi].to(device))
            outs.append(out.permute(0, 2, 3, 1).cpu().numpy())
    if was_training:
        gen.train()
    return np.concatenate(outs, axis=0)


def predict(
    model: GanModel,
    signatures: np.ndarray,
    z_policy: str = "fixed-zero",
    n_avg: int = 8,
    seed: int = 0,
    psd_project: bool = False,
) -> np.ndarray:
    """Predict de-normalized virtual covariance matrices from normalized signatures.

    Output is Hermitian-symmetrized complex (..., M, M). ``z_policy`` is one
    of fixed-zero (deterministic), seeded-random, or average-of-n (mean of
    n_avg seeded draws).
    """
    single = signatures.ndim == 1
    sig = signatures[None, :] if single else signatures
    if sig.shape[1] != model.model_cfg.cond_dim:
        raise GanConfigError(
            f"signature width {sig.shape[1]} does not match model condition "
            f"width {model.model_cfg.cond_dim}"
        )
    b, z_dim = sig.shape[0], model.model_cfg.z_dim
    device = next(model.generator.parameters()).device

    if z_policy == "fixed-zero":
        draws = [torch.zeros(b, z_dim)]
    elif z_policy == "seeded-random":
        g = torch.Generator().manual_seed(seed)
        draws = [torch.randn(b, z_dim, generator=g)]
    elif z_policy == "average-of-n":
        g = torch.Generator().manual_seed(seed)
        draws = [torch.randn(b, z_dim, generator=g) for _ in range(n_avg)]
    else:
        raise GanConfigError(f"unknown z_policy {z_policy!r}")

    acc = None
    for z in draws:
        img = _generate_normalized(model.generator, sig, z, device) * model.norm_cov
        r = hermitian_part(img[..., 0] + 1j * img[..., 1])
        acc = r if acc is None else acc + r
    r_hat = acc / len(draws)
    if psd_project:
        r_hat = _psd_project(r_hat)
    return r_hat[0] if single else r_hat


def _psd_project(r: np.ndarray) -> np.ndarray:
    """Clip negative eigenvalues to zero (input already Hermitian)."""
    w, v = np.linalg.eigh(r)
    w = np.clip(w, 0.0, None)
    out = (v * w[..., None, :]) @ np.conj(np.swapaxes(v, -1, -2))
    return hermitian_part(out)


def _validation_nmse(model: GanModel, val: Dataset) -> float:
    truth = hermitian_part(
        (val.images[..., 0] + 1j * val.images[..., 1]).astype(np.complex128)
        * val.header.norm_cov
    )
    pred = predict(model, val.signatures, z_policy="fixed-zero")
    return float(np.mean(nmse_batch(pred, truth)))


def train(
    train_set: Dataset,
    val_set: Dataset | None,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
) -> tuple[GanModel, TrainLog]:
    """Alternating one-discriminator / one-generator updates per batch."""
    if len(train_set) == 0:
        raise GanConfigError("training set is empty")
    header = train_set.header
    if model_cfg is None:
        model_cfg = ModelConfig(
            m_antennas=header.m,
            cond_dim=header.sig_width,
            z_dim=cfg.z_dim,
            base_channels=cfg.base_channels,
            cond_features=cfg.cond_features,
        )
    if model_cfg.m_antennas != header.m or model_cfg.cond_dim != header.sig_width:
        raise GanConfigError("model dimensions do not match the dataset header")

    device = torch.device(cfg.device)
    rng = torch.Generator().manual_seed(cfg.seed)
    gen, disc = Generator(model_cfg), Discriminator(model_cfg)
    init_weights(gen, rng)
    init_weights(disc, rng)
    gen.to(device).train()
    disc.to(device).train()
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.learning_rate, betas=(cfg.beta1, 0.999))

    sig, img = _dataset_tensors(train_set)
    n = sig.shape[0]
    model = GanModel(
        generator=gen,
        discriminator=disc,
        model_cfg=model_cfg,
        train_cfg=cfg,
        norm_sig=header.norm_sig,
        norm_cov=header.norm_cov,
        n_bs=header.n_bs,
        k_sub=header.k_sub,
        scene_digest=header.scene_digest,
    )

    log = TrainLog()
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = torch.randperm(n, generator=rng)
        d_sum = g_sum = 0.0
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo : lo + cfg.batch_size]
            y = sig[idx].to(device)
            real = img[idx].to(device)
            b = idx.shape[0]

            z = torch.randn(b, model_cfg.z_dim, generator=rng).to(device)
            opt_d.zero_grad(set_to_none=True)
            fake = gen(z, y)
            loss_d = _discriminator_loss(disc(real, y), disc(fake.detach(), y))
            loss_d.backward()
            opt_d.step()

            z = torch.randn(b, model_cfg.z_dim, generator=rng).to(device)
            opt_g.zero_grad(set_to_none=True)
            loss_g = _generator_loss(disc(gen(z, y), y), cfg.saturating)
            loss_g.backward()
            opt_g.step()

            d_val, g_val = float(loss_d.detach()), float(loss_g.detach())
            if not (math.isfinite(d_val) and math.isfinite(g_val)):
                raise NanLossError(
                    f"non-finite loss at epoch {epoch} (loss_d={d_val}, loss_g={g_val}); "
                    f"last periodic checkpoint retained"
                    + (f" at {cfg.checkpoint_path}" if cfg.checkpoint_path else "")
                )
            d_sum += d_val
            g_sum += g_val
            n_batches += 1

        val_nmse = None
        if val_set is not None and len(val_set) > 0:
            if epoch % cfg.val_every == 0 or epoch == cfg.epochs - 1:
                val_nmse = _validation_nmse(model, val_set)
        log.entries.append(
            EpochStats(
                epoch=epoch,
                loss_d=d_sum / n_batches,
                loss_g=g_sum / n_batches,
                val_nmse=val_nmse,
                seconds=time.perf_counter() - t0,
            )
        )
        if (
            cfg.checkpoint_every > 0
            and cfg.checkpoint_path is not None
            and (epoch + 1) % cfg.checkpoint_every == 0
        ):
            save_checkpoint(model, cfg.checkpoint_path)

    gen.eval()
    disc.eval()
    return model, log


# --- gradient verification -------------------------------------------------


@dataclass
class GradCheckReport:
    n_sampled: int
    n_passed: int
    rel_tol: float
    worst_rel_err: float
    passed: bool


def gradient_check(
    gen: Generator,
    disc: Discriminator,
    cond: np.ndarray,
    real_img: np.ndarray,
    step: float = 1e-4,
    rel_tol: float = 1e-3,
    sample_fraction: float = 0.01,
    pass_fraction: float = 0.99,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd gradients of both losses against central differences.

    Works on float64 copies of the models. A sampled coordinate passes when
    the gradients of loss_d and loss_g both match the finite-difference
    estimate within ``rel_tol`` relative error.
    """
    gen64 = copy.deepcopy(gen).double().train()
    disc64 = copy.deepcopy(disc).double().train()
    cond_t = torch.from_numpy(np.ascontiguousarray(cond, dtype=np.float64))
    real_t = torch.from_numpy(np.ascontiguousarray(real_img, dtype=np.float64))
    z = torch.from_numpy(
        np.random.default_rng(seed).standard_normal((cond_t.shape[0], gen.cfg.z_dim))
    )

    params = list(gen64.parameters()) + list(disc64.parameters())

    def losses() -> tuple[torch.Tensor, torch.Tensor]:
        fake = gen64(z, cond_t)
        return gan_loss(disc64(real_t, cond_t), disc64(fake, cond_t))

    loss_d, loss_g = losses()
    grads_d = torch.autograd.grad(loss_d, params, retain_graph=True, allow_unused=True)
    grads_g = torch.autograd.grad(loss_g, params, allow_unused=True)

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    n_sample = max(1, int(round(sample_fraction * total)))
    coords = np.random.default_rng(seed + 1).choice(total, size=n_sample, replace=False)

    offsets = np.cumsum([0] + sizes)

    def locate(flat_index: int):
        p_idx = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        return p_idx, flat_index - offsets[p_idx]

    def rel_err(analytic: float, numeric: float) -> float:
        return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-10)

    n_passed = 0
    worst = 0.0
    for flat_index in coords:
        p_idx, inner = locate(int(flat_index))
        p = params[p_idx]
        flat = p.data.view(-1)
        orig = float(flat[inner])
        with torch.no_grad():
            flat[inner] = orig + step
        ld_p, lg_p = (float(v) for v in losses())
        with torch.no_grad():
            flat[inner] = orig - step
        ld_m, lg_m = (float(v) for v in losses())
        with torch.no_grad():
            flat[inner] = orig
        num_d = (ld_p - ld_m) / (2.0 * step)
        num_g = (lg_p - lg_m) / (2.0 * step)
        ana_d = float(grads_d[p_idx].view(-1)[inner]) if grads_d[p_idx] is not None else 0.0
        ana_g = float(grads_g[p_idx].view(-1)[inner]) if grads_g[p_idx] is not None else 0.0
        err = max(rel_err(ana_d, num_d), rel_err(ana_g, num_g))
        worst = max(worst, err)
        if err < rel_tol:
            n_passed += 1

    return GradCheckReport(
        n_sampled=n_sample,
        n_passed=n_passed,
        rel_tol=rel_tol,
        worst_rel_err=worst,
        passed=n_passed >= pass_fraction * n_sample,
    )


# --- checkpoints -----------------------------------------------------------


def save_checkpoint(model: GanModel, path: str) -> None:
    """Self-describing container: JSON header + raw little-endian tensors."""
    tensors = []
    blobs = []
    for prefix, module in (("generator", model.generator), ("discriminator", model.discriminator)):
        for name, t in module.state_dict().items():
            t = t.detach().cpu()
            dtype = _NUMPY_DTYPES[t.dtype]
            tensors.append({"name": f"{prefix}.{name}", "shape": list(t.shape), "dtype": dtype})
            blobs.append(t.numpy().astype(dtype).tobytes())
    header = {
        "model": asdict(model.model_cfg),
        "train": asdict(model.train_cfg),
        "norm_sig": model.norm_sig,
        "norm_cov": model.norm_cov,
        "n_bs": model.n_bs,
        "k_sub": model.k_sub,
        "scene_digest": model.scene_digest,
        "tensors": tensors,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    atomic_write(path, b"".join([CKPT_MAGIC, struct.pack("<I", len(head)), head] + blobs))


def load_checkpoint(path: str) -> GanModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CKPT_MAGIC:
        raise GanConfigError(f"bad checkpoint magic {blob[:4]!r}")
    (head_len,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8 : 8 + head_len].decode("utf-8"))
    model_cfg = ModelConfig(**header["model"])
    train_cfg = TrainConfig(**header["train"])

    state: dict[str, dict[str, torch.Tensor]] = {"generator": {}, "discriminator": {}}
    offset = 8 + head_len
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = count * np.dtype(spec["dtype"]).itemsize
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype=spec["dtype"]).reshape(
            spec["shape"]
        )
        offset += nbytes
        prefix, name = spec["name"].split(".", 1)
        state[prefix][name] = torch.from_numpy(arr.copy())
    if offset != len(blob):
        raise GanConfigError("checkpoint has trailing bytes")

    gen, disc = Generator(model_cfg), Discriminator(model_cfg)
    gen.load_state_dict(state["generator"])
    disc.load_state_dict(state["discriminator"])
    gen.eval()
    disc.eval()
    return GanModel(
        generator=gen,
        discriminator=disc,
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        norm_sig=header["norm_sig"],
        norm_cov=header["norm_cov"],
        n_bs=header["n_bs"],
        k_sub=header["k_sub"],
        scene_digest=header["scene_digest"],
    )
