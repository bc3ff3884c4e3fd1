"""Multi-scale residual vector-quantization autoencoder.

An image is encoded to a C x h x w feature map ``f``, which is turned into K
token maps of increasing resolution over one shared codebook. Each scale
quantizes what the coarser scales left unexplained; decoding sums the
upsampled (and optionally refined) code lookups of all scales.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Conv2d, Module, RandomStream, Tensor

DEFAULT_SCHEDULE: tuple[tuple[int, int], ...] = ((1, 1), (2, 2), (4, 4), (8, 8))


class ScheduleError(ValueError):
    pass


def validate_schedule(schedule, final_hw: tuple[int, int] | None = None) -> tuple[tuple[int, int], ...]:
    sizes = tuple((int(h), int(w)) for h, w in schedule)
    if not sizes:
        raise ScheduleError("schedule is empty")
    if sizes[0] != (1, 1):
        raise ScheduleError(f"first scale must be 1x1, got {sizes[0]}")
    for (h0, w0), (h1, w1) in zip(sizes, sizes[1:]):
        if h1 < h0 or w1 < w0:
            raise ScheduleError(f"scale sizes must be non-decreasing: {sizes}")
    if final_hw is not None and sizes[-1] != tuple(final_hw):
        raise ScheduleError(f"last scale {sizes[-1]} does not match feature map {tuple(final_hw)}")
    return sizes


def num_tokens(schedule) -> int:
    return sum(h * w for h, w in schedule)


@dataclass
class MultiScaleTokens:
    """K integer maps; each map is (h_k, w_k) or batched (N, h_k, w_k)."""

    maps: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.maps)

    def check(self, schedule, vocab_size: int) -> None:
        if len(self.maps) != len(schedule):
            raise ScheduleError(f"{len(self.maps)} token maps for a {len(schedule)}-scale schedule")
        for k, (m, hw) in enumerate(zip(self.maps, schedule)):
            if tuple(m.shape[-2:]) != tuple(hw):
                raise ScheduleError(f"map {k} has shape {m.shape}, schedule expects {hw}")
            if m.size and (m.min() < 0 or m.max() >= vocab_size):
                raise IndexError(f"map {k} holds an index outside [0, {vocab_size})")

    def flat(self) -> np.ndarray:
        """Concatenate maps in scale order, row-major inside each map."""
        lead = self.maps[0].shape[:-2]
        return np.concatenate([m.reshape(*lead, -1) for m in self.maps], axis=-1)


# -- quantization ---------------------------------------------------------

def nearest_codes(z: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Row-wise index of the nearest codebook vector; ties go to the lowest index."""
    if codebook.shape[0] == 0:
        raise ValueError("quantize: empty codebook")
    diff = z[:, None, :] - codebook[None, :, :]
    dist = np.einsum("nvc,nvc->nv", diff, diff)
    return np.argmin(dist, axis=1)


def quantize(feature: np.ndarray, codebook: np.ndarray) -> tuple[int, np.ndarray]:
    feature = np.asarray(feature)
    codebook = np.asarray(codebook)
    if codebook.ndim != 2 or codebook.shape[0] == 0:
        raise ValueError("quantize: empty codebook")
    if not np.all(np.isfinite(feature)):
        raise ValueError("quantize: non-finite feature")
    idx = int(nearest_codes(feature.reshape(1, -1), codebook)[0])
    return idx, codebook[idx]


def quantize_map(d: np.ndarray, codebook: np.ndarray) -> np.ndarray:
    """Quantize every position of an (N, C, h, w) map -> (N, h, w) indices."""
    n, c, h, w = d.shape
    z = d.transpose(0, 2, 3, 1).reshape(-1, c)
    return nearest_codes(z, codebook).reshape(n, h, w)


# -- refinement phi -------------------------------------------------------

class Phi(Module):
    """Per-scale refinement. Identity by default; with ``conv`` set, one 3x3
    convolution shared across scales blended as (1-mix)*z + mix*conv(z)."""

    def __init__(self, channels: int, rng: RandomStream | None = None, conv: bool = False,
                 mix: float = 0.5, dtype=np.float32):
        self.conv = Conv2d(channels, channels, rng, k=3, dtype=dtype) if conv else None
        self.mix = mix

    def __call__(self, z: Tensor, k: int) -> Tensor:
        if self.conv is None:
            return z
        return z * (1.0 - self.mix) + self.conv(z) * self.mix


def scale_contribution(idx: np.ndarray, codebook: Tensor, phi, k: int, final_hw) -> Tensor:
    """phi_k(upsample(lookup(codebook, r_k))) as an (N, C, H, W) tensor."""
    z = nx.embedding(codebook, idx).transpose(0, 3, 1, 2)
    z = nx.interpolate(z, final_hw, "bilinear")
    return z if phi is None else phi(z, k)


def residual_encode(f: Tensor, schedule, codebook: Tensor, phi,
                    targets: list | None = None) -> tuple[MultiScaleTokens, Tensor]:
    """Run the residual quantization loop on an (N, C, H, W) feature map.

    Returns the token maps and the running approximation f_hat accumulated
    on the way, computed exactly as ``multi_scale_decode`` would. If
    ``targets`` is a list, the downsampled residual at each scale (the
    vectors that were quantized) is appended to it as (M, C) rows.
    """
    final_hw = tuple(f.shape[-2:])
    schedule = validate_schedule(schedule, final_hw)
    if f.shape[1] != codebook.shape[1]:
        raise ScheduleError(f"feature channels {f.shape[1]} != codebook width {codebook.shape[1]}")
    maps = []
    with nx.no_grad():
        residual = Tensor(f.data)
        f_hat = Tensor(np.zeros_like(f.data))
        for k, hw in enumerate(schedule):
            d = nx.interpolate(residual, hw, "area")
            idx = quantize_map(d.data, codebook.data)
            maps.append(idx)
            if targets is not None:
                targets.append(d.data.transpose(0, 2, 3, 1).reshape(-1, d.shape[1]))
            u = scale_contribution(idx, codebook, phi, k, final_hw)
            f_hat = f_hat + u
            residual = residual - u
    return MultiScaleTokens(maps), f_hat


def multi_scale_encode(f, schedule, codebook, phi) -> MultiScaleTokens:
    """Token maps for an (N, C, H, W) or (C, H, W) feature map."""
    f, single = _batched(f)
    tokens, _ = residual_encode(f, schedule, _as_tensor(codebook), phi)
    if single:
        return MultiScaleTokens([m[0] for m in tokens.maps])
    return tokens


def multi_scale_decode(tokens: MultiScaleTokens, schedule, codebook, phi) -> Tensor:
    """f_hat = sum_k phi_k(upsample(lookup(codebook, r_k))) at full resolution."""
    codebook = _as_tensor(codebook)
    schedule = validate_schedule(schedule)
    tokens.check(schedule, codebook.shape[0])
    single = tokens.maps[0].ndim == 2
    maps = [m[None] for m in tokens.maps] if single else tokens.maps
    final_hw = schedule[-1]
    n = maps[0].shape[0]
    f_hat = Tensor(np.zeros((n, codebook.shape[1], *final_hw), dtype=codebook.dtype))
    for k, idx in enumerate(maps):
        f_hat = f_hat + scale_contribution(idx, codebook, phi, k, final_hw)
    if single:
        return f_hat[0]
    return f_hat


def _batched(f) -> tuple[Tensor, bool]:
    f = _as_tensor(f)
    if f.ndim == 3:
        return Tensor(f.data[None]), True
    if f.ndim != 4:
        raise ScheduleError(f"feature map must be (C,H,W) or (N,C,H,W), got {f.shape}")
    return f, False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def scale_inputs(tokens: MultiScaleTokens, schedule, codebook, phi) -> list[np.ndarray]:
    """Per-scale teacher-forcing inputs: the approximation built from scales < k,
    area-downsampled to scale k's size. Entry 0 is all zeros."""
    codebook = _as_tensor(codebook)
    schedule = validate_schedule(schedule)
    final_hw = schedule[-1]
    n = tokens.maps[0].shape[0]
    c = codebook.shape[1]
    out = [np.zeros((n, c, *schedule[0]), dtype=codebook.dtype)]
    with nx.no_grad():
        f_hat = Tensor(np.zeros((n, c, *final_hw), dtype=codebook.dtype))
        for k in range(len(schedule) - 1):
            f_hat = f_hat + scale_contribution(tokens.maps[k], codebook, phi, k, final_hw)
            out.append(nx.interpolate(f_hat, schedule[k + 1], "area").data)
    return out


# -- losses and monitoring ------------------------------------------------

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)


def edge_map(img: Tensor) -> Tensor:
    """Sobel gradient components of the channel-mean image, (N, 2, H, W)."""
    gray = img.mean(axis=1, keepdims=True)
    kern = np.stack([_SOBEL_X, _SOBEL_X.T])[:, None].astype(img.dtype)
    return nx.conv2d(gray, Tensor(kern), None, stride=1, padding=1)


def tokenizer_loss(image: Tensor, recon: Tensor, z_e: Tensor, z_q: Tensor,
                   lambda_p: float = 0.0, beta_commit: float = 0.25) -> Tensor:
    """Reconstruction MSE + codebook term + commitment term + edge proxy.

    ``z_e`` is the encoder output and ``z_q`` its quantized approximation; the
    codebook term only moves ``z_q`` and the commitment term only moves ``z_e``.
    """
    image, recon = _as_tensor(image), _as_tensor(recon)
    if image.shape != recon.shape or z_e.shape != z_q.shape:
        raise nx.ShapeError(f"tokenizer_loss: shapes {image.shape}/{recon.shape}, {z_e.shape}/{z_q.shape}")
    loss = ((recon - image) ** 2).mean()
    loss = loss + ((z_q - z_e.detach()) ** 2).mean()
    loss = loss + ((z_e - z_q.detach()) ** 2).mean() * beta_commit
    if lambda_p:
        loss = loss + ((edge_map(recon) - edge_map(image)) ** 2).mean() * lambda_p
    return loss


@dataclass
class CodebookHealth:
    counts: np.ndarray
    perplexity: float


def codebook_health(tokens, vocab_size: int) -> CodebookHealth:
    if isinstance(tokens, MultiScaleTokens):
        tokens = tokens.maps
    if not isinstance(tokens, (list, tuple)):
        tokens = [tokens]
    if not tokens:
        raise ValueError("codebook_health: no token maps")
    flat = np.concatenate([np.asarray(t).reshape(-1) for t in tokens])
    counts = np.bincount(flat, minlength=vocab_size)
    p = counts[counts > 0] / flat.size
    entropy = float(-(p * np.log(p)).sum())
    return CodebookHealth(counts, float(np.exp(entropy)))


# -- autoencoder ----------------------------------------------------------

@dataclass
class TokenizerConfig:
    vocab_size: int = 32
    channels: int = 16
    hidden: int = 32
    image_size: int = 32
    schedule: tuple = DEFAULT_SCHEDULE
    pin_zero_code: bool = True
    phi_conv: bool = False
    beta_commit: float = 0.25
    lambda_p: float = 0.0
    dead_code_steps: int = 500
    feature_norm: bool = True
    init_seed: int = 0

    @property
    def downsample(self) -> int:
        return 4

    def __post_init__(self):
        self.schedule = validate_schedule(self.schedule)
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.image_size != self.downsample * self.schedule[-1][0]:
            raise ScheduleError(
                f"image size {self.image_size} != {self.downsample} x final scale {self.schedule[-1]}")


class Encoder(Module):
    def __init__(self, cfg: TokenizerConfig, rng: RandomStream, dtype):
        h = cfg.hidden
        self.conv_in = Conv2d(3, h, rng, dtype=dtype)
        self.down1 = Conv2d(h, h, rng, stride=2, dtype=dtype)
        self.down2 = Conv2d(h, h, rng, stride=2, dtype=dtype)
        self.conv_out = Conv2d(h, cfg.channels, rng, dtype=dtype)
        self.feature_norm = cfg.feature_norm

    def __call__(self, x: Tensor) -> Tensor:
        x = nx.relu(self.conv_in(x))
        x = nx.relu(self.down1(x))
        x = nx.relu(self.down2(x))
        f = self.conv_out(x)
        if self.feature_norm:
            # per-position channel norm keeps features on the codebook's scale;
            # without it the encoder output drifts far faster than the codes
            f = nx.layernorm_core(f.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)
        return f


class Decoder(Module):
    def __init__(self, cfg: TokenizerConfig, rng: RandomStream, dtype):
        h = cfg.hidden
        self.conv_in = Conv2d(cfg.channels, h, rng, dtype=dtype)
        self.mid = Conv2d(h, h, rng, dtype=dtype)
        self.up = Conv2d(h, h, rng, dtype=dtype)
        self.conv_out = Conv2d(h, 3, rng, dtype=dtype)

    def __call__(self, z: Tensor) -> Tensor:
        hw = z.shape[-1]
        x = nx.relu(self.conv_in(z))
        x = nx.relu(self.mid(x))
        x = nx.interpolate(x, (2 * hw, 2 * hw), "nearest")
        x = nx.relu(self.up(x))
        x = nx.interpolate(x, (4 * hw, 4 * hw), "nearest")
        return self.conv_out(x)


@dataclass
class TokenizerOutput:
    loss: Tensor
    recon: Tensor
    mse: float
    tokens: MultiScaleTokens
    targets: list[np.ndarray]  # per scale, (M_k, C) quantization targets


class MultiScaleVQ(Module):
    """Encoder E, decoder D, shared codebook and refinement phi."""

    def __init__(self, cfg: TokenizerConfig | None = None, dtype=np.float32):
        self.cfg = cfg or TokenizerConfig()
        rng = RandomStream(self.cfg.init_seed)
        r_enc, r_dec, r_code, r_phi = rng.split(4)
        self.encoder = Encoder(self.cfg, r_enc, dtype)
        self.decoder = Decoder(self.cfg, r_dec, dtype)
        book = r_code.normal((self.cfg.vocab_size, self.cfg.channels), 1.0, dtype)
        if self.cfg.pin_zero_code:
            book[0] = 0
        self.codebook = nx.param(book, dtype)
        self.phi = Phi(self.cfg.channels, r_phi, conv=self.cfg.phi_conv, dtype=dtype)
        self.last_used = np.full(self.cfg.vocab_size, -self.cfg.dead_code_steps, dtype=np.int64)

    @property
    def schedule(self):
        return self.cfg.schedule

    @property
    def vocab_size(self) -> int:
        return self.cfg.vocab_size

    def encode_features(self, images: Tensor) -> Tensor:
        return self.encoder(images)

    def encode(self, images) -> MultiScaleTokens:
        with nx.no_grad():
            f = self.encoder(_as_tensor(images))
            tokens, _ = residual_encode(f, self.schedule, self.codebook, self.phi)
        return tokens

    def decode_features(self, tokens: MultiScaleTokens) -> Tensor:
        return multi_scale_decode(tokens, self.schedule, self.codebook, self.phi)

    def decode_image(self, f_hat: Tensor) -> Tensor:
        return self.decoder(f_hat)

    def decode(self, tokens: MultiScaleTokens) -> np.ndarray:
        with nx.no_grad():
            return self.decode_image(self.decode_features(tokens)).data

    def scale_inputs(self, tokens: MultiScaleTokens) -> list[np.ndarray]:
        return scale_inputs(tokens, self.schedule, self.codebook, self.phi)

    def forward(self, images) -> TokenizerOutput:
        """Training forward pass with a straight-through decoder path."""
        images = _as_tensor(images)
        f = self.encoder(images)
        targets: list = []
        tokens, _ = residual_encode(f, self.schedule, self.codebook, self.phi, targets)
        f_hat = self.decode_features(tokens)
        z_st = f + (f_hat - f).detach()
        recon = self.decoder(z_st)
        loss = tokenizer_loss(images, recon, f, f_hat, self.cfg.lambda_p, self.cfg.beta_commit)
        mse = float(((recon.data - images.data) ** 2).mean())
        return TokenizerOutput(loss, recon, mse, tokens, targets)

    def after_step(self, step: int, tokens: MultiScaleTokens, targets: list[np.ndarray],
                   rng: RandomStream) -> int:
        """Keep the zero code pinned and re-seed codes idle for too long.

        Idle codes are replaced by quantization targets of the batch: a scale
        is picked uniformly, then one of its rows, so coarse scales are not
        drowned out by the many fine-scale positions. Codes count as idle from
        before step 0, so codes the first batch does not pick are seeded from
        data right away. Returns the number of codes re-initialized.
        """
        used = np.unique(np.concatenate([m.reshape(-1) for m in tokens.maps]))
        self.last_used[used] = step
        if self.cfg.pin_zero_code:
            self.codebook.data[0] = 0
            self.last_used[0] = step
        dead = np.flatnonzero(step - self.last_used >= self.cfg.dead_code_steps)
        if dead.size:
            for code, k in zip(dead, rng.integers(0, len(targets), dead.size)):
                self.codebook.data[code] = targets[k][rng.integers(0, targets[k].shape[0])]
            self.last_used[dead] = step
        return int(dead.size)
