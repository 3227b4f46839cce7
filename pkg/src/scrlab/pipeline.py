"""Desk-scale reconstruction pipeline.

image -> per-factor encoders -> common embedding ``u`` (B, 4, d)
      -> adjacency-conditioned decoders -> factors (V, D, L, A)
      -> toy Lambertian renderer -> reconstructed image

Factor shapes for a batch of ``B`` images on a ``G x G`` grid:

* ``V``: (B, 2) horizontal / vertical shift in pixels
* ``D``: (B, G, G) positive height field
* ``L``: (B, 3) light direction ``(lx, ly)`` (the z component is 1 before
  normalization) and an ambient term
* ``A``: (B, G, G) albedo in [0, 1]
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .autodiff import Mlp, MlpSpec, ParamStore, Tensor, as_tensor, stack, where
from .dag import FACTORS

SQRT2 = math.sqrt(2.0)
V, D, L, A = range(4)


@dataclass(frozen=True)
class PipelineConfig:
    grid: int = 16
    embed_dim: int = 16
    enc_hidden: int = 32
    dec_hidden: int = 32
    conf_hidden: int = 16
    feat_channels: int = 4
    lambda_f: float = 0.5
    lambda_p: float = 1.0
    use_perceptual: bool = True
    max_shift: float = 2.0
    max_light: float = 1.5
    depth_offset: float = 0.5
    conf_floor: float = 0.05  # keeps the log-sigma term from dominating the loss

    @property
    def spacing(self) -> float:
        """Pixel pitch of the [-1, 1] image plane."""
        return 2.0 / (self.grid - 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FactorSet:
    V: Tensor
    D: Tensor
    L: Tensor
    A: Tensor

    def flipped(self) -> "FactorSet":
        """Mirror depth and albedo left-right; viewpoint and light are kept."""
        return FactorSet(self.V, as_tensor(self.D).flip(-1), self.L, as_tensor(self.A).flip(-1))

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: as_tensor(getattr(self, k)).data for k in FACTORS}


# ---------------------------------------------------------------------------
# renderer
# ---------------------------------------------------------------------------


def height_gradients(depth: Tensor, spacing: float) -> tuple[Tensor, Tensor]:
    """Central differences of a (..., G, G) height field, reflective border."""
    depth = as_tensor(depth)
    pad = [(0, 0)] * (depth.ndim - 2) + [(1, 1), (1, 1)]
    p = depth.pad(pad, mode="reflect")
    dzdx = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) * (0.5 / spacing)
    dzdy = (p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) * (0.5 / spacing)
    return dzdx, dzdy


def normals(depth: Tensor, spacing: float) -> tuple[Tensor, Tensor, Tensor]:
    """Unit normals ``(nx, ny, nz)`` of the surface ``z = depth(x, y)``."""
    gx, gy = height_gradients(depth, spacing)
    inv = (gx * gx + gy * gy + 1.0) ** -0.5
    return -gx * inv, -gy * inv, inv


def translate(img: Tensor, shift: Tensor) -> Tensor:
    """Bilinear translation of (B, G, G) images by per-image (dx, dy) pixel shifts.

    ``out[y, x] = img(y - dy, x - dx)``; samples outside the grid repeat the
    border. A zero shift is exactly the identity.
    """
    img, shift = as_tensor(img), as_tensor(shift)
    B, H, W = img.shape
    xs = np.arange(W, dtype=np.float64)[None, None, :]
    ys = np.arange(H, dtype=np.float64)[None, :, None]
    sx = xs - shift.data[:, 0, None, None]
    sy = ys - shift.data[:, 1, None, None]
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    wx = sx - x0
    wy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x0c, x1c = np.clip(x0, 0, W - 1), np.clip(x0 + 1, 0, W - 1)
    y0c, y1c = np.clip(y0, 0, H - 1), np.clip(y0 + 1, 0, H - 1)
    bi = np.arange(B)[:, None, None]
    I = img.data
    x0c, x1c = np.broadcast_to(x0c, (B, H, W)), np.broadcast_to(x1c, (B, H, W))
    y0c, y1c = np.broadcast_to(y0c, (B, H, W)), np.broadcast_to(y1c, (B, H, W))
    i00, i01 = I[bi, y0c, x0c], I[bi, y0c, x1c]
    i10, i11 = I[bi, y1c, x0c], I[bi, y1c, x1c]
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    out = w00 * i00 + w01 * i01 + w10 * i10 + w11 * i11
    flat = [(bi * H + yy) * W + xx for yy, xx in ((y0c, x0c), (y0c, x1c), (y1c, x0c), (y1c, x1c))]

    def vjp(g):
        gimg = np.zeros(B * H * W)
        for idx, w in zip(flat, (w00, w01, w10, w11)):
            gimg += np.bincount(idx.ravel(), weights=(g * w).ravel(), minlength=B * H * W)
        # d out / d sx, d out / d sy; the shift enters with a minus sign
        dsx = (1 - wy) * (i01 - i00) + wy * (i11 - i10)
        dsy = (1 - wx) * (i10 - i00) + wx * (i11 - i01)
        gshift = np.stack([-(g * dsx).sum(axis=(1, 2)), -(g * dsy).sum(axis=(1, 2))], axis=1)
        return gimg.reshape(B, H, W), gshift

    return Tensor._op(out, (img, shift), vjp)


def shading(f: FactorSet, spacing: float) -> Tensor:
    """``ambient + max(0, <n(D), l(L)>)`` per pixel."""
    nx, ny, nz = normals(f.D, spacing)
    Lt = as_tensor(f.L)
    lx, ly, amb = Lt[:, 0], Lt[:, 1], Lt[:, 2]
    inv = (lx * lx + ly * ly + 1.0) ** -0.5
    lx, ly, lz = lx * inv, ly * inv, inv
    cos = nx * lx[:, None, None] + ny * ly[:, None, None] + nz * lz[:, None, None]
    return cos.relu() + amb[:, None, None]


def render(f: FactorSet, spacing: float) -> Tensor:
    """Lambertian shading of the height field, modulated by albedo, shifted by V, clamped."""
    lit = as_tensor(f.A) * shading(f, spacing)
    return translate(lit, f.V).clip(0.0, 1.0)


def flip_render(f: FactorSet, spacing: float) -> Tensor:
    return render(f.flipped(), spacing)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _check_positive(sigma: Tensor, name: str) -> None:
    if not np.all(as_tensor(sigma).data > 0):
        raise ValueError(f"confidence map {name} must be strictly positive")


def laplace_nll(pred: Tensor, target, sigma: Tensor) -> Tensor:
    """Mean of ``ln(sqrt2 * sigma) + sqrt2 * |pred - target| / sigma``."""
    _check_positive(sigma, "sigma")
    sigma = as_tensor(sigma)
    return ((sigma * SQRT2).log() + (pred - target).abs() * SQRT2 / sigma).mean()


def gaussian_nll(pred: Tensor, target, sigma: Tensor) -> Tensor:
    """Mean of ``ln(sqrt2 * sigma^2) + (pred - target)^2 / (2 sigma^2)``.

    ``sigma`` is (B, G, G) and broadcast over the channel axis of (B, C, G, G) features.
    """
    _check_positive(sigma, "sigma")
    s2 = as_tensor(sigma)[:, None] ** 2
    diff = pred - target
    return ((s2 * SQRT2).log() + diff * diff / (s2 * 2.0)).mean()


class FeatureExtractor:
    """Frozen random 3x3 convolution + ReLU used as the perceptual feature map.

    Implemented as a constant (G*G, C*G*G) matrix so the forward pass is one matmul.
    """

    def __init__(self, grid: int, channels: int = 4, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.grid, self.channels = grid, channels
        kernels = rng.normal(0.0, 1.0 / 3.0, size=(channels, 3, 3))
        self.bias = rng.normal(0.0, 0.1, size=(channels,))
        G = grid
        op = np.zeros((G * G, channels, G, G))
        idx = np.arange(G * G).reshape(G, G)
        padded = np.pad(idx, 1, mode="reflect")
        for c in range(channels):
            for dy in range(3):
                for dx in range(3):
                    src = padded[dy : dy + G, dx : dx + G]
                    np.add.at(op[:, c], (src, *np.indices((G, G))), kernels[c, dy, dx])
        self.matrix = op.reshape(G * G, channels * G * G)
        self._bias_full = np.repeat(self.bias, G * G)

    def __call__(self, img) -> Tensor:
        img = as_tensor(img)
        B = img.shape[0]
        G = self.grid
        feats = (img.reshape(B, G * G) @ self.matrix + self._bias_full).relu()
        return feats.reshape(B, self.channels, G, G)


def total_loss(I, I_hat: Tensor, I_flip: Tensor, sigma: Tensor, sigma_flip: Tensor,
               phi: Callable | None = None, lambda_f: float = 0.5, lambda_p: float = 1.0) -> Tensor:
    """Photometric + flipped photometric + perceptual loss.

    ``L_rec(I_hat; sigma) + lambda_f * L_rec(I_flip; sigma')
    + lambda_p * (L_p(I_hat; sigma) + lambda_f * L_p(I_flip; sigma'))``.
    Passing ``phi=None`` drops the perceptual terms.
    """
    loss = laplace_nll(I_hat, I, sigma) + laplace_nll(I_flip, I, sigma_flip) * lambda_f
    if phi is not None and lambda_p != 0:
        target = phi(as_tensor(I).detach())
        perc = gaussian_nll(phi(I_hat), target, sigma) + gaussian_nll(phi(I_flip), target, sigma_flip) * lambda_f
        loss = loss + perc * lambda_p
    return loss


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class ScrModel:
    """All trainable networks of the pipeline, sharing one :class:`ParamStore`.

    Every structure variant uses the same networks; only the adjacency passed
    to :meth:`forward` differs, so parameter counts match across variants.
    """

    def __init__(self, config: PipelineConfig = PipelineConfig(), seed: int = 0, init: str = "uniform"):
        self.config = config
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        G2, d = config.grid * config.grid, config.embed_dim
        self.encoders = [
            Mlp(MlpSpec((G2, config.enc_hidden, d), ("tanh", "identity")), self.params, f"enc.{k}", rng, init)
            for k in FACTORS
        ]
        out_dims = {"V": 2, "D": G2, "L": 3, "A": G2}
        self.decoders = [
            Mlp(MlpSpec((d, config.dec_hidden, out_dims[k]), ("tanh", "identity")), self.params, f"dec.{k}", rng, init)
            for k in FACTORS
        ]
        self.confidence = Mlp(
            MlpSpec((G2, config.conf_hidden, 2 * G2), ("tanh", "identity")), self.params, "conf", rng, init
        )
        self.features = FeatureExtractor(config.grid, config.feat_channels, seed=10_007 + seed)

    def num_params(self) -> int:
        return self.params.num_values()

    # -- stages ----------------------------------------------------------------
    def _flat(self, I) -> Tensor:
        I = as_tensor(I)
        G = self.config.grid
        if I.shape[-2:] != (G, G):
            raise ValueError(f"expected images of shape (B, {G}, {G}), got {I.shape}")
        return I.reshape(I.shape[0], G * G)

    def encode(self, I) -> Tensor:
        x = self._flat(I)
        return stack([enc(x) for enc in self.encoders], axis=1)

    @staticmethod
    def condition(u: Tensor, M=None) -> Tensor:
        """Decoder inputs ``u_k + sum_j M[j, k] u_j`` stacked as (B, 4, d)."""
        u = as_tensor(u)
        return u if M is None else u + as_tensor(M).swapaxes(-1, -2) @ u

    def decode_factors(self, u: Tensor, M=None) -> FactorSet:
        """Decode factor k from ``u_k + sum_j M[j, k] u_j``.

        ``M`` may be ``None`` (independent), a (4, 4) matrix, or a per-sample
        (B, 4, 4) stack.
        """
        u = as_tensor(u)
        inp = self.condition(u, M)
        cfg = self.config
        B, G = u.shape[0], cfg.grid
        raw = [dec(inp[:, k, :]) for k, dec in enumerate(self.decoders)]
        Vf = raw[V].tanh() * cfg.max_shift
        Df = (raw[D].softplus() + cfg.depth_offset).reshape(B, G, G)
        Lraw = raw[L]
        Lf = stack([Lraw[:, 0].tanh() * cfg.max_light, Lraw[:, 1].tanh() * cfg.max_light, Lraw[:, 2].sigmoid()], axis=1)
        Af = raw[A].sigmoid().reshape(B, G, G)
        return FactorSet(Vf, Df, Lf, Af)

    def confidence_maps(self, I) -> tuple[Tensor, Tensor]:
        cfg = self.config
        G = cfg.grid
        out = self.confidence(self._flat(I)).softplus() + cfg.conf_floor
        out = out.reshape(-1, 2, G, G)
        return out[:, 0], out[:, 1]

    def forward(self, I, M=None, dynamic: str | None = None, mask=None) -> dict:
        """Full pass; returns a dict with loss, factors, renders, adjacency."""
        cfg = self.config
        I = as_tensor(I)
        u = self.encode(I)
        if dynamic is not None:
            M = dynamic_adjacency(u, mask, dynamic)
        f = self.decode_factors(u, M)
        I_hat = render(f, cfg.spacing)
        I_flip = flip_render(f, cfg.spacing)
        sigma, sigma_flip = self.confidence_maps(I)
        phi = self.features if cfg.use_perceptual else None
        loss = total_loss(I, I_hat, I_flip, sigma, sigma_flip, phi, cfg.lambda_f, cfg.lambda_p)
        return {"loss": loss, "factors": f, "I_hat": I_hat, "I_flip": I_flip, "u": u, "M": M,
                "sigma": sigma, "sigma_flip": sigma_flip}

    def loss(self, I, M=None, dynamic: str | None = None, mask=None) -> Tensor:
        return self.forward(I, M, dynamic, mask)["loss"]


def dynamic_adjacency(u: Tensor, mask, mode: str = "sigmoid") -> Tensor:
    """Per-sample adjacency ``q(u) * mask`` from embedding self-similarity.

    ``mode="sigmoid"`` uses ``sigmoid(u u^T)``; ``mode="cosine"`` uses cosine
    similarity with row norms floored at 1e-8.
    """
    u = as_tensor(u)
    if mask is None:
        raise ValueError("dynamic adjacency needs a dense-ordering mask")
    mask = np.asarray(mask, dtype=np.float64)
    if mode == "sigmoid":
        q = (u @ u.swapaxes(-1, -2)).sigmoid()
    elif mode == "cosine":
        sq = (u * u).sum(axis=-1, keepdims=True)
        # floor before the sqrt so a zero row has neither inf nor nan gradient
        sq = where(sq.data < 1e-16, np.full(sq.shape, 1e-16), sq)
        un = u / sq.sqrt()
        q = un @ un.swapaxes(-1, -2)
    else:
        raise ValueError(f"unknown attention mode {mode!r}")
    return q * mask
