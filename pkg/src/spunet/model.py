"""Toy conditional latent-density segmentation networks and their objectives.

Three small conv nets share one parameter store: a prior encoder over the
image, a posterior encoder over image+mask, and a decoder that injects the
latent code late (tiled spatially, fused by two 1x1 convolutions).  The
baseline objective is reconstruction plus a weighted closed-form KL between
posterior and prior; the OT variant adds a debiased Sinkhorn divergence
between sample clouds drawn from the two densities.

Deliberately tiny: 3 conv stages, well under 20k parameters, 32x32 inputs,
so finite-difference checks of the full loss stay tractable.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import densities, ot
from .autodiff import Tensor, avg_pool2, concat, conv2d, no_grad
from .densities import DiagonalGaussian

LOGIT_CLAMP = 10.0  # decoder logits clamped to +-10 before the BCE


@dataclass
class ModelConfig:
    latent_dim: int = 4
    base_channels: int = 8
    alpha: float = 10.0
    beta: float = 10.0
    sinkhorn_epsilon: float = 1e-2
    latent_samples: int = 16
    mode: str = "spunet"

    def __post_init__(self):
        if self.mode not in ("punet", "spunet"):
            raise ValueError(f"ModelConfig: mode must be punet or spunet, got {self.mode!r}")
        if self.latent_dim < 1:
            raise ValueError("ModelConfig: latent_dim must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("ModelConfig: alpha and beta must be nonnegative")
        if self.sinkhorn_epsilon <= 0:
            raise ValueError("ModelConfig: sinkhorn_epsilon must be positive")
        if self.latent_samples < 1:
            raise ValueError("ModelConfig: latent_samples must be >= 1")
        if self.mode == "punet":
            self.alpha = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _he(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class SegmentationModel:
    """Parameter store plus forward passes for prior, posterior and decoder."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator | None = None,
                 params: dict[str, np.ndarray] | None = None):
        self.config = config
        if params is not None:
            self._params = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            return
        if rng is None:
            rng = np.random.default_rng(0)
        c, d = config.base_channels, config.latent_dim
        p: dict[str, np.ndarray] = {}
        for prefix, in_ch in (("prior", 1), ("posterior", 2)):
            p[f"{prefix}.conv1.w"] = _he(rng, (c, in_ch, 3, 3), in_ch * 9)
            p[f"{prefix}.conv1.b"] = np.zeros(c)
            p[f"{prefix}.conv2.w"] = _he(rng, (2 * c, c, 3, 3), c * 9)
            p[f"{prefix}.conv2.b"] = np.zeros(2 * c)
            p[f"{prefix}.conv3.w"] = _he(rng, (2 * c, 2 * c, 3, 3), 2 * c * 9)
            p[f"{prefix}.conv3.b"] = np.zeros(2 * c)
            # zero-initialized head: the density starts out standard Normal
            p[f"{prefix}.head.w"] = np.zeros((2 * c, 2 * d))
            p[f"{prefix}.head.b"] = np.zeros(2 * d)
        p["decoder.conv1.w"] = _he(rng, (c, 1, 3, 3), 9)
        p["decoder.conv1.b"] = np.zeros(c)
        p["decoder.conv2.w"] = _he(rng, (c, c, 3, 3), c * 9)
        p["decoder.conv2.b"] = np.zeros(c)
        p["decoder.fuse1.w"] = _he(rng, (c, c + d, 1, 1), c + d)
        p["decoder.fuse1.b"] = np.zeros(c)
        # zero-initialized output: neutral 0.5 probability map at init
        p["decoder.fuse2.w"] = np.zeros((1, c, 1, 1))
        p["decoder.fuse2.b"] = np.zeros(1)
        self._params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    # -- parameter access ----------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        return self._params

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def n_params(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def set_params(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self._params.items():
            t.data = np.asarray(arrays[k], dtype=np.float64)

    # -- forward passes --------------------------------------------------------

    def _encode(self, x: Tensor, prefix: str) -> DiagonalGaussian:
        p = self._params
        d = self.config.latent_dim
        h = conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"]).relu()
        h = avg_pool2(h)
        h = conv2d(h, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"]).relu()
        h = avg_pool2(h)
        h = conv2d(h, p[f"{prefix}.conv3.w"], p[f"{prefix}.conv3.b"]).relu()
        h = avg_pool2(h)
        v = h.mean(axis=(2, 3))
        out = v @ p[f"{prefix}.head.w"] + p[f"{prefix}.head.b"]
        mean = out[:, :d]
        log_std = out[:, d:].clip(densities.LOG_STD_MIN, densities.LOG_STD_MAX)
        return DiagonalGaussian(mean, log_std)

    def prior_net(self, x) -> DiagonalGaussian:
        """Image-conditional latent density used at test time."""
        return self._encode(Tensor._coerce(x), "prior")

    def posterior_net(self, x, y) -> DiagonalGaussian:
        """Latent density conditioned on the image and one annotation."""
        x, y = Tensor._coerce(x), Tensor._coerce(y)
        return self._encode(concat([x, y], axis=1), "posterior")

    def decode_logits(self, x, z: Tensor) -> Tensor:
        """Backbone features over x fused with the tiled latent code."""
        x = Tensor._coerce(x)
        p = self._params
        bsz, _, h, w = x.shape
        d = self.config.latent_dim
        feats = conv2d(x, p["decoder.conv1.w"], p["decoder.conv1.b"]).relu()
        feats = conv2d(feats, p["decoder.conv2.w"], p["decoder.conv2.b"]).relu()
        zt = z.reshape(bsz, d, 1, 1).broadcast_to((bsz, d, h, w))
        fused = concat([feats, zt], axis=1)
        fused = conv2d(fused, p["decoder.fuse1.w"], p["decoder.fuse1.b"]).relu()
        return conv2d(fused, p["decoder.fuse2.w"], p["decoder.fuse2.b"])

    def decode(self, x, z) -> Tensor:
        """Probability map in (0, 1) for image x and latent code z."""
        z = Tensor._coerce(z)
        if z.ndim == 1:
            z = z.reshape(1, -1)
        return self.decode_logits(x, z).clip(-LOGIT_CLAMP, LOGIT_CLAMP).sigmoid()

    # -- objectives ---------------------------------------------------------------

    def _recon(self, x: Tensor, y: Tensor, z: Tensor) -> Tensor:
        """Bernoulli negative log-likelihood of the mask, summed over pixels
        and averaged over the batch; logits are clamped before the BCE."""
        logits = self.decode_logits(x, z).clip(-LOGIT_CLAMP, LOGIT_CLAMP)
        bce = logits.softplus() - y * logits
        return bce.sum(axis=(1, 2, 3)).mean()

    def punet_loss(self, x, y, noise_recon: np.ndarray) -> tuple[Tensor, dict]:
        """Reconstruction + beta * KL[posterior || prior], one posterior sample."""
        x, y = Tensor._coerce(x), Tensor._coerce(y)
        q = self.posterior_net(x, y)
        prior = self.prior_net(x)
        z = densities.sample(q, Tensor(noise_recon))
        recon = self._recon(x, y, z)
        kl = densities.kl_divergence(q, prior).mean()
        loss = recon + self.config.beta * kl
        parts = {"recon": recon.item(), "kl": kl.item(), "sinkhorn": 0.0,
                 "sinkhorn_converged": True}
        return loss, parts

    def spunet_loss(self, x, y, noise_recon: np.ndarray, noise_post: np.ndarray,
                    noise_prior: np.ndarray,
                    sinkhorn_config: ot.SinkhornConfig | None = None) -> tuple[Tensor, dict]:
        """Reconstruction + alpha * Sinkhorn divergence between m-sample clouds
        of posterior and prior + beta * closed-form KL.

        With alpha = 0 this equals punet_loss on identical recon noise; the
        cloud noise arrays are (B, m, d) and are the same points used for
        value and gradient (no resampling).
        """
        x, y = Tensor._coerce(x), Tensor._coerce(y)
        q = self.posterior_net(x, y)
        prior = self.prior_net(x)
        z = densities.sample(q, Tensor(noise_recon))
        recon = self._recon(x, y, z)
        kl = densities.kl_divergence(q, prior).mean()
        loss = recon + self.config.beta * kl
        parts = {"recon": recon.item(), "kl": kl.item(), "sinkhorn": 0.0,
                 "sinkhorn_converged": True}
        if self.config.alpha > 0:
            cloud_q = _sample_cloud(q, noise_post)
            cloud_p = _sample_cloud(prior, noise_prior)
            div, converged = ot.sinkhorn_divergence_batch(
                cloud_q, cloud_p, self.config.sinkhorn_epsilon, sinkhorn_config)
            sink = div.mean()
            loss = loss + self.config.alpha * sink
            parts["sinkhorn"] = sink.item()
            parts["sinkhorn_converged"] = converged
        return loss, parts

    def loss(self, x, y, rng: np.random.Generator,
             sinkhorn_config: ot.SinkhornConfig | None = None) -> tuple[Tensor, dict]:
        """Draws the noise the configured objective needs and evaluates it."""
        bsz = np.shape(x)[0]
        d, m = self.config.latent_dim, self.config.latent_samples
        noise_recon = rng.standard_normal((bsz, d))
        if self.config.mode == "punet" or self.config.alpha == 0:
            return self.punet_loss(x, y, noise_recon)
        noise_post = rng.standard_normal((bsz, m, d))
        noise_prior = rng.standard_normal((bsz, m, d))
        return self.spunet_loss(x, y, noise_recon, noise_post, noise_prior,
                                sinkhorn_config)

    # -- prediction ------------------------------------------------------------------

    def predict(self, image: np.ndarray, n: int, seed: int) -> list[np.ndarray]:
        """n ancestral samples: z ~ prior(x), decoded, thresholded at 0.5."""
        probs = self.predict_probs(image, n, seed)
        return [(p > 0.5).astype(np.uint8) for p in probs]

    def predict_probs(self, image: np.ndarray, n: int, seed: int) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        h, w = image.shape
        rng = np.random.default_rng(seed)
        with no_grad():
            x1 = Tensor(image.reshape(1, 1, h, w))
            prior = self.prior_net(x1)
            noise = rng.standard_normal((n, self.config.latent_dim))
            zs = prior.mean.data + np.exp(prior.log_std.data) * noise
            xn = Tensor(np.broadcast_to(image, (n, 1, h, w)).copy())
            probs = self.decode(xn, Tensor(zs))
        return probs.data[:, 0]

    def decoder_fn(self, image: np.ndarray):
        """(x, z) -> probability map closure for the sensitivity probe."""
        image = np.asarray(image, dtype=np.float64)
        h, w = image.shape

        def fn(_x, z):
            with no_grad():
                xn = Tensor(image.reshape(1, 1, h, w))
                out = self.decode(xn, Tensor(np.asarray(z).reshape(1, -1)))
            return out.data[0, 0]

        return fn


def _sample_cloud(g: DiagonalGaussian, noise: np.ndarray) -> Tensor:
    """(B, m, d) reparameterized cloud from a batched (B, d) density."""
    bsz, m, d = noise.shape
    mean = g.mean.reshape(bsz, 1, d)
    std = g.log_std.exp().reshape(bsz, 1, d)
    return mean + std * Tensor(noise)
