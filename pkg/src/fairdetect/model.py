"""Desk-scale detector: disentangling encoder, reconstructing decoder, heads.

The encoder runs three parallel conv stacks over the input image. The
content and demographic stacks each emit one feature map; the forgery stack
emits a double-width map split channelwise into a domain-specific half and a
domain-agnostic half. The decoder mirrors the encoder with two
upsample+conv stages over the channel-concatenated features. All four
classification heads share one MLP architecture with separate parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GraphError, ParameterStore, Tensor

HEAD_IDS = ("fused", "agnostic", "specific", "demographic")


@dataclass(frozen=True)
class ModelConfig:
    image_shape: tuple[int, int, int] = (3, 16, 16)
    feature_channels: int = 8
    head_hidden: int = 32
    n_domains: int = 3
    n_subgroups: int = 2
    adain_eps: float = 1e-5

    def __post_init__(self):
        c, h, w = self.image_shape
        if min(c, h, w) < 1:
            raise GraphError(f"image_shape extents must be >= 1, got {self.image_shape}")
        if h % 4 or w % 4:
            raise GraphError(
                f"image height/width must be divisible by 4 (two stride-2 layers), got {h}x{w}"
            )
        if (h // 4) * (w // 4) < 2:
            raise GraphError("feature maps need at least 2 spatial positions for channel stats")
        if min(self.feature_channels, self.head_hidden, self.n_domains, self.n_subgroups) < 1:
            raise GraphError("feature_channels, head_hidden, n_domains, n_subgroups must be >= 1")
        if self.adain_eps < 0:
            raise GraphError(f"adain_eps must be nonnegative, got {self.adain_eps}")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        _, h, w = self.image_shape
        return (self.feature_channels, h // 4, w // 4)

    @property
    def feature_size(self) -> int:
        c, h, w = self.feature_shape
        return c * h * w


@dataclass(frozen=True)
class DisentangledFeatures:
    """Encoder outputs per image batch: all four maps share one shape."""

    c: Tensor
    f_a: Tensor
    f_g: Tensor
    d: Tensor

    def __post_init__(self):
        shape = self.c.shape
        for name in ("f_a", "f_g", "d"):
            if getattr(self, name).shape != shape:
                raise GraphError(f"feature map {name} shape {getattr(self, name).shape} != {shape}")

    @property
    def forgery(self) -> Tensor:
        """Channel-concatenation of the specific and agnostic halves."""
        return ad.concat([self.f_a, self.f_g], axis=1)


def _head_width(head_id: str, cfg: ModelConfig) -> int:
    widths = {
        "fused": 2,
        "agnostic": 2,
        "specific": cfg.n_domains,
        "demographic": cfg.n_subgroups,
    }
    if head_id not in widths:
        raise GraphError(f"unknown head {head_id!r}; expected one of {HEAD_IDS}")
    return widths[head_id]


class Detector:
    """Parameter layout and forward passes for the full detector."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg

    # -- parameter construction -------------------------------------------
    def _param_specs(self) -> list[tuple[str, tuple[int, ...], int]]:
        c_img = self.cfg.image_shape[0]
        cf = self.cfg.feature_channels
        hid = self.cfg.head_hidden
        feat = self.cfg.feature_size
        specs: list[tuple[str, tuple[int, ...], int]] = []

        def conv(name, cout, cin, k):
            specs.append((f"{name}.w", (cout, cin, k, k), cin * k * k))
            specs.append((f"{name}.b", (cout,), 0))

        for branch, out2 in (("content", cf), ("forgery", 2 * cf), ("demographic", cf)):
            conv(f"enc.{branch}.conv1", cf, c_img, 3)
            conv(f"enc.{branch}.conv2", out2, cf, 3)
        # 1x1 decoder kernels: keeps the elementwise sign perturbation small
        # relative to the weight scale, which 3x3 fan-in here would not.
        conv("dec.conv1", 2 * cf, 4 * cf, 1)
        conv("dec.conv2", c_img, 2 * cf, 1)
        for head in HEAD_IDS:
            width = _head_width(head, self.cfg)
            specs.append((f"head.{head}.fc1.w", (feat, hid), feat))
            specs.append((f"head.{head}.fc1.b", (hid,), 0))
            specs.append((f"head.{head}.fc2.w", (hid, width), hid))
            specs.append((f"head.{head}.fc2.b", (width,), 0))
        return specs

    def init_params(self, seed: int) -> ParameterStore:
        """Uniform fan-in initialization (bound sqrt(6/fan_in)); zero biases."""
        rng = np.random.default_rng(seed)
        params = ParameterStore()
        for name, shape, fan_in in self._param_specs():
            if fan_in:
                bound = np.sqrt(6.0 / fan_in)
                params.add(name, rng.uniform(-bound, bound, size=shape))
            else:
                params.add(name, np.zeros(shape))
        return params

    # -- forward passes -----------------------------------------------------
    def _branch(self, params: ParameterStore, name: str, x: Tensor) -> Tensor:
        h = ad.conv2d(x, params[f"enc.{name}.conv1.w"], params[f"enc.{name}.conv1.b"], 2, 1)
        h = ad.relu(h)
        return ad.conv2d(h, params[f"enc.{name}.conv2.w"], params[f"enc.{name}.conv2.b"], 2, 1)

    def encode(self, params: ParameterStore, x: Tensor) -> DisentangledFeatures:
        """Run the three encoder stacks; input is (N,C,H,W) or a single image."""
        x = self._as_batch(x, "encode")
        cf = self.cfg.feature_channels
        content = self._branch(params, "content", x)
        forgery = self._branch(params, "forgery", x)
        demo = self._branch(params, "demographic", x)
        return DisentangledFeatures(
            c=content,
            f_a=ad.narrow(forgery, 1, 0, cf),
            f_g=ad.narrow(forgery, 1, cf, cf),
            d=demo,
        )

    def decode(self, params: ParameterStore, c: Tensor, f: Tensor, d: Tensor) -> Tensor:
        """Reconstruct images from content, combined forgery, and demographic maps."""
        cf = self.cfg.feature_channels
        if f.shape[1] != 2 * cf:
            raise GraphError(
                f"decode: combined forgery map must have {2 * cf} channels, got {f.shape[1]}"
            )
        h = ad.concat([c, f, d], axis=1)
        h = ad.upsample2x(h)
        h = ad.conv2d(h, params["dec.conv1.w"], params["dec.conv1.b"], 1, 0)
        h = ad.upsample2x(h)
        return ad.conv2d(h, params["dec.conv2.w"], params["dec.conv2.b"], 1, 0)

    def head_forward(self, params: ParameterStore, head_id: str, feature: Tensor) -> Tensor:
        """Two-layer MLP head over the flattened feature map."""
        width = _head_width(head_id, self.cfg)
        n = feature.shape[0] if feature.ndim == 4 else 1
        flat = ad.reshape(feature, (n, self.cfg.feature_size))
        h = ad.relu(ad.matmul(flat, params[f"head.{head_id}.fc1.w"]) + params[f"head.{head_id}.fc1.b"])
        logits = ad.matmul(h, params[f"head.{head_id}.fc2.w"]) + params[f"head.{head_id}.fc2.b"]
        assert logits.shape == (n, width)
        return logits

    def _as_batch(self, x: Tensor, op: str) -> Tensor:
        if x.ndim == 3:
            x = ad.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != self.cfg.image_shape:
            raise GraphError(
                f"{op}: expected image shape {self.cfg.image_shape} (optionally batched), "
                f"got {x.shape}"
            )
        return x


def channel_mean_std(x: Tensor, eps: float = 0.0) -> tuple[Tensor, Tensor]:
    """Per-channel spatial mean and population std of an NCHW map."""
    mu = x.mean(axis=(2, 3), keepdims=True)
    centered = x - mu
    sigma = ad.sqrt((centered * centered).mean(axis=(2, 3), keepdims=True))
    if eps:
        sigma = sigma + eps
    return mu, sigma


def adain_fuse(f_g: Tensor, d: Tensor, eps: float = 1e-5) -> Tensor:
    """Re-normalize f_g per channel to carry d's spatial mean and std.

    `eps` stabilizes the division by f_g's std; pass 0 for the exact
    moment-matching identity (requires strictly positive channel stds).
    """
    squeeze = False
    if f_g.ndim == 3 and d.ndim == 3:
        f_g = ad.reshape(f_g, (1,) + f_g.shape)
        d = ad.reshape(d, (1,) + d.shape)
        squeeze = True
    if f_g.shape != d.shape or f_g.ndim != 4:
        raise GraphError(f"adain_fuse: shapes {f_g.shape} and {d.shape} must match (NCHW)")
    mu_f, sigma_f = channel_mean_std(f_g, eps=eps)
    mu_d, sigma_d = channel_mean_std(d)
    fused = sigma_d * ((f_g - mu_f) / sigma_f) + mu_d
    if squeeze:
        fused = ad.reshape(fused, fused.shape[1:])
    return fused
