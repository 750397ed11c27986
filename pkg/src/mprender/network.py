"""3D U-Net over the frustum volume and the per-plane blend.

Encoder downsamples H,W then P,H,W with stride-2 convolutions, the
bottleneck uses dilation 2, and the decoder mirrors with nearest
upsampling plus skip concats.  The head emits 4 channels per plane:
sigmoid RGB and a weight logit that is softmaxed across planes, so the
blended image is a per-pixel convex combination and stays in [0, 1].
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractViolation
from .voxelizer import FeatureVolume


@dataclass(frozen=True)
class RenderNetArch:
    """Layer plan; serialized verbatim into checkpoints."""

    in_channels: int = 11
    enc_channels: tuple[int, int] = (16, 32)
    bottleneck_channels: int = 64
    dec_channels: tuple[int, int] = (32, 16)
    kernel: int = 3
    bottleneck_dilation: int = 2

    def descriptor(self) -> str:
        doc = {
            "kind": "frustum-unet3d",
            "in_channels": self.in_channels,
            "enc_channels": list(self.enc_channels),
            "bottleneck_channels": self.bottleneck_channels,
            "dec_channels": list(self.dec_channels),
            "kernel": self.kernel,
            "bottleneck_dilation": self.bottleneck_dilation,
            "head_channels": 4,
        }
        return json.dumps(doc, sort_keys=True)

    def descriptor_hash(self) -> str:
        return hashlib.sha256(self.descriptor().encode("ascii")).hexdigest()

    @classmethod
    def from_descriptor(cls, text: str) -> "RenderNetArch":
        doc = json.loads(text)
        if doc.get("kind") != "frustum-unet3d":
            raise ContractViolation(f"unknown architecture kind {doc.get('kind')!r}")
        return cls(
            in_channels=doc["in_channels"],
            enc_channels=tuple(doc["enc_channels"]),
            bottleneck_channels=doc["bottleneck_channels"],
            dec_channels=tuple(doc["dec_channels"]),
            kernel=doc["kernel"],
            bottleneck_dilation=doc["bottleneck_dilation"],
        )


@dataclass
class PlaneStack:
    """Per-plane predictions: rgb (P,3,H,W), weight logits and alpha (P,H,W)."""

    rgb: Tensor
    weight_logits: Tensor
    alpha: Tensor


@dataclass
class RenderedImage:
    pixels: Tensor  # (3, H, W) in [0, 1]


class RenderNet:
    """Fully convolutional: parameters depend on channel counts only."""

    def __init__(self, arch: RenderNetArch = RenderNetArch()):
        self.arch = arch
        k = arch.kernel
        e1, e2 = arch.enc_channels
        bt = arch.bottleneck_channels
        d1, d2 = arch.dec_channels
        cin = arch.in_channels
        self._layers = [
            ("enc1", (e1, cin, k, k, k)),
            ("enc2", (e2, e1, k, k, k)),
            ("bottleneck", (bt, e2, k, k, k)),
            ("dec1", (d1, bt + e1, k, k, k)),
            ("dec2", (d2, d1 + cin, k, k, k)),
            ("head", (4, d2, 1, 1, 1)),
        ]

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for name, wshape in self._layers:
            shapes[f"{name}.weight"] = wshape
            shapes[f"{name}.bias"] = (wshape[0],)
        return shapes

    def init_params(self, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
        """Fan-in-scaled uniform weights, zero biases, deterministic per seed."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, wshape in self._layers:
            fan_in = int(np.prod(wshape[1:]))
            bound = np.sqrt(1.0 / fan_in)
            params[f"{name}.weight"] = rng.uniform(-bound, bound, size=wshape).astype(dtype)
            params[f"{name}.bias"] = np.zeros(wshape[0], dtype=dtype)
        return params

    def params_as_tensors(self, params, tape: Tape | None) -> dict[str, Tensor]:
        return {k: Tensor(v, tape=tape) for k, v in params.items()}

    def _check_input(self, volume: Tensor):
        if volume.data.ndim != 4:
            raise ContractViolation(f"enc1: volume must be (C, P, H, W), got {volume.shape}")
        c, p, h, w = volume.shape
        if c != self.arch.in_channels:
            raise ContractViolation(
                f"enc1: expected {self.arch.in_channels} input channels, got {c}")
        if h % 4 or w % 4:
            raise ContractViolation(f"enc1: H and W must be divisible by 4, got {h}x{w}")
        if p % 2:
            raise ContractViolation(f"enc2: plane count must be even, got {p}")

    def forward(self, volume, params: dict[str, Tensor]) -> PlaneStack:
        """Volume (C, P, H, W) -> PlaneStack.  Params must be Tensors."""
        if isinstance(volume, FeatureVolume):
            volume = volume.values
        self._check_input(volume)
        for key in self.param_shapes():
            if key not in params:
                raise ContractViolation(f"missing parameter {key}")

        def conv(name, x, **kw):
            w, b = params[f"{name}.weight"], params[f"{name}.bias"]
            try:
                return ad.conv3d(x, w, b, **kw)
            except ContractViolation as e:
                raise ContractViolation(f"{name}: {e}") from e

        x0 = volume
        e1 = ad.relu(conv("enc1", x0, stride=(1, 2, 2)))
        e2 = ad.relu(conv("enc2", e1, stride=(2, 2, 2)))
        bt = ad.relu(conv("bottleneck", e2, dilation=self.arch.bottleneck_dilation))
        d1 = ad.relu(conv("dec1", ad.concat_channels(ad.upsample_nearest(bt, (2, 2, 2)), e1)))
        d2 = ad.relu(conv("dec2", ad.concat_channels(ad.upsample_nearest(d1, (1, 2, 2)), x0)))
        head = conv("head", d2)

        planes = volume.shape[1]
        rgb = ad.moveaxis(ad.sigmoid(ad.slice_channels(head, 0, 3)), 0, 1)
        logits = ad.reshape(ad.slice_channels(head, 3, 4),
                            (planes, volume.shape[2], volume.shape[3]))
        alpha = ad.softmax_axis(logits, axis=0)
        return PlaneStack(rgb=rgb, weight_logits=logits, alpha=alpha)


def blend(stack: PlaneStack) -> RenderedImage:
    """Per-pixel weighted sum of the plane images."""
    p, _, h, w = stack.rgb.shape
    alpha = ad.reshape(stack.alpha, (p, 1, h, w))
    return RenderedImage(pixels=ad.tsum(ad.mul(stack.rgb, alpha), axis=0))
