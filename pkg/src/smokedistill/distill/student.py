"""Student model contract and a small reference network.

Any ``nn.Module`` whose forward returns ``StudentOutputs`` (three logit maps at
input resolution) can be trained and evaluated here; external real-time
architectures plug in by subclassing :class:`StudentModel`.
"""

from __future__ import annotations

from typing import Sequence

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .losses import StudentOutputs

DEFAULT_WIDTHS = (16, 24, 48)  # ~52k parameters


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float()
    return x / 127.5 - 1.0


class StudentModel(nn.Module):
    stride: int = 1
    descriptor: str = "student"
    #: (height, width) images are resized to for inference; None = native size
    input_size: tuple[int, int] | None = None

    def check_input(self, x: torch.Tensor) -> None:
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"input {h}x{w} not divisible by stride {self.stride}")

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    @torch.no_grad()
    def predict_proba(self, image: np.ndarray) -> np.ndarray:
        """Smoke probability map for one uint8 RGB image, at the image's own size."""
        was_training = self.training
        self.eval()
        h, w = image.shape[:2]
        size = self.input_size
        if size is None:
            size = (h - h % self.stride or self.stride, w - w % self.stride or self.stride)
        resized = image if (h, w) == tuple(size) else cv2.resize(
            image, (size[1], size[0]), interpolation=cv2.INTER_AREA)
        param = next(self.parameters())
        x = image_to_tensor(resized).unsqueeze(0).to(param.device, param.dtype)
        prob = torch.sigmoid(self(x).final_seg_logits)[0, 0].double().cpu().numpy()
        if prob.shape != (h, w):
            prob = cv2.resize(prob, (w, h), interpolation=cv2.INTER_LINEAR)
        self.train(was_training)
        return np.clip(prob, 0.0, 1.0)


def _conv(cin: int, cout: int, stride: int = 1, dilation: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation),
        nn.SiLU(),
    )


class ReferenceStudent(StudentModel):
    """Three-branch toy segmenter: detail path at 1/4, context path at 1/8.

    The aux head reads the detail path alone, the boundary head reads the
    detail path, and the final head reads detail + upsampled context fused.
    SiLU keeps the network smooth for finite-difference gradient checks.
    """

    stride = 8

    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS):
        super().__init__()
        c0, c1, c2 = widths
        self.widths = tuple(int(c) for c in widths)
        self.descriptor = "reference-tiny-" + "-".join(map(str, self.widths))
        self.stem = nn.Sequential(_conv(3, c0, stride=2), _conv(c0, c1, stride=2))
        self.detail = _conv(c1, c1)
        self.context = nn.Sequential(_conv(c1, c2, stride=2), _conv(c2, c2, dilation=2))
        self.context_proj = nn.Conv2d(c2, c1, 1)
        self.boundary_branch = _conv(c1, c1)
        self.aux_head = nn.Conv2d(c1, 1, 1)
        self.fuse = _conv(c1, c1)
        self.final_head = nn.Conv2d(c1, 1, 1)
        self.boundary_head = nn.Conv2d(c1, 1, 1)

    def forward(self, x: torch.Tensor) -> StudentOutputs:
        self.check_input(x)
        size = x.shape[-2:]
        feat = self.stem(x)
        detail = self.detail(feat)
        ctx = self.context_proj(self.context(feat))
        ctx = F.interpolate(ctx, size=detail.shape[-2:], mode="bilinear", align_corners=False)
        bnd = self.boundary_branch(detail)
        fused = self.fuse(detail + ctx)

        def up(t: torch.Tensor) -> torch.Tensor:
            return F.interpolate(t, size=size, mode="bilinear", align_corners=False)

        return StudentOutputs(up(self.aux_head(detail)), up(self.final_head(fused)),
                              up(self.boundary_head(bnd)))


def reference_student(widths: Sequence[int] = DEFAULT_WIDTHS, seed: int = 0) -> ReferenceStudent:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ReferenceStudent(widths)
