"""Image-processing pipelines whose step ORDER is an experimental variable.

Steps run strictly in sequence. Filters applied before the float
conversion step operate on u8 with clamp-and-round (mirroring image
libraries); after it they operate on unclamped reals. That asymmetry is
exactly what makes [filter, preprocess] distinguishable from
[preprocess, filter] on saturating images.
"""

from dataclasses import dataclass

import numpy as np

from .data import Dataset

STEP_NAMES = ("sharpen", "blur", "preprocess", "upsample2x", "scale01", "to_rgb")

SHARPEN_KERNEL = np.array([[0, -1, 0], [-1, 5, -1], [0, -1, 0]], dtype=np.float32)
BLUR_KERNEL = np.full((3, 3), 1.0 / 9.0, dtype=np.float32)

# BGR channel means of the standard zero-centering preprocess routine
BGR_MEANS = np.array([103.939, 116.779, 123.68], dtype=np.float32)


class PipelineError(ValueError):
    pass


@dataclass(frozen=True)
class ImagePipeline:
    steps: tuple

    def __post_init__(self):
        for s in self.steps:
            if s not in STEP_NAMES:
                raise PipelineError(f"unknown pipeline step {s!r}; valid: {', '.join(STEP_NAMES)}")
        conversions = [s for s in self.steps if s in ("preprocess", "scale01")]
        if len(conversions) > 1:
            raise PipelineError("at most one of preprocess/scale01 per pipeline")
        if self.steps.count("to_rgb") > 1:
            raise PipelineError("to_rgb may appear at most once")

    @staticmethod
    def parse(text: str) -> "ImagePipeline":
        steps = tuple(s.strip() for s in text.split(",") if s.strip()) if text else ()
        return ImagePipeline(steps)

    def pipeline_id(self) -> str:
        return ">".join(self.steps) if self.steps else "raw"

    def validate_channels(self, channels: int) -> None:
        c = channels
        for pos, s in enumerate(self.steps):
            if s == "preprocess" and c != 3:
                raise PipelineError(
                    f"preprocess at step {pos} requires 3-channel input, has {c} "
                    "(convert with to_rgb first)"
                )
            if s == "to_rgb":
                c = 3


def _correlate3(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 3x3 correlation with replicate-border padding.

    x: float32 [n, C, H, W]; nine strided accumulations, no im2col.
    """
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            k = kernel[i, j]
            if k != 0.0:
                out += k * xp[:, :, i : i + h, j : j + w]
    return out


def apply_filter(img: np.ndarray, kind: str) -> np.ndarray:
    """u8 -> u8 filter: correlate, clamp to [0,255], round."""
    if kind not in ("sharpen", "blur"):
        raise PipelineError(f"unknown filter {kind!r}")
    kernel = SHARPEN_KERNEL if kind == "sharpen" else BLUR_KERNEL
    squeeze = img.ndim == 3
    x = img[None] if squeeze else img
    if x.dtype != np.uint8:
        raise PipelineError(f"u8 filter got {x.dtype}; use apply_filter_float after conversion")
    out = _correlate3(x.astype(np.float32), kernel)
    out = np.rint(np.clip(out, 0.0, 255.0)).astype(np.uint8)
    return out[0] if squeeze else out


def apply_filter_float(img: np.ndarray, kind: str) -> np.ndarray:
    """Float-domain filter: no clamping, no rounding."""
    kernel = SHARPEN_KERNEL if kind == "sharpen" else BLUR_KERNEL
    squeeze = img.ndim == 3
    x = img[None] if squeeze else img
    out = _correlate3(x.astype(np.float32), kernel)
    return out[0] if squeeze else out


def preprocess(img: np.ndarray) -> np.ndarray:
    """RGB u8 -> BGR float32, per-channel zero centering, no scaling."""
    squeeze = img.ndim == 3
    x = img[None] if squeeze else img
    if x.shape[1] != 3:
        raise PipelineError(f"preprocess requires 3 channels, got {x.shape[1]} "
                            "(convert with to_rgb first)")
    bgr = x[:, ::-1].astype(np.float32)
    out = bgr - BGR_MEANS[None, :, None, None]
    return out[0] if squeeze else out


def upsample2x_pixels(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=-2), 2, axis=-1)


@dataclass
class TensorSet:
    """A pipeline's output: float32 images ready for training."""

    x: np.ndarray  # float32 [n, C, H, W]
    labels: np.ndarray
    class_names: list
    role: str
    pipeline_id: str

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.x.shape[1:])


def run_pipeline(d: Dataset, p: ImagePipeline) -> TensorSet:
    """Apply steps strictly in order; output is float32 whatever happens."""
    p.validate_channels(d.channels)
    x = d.images
    is_float = False
    for s in p.steps:
        if s in ("sharpen", "blur"):
            x = apply_filter_float(x, s) if is_float else apply_filter(x, s)
        elif s == "upsample2x":
            x = upsample2x_pixels(x)
        elif s == "to_rgb":
            if x.shape[1] == 1:
                x = np.repeat(x, 3, axis=1)
        elif s == "scale01":
            x = x.astype(np.float32) / np.float32(255.0)
            is_float = True
        elif s == "preprocess":
            x = preprocess(x)
            is_float = True
    if not is_float:
        x = x.astype(np.float32)
    return TensorSet(np.ascontiguousarray(x, dtype=np.float32), d.labels.copy(),
                     list(d.class_names), d.role, p.pipeline_id())


def default_pipeline(channels: int, for_resnet: bool = False) -> ImagePipeline:
    """Scale01 for grayscale paths; to_rgb + BGR centering for 3-channel/ResNet."""
    if for_resnet or channels == 3:
        steps = ("to_rgb", "preprocess") if channels == 1 else ("preprocess",)
        return ImagePipeline(steps)
    return ImagePipeline(("scale01",))
