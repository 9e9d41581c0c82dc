"""Declarative model specs: layer descriptors, the three base families,
variant naming, validation/shape inference, and compilation to a runnable
network.

Variant ids are a pure function of (family, layer list): the canonical
family layout gets the family name, single-layer edits get diff-style
names ("BaseSeq(-BN)", "Base0(+BN@1)"), reorders name the minimal
differing window ("BaseSeq(BN-Conv)"), repeated-block customs name the
repeating unit ("Conv-PL-UpSamp-x3"), and anything else falls back to a
canonical-hash suffix.
"""

import hashlib
import json
import math
import re
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .autodiff import add as t_add
from .autodiff import relu as t_relu
from .layers import (
    Activation,
    BatchNorm,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    GlobalAvgPool,
    MaxPool2x2,
    Mode,
    UpSample2x,
    conv_same_padding,
)


class SpecError(ValueError):
    """A model spec failed validation; carries the offending position."""

    def __init__(self, message: str, position: Optional[int] = None):
        super().__init__(message if position is None else f"{message} (position {position})")
        self.position = position


# ---------------------------------------------------------------------------
# descriptors

KINDS = ("conv", "batchnorm", "maxpool", "dropout", "dense", "activation",
         "flatten", "upsample", "gap", "resstage")


@dataclass(frozen=True)
class LayerDescriptor:
    kind: str
    filters: Optional[int] = None
    kernel: Optional[tuple] = None
    stride: Optional[int] = None
    padding: Optional[str] = None
    rate: Optional[float] = None
    units: Optional[int] = None
    fn: Optional[str] = None
    blocks: Optional[int] = None
    downsample: Optional[bool] = None

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        for f_ in ("filters", "kernel", "stride", "padding", "rate", "units",
                   "fn", "blocks", "downsample"):
            v = getattr(self, f_)
            if v is not None:
                out[f_] = list(v) if isinstance(v, tuple) else v
        return out

    @staticmethod
    def from_json(obj: dict) -> "LayerDescriptor":
        kw = dict(obj)
        kind = kw.pop("kind")
        if "kernel" in kw:
            kw["kernel"] = tuple(kw["kernel"])
        return LayerDescriptor(kind=kind, **kw)


def conv(filters: int, kernel=(3, 3), stride: int = 1, padding: str = "same") -> LayerDescriptor:
    return LayerDescriptor("conv", filters=filters, kernel=tuple(kernel),
                           stride=stride, padding=padding)


def batchnorm() -> LayerDescriptor:
    return LayerDescriptor("batchnorm")


def maxpool() -> LayerDescriptor:
    return LayerDescriptor("maxpool")


def dropout(rate: float = 0.25) -> LayerDescriptor:
    return LayerDescriptor("dropout", rate=rate)


def dense(units: int) -> LayerDescriptor:
    return LayerDescriptor("dense", units=units)


def activation(fn: str) -> LayerDescriptor:
    return LayerDescriptor("activation", fn=fn)


def flatten() -> LayerDescriptor:
    return LayerDescriptor("flatten")


def upsample() -> LayerDescriptor:
    return LayerDescriptor("upsample")


def gap() -> LayerDescriptor:
    return LayerDescriptor("gap")


def resstage(filters: int, blocks: int = 2, downsample: bool = False) -> LayerDescriptor:
    return LayerDescriptor("resstage", filters=filters, blocks=blocks, downsample=downsample)


def validate_descriptor(d: LayerDescriptor, position: Optional[int] = None) -> None:
    if d.kind not in KINDS:
        raise SpecError(f"unknown layer kind {d.kind!r}", position)
    if d.kind in ("conv", "resstage") and (d.filters is None or d.filters <= 0):
        raise SpecError(f"{d.kind} filters must be positive, got {d.filters}", position)
    if d.kind == "conv":
        if d.stride not in (1, 2):
            raise SpecError(f"conv stride must be 1 or 2, got {d.stride}", position)
        if d.padding not in ("same", "valid"):
            raise SpecError(f"conv padding must be same|valid, got {d.padding!r}", position)
    if d.kind == "dropout" and not (d.rate is not None and 0.0 <= d.rate < 1.0):
        raise SpecError(f"dropout rate must be in [0, 1), got {d.rate}", position)
    if d.kind == "dense" and (d.units is None or d.units <= 0):
        raise SpecError(f"dense units must be positive, got {d.units}", position)
    if d.kind == "activation" and d.fn not in ("relu", "softmax"):
        raise SpecError(f"activation must be relu|softmax, got {d.fn!r}", position)
    if d.kind == "resstage" and (d.blocks is None or d.blocks < 1):
        raise SpecError(f"resstage blocks must be >= 1, got {d.blocks}", position)


# ---------------------------------------------------------------------------
# model spec + base families

@dataclass(frozen=True)
class ModelSpec:
    family: str
    layers: tuple
    mutable_mask: tuple
    num_classes: int

    def __post_init__(self):
        if len(self.layers) != len(self.mutable_mask):
            raise SpecError("mutable_mask length must match layer count")

    @property
    def variant_id(self) -> str:
        return derive_variant_id(self)

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "num_classes": self.num_classes,
            "variant_id": self.variant_id,
            "layers": [d.to_json() for d in self.layers],
            "mutable_mask": list(self.mutable_mask),
        }

    @staticmethod
    def from_json(obj: dict) -> "ModelSpec":
        spec = ModelSpec(
            family=obj["family"],
            layers=tuple(LayerDescriptor.from_json(d) for d in obj["layers"]),
            mutable_mask=tuple(bool(b) for b in obj["mutable_mask"]),
            num_classes=int(obj["num_classes"]),
        )
        stored = obj.get("variant_id")
        if stored is not None and stored != spec.variant_id:
            raise SpecError(
                f"stored variant_id {stored!r} does not match derived {spec.variant_id!r}"
            )
        return spec


def spec_hash(spec: ModelSpec) -> str:
    basis = {
        "family": spec.family,
        "num_classes": spec.num_classes,
        "layers": [d.to_json() for d in spec.layers],
    }
    blob = json.dumps(basis, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class FilterSchedule:
    widths: tuple

    def __post_init__(self):
        if len(self.widths) != 4 or any(w not in (64, 128, 256, 512) for w in self.widths):
            raise SpecError(f"schedule must be 4 stage widths from {{64,128,256,512}}, got {self.widths}")


SCHEDULES = {
    "Res64to512": FilterSchedule((64, 128, 256, 512)),
    "Res512to64": FilterSchedule((512, 256, 128, 64)),
    "Res64": FilterSchedule((64, 64, 64, 64)),
    "Res512": FilterSchedule((512, 512, 512, 512)),
}
_SCHEDULE_NAMES = {v.widths: k for k, v in SCHEDULES.items()}

BASESEQ_CONV_FILTERS = 32  # unstated in the source experiments; recorded in metadata


def _require_classes(num_classes: int) -> None:
    if num_classes < 2:
        raise SpecError(f"num_classes must be >= 2, got {num_classes}")


def _base0_layers(num_classes: int) -> tuple:
    return (flatten(), dense(num_classes), activation("softmax"))


def base0(num_classes: int) -> ModelSpec:
    _require_classes(num_classes)
    return ModelSpec("Base0", _base0_layers(num_classes), (False, True, True), num_classes)


def _baseseq_layers(num_classes: int) -> tuple:
    return (
        conv(BASESEQ_CONV_FILTERS),
        batchnorm(),
        maxpool(),
        dropout(0.25),
        flatten(),
        dense(num_classes),
        activation("softmax"),
    )


def base_seq(num_classes: int) -> ModelSpec:
    _require_classes(num_classes)
    # the six named layers are mutable; Flatten is plumbing
    mask = (True, True, True, True, False, True, True)
    return ModelSpec("BaseSeq", _baseseq_layers(num_classes), mask, num_classes)


def _res18_layers(widths: tuple, num_classes: int) -> tuple:
    s1, s2, s3, s4 = widths
    return (
        conv(s1),  # small-image stem: 3x3 stride 1, no stem pooling
        batchnorm(),
        activation("relu"),
        resstage(s1, 2, False),
        resstage(s2, 2, True),
        resstage(s3, 2, True),
        resstage(s4, 2, True),
        gap(),
        dense(num_classes),
        activation("softmax"),
    )


def base_res18(schedule: FilterSchedule, num_classes: int) -> ModelSpec:
    _require_classes(num_classes)
    layers = _res18_layers(schedule.widths, num_classes)
    return ModelSpec("BaseRes18", layers, (False,) * len(layers), num_classes)


# ---------------------------------------------------------------------------
# variant naming

def _abbr(d: LayerDescriptor, num_classes: int) -> str:
    if d.kind == "conv":
        name = "Conv" if d.filters == BASESEQ_CONV_FILTERS else f"Conv{d.filters}"
        return name + ("s2" if d.stride == 2 else "")
    if d.kind == "batchnorm":
        return "BN"
    if d.kind == "maxpool":
        return "PL"
    if d.kind == "dropout":
        return "DropL" if d.rate == 0.25 else f"DropL{d.rate:g}"
    if d.kind == "dense":
        return "FCL" if d.units == num_classes else f"FCL{d.units}"
    if d.kind == "activation":
        return "AL" if d.fn == "softmax" else "ReLU"
    if d.kind == "flatten":
        return "Flat"
    if d.kind == "upsample":
        return "UpSamp"
    if d.kind == "gap":
        return "GAP"
    if d.kind == "resstage":
        return f"Res{d.filters}"
    raise SpecError(f"unknown layer kind {d.kind!r}")


def _descriptor_from_abbr(token: str, num_classes: int) -> LayerDescriptor:
    table = {
        "BN": batchnorm(), "PL": maxpool(), "Flat": flatten(), "UpSamp": upsample(),
        "GAP": gap(), "AL": activation("softmax"), "ReLU": activation("relu"),
    }
    if token in table:
        return table[token]
    if m := re.fullmatch(r"Conv(\d+)?(s2)?", token):
        f_ = int(m.group(1)) if m.group(1) else BASESEQ_CONV_FILTERS
        return conv(f_, stride=2 if m.group(2) else 1)
    if m := re.fullmatch(r"DropL([0-9.]+)?", token):
        return dropout(float(m.group(1)) if m.group(1) else 0.25)
    if m := re.fullmatch(r"FCL(\d+)?", token):
        return dense(int(m.group(1)) if m.group(1) else num_classes)
    raise SpecError(f"unknown layer abbreviation {token!r}")


def _family_canon(spec: ModelSpec):
    if spec.family == "Base0":
        return _base0_layers(spec.num_classes)
    if spec.family == "BaseSeq":
        return _baseseq_layers(spec.num_classes)
    if spec.family == "BaseRes18":
        widths = tuple(d.filters for d in spec.layers if d.kind == "resstage")
        if len(widths) == 4:
            return _res18_layers(widths, spec.num_classes)
    return None


def _family_base_name(spec: ModelSpec) -> str:
    if spec.family == "BaseRes18":
        widths = tuple(d.filters for d in spec.layers if d.kind == "resstage")
        named = _SCHEDULE_NAMES.get(widths)
        if named:
            return named
        if len(widths) == 4:
            return "Res" + "-".join(str(w) for w in widths)
    return spec.family


def _repeat_pattern_name(spec: ModelSpec) -> Optional[str]:
    tail = (flatten(), dense(spec.num_classes), activation("softmax"))
    if len(spec.layers) < len(tail) or spec.layers[-3:] != tail:
        return None
    body = spec.layers[:-3]
    if not body:
        return None
    for p in range(1, len(body) + 1):
        if len(body) % p:
            continue
        unit = body[:p]
        if unit * (len(body) // p) == body:
            names = "-".join(_abbr(d, spec.num_classes) for d in unit)
            return f"{names}-x{len(body) // p}"
    return None


def derive_variant_id(spec: ModelSpec) -> str:
    canon = _family_canon(spec)
    base_name = _family_base_name(spec)
    if canon is not None:
        layers = spec.layers
        if layers == canon:
            return base_name
        nc = spec.num_classes
        if len(layers) == len(canon) - 1:
            for i in range(len(canon)):
                if layers == canon[:i] + canon[i + 1 :]:
                    return f"{base_name}(-{_abbr(canon[i], nc)})"
        if len(layers) == len(canon) + 1:
            for i in range(len(layers)):
                if canon == layers[:i] + layers[i + 1 :]:
                    return f"{base_name}(+{_abbr(layers[i], nc)}@{i})"
        if len(layers) == len(canon) and sorted(map(repr, layers)) == sorted(map(repr, canon)):
            diff = [i for i in range(len(canon)) if layers[i] != canon[i]]
            window = layers[diff[0] : diff[-1] + 1]
            return f"{base_name}({'-'.join(_abbr(d, nc) for d in window)})"
    rep = _repeat_pattern_name(spec)
    if rep is not None:
        return rep
    return f"{base_name}[{spec_hash(spec)[:8]}]"


def parse_variant_id(vid: str, num_classes: int = 2) -> ModelSpec:
    """Rebuild the layer ordering a built-in variant id encodes."""
    if vid == "Base0":
        return base0(num_classes)
    if vid == "BaseSeq":
        return base_seq(num_classes)
    if vid in SCHEDULES:
        return base_res18(SCHEDULES[vid], num_classes)

    if m := re.fullmatch(r"(Base0|BaseSeq)\((.+)\)", vid):
        family, inner = m.group(1), m.group(2)
        base = base0(num_classes) if family == "Base0" else base_seq(num_classes)
        layers = list(base.layers)
        mask = list(base.mutable_mask)
        if m2 := re.fullmatch(r"-(\S+)", inner):
            want = m2.group(1)
            for i, d in enumerate(layers):
                if _abbr(d, num_classes) == want:
                    del layers[i], mask[i]
                    return replace(base, layers=tuple(layers), mutable_mask=tuple(mask))
            raise SpecError(f"{vid!r}: no layer {want!r} to remove")
        if m2 := re.fullmatch(r"\+(\S+)@(\d+)", inner):
            d = _descriptor_from_abbr(m2.group(1), num_classes)
            at = int(m2.group(2))
            layers.insert(at, d)
            mask.insert(at, True)
            return replace(base, layers=tuple(layers), mutable_mask=tuple(mask))
        tokens = inner.split("-")
        abbrs = [_abbr(d, num_classes) for d in layers]
        k = len(tokens)
        for i in range(len(layers) - k + 1):
            if sorted(abbrs[i : i + k]) == sorted(tokens):
                by_name = {abbrs[j]: j for j in range(i, i + k)}
                order = [by_name[t] for t in tokens]
                new_layers = layers[:i] + [layers[j] for j in order] + layers[i + k :]
                new_mask = mask[:i] + [mask[j] for j in order] + mask[i + k :]
                return replace(base, layers=tuple(new_layers), mutable_mask=tuple(new_mask))
        raise SpecError(f"cannot locate window {tokens} in {family} canon")

    if m := re.fullmatch(r"((?:[A-Za-z0-9.]+-)+)x(\d+)", vid):
        tokens = m.group(1).rstrip("-").split("-")
        n = int(m.group(2))
        unit = tuple(_descriptor_from_abbr(t, num_classes) for t in tokens)
        layers = unit * n + (flatten(), dense(num_classes), activation("softmax"))
        mask = (True,) * (len(unit) * n) + (False, True, True)
        return ModelSpec("Custom", layers, mask, num_classes)

    raise SpecError(f"cannot parse variant id {vid!r}")


# ---------------------------------------------------------------------------
# validation and shape inference

def validate_structure(spec: ModelSpec) -> None:
    """Shape-free validation: parameter ranges, spatial/flat ordering, head."""
    for pos, d in enumerate(spec.layers):
        validate_descriptor(d, pos)
    spatial = True
    for pos, d in enumerate(spec.layers):
        if d.kind in ("conv", "maxpool", "upsample", "gap", "resstage") and not spatial:
            raise SpecError(f"{d.kind} requires spatial input", pos)
        if d.kind == "dense" and spatial:
            raise SpecError("dense requires flattened input", pos)
        if d.kind in ("flatten", "gap"):
            spatial = False
    dense_positions = [i for i, d in enumerate(spec.layers) if d.kind == "dense"]
    if not dense_positions:
        raise SpecError("no classification head (final dense layer missing)")
    head = dense_positions[-1]
    for pos in range(head + 1, len(spec.layers)):
        if spec.layers[pos].kind != "activation":
            raise SpecError("only activations may follow the classification head", pos)
    if spec.layers[head].units != spec.num_classes:
        raise SpecError(
            f"classification head has {spec.layers[head].units} units, expected {spec.num_classes}",
            head,
        )


def infer_shapes(spec: ModelSpec, input_shape: tuple) -> list:
    """Per-layer output shapes; raises SpecError on underflow/mismatch.

    Shapes are (C, H, W) while spatial and (D,) once flattened.
    """
    validate_structure(spec)
    shapes = []
    cur = tuple(input_shape)
    if len(cur) != 3:
        raise SpecError(f"input shape must be (C, H, W), got {cur}")
    for pos, d in enumerate(spec.layers):
        if d.kind == "conv":
            c, h, w = cur
            kh, kw = d.kernel
            if d.padding == "valid":
                oh = (h - kh) // d.stride + 1
                ow = (w - kw) // d.stride + 1
                if oh < 1 or ow < 1:
                    raise SpecError(f"spatial underflow: {kh}x{kw} valid conv on {h}x{w}", pos)
            else:
                oh, ow = math.ceil(h / d.stride), math.ceil(w / d.stride)
            cur = (d.filters, oh, ow)
        elif d.kind == "maxpool":
            c, h, w = cur
            if min(h, w) < 2:
                raise SpecError(f"spatial underflow: maxpool on {h}x{w}", pos)
            cur = (c, (h + 1) // 2, (w + 1) // 2)
        elif d.kind == "upsample":
            c, h, w = cur
            cur = (c, 2 * h, 2 * w)
        elif d.kind == "resstage":
            c, h, w = cur
            if d.downsample:
                h, w = math.ceil(h / 2), math.ceil(w / 2)
            cur = (d.filters, h, w)
        elif d.kind == "flatten":
            if len(cur) == 3:
                cur = (int(np.prod(cur)),)
        elif d.kind == "gap":
            cur = (cur[0],)
        elif d.kind == "dense":
            cur = (d.units,)
        # batchnorm / dropout / activation keep the shape
        shapes.append(cur)
    return shapes


# ---------------------------------------------------------------------------
# compilation

class BasicBlock:
    """Conv-BN-ReLU-Conv-BN plus skip; 1x1 projection on width/stride change."""

    def __init__(self, in_channels: int, filters: int, downsample: bool, rng):
        stride = 2 if downsample else 1
        self.conv1 = Conv2d(in_channels, filters, rng, stride=stride)
        self.bn1 = BatchNorm(filters)
        self.conv2 = Conv2d(filters, filters, rng)
        self.bn2 = BatchNorm(filters)
        self.proj = None
        if downsample or in_channels != filters:
            self.proj = Conv2d(in_channels, filters, rng, kernel=(1, 1), stride=stride)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        h = t_relu(self.bn1.forward(self.conv1.forward(x, mode), mode))
        h = self.bn2.forward(self.conv2.forward(h, mode), mode)
        s = self.proj.forward(x, mode) if self.proj is not None else x
        return t_relu(t_add(h, s))

    def params(self):
        out = self.conv1.params() + self.bn1.params() + self.conv2.params() + self.bn2.params()
        if self.proj is not None:
            out += self.proj.params()
        return out

    def conv_layers(self):
        out = [self.conv1, self.conv2]
        if self.proj is not None:
            out.append(self.proj)
        return out


class ResidualStage:
    def __init__(self, in_channels: int, filters: int, blocks: int, downsample: bool, rng):
        self.blocks = []
        c = in_channels
        for b in range(blocks):
            self.blocks.append(BasicBlock(c, filters, downsample and b == 0, rng))
            c = filters

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        for block in self.blocks:
            x = block.forward(x, mode)
        return x

    def params(self):
        return [p for b in self.blocks for p in b.params()]

    def conv_layers(self):
        return [c for b in self.blocks for c in b.conv_layers()]


class Network:
    """Compiled, runnable model. forward_logits skips a trailing softmax
    descriptor: the loss consumes logits and argmax is unchanged."""

    def __init__(self, spec: ModelSpec, input_shape: tuple, layers: list, skip_last: bool):
        self.spec = spec
        self.input_shape = tuple(input_shape)
        self.layers = layers
        self._skip_last = skip_last

    def forward_logits(self, x: Tensor, mode: Mode) -> Tensor:
        run = self.layers[:-1] if self._skip_last else self.layers
        for layer in run:
            x = layer.forward(x, mode)
        return x

    def forward_full(self, x: Tensor, mode: Mode) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, mode)
        return x

    def predict(self, images: np.ndarray, batchsize: int = 256) -> np.ndarray:
        out = []
        for i in range(0, len(images), batchsize):
            logits = self.forward_logits(Tensor(images[i : i + batchsize]), Mode.EVAL)
            out.append(np.argmax(logits.data, axis=1))
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)

    def parameters(self):
        return [p for layer in self.layers for p in layer.params()]

    def conv_count(self) -> int:
        n = 0
        for layer in self.layers:
            if isinstance(layer, Conv2d):
                n += 1
            elif isinstance(layer, ResidualStage):
                n += len(layer.conv_layers())
        return n


def compile_network(spec: ModelSpec, input_shape: tuple, num_classes: Optional[int] = None,
                    seed: int = 0) -> Network:
    if num_classes is not None and num_classes != spec.num_classes:
        raise SpecError(f"spec has {spec.num_classes} classes, compile asked for {num_classes}")
    infer_shapes(spec, input_shape)  # raises on any structural/shape problem
    rng = np.random.default_rng(seed)
    layers = []
    cur = tuple(input_shape)
    for d in spec.layers:
        if d.kind == "conv":
            layers.append(Conv2d(cur[0], d.filters, rng, kernel=d.kernel,
                                 stride=d.stride, padding=d.padding))
            c, h, w = cur
            if d.padding == "valid":
                cur = (d.filters, (h - d.kernel[0]) // d.stride + 1,
                       (w - d.kernel[1]) // d.stride + 1)
            else:
                cur = (d.filters, math.ceil(h / d.stride), math.ceil(w / d.stride))
        elif d.kind == "batchnorm":
            layers.append(BatchNorm(cur[0]))
        elif d.kind == "maxpool":
            layers.append(MaxPool2x2())
            cur = (cur[0], (cur[1] + 1) // 2, (cur[2] + 1) // 2)
        elif d.kind == "dropout":
            layers.append(Dropout(d.rate, seed=int(rng.integers(2**63))))
        elif d.kind == "dense":
            layers.append(Dense(cur[0], d.units, rng))
            cur = (d.units,)
        elif d.kind == "activation":
            layers.append(Activation(d.fn))
        elif d.kind == "flatten":
            layers.append(Flatten())
            if len(cur) == 3:
                cur = (int(np.prod(cur)),)
        elif d.kind == "upsample":
            layers.append(UpSample2x())
            cur = (cur[0], 2 * cur[1], 2 * cur[2])
        elif d.kind == "gap":
            layers.append(GlobalAvgPool())
            cur = (cur[0],)
        elif d.kind == "resstage":
            layers.append(ResidualStage(cur[0], d.filters, d.blocks, d.downsample, rng))
            h, w = cur[1], cur[2]
            if d.downsample:
                h, w = math.ceil(h / 2), math.ceil(w / 2)
            cur = (d.filters, h, w)
    skip_last = bool(spec.layers) and spec.layers[-1] == activation("softmax")
    return Network(spec, input_shape, layers, skip_last)
