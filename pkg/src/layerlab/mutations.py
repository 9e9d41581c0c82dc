"""Architecture exploration operators and variant grids.

Each operator takes a validated base spec and returns a VariantGrid: the
control spec first, then one entry per candidate. Candidates that fail
structural validation stay in the grid marked invalid (so reports can say
why a removal is untestable) except for PaP, where illegal insertion
positions are simply skipped. Grids are deterministic and deduplicated by
canonical spec hash.
"""

import warnings
from dataclasses import dataclass, replace
from typing import Optional

from .models import (
    SCHEDULES,
    LayerDescriptor,
    ModelSpec,
    SpecError,
    activation,
    base0,
    base_res18,
    base_seq,
    batchnorm,
    conv,
    dense,
    dropout,
    flatten,
    maxpool,
    spec_hash,
    upsample,
    validate_structure,
)


@dataclass(frozen=True)
class GridEntry:
    variant_id: str
    spec: ModelSpec
    provenance: str
    valid: bool
    invalid_reason: Optional[str] = None


@dataclass
class VariantGrid:
    base_family: str
    entries: list

    @property
    def variant_ids(self):
        return [e.variant_id for e in self.entries]

    @property
    def control(self) -> GridEntry:
        return self.entries[0]

    def valid_entries(self):
        return [e for e in self.entries if e.valid]

    def candidates(self):
        return [e for e in self.entries if e.provenance != "control"]

    def to_json(self) -> dict:
        return {
            "base_family": self.base_family,
            "entries": [
                {
                    "variant_id": e.variant_id,
                    "provenance": e.provenance,
                    "valid": e.valid,
                    "invalid_reason": e.invalid_reason,
                    "spec": e.spec.to_json(),
                }
                for e in self.entries
            ],
        }

    @staticmethod
    def from_json(obj: dict) -> "VariantGrid":
        entries = [
            GridEntry(
                variant_id=e["variant_id"],
                spec=ModelSpec.from_json(e["spec"]),
                provenance=e["provenance"],
                valid=bool(e["valid"]),
                invalid_reason=e.get("invalid_reason"),
            )
            for e in obj["entries"]
        ]
        return VariantGrid(base_family=obj["base_family"], entries=entries)


class _GridBuilder:
    def __init__(self, base: ModelSpec):
        validate_structure(base)
        self.base = base
        self.entries: list = []
        self._hashes: dict = {}
        self._ids: set = set()
        self.add(base, "control")

    def add(self, spec: ModelSpec, provenance: str) -> bool:
        h = spec_hash(spec)
        if h in self._hashes:
            return False
        vid = spec.variant_id
        if vid in self._ids:
            vid = f"{vid}#{h[:8]}"  # distinct spec, colliding name
        try:
            validate_structure(spec)
            valid, reason = True, None
        except SpecError as exc:
            valid, reason = False, str(exc)
        self._hashes[h] = vid
        self._ids.add(vid)
        self.entries.append(GridEntry(vid, spec, provenance, valid, reason))
        return True

    def grid(self) -> VariantGrid:
        return VariantGrid(self.base.family, self.entries)


def _head_index(spec: ModelSpec) -> int:
    return max(i for i, d in enumerate(spec.layers) if d.kind == "dense")


def _with_layers(spec: ModelSpec, layers: list, mask: list) -> ModelSpec:
    return replace(spec, layers=tuple(layers), mutable_mask=tuple(mask))


def pap_insert(base: ModelSpec, layer: LayerDescriptor) -> VariantGrid:
    """One variant per legal insertion gap in the pre-head region."""
    builder = _GridBuilder(base)
    inserted = 0
    for gap in range(_head_index(base) + 1):
        layers = list(base.layers)
        mask = list(base.mutable_mask)
        layers.insert(gap, layer)
        mask.insert(gap, True)
        candidate = _with_layers(base, layers, mask)
        try:
            validate_structure(candidate)
        except SpecError:
            continue  # illegal position, skipped
        if builder.add(candidate, f"pap@{gap}"):
            inserted += 1
    if inserted == 0:
        warnings.warn(
            f"pap_insert: no legal position for {layer.kind} on {base.variant_id}; "
            "grid holds the control only"
        )
    return builder.grid()


def lolo(base: ModelSpec) -> VariantGrid:
    """One candidate per mutable layer removed; invalid ones stay, marked."""
    builder = _GridBuilder(base)
    for pos, mutable in enumerate(base.mutable_mask):
        if not mutable:
            continue
        layers = list(base.layers)
        mask = list(base.mutable_mask)
        del layers[pos], mask[pos]
        builder.add(_with_layers(base, layers, mask), f"lolo@{pos}")
    return builder.grid()


_KIND_TOKENS = {
    "conv": "conv", "bn": "batchnorm", "batchnorm": "batchnorm", "pl": "maxpool",
    "maxpool": "maxpool", "dropl": "dropout", "dropout": "dropout", "fcl": "dense",
    "dense": "dense", "al": "activation", "activation": "activation",
    "softmax": "activation", "relu": "activation", "flat": "flatten",
    "flatten": "flatten", "upsamp": "upsample", "upsample": "upsample", "gap": "gap",
}


def _resolve_position(base: ModelSpec, token) -> int:
    if isinstance(token, int):
        if not 0 <= token < len(base.layers):
            raise SpecError(f"position {token} out of range for {len(base.layers)} layers")
        return token
    kind = _KIND_TOKENS.get(str(token).lower())
    if kind is None:
        raise SpecError(f"unknown layer name {token!r}")
    for i, d in enumerate(base.layers):
        if d.kind == kind and base.mutable_mask[i]:
            return i
    raise SpecError(f"no mutable {kind} layer in {base.variant_id}")


def sare(base: ModelSpec, scope="adjacent") -> VariantGrid:
    """Swap selected layer pairs; swapping twice restores the base."""
    builder = _GridBuilder(base)
    if scope == "adjacent":
        pairs = [
            (i, i + 1)
            for i in range(len(base.layers) - 1)
            if base.mutable_mask[i] and base.mutable_mask[i + 1]
        ]
    else:
        a, b = scope
        pairs = [(_resolve_position(base, a), _resolve_position(base, b))]
    for i, j in pairs:
        layers = list(base.layers)
        mask = list(base.mutable_mask)
        layers[i], layers[j] = layers[j], layers[i]
        mask[i], mask[j] = mask[j], mask[i]
        builder.add(_with_layers(base, layers, mask), f"sare@{i},{j}")
    return builder.grid()


def filter_placement(schedule_name: str, num_classes: int) -> ModelSpec:
    if schedule_name not in SCHEDULES:
        raise SpecError(
            f"unknown schedule {schedule_name!r}; valid names: {', '.join(sorted(SCHEDULES))}"
        )
    return base_res18(SCHEDULES[schedule_name], num_classes)


def repeat_block(n: int, with_dropout: bool, num_classes: int) -> ModelSpec:
    """n repetitions of Conv-PL-UpSamp(-DropL), then the standard head."""
    if n < 1:
        raise SpecError(f"repeat count must be >= 1, got {n}")
    unit = [conv(32), maxpool(), upsample()]
    if with_dropout:
        unit.append(dropout(0.25))
    body = tuple(unit) * n
    layers = body + (flatten(), dense(num_classes), activation("softmax"))
    mask = (True,) * len(body) + (False, True, True)
    return ModelSpec("Custom", layers, mask, num_classes)


_BASE_BUILDERS = {
    "base0": lambda nc, sched: base0(nc),
    "baseseq": lambda nc, sched: base_seq(nc),
    "baseres18": lambda nc, sched: base_res18(SCHEDULES[sched], nc),
}

_PAP_LAYERS = {
    "bn": lambda arg: batchnorm(),
    "batchnorm": lambda arg: batchnorm(),
    "conv": lambda arg: conv(int(arg) if arg else 32),
    "dense": lambda arg: dense(int(arg) if arg else 16),
    "fcl": lambda arg: dense(int(arg) if arg else 16),
    "dropout": lambda arg: dropout(float(arg) if arg else 0.25),
    "dropl": lambda arg: dropout(float(arg) if arg else 0.25),
    "maxpool": lambda arg: maxpool(),
    "pl": lambda arg: maxpool(),
    "upsample": lambda arg: upsample(),
    "upsamp": lambda arg: upsample(),
    "relu": lambda arg: activation("relu"),
}


def generate_grid(recipe: dict) -> VariantGrid:
    """Compose exploration ops into one deterministic, deduplicated grid.

    Recipe: {"base": name, "ops": [tokens], "num_classes": N,
             "schedule": base schedule for baseres18 (default Res64to512)}.
    Op tokens: lolo | sare:adjacent | sare:A,B | pap:LAYER[:ARG] |
    filterplacement[:NAME] | repeat:N[:dropout].
    """
    base_name = str(recipe.get("base", "")).lower()
    if base_name not in _BASE_BUILDERS:
        raise SpecError(f"unknown base family {recipe.get('base')!r}; "
                        f"valid: {', '.join(sorted(_BASE_BUILDERS))}")
    num_classes = int(recipe.get("num_classes", 2))
    schedule = recipe.get("schedule", "Res64to512")
    if schedule not in SCHEDULES:
        raise SpecError(f"unknown schedule {schedule!r}; valid names: "
                        f"{', '.join(sorted(SCHEDULES))}")
    base = _BASE_BUILDERS[base_name](num_classes, schedule)
    builder = _GridBuilder(base)

    for raw in recipe.get("ops", []):
        parts = str(raw).split(":")
        op = parts[0].lower()
        if op == "lolo":
            sub = lolo(base)
        elif op == "sare":
            arg = parts[1] if len(parts) > 1 else "adjacent"
            scope = "adjacent" if arg.lower() == "adjacent" else tuple(arg.split(","))
            if scope != "adjacent" and len(scope) != 2:
                raise SpecError(f"sare wants two layer names, got {arg!r}")
            sub = sare(base, scope)
        elif op == "pap":
            if len(parts) < 2 or parts[1].lower() not in _PAP_LAYERS:
                raise SpecError(f"pap wants a layer token, got {raw!r}; "
                                f"valid: {', '.join(sorted(_PAP_LAYERS))}")
            layer = _PAP_LAYERS[parts[1].lower()](parts[2] if len(parts) > 2 else None)
            sub = pap_insert(base, layer)
        elif op == "filterplacement":
            names = [parts[1]] if len(parts) > 1 else list(SCHEDULES)
            for name in names:
                builder.add(filter_placement(name, num_classes), f"filterplacement:{name}")
            continue
        elif op == "repeat":
            if len(parts) < 2:
                raise SpecError(f"repeat wants a count, got {raw!r}")
            with_do = len(parts) > 2 and parts[2].lower() == "dropout"
            builder.add(repeat_block(int(parts[1]), with_do, num_classes), f"repeat:{raw}")
            continue
        else:
            raise SpecError(f"unknown grid op {raw!r}")
        for entry in sub.candidates():
            builder.add(entry.spec, entry.provenance)
    return builder.grid()
