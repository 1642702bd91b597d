"""FlatParameter machinery: flatten-concat-pad-chunk construction, the
shard/unshard state machine, write-through original-parameter views, gradient
write-back layout, and closed-form peak-memory predictions.

Each unit's parameters are flattened and concatenated in declaration order,
right-padded with zeros to a multiple of the sharding factor F (padding is
always <= F-1), and chunked evenly so rank position k owns elements
[k*psi/F, (k+1)*psi/F).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .collectives import ShardingPlan
from .numerics import DenseTensor, DTYPES

SHARDED = "SHARDED"
UNSHARDED = "UNSHARDED"


class FlatParamError(ValueError):
    pass


class SharedParameterError(FlatParamError):
    """A parameter assigned to two units — rejected, with the workaround named."""


@dataclass(frozen=True)
class OriginalParam:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def numel(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class UnitLayout:
    """Size/offset geometry of one FlatParameter, independent of any rank."""

    unit_id: int
    originals: tuple[OriginalParam, ...]
    psi: int        # padded length, multiple of F
    padding: int
    shard_factor: int

    @property
    def raw_numel(self) -> int:
        return self.psi - self.padding

    @property
    def shard_numel(self) -> int:
        return self.psi // self.shard_factor


def build_unit_layouts(param_shapes: list[tuple[str, tuple[int, ...]]],
                       unit_param_names: list[list[str]],
                       shard_factor: int) -> list[UnitLayout]:
    """Assign every parameter to exactly one unit and lay out flat buffers."""
    shapes = dict(param_shapes)
    owner: dict[str, int] = {}
    for unit_id, names in enumerate(unit_param_names):
        for name in names:
            if name in owner:
                raise SharedParameterError(
                    f"parameter '{name}' is assigned to units {owner[name]} "
                    f"and {unit_id}; sharing a parameter across units is "
                    f"unsupported — merge the sharing layers into one unit, "
                    f"or keep parameters materialized through backward with "
                    f"grad-op sharding (reshard_after_forward=NRAF)")
            if name not in shapes:
                raise FlatParamError(f"unknown parameter '{name}'")
            owner[name] = unit_id
    missing = [n for n, _ in param_shapes if n not in owner]
    if missing:
        raise FlatParamError(
            f"unit boundaries do not cover parameters: {missing}")

    layouts = []
    for unit_id, names in enumerate(unit_param_names):
        originals, offset = [], 0
        for name in names:
            shape = shapes[name]
            originals.append(OriginalParam(name, tuple(shape), offset))
            offset += math.prod(shape)
        psi = -(-offset // shard_factor) * shard_factor if offset else 0
        layouts.append(UnitLayout(unit_id, tuple(originals), psi,
                                  psi - offset, shard_factor))
    return layouts


class FlatParameter:
    """One rank's half of a unit: the persistent shard plus, transiently, the
    gathered unsharded buffer with original-parameter views into it.

    With F=1 the shard *is* the whole flat parameter, so unshard/shard become
    logical state flips that move no data and allocate nothing.
    """

    def __init__(self, layout: UnitLayout, plan: ShardingPlan, rank: int,
                 dtype: str = "full"):
        self.layout = layout
        self.plan = plan
        self.rank = rank
        self.dtype = dtype
        self.shard_index = rank % plan.shard_factor
        self.sharded = np.zeros(layout.shard_numel, dtype=DTYPES[dtype])
        self.unsharded: np.ndarray | None = None
        self.state = SHARDED

    # -- state machine ------------------------------------------------------

    @property
    def trivial(self) -> bool:
        return self.layout.shard_factor == 1

    def shard_slice(self) -> slice:
        b = self.layout.shard_numel
        return slice(self.shard_index * b, (self.shard_index + 1) * b)

    def set_unsharded(self, buffer: np.ndarray | None) -> None:
        if self.state == UNSHARDED:
            raise FlatParamError(
                f"unit {self.layout.unit_id}: already unsharded")
        if self.trivial:
            self.state = UNSHARDED  # views resolve against the shard itself
            return
        assert buffer is not None and buffer.size == self.layout.psi
        self.unsharded = buffer
        self.state = UNSHARDED

    def shard(self) -> None:
        """Keep only this rank's chunk and drop the unsharded buffer."""
        if self.state == SHARDED:
            raise FlatParamError(
                f"unit {self.layout.unit_id}: already sharded")
        if not self.trivial:
            np.copyto(self.sharded, self.unsharded[self.shard_slice()])
            self.unsharded = None
        self.state = SHARDED

    # -- views --------------------------------------------------------------

    def _live_buffer(self) -> np.ndarray:
        if self.trivial:
            return self.sharded
        if self.state != UNSHARDED:
            raise FlatParamError(
                f"unit {self.layout.unit_id}: views require UNSHARDED state")
        return self.unsharded

    def views(self, buffer: np.ndarray | None = None) -> dict[str, DenseTensor]:
        """Write-through views of the originals, tiling [0, psi - padding)."""
        buf = self._live_buffer() if buffer is None else buffer
        flat = DenseTensor(buf, (buf.size,))
        return {o.name: flat.view(o.offset, o.shape)
                for o in self.layout.originals}


def writeback_grad(layout: UnitLayout, grads: dict[str, np.ndarray],
                   out: np.ndarray | None = None,
                   dtype: str = "full") -> tuple[np.ndarray, list[str]]:
    """Write per-original gradients at their flat offsets; pad stays zero.

    A missing gradient (parameter unused in forward) zero-fills its region
    and is reported back as a warning rather than an error.
    """
    if out is None:
        out = np.zeros(layout.psi, dtype=DTYPES[dtype])
    else:
        out[:] = 0.0
    warnings = []
    for o in layout.originals:
        g = grads.get(o.name)
        if g is None:
            warnings.append(f"unit {layout.unit_id}: no gradient for "
                            f"'{o.name}', zero-filled")
            continue
        if tuple(g.shape) != o.shape:
            raise FlatParamError(
                f"gradient shape {g.shape} != parameter shape {o.shape} "
                f"for '{o.name}'")
        out[o.offset:o.offset + o.numel] = g.reshape(-1)
    return out, warnings


# ---------------------------------------------------------------------------
# closed-form predictions
# ---------------------------------------------------------------------------

def peak_param_memory(psis: list[int], shard_factor: int,
                      k_full: int = 8, k_low: int | None = None,
                      variant: str = "serialized") -> dict[str, Fraction]:
    """Predicted peak parameter memory.

    serialized: one unit materialized at a time — sum(psi)/F + max(psi)
    elements (F=1 keeps everything resident: sum(psi), nothing gathered).
    two_inflight: up to two units live at once — sum(psi)/F plus the two
    largest psi.  With a low-precision element width the gathered buffers are
    low precision while the resident shards stay full: bytes =
    k_full*sum(psi)/F + max(k_low*psi).
    """
    if not psis:
        return {"elements": Fraction(0), "bytes": Fraction(0)}
    f = shard_factor
    total, largest = sum(psis), sorted(psis, reverse=True)
    if f == 1:
        elements = Fraction(total)
        nbytes = Fraction(total * k_full)
        return {"elements": elements, "bytes": nbytes}
    shards = Fraction(total, f)
    if variant == "serialized":
        gathered = largest[:1]
    elif variant == "two_inflight":
        gathered = largest[:2]
    else:
        raise FlatParamError(f"unknown variant '{variant}'")
    elements = shards + sum(gathered)
    if k_low is None:
        nbytes = elements * k_full
    else:
        # mixed precision gathers in low width; only the largest unit counts
        # for the serialized byte peak
        if variant == "serialized":
            nbytes = shards * k_full + max(psis) * k_low
        else:
            nbytes = shards * k_full + sum(gathered) * k_low
    return {"elements": elements, "bytes": nbytes}


def dump_plan_lines(layouts: list[UnitLayout]) -> list[str]:
    """Per-unit golden-format lines: unit=<id> ψ=<n> padding=<k> originals=[...]."""
    lines = []
    for l in layouts:
        shapes = " ".join(
            f"{o.name}:{'x'.join(str(d) for d in o.shape)}"
            for o in l.originals)
        lines.append(f"unit={l.unit_id} ψ={l.psi} padding={l.padding} "
                     f"originals=[{shapes}]")
    return lines
