"""RRAM crossbar mapping, stuck-at-one fault injection and faulty inference.

Each cell holds one signed 8-bit weight. A layer's weights are unfolded into
a matrix with one column per output filter and ``in_channels/groups * k * k``
rows, quantized symmetrically per layer and split over as many
``rows x cols`` tiles as needed. A stuck-at-one cell reads back as 0 whatever
was programmed into it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .engine.model import Model
from .transforms import PlacementPlan, plan_placement, round_half_away


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 8

    def __post_init__(self):
        if self.bits != 8:
            raise ValueError("cells store 8-bit weights; only bits=8 is supported")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def scale_for(self, w: np.ndarray) -> float:
        # all-zero layers get scale 1 so dequantization stays well defined
        peak = float(np.max(np.abs(w))) if w.size else 0.0
        return peak / self.qmax if peak > 0 else 1.0

    def quantize(self, w: np.ndarray, scale: float) -> np.ndarray:
        r = np.sign(w) * np.floor(np.abs(w) / scale + 0.5)
        return np.clip(r, -self.qmax, self.qmax).astype(np.int8)

    def dequantize(self, q: np.ndarray, scale: float) -> np.ndarray:
        return q.astype(np.float64) * scale

    def roundtrip(self, w: np.ndarray) -> np.ndarray:
        s = self.scale_for(w)
        return self.dequantize(self.quantize(w, s), s)


@dataclass(frozen=True)
class Geometry:
    rows: int = 128
    cols: int = 128

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"invalid tile geometry {self.rows}x{self.cols}")


@dataclass
class LayerMapping:
    layer_id: str
    weight_shape: tuple[int, ...]
    scale: float
    matrix_shape: tuple[int, int]
    tile_grid: np.ndarray  # (row_tiles, col_tiles) global tile indices
    cell_index: np.ndarray  # flat cell index of every matrix element
    programmed: bool = True

    @property
    def row_tiles(self) -> int:
        return self.tile_grid.shape[0]

    @property
    def col_tiles(self) -> int:
        return self.tile_grid.shape[1]


@dataclass
class CrossbarArray:
    """All tiles of the simulated accelerator plus how each layer is laid out."""

    geometry: Geometry
    tiles: np.ndarray  # (n_tiles, rows, cols) int8
    layers: dict[str, LayerMapping] = field(default_factory=dict)
    quant: QuantSpec = QuantSpec()

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.tiles.shape)

    @property
    def n_cells(self) -> int:
        return self.tiles.size

    def programmed_layers(self) -> list[str]:
        return [lid for lid, m in self.layers.items() if m.programmed]

    def read_cells(self, fault_map: Optional["FaultMap"] = None) -> np.ndarray:
        if fault_map is None:
            return self.tiles
        check_geometry(self, fault_map)
        return np.where(fault_map.faulty, np.int8(0), self.tiles)

    def read_quantized(self, layer_id: str, fault_map: Optional["FaultMap"] = None) -> np.ndarray:
        """Stored integer weights of one layer, reshaped back to its weight shape."""
        m = self.layers[layer_id]
        cells = self.read_cells(fault_map).reshape(-1)
        matrix = cells[m.cell_index]
        return matrix.T.reshape(m.weight_shape)

    def read_weights(self, fault_map: Optional["FaultMap"] = None) -> dict[str, np.ndarray]:
        """Dequantized weights of every programmed layer as seen through ``fault_map``."""
        cells = self.read_cells(fault_map).reshape(-1)
        out = {}
        for lid, m in self.layers.items():
            if m.programmed:
                q = cells[m.cell_index].T.reshape(m.weight_shape)
                out[lid] = self.quant.dequantize(q, m.scale)
        return out


def unfold(w: np.ndarray) -> np.ndarray:
    """Weights ``(m, ...)`` to a crossbar matrix with one column per output filter."""
    return w.reshape(w.shape[0], -1).T


def map_network(
    model: Model,
    plan: Optional[PlacementPlan] = None,
    q: QuantSpec = QuantSpec(),
    geometry: Geometry = Geometry(),
    layout: Optional[Iterable[str]] = None,
) -> CrossbarArray:
    """Quantize and program every RRAM-placed layer onto its own tiles.

    ``layout`` lists the layers that own tiles on the chip (default: the RRAM
    layers of ``plan``). Layers in ``layout`` but placed on host get their
    tiles reserved but left unprogrammed, so two plans over the same layout
    share an identical cell geometry and hence identical fault maps.
    """
    plan = plan if plan is not None else plan_placement(model.spec)
    rram = set(plan.rram_layers())
    order = [layer.id for layer in model.spec if layer.has_weights]
    owners = set(layout) if layout is not None else rram
    if not rram <= owners:
        raise ValueError(f"layout is missing RRAM layers {sorted(rram - owners)}")
    unknown = owners - set(order)
    if unknown:
        raise ValueError(f"layout names layers without weights: {sorted(unknown)}")

    rows, cols = geometry.rows, geometry.cols
    mappings: dict[str, LayerMapping] = {}
    blocks: list[np.ndarray] = []
    for lid in order:
        if lid not in owners:
            continue
        w = model.weight(lid)
        mat_rows = math.prod(w.shape[1:])
        mat_cols = w.shape[0]
        rt, ct = math.ceil(mat_rows / rows), math.ceil(mat_cols / cols)
        grid = np.arange(len(blocks), len(blocks) + rt * ct).reshape(rt, ct)
        r = np.arange(mat_rows)[:, None]
        c = np.arange(mat_cols)[None, :]
        tile = grid[r // rows, c // cols]
        cell_index = (tile * rows + r % rows) * cols + c % cols
        programmed = lid in rram
        scale = q.scale_for(w) if programmed else 1.0
        layer_tiles = np.zeros((rt * ct, rows, cols), dtype=np.int8)
        if programmed:
            qm = q.quantize(unfold(w), scale)
            flat = layer_tiles.reshape(-1)
            flat[cell_index - grid[0, 0] * rows * cols] = qm
        blocks.extend(layer_tiles)
        mappings[lid] = LayerMapping(lid, tuple(w.shape), scale, (mat_rows, mat_cols), grid, cell_index, programmed)
    tiles = np.stack(blocks) if blocks else np.zeros((0, rows, cols), dtype=np.int8)
    return CrossbarArray(geometry, tiles, mappings, q)


def quantized_model(model: Model, arrays: CrossbarArray) -> Model:
    """Copy of ``model`` whose RRAM layers hold their fault-free quantized weights."""
    out = model.clone()
    for lid, w in arrays.read_weights().items():
        out.params[f"{lid}.weight"].data = w
    return out


# -- faults ---------------------------------------------------------------

FAULTMAP_HEADER = "# rramdc fault map"


@dataclass
class FaultMap:
    faulty: np.ndarray  # bool, same shape as the tile stack
    fault_rate: float
    seed: int
    kind: str = "SA1"
    mode: str = "iid"

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.faulty.shape)

    @property
    def count(self) -> int:
        return int(self.faulty.sum())

    def coordinates(self) -> np.ndarray:
        """``(n, 3)`` array of (tile, row, col), lexicographically sorted."""
        return np.argwhere(self.faulty)

    def to_text(self) -> str:
        t, r, c = self.shape
        lines = [
            FAULTMAP_HEADER,
            "version 1",
            f"geometry {t} {r} {c}",
            f"fault_rate {self.fault_rate!r}",
            f"seed {self.seed}",
            f"kind {self.kind}",
            f"mode {self.mode}",
            f"count {self.count}",
        ]
        lines += [f"{a} {b} {d}" for a, b, d in self.coordinates()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FaultMap":
        lines = text.splitlines()
        if not lines or lines[0] != FAULTMAP_HEADER:
            raise ValueError("not a fault map file")
        header = {}
        i = 1
        while i < len(lines) and not lines[i][:1].isdigit():
            key, _, value = lines[i].partition(" ")
            header[key] = value
            i += 1
        shape = tuple(int(v) for v in header["geometry"].split())
        faulty = np.zeros(shape, dtype=bool)
        coords = np.array([[int(v) for v in ln.split()] for ln in lines[i:] if ln.strip()], dtype=np.int64).reshape(-1, 3)
        if len(coords) != int(header["count"]):
            raise ValueError(f"fault map declares {header['count']} faults but lists {len(coords)}")
        faulty[coords[:, 0], coords[:, 1], coords[:, 2]] = True
        return cls(faulty, float(header["fault_rate"]), int(header["seed"]), header["kind"], header["mode"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "FaultMap":
        return cls.from_text(Path(path).read_text())


def inject_sa1(arrays: CrossbarArray, f: float, seed: int, mode: str = "iid") -> FaultMap:
    """Draw a stuck-at-one fault map over every cell of ``arrays``.

    ``iid``: each cell faulty independently with probability ``f``.
    ``exact``: exactly ``round(f * cells)`` distinct cells are faulty.
    """
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"fault rate must be in [0, 1], got {f}")
    rng = np.random.default_rng(seed)
    shape = arrays.shape
    if mode == "iid":
        faulty = rng.random(shape) < f if f > 0 else np.zeros(shape, dtype=bool)
    elif mode == "exact":
        n = arrays.n_cells
        faulty = np.zeros(n, dtype=bool)
        faulty[rng.choice(n, round_half_away(f * n), replace=False)] = True
        faulty = faulty.reshape(shape)
    else:
        raise ValueError(f"unknown fault mode {mode!r}")
    return FaultMap(faulty, f, seed, "SA1", mode)


def check_geometry(arrays: CrossbarArray, fault_map: FaultMap) -> None:
    if fault_map.shape != arrays.shape:
        raise ValueError(f"fault map geometry {fault_map.shape} does not match crossbar geometry {arrays.shape}")


# -- inference -------------------------------------------------------------


def faulty_logits(
    model: Model,
    x: np.ndarray,
    arrays: CrossbarArray,
    fault_map: Optional[FaultMap] = None,
    p_prime: float = 0.0,
    scale_correction: bool = True,
    batch_size: int = 1024,
) -> np.ndarray:
    """Eval-mode logits with RRAM layers reading their (faulty) cells.

    Host layers use the exact checkpoint weights. With ``scale_correction``
    each RRAM layer's output is multiplied by ``1 / (1 - p_prime)``, matching
    the scale the batch-norm statistics were recalibrated under.
    """
    if fault_map is not None:
        check_geometry(arrays, fault_map)
    weights = arrays.read_weights(fault_map)
    scales = {}
    if scale_correction and p_prime:
        scales = {lid: 1.0 / (1.0 - p_prime) for lid in weights}
    outs = [
        model.forward(x[i : i + batch_size], training=False, weights=weights, scales=scales)
        for i in range(0, len(x), batch_size)
    ]
    return np.concatenate(outs)


def faulty_inference(model, x, arrays, fault_map=None, p_prime=0.0, scale_correction=True) -> np.ndarray:
    return faulty_logits(model, x, arrays, fault_map, p_prime, scale_correction).argmax(axis=1)


@dataclass
class MCResult:
    fault_rate: float
    accuracies: list[float]
    seeds: list[int]
    correct: list[int]
    total: int

    @property
    def n(self) -> int:
        return len(self.correct)

    @property
    def mean(self) -> float:
        return sum(self.correct) / (self.n * self.total)

    @property
    def std(self) -> float:
        # population std from integer counts: exact and independent of order
        n, s = self.n, sum(self.correct)
        num = n * sum(c * c for c in self.correct) - s * s
        return math.sqrt(num) / (n * self.total)

    @property
    def min(self) -> float:
        return min(self.correct) / self.total

    @property
    def max(self) -> float:
        return max(self.correct) / self.total


def evaluate_seed(model, x, y, arrays, f, seed, p_prime, scale_correction, mode) -> int:
    fm = inject_sa1(arrays, f, seed, mode)
    pred = faulty_inference(model, x, arrays, fm, p_prime, scale_correction)
    return int(np.sum(pred == y))


def monte_carlo_eval(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    f: float,
    n_crossbars: int = 100,
    base_seed: int = 0,
    *,
    plan: Optional[PlacementPlan] = None,
    arrays: Optional[CrossbarArray] = None,
    p_prime: Optional[float] = None,
    scale_correction: bool = True,
    mode: str = "iid",
    seeds: Optional[Sequence[int]] = None,
) -> MCResult:
    """Accuracy over ``n_crossbars`` independent fault maps (seeds ``base_seed + i``).

    ``p_prime`` defaults to ``f``. Passing ``seeds`` overrides the seed range
    (in any order; the statistics do not depend on it).
    """
    if n_crossbars < 1:
        raise ValueError("need at least one crossbar")
    arrays = arrays if arrays is not None else map_network(model, plan)
    p_prime = f if p_prime is None else p_prime
    seeds = list(seeds) if seeds is not None else list(range(base_seed, base_seed + n_crossbars))
    correct = [evaluate_seed(model, x, y, arrays, f, s, p_prime, scale_correction, mode) for s in seeds]
    return MCResult(f, [c / len(y) for c in correct], seeds, correct, len(y))
