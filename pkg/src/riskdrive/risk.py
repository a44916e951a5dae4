"""Static, dynamic and hybrid risk fields around human-driven vehicles.

Static field (distance shaped, speed independent)::

    r_s = ((dx^2 / xi_x^2) ** rho) + ((dy^2 / xi_y^2) ** rho)
    R_s = eps_obs * exp(-r_s)

Dynamic field (sigmoid gated on relative position and the sign of the
speed difference)::

    r_d = ((dx^2 / xi_v^2) ** lam) + ((dy^2 / xi_y^2) ** lam)
    v_rel = +1 if v_hdv > v_av else -1
    R_d = eps_hdv * exp(-r_d) / (1 + exp(-v_rel * (dx - sigma_l * v_rel)))

with ``dx = x_av - x_hdv`` and ``dy = y_av - y_hdv``. The hybrid field is the
weighted sum ``w_s * R_s + w_d * R_d`` accumulated over HDVs.

All functions accept scalars or numpy arrays for the AV position so grids
can be evaluated in one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .sim import VehicleState, World


@dataclass(frozen=True)
class RiskParams:
    xi_x: float = 10.0
    xi_y: float = 2.0
    xi_v: float = 12.0
    rho: float = 1.0
    lambda_d: float = 1.0
    eps_obs: float = 1.0
    eps_hdv: float = 1.0
    # sigma * l; None means "one vehicle length" of the HDV in question
    sigma_l: float | None = None
    w_s: float = 0.5
    w_d: float = 0.5

    def __post_init__(self):
        for name in ("xi_x", "xi_y", "xi_v", "rho", "lambda_d", "eps_obs", "eps_hdv"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.w_s < 0 or self.w_d < 0 or self.w_s + self.w_d <= 0:
            raise ValueError("w_s, w_d must be >= 0 with a positive sum")

    def gate_offset(self, hdv_length: float) -> float:
        return hdv_length if self.sigma_l is None else self.sigma_l


def relative_speed_sign(v_av, v_hdv):
    """+1 where the HDV is strictly faster than the AV, -1 otherwise."""
    return np.where(np.asarray(v_hdv) > np.asarray(v_av), 1.0, -1.0)


def static_risk_at(dx, dy, p: RiskParams):
    r = (dx * dx / p.xi_x**2) ** p.rho + (dy * dy / p.xi_y**2) ** p.rho
    return p.eps_obs * np.exp(-r)


def dynamic_risk_at(dx, dy, v_rel, hdv_length: float, p: RiskParams):
    r = (dx * dx / p.xi_v**2) ** p.lambda_d + (dy * dy / p.xi_y**2) ** p.lambda_d
    gate_arg = -v_rel * (dx - p.gate_offset(hdv_length) * v_rel)
    with np.errstate(over="ignore"):
        gate = 1.0 / (1.0 + np.exp(gate_arg))
    return p.eps_hdv * np.exp(-r) * gate


def static_risk(av: VehicleState, hdv: VehicleState, p: RiskParams) -> float:
    return float(static_risk_at(av.x - hdv.x, av.y - hdv.y, p))


def dynamic_risk(av: VehicleState, hdv: VehicleState, p: RiskParams) -> float:
    v_rel = 1.0 if hdv.v > av.v else -1.0
    return float(dynamic_risk_at(av.x - hdv.x, av.y - hdv.y, v_rel, hdv.length, p))


def hybrid_risk_at(x, y, v_av: float, hdvs: Sequence[VehicleState], p: RiskParams):
    """Hybrid risk felt by an AV at (x, y) moving at ``v_av``."""
    total = np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
    for h in hdvs:
        dx, dy = x - h.x, y - h.y
        v_rel = 1.0 if h.v > v_av else -1.0
        total = total + (p.w_s * static_risk_at(dx, dy, p) + p.w_d * dynamic_risk_at(dx, dy, v_rel, h.length, p))
    return total


def hybrid_risk(av: VehicleState, hdvs: Sequence[VehicleState], p: RiskParams) -> float:
    return float(hybrid_risk_at(av.x, av.y, av.v, hdvs, p))


# ---------------------------------------------------------------- rasters


@dataclass(frozen=True)
class GridSpec:
    """Ego-centred raster layout.

    Columns run along x (direction of travel), rows along y. ``origin`` is the
    ego-frame position of the lower-left grid corner, so row 0 is the lowest y.
    """

    width_cells: int = 32
    height_cells: int = 32
    cell_size: float = 2.0
    origin: tuple[float, float] = (-20.0, -32.0)

    def __post_init__(self):
        if self.width_cells < 1 or self.height_cells < 1 or self.cell_size <= 0:
            raise ValueError("grid dimensions must be positive")

    @property
    def extent(self) -> tuple[float, float]:
        return self.width_cells * self.cell_size, self.height_cells * self.cell_size

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Ego-frame (x, y) of every cell centre, each shaped (height, width)."""
        xs = self.origin[0] + (np.arange(self.width_cells) + 0.5) * self.cell_size
        ys = self.origin[1] + (np.arange(self.height_cells) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys)

    def contains(self, ex: float, ey: float) -> bool:
        w, h = self.extent
        ox, oy = self.origin
        return ox <= ex < ox + w and oy <= ey < oy + h


@dataclass
class RiskGrid:
    values: np.ndarray  # (height_cells, width_cells)
    spec: GridSpec

    @property
    def width_cells(self) -> int:
        return self.spec.width_cells

    @property
    def height_cells(self) -> int:
        return self.spec.height_cells

    @property
    def cell_size(self) -> float:
        return self.spec.cell_size

    @property
    def origin(self) -> tuple[float, float]:
        return self.spec.origin

    def to_csv(self, path) -> None:
        np.savetxt(path, self.values, delimiter=",", fmt="%.10g")

    def to_pgm(self, path, vmax: float | None = None) -> float:
        """Write an 8-bit binary PGM, upper lanes at the top. Returns the scale used."""
        vals = np.flipud(self.values)
        scale = float(vals.max()) if vmax is None else float(vmax)
        if scale > 0:
            img = np.round(np.clip(vals / scale, 0.0, 1.0) * 255).astype(np.uint8)
        else:
            img = np.zeros(vals.shape, dtype=np.uint8)
        with open(path, "wb") as fh:
            fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
            fh.write(img.tobytes())
        return scale


@dataclass
class ObservationFrame:
    occupancy: RiskGrid
    risk: RiskGrid
    ego_speed: float

    def to_array(self, max_speed: float, risk_scale: float = 1.0) -> np.ndarray:
        """(3, H, W) network input: occupancy, scaled risk, broadcast speed."""
        speed = np.full_like(self.risk.values, self.ego_speed / max_speed)
        return np.stack([self.occupancy.values, self.risk.values / risk_scale, speed])


def hdvs_in_extent(world: World, spec: GridSpec) -> list[VehicleState]:
    av = world.av
    return [h for h in world.hdvs if spec.contains(h.x - av.x, h.y - av.y)]


def _footprint_mask(spec: GridSpec, cx, cy, v: VehicleState, ref: VehicleState) -> np.ndarray:
    # axis-aligned bounding box of the (possibly rotated) footprint
    c, s = abs(np.cos(v.heading)), abs(np.sin(v.heading))
    hx = (v.length * c + v.width * s) / 2
    hy = (v.length * s + v.width * c) / 2
    ex, ey = v.x - ref.x, v.y - ref.y
    half = spec.cell_size / 2
    return (np.abs(cx - ex) < hx + half) & (np.abs(cy - ey) < hy + half)


def field_grids(world: World, p: RiskParams, spec: GridSpec, hdvs=None):
    """Summed static and dynamic fields over the grid, returned separately."""
    av = world.av
    cx, cy = spec.cell_centers()
    hdvs = hdvs_in_extent(world, spec) if hdvs is None else hdvs
    static = np.zeros(cx.shape)
    dynamic = np.zeros(cx.shape)
    for h in hdvs:
        dx, dy = av.x + cx - h.x, av.y + cy - h.y
        v_rel = 1.0 if h.v > av.v else -1.0
        static = static + static_risk_at(dx, dy, p)
        dynamic = dynamic + dynamic_risk_at(dx, dy, v_rel, h.length, p)
    return static, dynamic


def rasterize(world: World, p: RiskParams, spec: GridSpec) -> ObservationFrame:
    """Occupancy and hybrid-risk rasters in the road-aligned ego frame."""
    av = world.av
    cx, cy = spec.cell_centers()
    hdvs = hdvs_in_extent(world, spec)
    risk = hybrid_risk_at(av.x + cx, av.y + cy, av.v, hdvs, p)
    occ = np.zeros(cx.shape)
    for v in world.vehicles:
        occ[_footprint_mask(spec, cx, cy, v, av)] = 1.0
    return ObservationFrame(RiskGrid(occ, spec), RiskGrid(risk, spec), av.v)


def write_raster_sidecar(path, entries: dict[str, float], spec: GridSpec) -> None:
    lines = [
        "8-bit grayscale PGM rasters; pixel = round(255 * clip(value / scale, 0, 1)).",
        "Top image row is the highest y (upper lane); left column is the lowest x.",
        f"cell_size_m={spec.cell_size} width_cells={spec.width_cells} height_cells={spec.height_cells} "
        f"origin_ego_m={spec.origin[0]},{spec.origin[1]}",
    ]
    lines += [f"{name}: scale={scale:.10g}" for name, scale in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")
