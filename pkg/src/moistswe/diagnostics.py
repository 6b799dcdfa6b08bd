"""Derived fields, conservation totals, and the run's file formats.

Potential vorticity is recovered weakly in the scalar space with the
depth kept inside the mass weighting, which avoids dividing by a field
that jumps between cells. The curl side pairs the cellwise reference
curl (the Piola map makes that integral Jacobian free) with a centred
facet correction for the tangential jumps a normal-continuous velocity
is allowed to have.

Snapshots carry one value per cell, sampled at the centroid; full
coefficient arrays only ever leave the process through checkpoints,
which round-trip bitwise and refuse to restore onto a different mesh.
"""

import csv
from dataclasses import dataclass

import numpy as np

from moistswe.dynamics import State, coriolis_samples
from moistswe.elements import hdiv_quadratic
from moistswe.errors import (
    CheckpointMismatchError,
    ConfigError,
    StateValidityError,
)
from moistswe.femcore import dg_cell_values, dg_mass_blocks, dof_coefficients
from moistswe.meshes import lonlat_of, mesh_hash
from moistswe.physics import saturation
from moistswe.stepper import courant_number

__all__ = [
    "CHECKPOINT_VERSION",
    "SNAPSHOT_HEADER",
    "potential_vorticity",
    "totals",
    "courant_number",
    "Snapshot",
    "snapshot",
    "write_snapshot",
    "SeriesRow",
    "series_row",
    "SeriesFile",
    "write_series",
    "Checkpoint",
    "checkpoint",
    "restore",
]

CHECKPOINT_VERSION = 1

SNAPSHOT_HEADER = ("cell", "lon", "lat", "u_east", "u_north", "D", "b",
                   "q_v", "q_c", "q_r", "pv", "q_sat")

_CENTROID = np.array([[1.0 / 3.0, 1.0 / 3.0]])


def potential_vorticity(disc, state, f_cell=None):
    """Absolute vorticity over depth, solved weakly per cell.

    Solves int(lambda q D) = int(lambda rot u) + int(lambda f) with the
    tangential-jump correction, one depth-weighted 3x3 system per cell.
    """
    V, Q, geo, ctab, ftab, maps = (disc.V, disc.Q, disc.geo, disc.ctab,
                                   disc.ftab, disc.maps)
    D = np.asarray(state.D, dtype=float)
    if not (D > 0.0).all():
        raise StateValidityError("potential vorticity needs positive depth")
    if f_cell is None:
        f_cell = coriolis_samples(disc)
    w = ctab.weights

    coef = dof_coefficients(V, state.u)
    rot_basis = ctab.hdiv_grad[:, :, 0, 1] - ctab.hdiv_grad[:, :, 1, 0]
    rot_hat = np.einsum("ci,iq->cq", coef, rot_basis)
    local = np.einsum("q,cq,jq->cj", w, rot_hat, ctab.dg)
    local += np.einsum("q,c,cq,jq->cj", w, geo.detJ, f_cell, ctab.dg)

    # centred correction for the tangential jump: each side integrates its
    # own trace against half the summed (physical-frame) tangential flow
    edge_tables = ftab.hdiv_vals[maps.edges, maps.reversed_.astype(int)]
    ue_hat = np.einsum("fsi,fsiqa->fsqa", coef[maps.cells], edge_tables)
    ue_phys = np.einsum("fsxa,fsqa->fsqx", geo.E[maps.cells], ue_hat)
    ue_phys /= geo.detJ[maps.cells][:, :, None, None]
    tsum = np.einsum("fsqx,fsx->fq", ue_phys, geo.tangent_ccw)
    edge_w = geo.length[:, None] * ftab.weights[None, :]
    traces = ftab.dg[maps.edges, maps.reversed_.astype(int)]  # (nf, 2, 3, nq)
    for side in (0, 1):
        contrib = -0.5 * np.einsum("fq,fkq->fk", edge_w * tsum, traces[:, side])
        np.add.at(local, maps.cells[:, side], contrib)

    Dq = dg_cell_values(Q, D, ctab)
    blocks = dg_mass_blocks(Q, disc.cell_degree, coeff=Dq)
    return np.linalg.solve(blocks, local[:, :, None])[:, :, 0].ravel()


def _integral(disc, vec):
    vals = dg_cell_values(disc.Q, np.asarray(vec, dtype=float), disc.ctab)
    return float(np.einsum("q,cq,c->", disc.ctab.weights, vals, disc.geo.detJ))


def totals(disc, state):
    """Exact integrals of depth and the three moisture species."""
    return {
        "mass": _integral(disc, state.D),
        "vapour": _integral(disc, state.qv),
        "cloud": _integral(disc, state.qc),
        "rain": _integral(disc, state.qr),
    }


@dataclass(frozen=True)
class Snapshot:
    """One value per cell for every output field, at a single time."""

    time: float                  # seconds
    mesh_tag: str
    columns: dict

    @property
    def days(self):
        return self.time / 86400.0


def _centroid_velocity(disc, u):
    ref = hdiv_quadratic().values(_CENTROID)[:, 0, :]        # (12, 2)
    uhat = dof_coefficients(disc.V, u) @ ref                  # (nc, 2)
    return np.einsum("cxa,ca->cx", disc.geo.E, uhat) / disc.geo.detJ[:, None]


def snapshot(disc, state, time, params, cfg, B=0.0, theta=None, f_cell=None):
    """Sample every output field at the cell centroids.

    ``params`` and ``cfg`` feed the saturation column; ``B`` and
    ``theta`` must match what the run itself uses.
    """
    lon, lat = lonlat_of(disc.geo.centroid)
    uc = _centroid_velocity(disc, state.u)
    east = np.stack([-np.sin(lon), np.cos(lon), np.zeros_like(lon)], axis=1)
    north = np.stack([-np.sin(lat) * np.cos(lon), -np.sin(lat) * np.sin(lon),
                      np.cos(lat)], axis=1)
    pv = potential_vorticity(disc, state, f_cell=f_cell)
    q_sat = saturation(state.D, state.b, B, params, cfg, theta)

    def mean3(vec):
        return np.asarray(vec, dtype=float).reshape(-1, 3).mean(axis=1)

    columns = {
        "cell": np.arange(disc.mesh.num_cells),
        "lon": lon,
        "lat": lat,
        "u_east": np.einsum("cx,cx->c", uc, east),
        "u_north": np.einsum("cx,cx->c", uc, north),
        "D": mean3(state.D),
        "b": mean3(state.b),
        "q_v": mean3(state.qv),
        "q_c": mean3(state.qc),
        "q_r": mean3(state.qr),
        "pv": mean3(pv),
        "q_sat": mean3(q_sat),
    }
    for name, col in columns.items():
        if not np.isfinite(col).all():
            raise StateValidityError(f"non-finite {name} in snapshot")
    return Snapshot(time=float(time), mesh_tag=mesh_hash(disc.mesh),
                    columns=columns)


def write_snapshot(path, snap):
    """CSV, one row per cell, floats as shortest round-trip decimals."""
    cols = [snap.columns[name] for name in SNAPSHOT_HEADER]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(SNAPSHOT_HEADER) + "\n")
        for c in range(len(cols[0])):
            cell = str(int(cols[0][c]))
            rest = (repr(float(col[c])) for col in cols[1:])
            fh.write(cell + "," + ",".join(rest) + "\n")


@dataclass(frozen=True)
class SeriesRow:
    time_days: float
    mass: float
    vapour: float
    cloud: float
    rain: float
    courant: float
    err_u: float | None = None
    err_D: float | None = None
    err_b: float | None = None
    err_qv: float | None = None

    @property
    def has_errors(self):
        return self.err_u is not None


def series_row(disc, state, time_days, courant, errors=None):
    """Totals plus step metadata as one series row."""
    tot = totals(disc, state)
    err = errors or {}
    return SeriesRow(time_days=float(time_days), courant=float(courant),
                     err_u=err.get("u"), err_D=err.get("D"),
                     err_b=err.get("b"), err_qv=err.get("qv"), **tot)


_SERIES_BASE = ("time_days", "mass", "vapour", "cloud", "rain", "courant")
_SERIES_ERR = ("err_u", "err_D", "err_b", "err_qv")


class SeriesFile:
    """Streaming series writer: header on open, one flushed line per row,
    so a crashed run still leaves every completed step on disk."""

    def __init__(self, path, with_errors=False):
        self.path = path
        self.with_errors = bool(with_errors)
        self._fields = _SERIES_BASE + (_SERIES_ERR if self.with_errors else ())
        self._fh = open(path, "w", newline="")
        self._fh.write(",".join(self._fields) + "\n")
        self._fh.flush()

    def append(self, row):
        if row.has_errors != self.with_errors:
            raise ConfigError("series rows mix error and error-free entries")
        line = ",".join(repr(float(getattr(row, k))) for k in self._fields)
        self._fh.write(line + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def write_series(path, rows):
    """Time-series CSV; the error block appears only when rows carry it."""
    rows = list(rows)
    with SeriesFile(path, with_errors=bool(rows) and rows[0].has_errors) as sf:
        for r in rows:
            sf.append(r)


@dataclass(frozen=True)
class Checkpoint:
    """Everything needed to continue a run bit for bit."""

    state: State
    time: float
    steps: int
    b_ref: np.ndarray | None
    theta: np.ndarray | None
    B: np.ndarray | None


_STATE_KEYS = ("u", "D", "b", "qv", "qc", "qr")
_OPTIONAL_KEYS = ("b_ref", "theta", "B")


def checkpoint(path, disc, state, *, time=0.0, steps=0, b_ref=None,
               theta=None, B=None):
    """Dump all coefficient arrays with a version and mesh-hash header."""
    payload = {
        "version": np.int64(CHECKPOINT_VERSION),
        "mesh": np.str_(mesh_hash(disc.mesh)),
        "time": np.float64(time),
        "steps": np.int64(steps),
    }
    for key in _STATE_KEYS:
        payload[key] = np.asarray(getattr(state, key))
    for key, opt in zip(_OPTIONAL_KEYS, (b_ref, theta, B)):
        if opt is not None:
            payload[key] = np.asarray(opt)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def restore(path, disc):
    """Load a checkpoint, refusing version or mesh mismatches."""
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise CheckpointMismatchError(
                f"{path}: checkpoint version {version}, expected "
                f"{CHECKPOINT_VERSION}")
        tag = str(data["mesh"])
        if tag != mesh_hash(disc.mesh):
            raise CheckpointMismatchError(
                f"{path}: checkpoint was written on a different mesh")
        state = State(**{key: data[key] for key in _STATE_KEYS})
        extras = {key: data[key] if key in data else None
                  for key in _OPTIONAL_KEYS}
        return Checkpoint(state=state, time=float(data["time"]),
                          steps=int(data["steps"]), **extras)
