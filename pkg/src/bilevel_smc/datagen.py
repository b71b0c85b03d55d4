"""Synthetic grouped binary-regression data, and dataset files.

Files: a CSV with header ``y,x_1..x_p,u_1..u_q,z_1..z_r`` and a JSON
sidecar (same stem, ``.json``) holding ``{"p", "q", "r", "group_map"}``
with a 1-based ``group_map``. Floats are written with 17 significant
digits so that a write/read round trip is bit-exact.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, ndtr

from .exceptions import DatasetFormatError, InputError
from .model import LINKS, PROBIT, CoefVector, Dataset, Theta


def default_effects(k: int) -> np.ndarray:
    """``(0, 0, 1, 1, 1)`` for k = 5; in general the first 40% zero, the rest one."""
    n_zero = int(round(0.4 * k))
    return np.r_[np.zeros(n_zero), np.ones(k - n_zero)]


def contiguous_groups(p: int, q: int) -> np.ndarray:
    """1-based group map: ``q`` contiguous blocks of size ``p // q``, remainder to the last."""
    if p < q:
        raise InputError(f"need p >= q to give every group a variable (p={p}, q={q})")
    size = p // q
    return np.minimum(np.arange(p) // size, q - 1) + 1


@dataclass
class SimSpec:
    """Simulation settings.

    ``beta_z``/``beta_u`` default to :func:`default_effects`.
    ``active_pattern`` sets ``beta_x``: ``"last"`` puts a 1 on the last
    variable of each active group, ``"none"`` leaves all at zero.
    """

    n: int
    p: int = 50
    q: int = 5
    r: int = 5
    rho: float = 0.5
    beta_z: np.ndarray | None = None
    beta_u: np.ndarray | None = None
    active_pattern: str = "last"
    link: str = PROBIT
    seed: int = 0
    group_map: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.n < 1 or self.p < 1 or self.q < 1 or self.r < 0:
            raise InputError("need n, p, q >= 1 and r >= 0")
        if not 0.0 <= self.rho < 1.0:
            raise InputError(f"rho must lie in [0, 1), got {self.rho}")
        if self.link not in LINKS:
            raise InputError(f"unknown link {self.link!r}")
        if self.active_pattern not in ("last", "none"):
            raise InputError(f"unknown active_pattern {self.active_pattern!r}")
        self.beta_z = default_effects(self.r) if self.beta_z is None else np.asarray(self.beta_z, float)
        self.beta_u = default_effects(self.q) if self.beta_u is None else np.asarray(self.beta_u, float)
        if self.beta_z.size != self.r or self.beta_u.size != self.q:
            raise InputError("beta_z / beta_u lengths must equal r / q")
        self.group_map = (contiguous_groups(self.p, self.q) if self.group_map is None
                          else np.asarray(self.group_map, dtype=np.int64))


def simulate(spec: SimSpec):
    """Draw a dataset from the model.

    Rows of ``[X U Z]`` are N(0, Sigma) with unit variances and common
    correlation ``rho`` (one shared factor per row).

    Returns
    -------
    data : Dataset
    truth : Theta
        ``gamma_k = 1`` iff ``beta_u[k] != 0``; ``eta_j = 1`` iff ``beta_x[j] != 0``.
    beta : CoefVector
    """
    rng = np.random.default_rng(spec.seed)
    n, p, q, r = spec.n, spec.p, spec.q, spec.r
    cols = p + q + r
    shared = rng.standard_normal((n, 1))
    W = math.sqrt(spec.rho) * shared + math.sqrt(1.0 - spec.rho) * rng.standard_normal((n, cols))
    X, U, Z = W[:, :p], W[:, p:p + q], W[:, p + q:]

    gi = spec.group_map - 1
    beta_x = np.zeros(p)
    if spec.active_pattern == "last":
        for k in np.flatnonzero(spec.beta_u != 0):
            beta_x[np.flatnonzero(gi == k)[-1]] = 1.0
    beta = CoefVector(beta_x, spec.beta_u, spec.beta_z)
    lin = X @ beta_x + U @ spec.beta_u + Z @ spec.beta_z
    prob = ndtr(lin) if spec.link == PROBIT else expit(lin)
    y = (rng.random(n) < prob).astype(np.int8)
    data = Dataset(y, X, U, Z, spec.group_map)
    truth = Theta(spec.beta_u != 0, beta_x != 0)
    return data, truth, beta


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------

def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def header(p: int, q: int, r: int) -> list[str]:
    return (["y"] + [f"x_{j}" for j in range(1, p + 1)]
            + [f"u_{k}" for k in range(1, q + 1)] + [f"z_{l}" for l in range(1, r + 1)])


def write_dataset(data: Dataset, path) -> Path:
    """Write CSV plus JSON sidecar; returns the CSV path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = np.hstack([data.X, data.U, data.Z])
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header(data.p, data.q, data.r)) + "\n")
        for yi, row in zip(data.y, body):
            fh.write(str(int(yi)) + "".join("," + format(v, ".17g") for v in row) + "\n")
    meta = {"p": data.p, "q": data.q, "r": data.r,
            "group_map": [int(g) for g in data.group_map]}
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh)
        fh.write("\n")
    return path


def _read_meta(path: Path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        raise DatasetFormatError("missing JSON sidecar", path=side)
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"invalid JSON: {exc.msg}", path=side, line=exc.lineno,
                                 column=exc.colno) from None
    for key in ("p", "q", "r", "group_map"):
        if key not in meta:
            raise DatasetFormatError(f"sidecar lacks field {key!r}", path=side)
    p, q, r = meta["p"], meta["q"], meta["r"]
    if not all(isinstance(v, int) and v >= 0 for v in (p, q, r)) or p < 1 or q < 1:
        raise DatasetFormatError("p, q must be positive integers and r a nonnegative integer", path=side)
    gm = meta["group_map"]
    if not isinstance(gm, list) or len(gm) != p:
        raise DatasetFormatError(f"group_map must be a list of length p={p}", path=side)
    for j, g in enumerate(gm, start=1):
        if not isinstance(g, int) or not 1 <= g <= q:
            raise DatasetFormatError(
                f"group_map entry {j} is {g!r}; expected a 1-based group index in 1..{q}", path=side)
    if set(gm) != set(range(1, q + 1)):
        raise DatasetFormatError(f"group_map does not cover every group 1..{q}", path=side)
    return meta


def read_dataset(path) -> Dataset:
    """Parse a dataset written by :func:`write_dataset` (or by hand)."""
    path = Path(path)
    meta = _read_meta(path)
    p, q, r = meta["p"], meta["q"], meta["r"]
    expected = header(p, q, r)
    width = len(expected)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise DatasetFormatError("empty file", path=path, line=1) from None
        head = [h.strip() for h in head]
        if head != expected:
            col = next((i + 1 for i, (a, b) in enumerate(zip(head, expected)) if a != b),
                       min(len(head), width) + 1)
            raise DatasetFormatError(
                f"malformed header; expected {width} columns y,x_1..x_{p},u_1..u_{q}"
                + (f",z_1..z_{r}" if r else ""), path=path, line=1, column=col)
        values = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DatasetFormatError(f"expected {width} fields, found {len(row)}",
                                         path=path, line=lineno, column=min(len(row), width) + 1)
            try:
                vals = [float(v) for v in row]
            except ValueError:
                col = next(i for i, v in enumerate(row) if not _is_float(v)) + 1
                raise DatasetFormatError(f"not a number: {row[col - 1]!r}", path=path,
                                         line=lineno, column=col) from None
            if vals[0] not in (0.0, 1.0):
                raise DatasetFormatError(f"response must be 0 or 1, got {row[0]!r}",
                                         path=path, line=lineno, column=1)
            bad = [i for i, v in enumerate(vals) if not math.isfinite(v)]
            if bad:
                raise DatasetFormatError("non-finite value", path=path, line=lineno, column=bad[0] + 1)
            values.append(vals)
    if not values:
        raise DatasetFormatError("no data rows", path=path, line=2)
    A = np.array(values)
    return Dataset(A[:, 0], A[:, 1:1 + p], A[:, 1 + p:1 + p + q], A[:, 1 + p + q:],
                   np.array(meta["group_map"], dtype=np.int64))


def _is_float(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True
