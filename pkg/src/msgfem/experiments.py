"""Convergence sweeps over n_loc, oversampling size and Steklov truncation.

Work is shared aggressively: for a fixed oversampling size the particular
functions and Steklov bases are computed once at the largest ``s``; the local
eigenvectors for the largest ``n_loc`` are computed once per ``s`` and every
smaller ``n_loc`` reuses their leading columns.  Both truncations give nested
spans, so each record is exactly what a standalone run would produce.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .coefficients import Example, benchmark_problem_data, example_coefficient
from .decomposition import Decomposition, build_decomposition
from .gfem import FineProblem, pivoted_spd_solve, reference_solve
from .grid_fem import build_mesh, energy_norm, write_nodal_csv
from .local_spaces import (LocalSpaceWarning, OversampledPatch, local_spectral_basis, particular_function,
                           steklov_basis)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    mesh_n: int = 100
    example: str = Example.RANDOM_FIELD.value
    seed: int = 0
    m: int = 4
    overlap_layers: int = 2
    ell_list: list = field(default_factory=lambda: [0, 4, 8])
    nloc_list: list = field(default_factory=lambda: list(range(2, 17)))
    s_list: list = field(default_factory=lambda: ["auto"])
    output_dir: str = "results"
    patch_scale: float = 1 / 50
    value_low: float = 1.0
    value_high: float = 100.0
    workers: int = 1

    def validate(self) -> "ExperimentConfig":
        try:
            self.example = Example(self.example).value
        except ValueError:
            raise ConfigError(f"unknown example {self.example!r}") from None
        for name in ("ell_list", "nloc_list", "s_list"):
            if not getattr(self, name):
                raise ConfigError(f"{name} must be nonempty")
        if self.mesh_n < 2 or self.m < 1 or self.overlap_layers < 1:
            raise ConfigError("mesh_n >= 2, m >= 1 and overlap_layers >= 1 required")
        if any(int(e) < 0 for e in self.ell_list) or any(int(n) < 1 for n in self.nloc_list):
            raise ConfigError("ell values must be >= 0 and n_loc values >= 1")
        if any(s != "auto" and int(s) < 1 for s in self.s_list):
            raise ConfigError("s values must be positive integers or 'auto'")
        if self.example == Example.RANDOM_FIELD.value:
            cells = self.patch_scale * self.mesh_n
            if abs(cells - round(cells)) > 1e-9 or round(cells) < 1:
                raise ConfigError(f"mesh_n = {self.mesh_n} does not resolve patch scale {self.patch_scale}")
        return self

    def resolve_s(self, s, n_loc_max: int) -> int:
        return max(4 * n_loc_max, 40) if s == "auto" else int(s)


def _parse_list(text: str) -> list:
    out = []
    for tok in str(text).replace(" ", "").split(","):
        if not tok:
            continue
        if tok == "auto":
            out.append("auto")
        elif ".." in tok:
            lo, hi = tok.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(tok))
    return out


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def config_from_mapping(values: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = dataclasses.replace(base) if base else ExperimentConfig()
    for key, raw in values.items():
        if raw is None:
            continue
        key = key.replace("-", "_")
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        typ = _FIELD_TYPES[key]
        try:
            if typ == "list":
                val = raw if isinstance(raw, list) else _parse_list(raw)
            elif typ == "int":
                val = int(raw)
            elif typ == "float":
                val = float(raw)
            else:
                val = str(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r}") from exc
        setattr(cfg, key, val)
    return cfg


def load_config(path) -> ExperimentConfig:
    """Read flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        k, v = (t.strip() for t in line.split("=", 1))
        values[k] = v
    return config_from_mapping(values)


@dataclass
class SweepRecord:
    example: str
    mesh_n: int
    seed: int
    m: int
    ell: int
    H: float
    Hstar: float
    rho: float
    n_loc: int
    s: int
    error: float
    kappa: int
    kappastar: int
    wall_time_ms: float
    dropped_cols: int


RECORD_COLUMNS = [f.name for f in dataclasses.fields(SweepRecord)]


def write_records(path, records: list[SweepRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(records, key=lambda r: (r.example, r.ell, r.s, r.n_loc))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in ordered:
            row = dataclasses.astuple(r)
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def read_records(path) -> list[dict]:
    with open(path) as fh:
        return list(csv.DictReader(fh))


class ExperimentContext:
    """Fine problem, reference solution and cached local work for one example."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg.validate()
        self.mesh = build_mesh(cfg.mesh_n, cfg.mesh_n)
        kwargs = {}
        if cfg.example == Example.RANDOM_FIELD.value:
            kwargs = dict(patch_scale=cfg.patch_scale, value_low=cfg.value_low, value_high=cfg.value_high)
        self.coeff = example_coefficient(cfg.example, self.mesh, cfg.seed, **kwargs)
        self.problem = FineProblem.assemble(self.mesh, self.coeff, benchmark_problem_data(cfg.example))
        self.u_h = reference_solve(self.problem)
        self.ref_norm = energy_norm(self.problem.K, self.u_h)
        self._stage: dict[int, tuple] = {}

    def decomposition(self, ell: int) -> Decomposition:
        return build_decomposition(self.mesh, self.cfg.m, self.cfg.overlap_layers, ell)

    def oversampled_stage(self, ell: int, s_max: int):
        """Patches, particular functions and Steklov bases at oversampling ``ell``."""
        cached = self._stage.get(ell)
        if cached is not None and cached[3] >= s_max:
            return cached
        decomp = self.decomposition(ell)

        def one(i):
            patch = OversampledPatch(self.mesh, self.coeff, decomp, i)
            return patch, particular_function(patch, self.problem.F, self.problem.data.q), steklov_basis(patch, s_max)

        with warnings.catch_warnings():
            warnings.simplefilter("ignore", LocalSpaceWarning)
            if self.cfg.workers > 1:
                with ThreadPoolExecutor(self.cfg.workers) as pool:
                    parts = list(pool.map(one, range(decomp.n_subdomains)))
            else:
                parts = [one(i) for i in range(decomp.n_subdomains)]
        patches, particulars, harms = (list(t) for t in zip(*parts))
        cached = (decomp, patches, particulars, s_max, harms)
        self._stage = {ell: cached}
        return cached

    def error(self, u_G: np.ndarray) -> float:
        return energy_norm(self.problem.K, self.u_h - u_G) / self.ref_norm


@dataclass
class CoarseSystem:
    """Glued particular function and coarse basis for the largest requested n_loc."""

    u_p: np.ndarray
    C: sp.csc_matrix
    local_rank: np.ndarray  # position of each column inside its local basis
    G: np.ndarray
    r: np.ndarray
    zero_cols: np.ndarray

    def solve(self, n_loc: int):
        idx = np.flatnonzero((self.local_rank < n_loc) & ~self.zero_cols)
        c, rank = pivoted_spd_solve(self.G[np.ix_(idx, idx)], self.r[idx])
        u_s = self.C[:, idx] @ c
        dropped = int(idx.size - rank + np.count_nonzero(self.zero_cols & (self.local_rank < n_loc)))
        return self.u_p + u_s, dropped


def build_coarse_system(ctx: ExperimentContext, ell: int, s: int, n_max: int) -> CoarseSystem:
    decomp, patches, particulars, _, harms = ctx.oversampled_stage(ell, s)
    n = ctx.mesh.n_nodes
    u_p = np.zeros(n)
    rows, cols, vals, ranks = [], [], [], []
    ncol = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", LocalSpaceWarning)
        for patch, part, harm in zip(patches, particulars, harms):
            sub = patch.sub
            mask = sub.internal_mask
            w = patch.pu_weights
            u_p[sub.nodes[mask]] += (w * part[patch.sub_in_star])[mask]
            phi, _ = local_spectral_basis(patch, harm.truncate(s), n_max)
            block = (w[:, None] * phi[patch.sub_in_star])[mask]
            r_, c_ = np.nonzero(block)
            rows.append(sub.nodes[mask][r_])
            cols.append(c_ + ncol)
            vals.append(block[r_, c_])
            ranks.append(np.arange(phi.shape[1]))
            ncol += phi.shape[1]
    C = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, ncol))
    K = ctx.problem.K
    G = (C.T @ (K @ C)).toarray()
    G = 0.5 * (G + G.T)
    resid = ctx.problem.F - K @ u_p
    resid[ctx.mesh.dirichlet_nodes] = 0.0
    r = np.asarray(C.T @ resid).ravel()
    zero_cols = np.sqrt(np.maximum(np.diag(G), 0.0)) <= 1e-13
    return CoarseSystem(u_p, C, np.concatenate(ranks), G, r, zero_cols)


def _record(ctx, decomp, ell, n_loc, s, error, wall_ms, dropped) -> SweepRecord:
    cfg = ctx.cfg
    return SweepRecord(cfg.example, cfg.mesh_n, cfg.seed, cfg.m, int(ell), decomp.H, decomp.H_star, decomp.rho,
                       int(n_loc), int(s), float(error), decomp.kappa, decomp.kappa_star, round(wall_ms, 3),
                       int(dropped))


def _grid_sweep(ctx: ExperimentContext, ells, nlocs, svals, failures: list) -> list[SweepRecord]:
    records = []
    n_max = max(int(n) for n in nlocs)
    s_res = sorted({ctx.cfg.resolve_s(s, n_max) for s in svals})
    for ell in ells:
        t0 = time.perf_counter()
        try:
            decomp = ctx.oversampled_stage(int(ell), max(s_res))[0]
        except Exception as exc:  # noqa: BLE001 - sweep keeps going
            log.error("ell=%s: local setup failed: %s", ell, exc)
            failures.append((ell, None, None, str(exc)))
            continue
        setup_ms = (time.perf_counter() - t0) * 1e3
        for s in s_res:
            t1 = time.perf_counter()
            try:
                system = build_coarse_system(ctx, int(ell), s, n_max)
            except Exception as exc:  # noqa: BLE001
                log.error("ell=%s s=%s: coarse assembly failed: %s", ell, s, exc)
                failures.append((ell, s, None, str(exc)))
                continue
            stage_ms = setup_ms + (time.perf_counter() - t1) * 1e3
            for n_loc in sorted(int(n) for n in nlocs):
                t2 = time.perf_counter()
                try:
                    u_G, dropped = system.solve(n_loc)
                    err = ctx.error(u_G)
                except Exception as exc:  # noqa: BLE001
                    log.error("ell=%s s=%s n_loc=%s failed: %s", ell, s, n_loc, exc)
                    failures.append((ell, s, n_loc, str(exc)))
                    continue
                wall = stage_ms + (time.perf_counter() - t2) * 1e3
                records.append(_record(ctx, decomp, ell, n_loc, s, err, wall, dropped))
                log.info("%s ell=%d s=%d n_loc=%d error=%.4e", ctx.cfg.example, ell, s, n_loc, err)
    return records


@dataclass
class SweepResult:
    records: list[SweepRecord]
    failures: list
    csv_path: Path | None = None


def _finish(cfg, name, records, failures, write) -> SweepResult:
    path = None
    if write:
        path = write_records(Path(cfg.output_dir) / f"{name}_{cfg.example}.csv", records)
    return SweepResult(records, failures, path)


def run_nloc_sweep(cfg: ExperimentConfig, ctx: ExperimentContext | None = None, write: bool = True) -> SweepResult:
    """Error against n_loc for every oversampling size in ``ell_list``."""
    ctx = ctx or ExperimentContext(cfg)
    failures = []
    records = _grid_sweep(ctx, cfg.ell_list, cfg.nloc_list, cfg.s_list[:1], failures)
    return _finish(cfg, "nloc_sweep", records, failures, write)


def run_rho_sweep(cfg: ExperimentConfig, ctx: ExperimentContext | None = None, write: bool = True) -> SweepResult:
    """Error against H/H* (through ``ell_list``) for each n_loc in ``nloc_list``."""
    ctx = ctx or ExperimentContext(cfg)
    failures = []
    records = _grid_sweep(ctx, cfg.ell_list, cfg.nloc_list, cfg.s_list[:1], failures)
    return _finish(cfg, "rho_sweep", records, failures, write)


def run_s_sweep(cfg: ExperimentConfig, ctx: ExperimentContext | None = None, write: bool = True) -> SweepResult:
    """Error against the number of Steklov functions, at ``ell_list[0]`` and ``nloc_list[0]``."""
    ctx = ctx or ExperimentContext(cfg)
    failures = []
    records = _grid_sweep(ctx, cfg.ell_list[:1], cfg.nloc_list[:1], cfg.s_list, failures)
    return _finish(cfg, "s_sweep", records, failures, write)


def run_field_dump(cfg: ExperimentConfig, ctx: ExperimentContext | None = None) -> SweepResult:
    """Write nodal CSVs of u_h, u_G and |u_h - u_G| for the first (ell, n_loc, s) of the config."""
    ctx = ctx or ExperimentContext(cfg)
    ell, n_loc = int(cfg.ell_list[0]), int(cfg.nloc_list[0])
    s = cfg.resolve_s(cfg.s_list[0], n_loc)
    t0 = time.perf_counter()
    decomp = ctx.oversampled_stage(ell, s)[0]
    u_G, dropped = build_coarse_system(ctx, ell, s, n_loc).solve(n_loc)
    err = ctx.error(u_G)
    wall = (time.perf_counter() - t0) * 1e3
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tag = f"{cfg.example}_m{cfg.m}_ell{ell}_nloc{n_loc}_s{s}"
    write_nodal_csv(out / f"u_h_{tag}.csv", ctx.mesh, ctx.u_h)
    write_nodal_csv(out / f"u_G_{tag}.csv", ctx.mesh, u_G)
    pointwise = np.abs(ctx.u_h - u_G)
    write_nodal_csv(out / f"abs_error_{tag}.csv", ctx.mesh, pointwise)
    k = int(np.argmax(pointwise))
    x, y = ctx.mesh.coords[k]
    log.info("max |u_h - u_G| = %.4e at node %d (x=%.4f, y=%.4f); energy error %.4e",
             pointwise[k], k, x, y, err)
    rec = _record(ctx, decomp, ell, n_loc, s, err, wall, dropped)
    path = write_records(out / f"field_dump_{tag}.csv", [rec])
    return SweepResult([rec], [], path)


def fit_line(x, y) -> tuple[float, float, float]:
    """Least-squares ``y = a x + b``; returns (slope, intercept, R^2)."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    a, b = np.polyfit(x, y, 1)
    ss_res = float(np.sum((y - (a * x + b)) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return float(a), float(b), 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
