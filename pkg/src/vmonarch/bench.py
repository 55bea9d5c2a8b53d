"""Benchmark harness: run one attention path or a frame sweep and report JSON/CSV.

Report keys and CSV column order are fixed by ``REPORT_FIELDS``; timing fields
are the only ones that vary between runs with the same seed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import statistics
import sys
import time
from dataclasses import asdict, dataclass, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import matn
from .errors import DimensionError, DomainError, VMonarchError
from .flash_entropy import TileConfig, flash_entropy_fwd
from .monarch import MonarchConfig, monarch_attention
from .oracles import MAX_ORACLE_N, dense_attention
from .tensor_core import count_macs, mm
from .video import FLOPS_CONVENTION, PRESETS, TokenGrid, VMonarchConfig, flops_estimate, get_preset, vmonarch_attention

MODES = ("dense", "flash", "monarch", "vmonarch")

REPORT_FIELDS = (
    "mode", "n", "d", "m", "b", "frames", "hw", "iters", "batch", "heads",
    "precision", "seed", "dist", "repeats", "clamp_min", "clamp_enabled",
    "recompute", "b_r", "b_c", "preset",
    "wall_time_ns", "dense_wall_time_ns", "speedup",
    "macs", "sparsity", "sparsity_approx", "monarch_flops", "full_attn_flops",
    "recompute_flops", "reduction_ratio",
    "max_abs_error", "rel_fro_error", "note",
)
TIMING_FIELDS = ("wall_time_ns", "dense_wall_time_ns", "speedup")


class Refusal(VMonarchError):
    """A run request that is valid syntax but violates a policy cap."""


@dataclass
class RunSpec:
    mode: str = "vmonarch"
    n: int | None = None
    d: int = 64
    m: int | None = None
    b: int | None = None
    frames: int | None = None
    h: int | None = None
    w: int | None = None
    preset: str | None = None
    iters: int = 2
    clamp_min: float = 0.1
    clamp_enabled: bool = True
    recompute: bool = True
    b_r: int = 64
    b_c: int = 64
    batch: int = 1
    heads: int = 1
    seed: int = 0
    repeats: int = 3
    verify: bool = False
    precision: str = "f32"
    dist: str = "normal"
    threads: int = 1
    with_dense: bool = False
    in_path: str | None = None
    out_path: str | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.precision not in ("f32", "f64"):
            raise DomainError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.dist not in ("normal", "uniform"):
            raise DomainError(f"dist must be normal or uniform, got {self.dist!r}")
        if self.repeats < 1:
            raise DomainError("repeats must be >= 1")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def grid(self) -> TokenGrid | None:
        if self.preset is not None:
            g = get_preset(self.preset).grid
            return TokenGrid(g.t_frames, g.h, g.w, self.d, self.heads, self.batch)
        if self.frames is not None:
            h = self.h or 1
            w = self.w if self.w is not None else (self.b or 1) // h
            return TokenGrid(self.frames, h, w, self.d, self.heads, self.batch)
        if self.m is not None and self.b is not None:
            return TokenGrid(self.m, 1, self.b, self.d, self.heads, self.batch)
        return None

    def seq_len(self) -> int:
        g = self.grid()
        if g is not None:
            if self.n is not None and self.n != g.n:
                raise DimensionError(f"--n {self.n} disagrees with the grid/factorization (N={g.n})")
            return g.n
        if self.n is None:
            raise DomainError("give --n, --preset, --frames or --m/--b")
        return self.n

    def factors(self) -> tuple[int, int]:
        n = self.seq_len()
        if self.m is not None and self.b is not None:
            return self.m, self.b
        g = self.grid()
        if g is not None:
            return g.t_frames, g.hw
        if self.m is not None:
            return self.m, n // self.m
        if self.b is not None:
            return n // self.b, self.b
        m = max(k for k in range(1, math.isqrt(n) + 1) if n % k == 0)
        return m, n // m


def dense_reference_path(Q, K, V, chunk: int = 512) -> np.ndarray:
    """Exact softmax attention in the working precision, row-chunked. Q pre-scaled."""
    out = np.empty((Q.shape[0], V.shape[1]), dtype=Q.dtype)
    for r in range(0, Q.shape[0], chunk):
        s = mm(Q[r : r + chunk], K.T)
        s -= s.max(axis=1, keepdims=True)
        np.exp(s, out=s)
        out[r : r + chunk] = mm(s, V) / s.sum(axis=1, keepdims=True)
    return out


def make_inputs(spec: RunSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Q, K, V of shape (batch, heads, N, d)."""
    n = spec.seq_len()
    shape = (spec.batch, spec.heads, n, spec.d)
    if spec.in_path:
        arr = matn.load(spec.in_path)
        if arr.ndim == 3:
            arr = arr[:, None, None]
        if arr.ndim != 5 or arr.shape[0] != 3 or arr.shape[1:] != shape:
            raise DomainError(
                f"input tensor has shape {arr.shape}; expected (3, N, d) or (3, {', '.join(map(str, shape))})"
            )
        return tuple(np.ascontiguousarray(a, dtype=spec.dtype) for a in arr)
    rng = np.random.default_rng(spec.seed)
    if spec.dist == "normal":
        draw = lambda: rng.standard_normal(shape)  # noqa: E731
    else:
        draw = lambda: rng.uniform(-1.0, 1.0, shape)  # noqa: E731
    return tuple(draw().astype(spec.dtype) for _ in range(3))


def _unit_fn(spec: RunSpec, mode: str):
    tiles = TileConfig(spec.b_r, spec.b_c)
    if mode == "vmonarch":
        grid = spec.grid()
        if grid is None:
            m, b = spec.factors()
            grid = TokenGrid(m, 1, b, spec.d)
        override = None
        if spec.m is not None and spec.b is not None and (spec.m, spec.b) != (grid.t_frames, grid.hw):
            override = (spec.m, spec.b)
        vcfg = VMonarchConfig(
            iters=spec.iters, clamp_min=spec.clamp_min, clamp_enabled=spec.clamp_enabled,
            recompute_first_frame=spec.recompute, override_m_b=override,
        )
        unit_grid = TokenGrid(grid.t_frames, grid.h, grid.w, spec.d)
        return lambda q, k, v: vmonarch_attention(q, k, v, unit_grid, vcfg)

    if mode == "monarch":
        m, b = spec.factors()
        mcfg = MonarchConfig(m, b, spec.iters, spec.clamp_min, spec.clamp_enabled)
        return lambda q, k, v: monarch_attention(q, k, v, mcfg)[0]

    def scaled(q):
        return q * q.dtype.type(1.0 / math.sqrt(q.shape[1]))

    if mode == "flash":
        return lambda q, k, v: flash_entropy_fwd(scaled(q), k, v, tiles)[0]
    return lambda q, k, v: dense_reference_path(scaled(q), k, v)


def _execute(spec: RunSpec, mode: str, Q, K, V) -> np.ndarray:
    fn = _unit_fn(spec, mode)
    lead = Q.shape[:2]
    qs, ks, vs = (a.reshape(-1, *a.shape[2:]) for a in (Q, K, V))
    if spec.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(spec.threads) as pool:
            outs = list(pool.map(fn, qs, ks, vs))
    else:
        outs = [fn(q, k, v) for q, k, v in zip(qs, ks, vs)]
    return np.stack(outs).reshape(*lead, *outs[0].shape)


def _time(spec: RunSpec, mode: str, Q, K, V) -> tuple[int, np.ndarray]:
    times = []
    out = None
    for _ in range(spec.repeats):
        t0 = time.perf_counter_ns()
        out = _execute(spec, mode, Q, K, V)
        times.append(time.perf_counter_ns() - t0)
    return int(statistics.median(times)), out


def run(spec: RunSpec) -> dict:
    """Execute one configuration and return a report dict keyed by REPORT_FIELDS."""
    n = spec.seq_len()
    if spec.verify and n > MAX_ORACLE_N:
        raise Refusal(f"verification needs the dense oracle, which is capped at N <= {MAX_ORACLE_N} (got N={n})")
    Q, K, V = make_inputs(spec)
    report = dict.fromkeys(REPORT_FIELDS)
    grid = spec.grid()
    report.update(
        mode=spec.mode, n=n, d=spec.d, iters=spec.iters, batch=spec.batch,
        heads=spec.heads, precision=spec.precision, seed=spec.seed, dist=spec.dist,
        repeats=spec.repeats, clamp_min=spec.clamp_min, clamp_enabled=spec.clamp_enabled,
        recompute=spec.recompute, b_r=spec.b_r, b_c=spec.b_c, preset=spec.preset,
        frames=grid.t_frames if grid else None, hw=grid.hw if grid else None,
    )

    with threadpool_limits(1):
        with count_macs() as counter:
            _execute(spec, spec.mode, Q, K, V)
        report["macs"] = counter.macs
        report["wall_time_ns"], out = _time(spec, spec.mode, Q, K, V)
        if spec.with_dense:
            report["dense_wall_time_ns"], _ = _time(spec, "dense", Q, K, V)
            report["speedup"] = report["dense_wall_time_ns"] / report["wall_time_ns"]

    if spec.mode in ("monarch", "vmonarch"):
        m, b = spec.factors()
        report.update(m=m, b=b)
        cost_grid = TokenGrid(m, 1, b, spec.d, spec.heads, spec.batch)
        if grid is not None and spec.mode == "vmonarch":
            cost_grid = grid
        override = (m, b) if (m, b) != (cost_grid.t_frames, cost_grid.hw) else None
        vcfg = VMonarchConfig(
            iters=spec.iters, recompute_first_frame=spec.mode == "vmonarch" and spec.recompute,
            override_m_b=override,
        )
        cost = flops_estimate(cost_grid, vcfg, spec.d)
        report.update({k: v for k, v in asdict(cost).items() if k != "convention"})

    if spec.verify:
        errs, ref_norm, diff_norm = 0.0, 0.0, 0.0
        for u in np.ndindex(Q.shape[:2]):
            ref = dense_attention(Q[u], K[u], V[u]).output
            diff = out[u].astype(np.float64) - ref
            errs = max(errs, float(np.max(np.abs(diff))))
            diff_norm += float(np.sum(diff**2))
            ref_norm += float(np.sum(ref**2))
        report["max_abs_error"] = errs
        report["rel_fro_error"] = math.sqrt(diff_norm / ref_norm) if ref_norm > 0 else math.sqrt(diff_norm)

    if spec.preset and PRESETS[spec.preset].note:
        report["note"] = PRESETS[spec.preset].note
    if spec.out_path:
        matn.save(spec.out_path, out)
    return report


def sweep(base: RunSpec, frames: list[int]) -> list[dict]:
    """One report per frame count at fixed (h, w, d); refusals become note-only rows."""
    rows = []
    for t in frames:
        spec = replace(base, frames=t, preset=None, m=None, b=None, with_dense=True)
        try:
            rows.append(run(spec))
        except Refusal as exc:
            row = dict.fromkeys(REPORT_FIELDS)
            row.update(mode=spec.mode, frames=t, hw=(spec.h or 1) * (spec.w or 1), d=spec.d, note=f"refused: {exc}")
            row["n"] = t * row["hw"]
            rows.append(row)
    return rows


def to_json(report: dict) -> str:
    """JSON with a fixed key order; error fields are dropped for unverified runs."""
    doc = {k: report[k] for k in REPORT_FIELDS}
    if doc["max_abs_error"] is None:
        del doc["max_abs_error"], doc["rel_fro_error"]
    if doc["sparsity"] is not None:
        doc["flops_convention"] = FLOPS_CONVENTION
    return json.dumps(doc, indent=2)


def to_csv(reports: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({k: ("" if r.get(k) is None else r[k]) for k in REPORT_FIELDS})
    return buf.getvalue()


def _on_off(s: str) -> bool:
    v = s.lower()
    if v in ("on", "true", "1", "yes"):
        return True
    if v in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {s!r}")


def _int_list(s: str) -> list[int]:
    s = s.strip()
    if not s:
        return []
    if ":" in s:
        parts = [int(x) for x in s.split(":")]
        lo, hi = parts[0], parts[1]
        step = parts[2] if len(parts) > 2 else 1
        return list(range(lo, hi + 1, step))
    return [int(x) for x in s.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vmonarch-bench", description=__doc__.splitlines()[0])
    p.add_argument("--mode", choices=MODES, default="vmonarch")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--t", type=int, default=2, help="Monarch iterations")
    p.add_argument("--clamp-min", type=float, default=0.1)
    p.add_argument("--no-clamp", action="store_true")
    p.add_argument("--no-recompute", action="store_true")
    p.add_argument("--m", type=int)
    p.add_argument("--b", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--frames", type=int, help="latent frame count T (vmonarch)")
    p.add_argument("--height", type=int, help="latent height h")
    p.add_argument("--width", type=int, help="latent width w")
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--br", type=int, default=64)
    p.add_argument("--bc", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--verify", type=_on_off, default=False, metavar="on|off")
    p.add_argument("--precision", choices=("f32", "f64"), default="f32")
    p.add_argument("--csv", action="store_true")
    p.add_argument("--dist", choices=("normal", "uniform"), default="normal")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--with-dense", action="store_true", help="also time the dense path")
    p.add_argument("--sweep-frames", type=_int_list, metavar="LO:HI[:STEP]|T1,T2,..",
                   help="sweep frame counts at fixed --height/--width; emits CSV")
    p.add_argument("--in", dest="in_path")
    p.add_argument("--out", dest="out_path")
    return p


def spec_from_args(a: argparse.Namespace) -> RunSpec:
    return RunSpec(
        mode=a.mode, n=a.n, d=a.d, m=a.m, b=a.b, frames=a.frames, h=a.height, w=a.width,
        preset=a.preset, iters=a.t, clamp_min=a.clamp_min, clamp_enabled=not a.no_clamp,
        recompute=not a.no_recompute, b_r=a.br, b_c=a.bc, batch=a.batch, heads=a.heads,
        seed=a.seed, repeats=a.repeats, verify=a.verify, precision=a.precision, dist=a.dist,
        threads=a.threads, with_dense=a.with_dense, in_path=a.in_path, out_path=a.out_path,
    )


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = spec_from_args(args)
        if args.sweep_frames is not None:
            sys.stdout.write(to_csv(sweep(spec, args.sweep_frames)))
            return 0
        report = run(spec)
    except Refusal as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return 2
    except (DomainError, DimensionError) as exc:
        print(f"invalid request: {exc}", file=sys.stderr)
        return 2
    except VMonarchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write(to_csv([report]) if args.csv else to_json(report) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
