"""Fixed-iteration scaling benchmark across worker counts."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass

import numpy as np

from .deconv import StopPolicy
from .errors import LfDeconvError
from .optics import OpticsParams
from .phantom import PhantomSpec, SyntheticPsfSpec, gen_psf, simulate
from .pipeline import plan_workers, run_parallel


class BenchMismatchError(LfDeconvError):
    """Worker counts disagreed; timings are withheld."""


@dataclass(frozen=True)
class BenchProblem:
    nz: int = 16
    height: int = 240
    width: int = 240
    nnum: int = 3
    kernel: int = 21
    iters: int = 10
    seed: int = 0
    bead_count: int = 40

    def psf_spec(self) -> SyntheticPsfSpec:
        # gentle depth growth so a 16-layer stack stays inside a 21 px support
        return SyntheticPsfSpec(nz=self.nz, nnum=self.nnum, kh=self.kernel, kw=self.kernel,
                                sigma0=1.0, sigma_slope=0.2, shear=1.0)

    def phantom_spec(self) -> PhantomSpec:
        radius = 1 if self.nz >= 3 else 0
        return PhantomSpec(nz=self.nz, height=self.height, width=self.width,
                           bead_count=self.bead_count, bead_radius_px=radius, seed=self.seed)


BENCH_OPTICS = OpticsParams(wavelength_um=0.52, na=0.8, mla_pitch_um=150.0, magnification=40.0, nnum=3)


def hardware_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def run_bench(problem: BenchProblem, workers_list, optics: OpticsParams | None = None) -> dict:
    """Run the same fixed-iteration deconvolution for each worker count.

    Every result is compared bit for bit with the first before any timing is
    reported.

    Raises
    ------
    BenchMismatchError
        If any worker count produces a different volume or metric series.
    """
    optics = optics or OpticsParams(BENCH_OPTICS.wavelength_um, BENCH_OPTICS.na,
                                    BENCH_OPTICS.mla_pitch_um, BENCH_OPTICS.magnification, problem.nnum)
    psf = gen_psf(problem.psf_spec())
    _, y = simulate(problem.phantom_spec(), psf)
    policy = StopPolicy.fixed(problem.iters)
    runs = []
    for w in workers_list:
        plan = plan_workers(problem.nz, w, problem.height, problem.width, psf)
        start = time.perf_counter()
        result = run_parallel(y, psf, optics, policy, plan)
        runs.append((w, time.perf_counter() - start, result))

    ref_w, _, ref = runs[0]
    for w, _, result in runs[1:]:
        if not (np.array_equal(result.volume, ref.volume) and result.series.same_values(ref.series)):
            raise BenchMismatchError(
                f"workers={w} result differs from workers={ref_w}; refusing to report timings"
            )

    base = next((wall for w, wall, _ in runs if w == 1), runs[0][1])
    rows = []
    for w, wall, result in runs:
        per_iter = result.transfers.iteration_bytes
        rows.append({
            "workers": w,
            "wall_s": wall,
            "per_iter_ms": wall / problem.iters * 1e3,
            "speedup": base / wall,
            "bytes_per_iter": int(np.mean(per_iter)),
            "bytes_per_iter_max": int(max(per_iter)),
            "setup_bytes": result.transfers.setup_bytes,
        })
    return {
        "format_version": 1,
        "problem": problem.__dict__,
        "hardware_threads": hardware_threads(),
        "identical": True,
        "rows": rows,
    }


def format_table(report: dict) -> str:
    lines = [
        f"problem: {report['problem']}",
        f"hardware threads: {report['hardware_threads']}; results identical across workers: {report['identical']}",
        f"{'workers':>7} {'wall_s':>9} {'ms/iter':>9} {'speedup':>8} {'bytes/iter':>12}",
    ]
    for r in report["rows"]:
        lines.append(f"{r['workers']:>7} {r['wall_s']:>9.3f} {r['per_iter_ms']:>9.1f} "
                     f"{r['speedup']:>8.2f} {r['bytes_per_iter']:>12}")
    return "\n".join(lines)
