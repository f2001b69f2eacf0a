"""Batch-1 microbenchmarks with structural counters.

Wall-clock numbers are host-specific and informational only. The
layout-change counts are deterministic and are what the MHA/SHA comparison
rests on.
"""

from __future__ import annotations

import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .fusion import count_macs, layer_macs, stage_macs
from .model import AttentionBlock, Model, build_model
from .ops import conv2d
from .tensor import Tensor, count_layout_changes

__all__ = ["BenchEntry", "BenchReport", "REPORT_SCHEMA", "time_callable", "bench_model", "host_descriptor", "default_threads"]

MIN_WARMUP = 3
MIN_RUNS = 5

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "iformer bench report",
    "type": "object",
    "required": ["host", "preset", "resolution", "threads", "entries"],
    "additionalProperties": False,
    "properties": {
        "host": {"type": "string"},
        "preset": {"type": "string"},
        "resolution": {"type": "integer", "minimum": 32},
        "threads": {"type": "integer", "minimum": 1},
        "entries": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": [
                    "scope", "name", "warmup", "runs", "median_us", "mean_us", "p95_us",
                    "macs", "layout_changes", "samples_us",
                ],
                "properties": {
                    "scope": {"enum": ["op", "block", "stage", "model"]},
                    "name": {"type": "string"},
                    "warmup": {"type": "integer", "minimum": MIN_WARMUP},
                    "runs": {"type": "integer", "minimum": MIN_RUNS},
                    "median_us": {"type": "number", "exclusiveMinimum": 0},
                    "mean_us": {"type": "number", "exclusiveMinimum": 0},
                    "p95_us": {"type": "number", "exclusiveMinimum": 0},
                    "macs": {"type": "integer", "minimum": 0},
                    "layout_changes": {"type": "integer", "minimum": 0},
                    "samples_us": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                },
            },
        },
    },
}


@dataclass
class BenchEntry:
    scope: str
    name: str
    warmup: int
    runs: int
    median_us: float
    mean_us: float
    p95_us: float
    macs: int
    layout_changes: int
    samples_us: list = field(default_factory=list)


@dataclass
class BenchReport:
    host: str
    preset: str
    resolution: int
    threads: int
    entries: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def entry(self, scope: str, name: str) -> Optional[BenchEntry]:
        return next((e for e in self.entries if e.scope == scope and e.name == name), None)


def host_descriptor() -> str:
    return f"{platform.node() or 'host'} {platform.machine()} {platform.system()} {platform.release()}, " \
           f"python {platform.python_version()}, numpy {np.__version__}, {os.cpu_count()} cpus"


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("IFORMER_THREADS", "1")))
    except ValueError:
        return 1


def time_callable(fn: Callable[[], object], warmup: int = MIN_WARMUP, runs: int = MIN_RUNS):
    """(samples in microseconds, layout changes per call) for ``fn``."""
    if warmup < MIN_WARMUP or runs < MIN_RUNS:
        raise ValueError(f"need at least {MIN_WARMUP} warmups and {MIN_RUNS} measured runs")
    for _ in range(warmup):
        fn()
    with count_layout_changes() as lc:
        fn()
    samples = []
    for _ in range(runs):
        t0 = time.perf_counter_ns()
        fn()
        # clamp to 1 ns so a sample can never read as zero
        samples.append(max(time.perf_counter_ns() - t0, 1) / 1e3)
    return samples, lc.total


def _entry(scope, name, fn, macs, warmup, runs) -> BenchEntry:
    samples, changes = time_callable(fn, warmup, runs)
    return BenchEntry(
        scope=scope,
        name=name,
        warmup=warmup,
        runs=runs,
        median_us=float(statistics.median(samples)),
        mean_us=float(statistics.fmean(samples)),
        p95_us=float(np.percentile(samples, 95)),
        macs=int(macs),
        layout_changes=int(changes),
        samples_us=samples,
    )


def bench_model(model: Model, resolution: Optional[int] = None, runs: int = MIN_RUNS, warmup: int = MIN_WARMUP,
                threads: Optional[int] = None, seed: int = 0, scopes=("op", "block", "stage", "model")) -> BenchReport:
    """Time the whole model, each stage, one block of each kind and the stem convolution."""
    cfg = model.config
    if resolution is not None and resolution != cfg.resolution:
        cfg = replace(cfg, resolution=resolution)
        model = build_model(cfg, model.state_dict())
    threads = default_threads() if threads is None else threads
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(0, 1, (1, cfg.in_channels, cfg.resolution, cfg.resolution)))
    report = BenchReport(host_descriptor(), cfg.name, cfg.resolution, threads)

    with threadpool_limits(limits=threads):
        stage_inputs = []
        h = x
        for layer in model.stem:
            h = layer(h)
        # one block of each kind (window roles counted separately), fed its real activation
        seen = set()
        for st in model.stages:
            stage_inputs.append(h)
            if st.downsample is not None:
                h = st.downsample(h)
            hw = h.shape[2:]
            for b in st.blocks:
                role = getattr(b, "window_role", None)
                key = b.kind if isinstance(b, AttentionBlock) else "conv-block"
                if role:
                    key += f"/{role}"
                if "block" in scopes and key not in seen:
                    seen.add(key)
                    # a reverse-exit block attends over the restored full map
                    shape = (1, h.shape[1]) + tuple(hw) if role == "reverse-exit" else h.shape
                    macs, _ = layer_macs(b, shape)
                    report.entries.append(_entry("block", f"{b.name} ({key})",
                                                 lambda b=b, inp=h, hw=hw: b(inp, hw), macs, warmup, runs))
                h = b(h, hw)

        if "op" in scopes:
            first = model.stem[0]
            macs, _ = layer_macs(first, x.shape)
            report.entries.insert(0, _entry("op", f"{first.name}.conv2d", lambda: conv2d(x, first.conv), macs, warmup, runs))

        if "stage" in scopes:
            for si, st in enumerate(model.stages):
                inp = stage_inputs[si]

                def run_stage(st=st, inp=inp):
                    y = st.downsample(inp) if st.downsample is not None else inp
                    hw = y.shape[2:]
                    for b in st.blocks:
                        y = b(y, hw)
                    return y

                report.entries.append(_entry("stage", st.name, run_stage, stage_macs(st, inp.shape)[0], warmup, runs))

        if "model" in scopes:
            report.entries.append(_entry("model", cfg.name, lambda: model(x), count_macs(model), warmup, runs))
    return report

