"""``iformer`` command line.

Exit codes: 0 success, 1 failed verification, 2 usage/config/shape error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import __version__
from .attention import MhaParams, cpe, head_cosine_similarity, mha_forward
from .bench import REPORT_SCHEMA, bench_model, default_threads
from .config import PRESETS, ModelConfig, preset_config, stage_feature_shapes
from .errors import ConfigError, ShapeError, WeightIOError
from .fusion import count_macs, count_params, fuse_model
from .model import AttentionBlock, Model, build_model
from .model_io import (
    WeightStore,
    config_to_dict,
    load_config,
    load_image_ppm,
    load_weights,
    save_weights,
)
from .ops import softmax_lastdim
from .tensor import Tensor
from .verify import run_checks

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
FUSE_TOL = 1e-3


class UsageError(Exception):
    pass


def load_target(target: str) -> ModelConfig:
    """Preset name or path to a JSON config."""
    if target in PRESETS:
        return preset_config(target)
    if os.path.exists(target):
        return load_config(target)
    raise ConfigError(f"{target!r} is neither a preset ({', '.join(sorted(PRESETS))}) nor a config file")


def _probe(cfg: ModelConfig, seed: int) -> Tensor:
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(0, 1, (1, cfg.in_channels, cfg.resolution, cfg.resolution)))


def _load_model(cfg, weights, seed):
    if weights is None:
        return build_model(cfg, seed)
    return build_model(cfg, load_weights(weights))


# --- describe -------------------------------------------------------------

def _block_label(b) -> str:
    if b.kind == "conv-block":
        return f"conv-block k{b.kernel} r{b.ratio}"
    label = f"{b.kind} hd{b.head_dim} r{b.ratio}"
    if b.window_role:
        label += f" P{b.window}/{b.window_role}/cc{b.chunks}"
    return label


def describe(cfg: ModelConfig, model: Model) -> dict:
    shapes = stage_feature_shapes(cfg)
    stages = []
    for si, (st, (c, h, w)) in enumerate(zip(cfg.stages, shapes)):
        groups = []
        for b in st.blocks:
            label = _block_label(b)
            if groups and groups[-1]["block"] == label:
                groups[-1]["count"] += 1
            else:
                groups.append({"block": label, "count": 1})
        stages.append({"stage": si + 1, "channels": c, "output_size": [h, w], "blocks": groups})
    macs = count_macs(model)
    params = count_params(model)
    return {
        "name": cfg.name,
        "resolution": cfg.resolution,
        "params": params,
        "params_m": round(params / 1e6, 4),
        "macs": macs,
        "gmacs": round(macs / 1e9, 4),
        "stages": stages,
        "config": config_to_dict(cfg),
    }


def cmd_describe(args) -> int:
    cfg = load_target(args.target)
    if args.resolution:
        cfg = replace(cfg, resolution=args.resolution)
    info = describe(cfg, build_model(cfg, args.seed))
    if args.json:
        print(json.dumps(info, indent=2))
        return EXIT_OK
    print(f"{info['name']} @ {cfg.resolution}x{cfg.resolution}")
    print(f"{'stage':<6} {'C':>5} {'out':>9}  blocks")
    for st in info["stages"]:
        h, w = st["output_size"]
        blocks = ", ".join(f"{g['count']} x {g['block']}" for g in st["blocks"])
        print(f"{st['stage']:<6} {st['channels']:>5} {f'{h}x{w}':>9}  {blocks}")
    print(f"params: {info['params_m']:.2f}M ({info['params']})")
    print(f"GMACs:  {info['gmacs']:.3f} ({info['macs']})")
    return EXIT_OK


# --- verify ---------------------------------------------------------------

def cmd_verify(args) -> int:
    cfg = load_target(args.target)
    model = _load_model(cfg, args.weights, args.seed)
    results = run_checks(model, seed=args.seed, only=args.only, report=lambda r: print(r.line(), flush=True))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# --- bench ----------------------------------------------------------------

def cmd_bench(args) -> int:
    cfg = load_target(args.target)
    if args.resolution and args.resolution != cfg.resolution:
        try:
            stage_feature_shapes(cfg, args.resolution)
        except ConfigError as exc:
            raise ShapeError(f"resolution {args.resolution} incompatible with {cfg.name}: {exc}") from exc
    model = _load_model(cfg, args.weights, args.seed)
    report = bench_model(model, resolution=args.resolution, runs=args.runs, warmup=args.warmup,
                         threads=args.threads, seed=args.seed, scopes=tuple(args.scope))
    print(f"host: {report.host}")
    print(f"{report.preset} @ {report.resolution}, threads={report.threads}, runs={args.runs}")
    print(f"{'scope':<6} {'name':<52} {'median ms':>10} {'p95 ms':>9} {'GMACs':>8} {'layout':>7}")
    for e in report.entries:
        print(f"{e.scope:<6} {e.name:<52} {e.median_us / 1e3:>10.3f} {e.p95_us / 1e3:>9.3f} "
              f"{e.macs / 1e9:>8.4f} {e.layout_changes:>7}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2)
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_schema(args) -> int:
    print(json.dumps(REPORT_SCHEMA, indent=2))
    return EXIT_OK


# --- infer ----------------------------------------------------------------

def rank_scores(probs: np.ndarray, k: int):
    """Indices of the k largest entries, descending, ties to the lower index."""
    order = np.argsort(-probs, kind="stable")
    return order[:k]


def cmd_infer(args) -> int:
    cfg = load_target(args.target)
    model = build_model(cfg, load_weights(args.weights))
    x = load_image_ppm(args.image)
    probs = softmax_lastdim(model(x)).data[0].astype(np.float64)
    k = max(1, min(args.topk, probs.size))
    top = rank_scores(probs, k)
    if args.json:
        print(json.dumps({"indices": [int(i) for i in top], "scores": [float(probs[i]) for i in top]}))
        return EXIT_OK
    for rank, i in enumerate(top, 1):
        print(f"{rank:>4}  class {int(i):>4}  {probs[i]:.6f}")
    return EXIT_OK


# --- similarity -----------------------------------------------------------

def tie_heads(model: Model) -> Model:
    """Copy of ``model`` whose MHA q/k/v projections repeat the first head's weights."""
    tensors = dict(model.named_tensors())
    for layer in model.layers():
        if not (isinstance(layer, AttentionBlock) and layer.kind == "mha-block"):
            continue
        dh = layer.attn.head_dim
        for n in ("q", "k", "v"):
            prefix = f"{layer.name}.attn.{n}"
            for suffix in (".conv.weight", ".conv.bias", ".bn.gamma", ".bn.beta", ".bn.running_mean", ".bn.running_var"):
                name = prefix + suffix
                if name in tensors:
                    d = tensors[name].data
                    tensors[name] = Tensor(np.concatenate([d[:dh]] * (d.shape[0] // dh), axis=0))
    return build_model(model.config, tensors)


def layer_similarities(model: Model, x: Tensor) -> list:
    """(layer name, head cosine similarity) for every MHA layer, on its real input."""
    out = []
    h = x
    for layer in model.stem:
        h = layer(h)
    for st in model.stages:
        if st.downsample is not None:
            h = st.downsample(h)
        hw = h.shape[2:]
        for b in st.blocks:
            if isinstance(b, AttentionBlock) and isinstance(b.attn, MhaParams) and b.kind == "mha-block":
                inp = h if b.cpe is None else cpe(h, b.cpe)
                _, heads = mha_forward(inp, b.attn, return_heads=True)
                out.append((b.name, head_cosine_similarity(heads)))
            h = b(h, hw)
    return out


def cmd_similarity(args) -> int:
    cfg = load_target(args.target)
    if not any(b.kind == "mha-block" for st in cfg.stages for b in st.blocks):
        raise UsageError(f"{cfg.name} has no multi-head attention layers; use mha-baseline")
    model = _load_model(cfg, args.weights, args.seed)
    if args.tie_heads:
        model = tie_heads(model)
    x = load_image_ppm(args.image) if args.image else _probe(cfg, args.seed)
    rows = layer_similarities(model, x)
    if args.json:
        print(json.dumps([{"layer": n, "similarity": s} for n, s in rows], indent=2))
        return EXIT_OK
    for name, s in rows:
        print(f"{name:<28} {s:+.6f}")
    print(f"mean over {len(rows)} layers: {np.mean([s for _, s in rows]):+.6f}")
    return EXIT_OK


# --- fuse -----------------------------------------------------------------

def cmd_fuse(args) -> int:
    cfg = load_target(args.target)
    model = build_model(cfg, load_weights(args.weights_in))
    fused = fuse_model(model)
    x = _probe(cfg, args.seed)
    drift = float(np.max(np.abs(model(x).data.astype(np.float64) - fused(x).data)))
    save_weights(WeightStore.from_model(fused), args.weights_out)
    print(f"fused {len(model.batchnorms())} BN layers; max logit drift {drift:.3e} (limit {FUSE_TOL:g})")
    print(f"wrote {args.weights_out}")
    if drift > FUSE_TOL:
        print("drift exceeds the limit")
        return EXIT_VERIFY
    return EXIT_OK


# --- init -----------------------------------------------------------------

def cmd_init(args) -> int:
    cfg = load_target(args.target)
    model = build_model(cfg, args.seed)
    save_weights(WeightStore.from_model(model), args.out)
    print(f"wrote {len(model.named_tensors())} tensors ({count_params(model)} parameters) to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iformer", description="iFormer inference, verification and cost analysis")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help, aliases=()):
        sp = sub.add_parser(name, help=help, aliases=list(aliases))
        sp.set_defaults(fn=fn)
        return sp

    sp = add("describe", cmd_describe, "stage table, parameters and GMACs")
    sp.add_argument("target", help="preset name or config JSON path")
    sp.add_argument("--json", action="store_true")
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("verify", cmd_verify, "run the invariant suite")
    sp.add_argument("target")
    sp.add_argument("--weights")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--only", action="append", help="run only this check (repeatable)")

    sp = add("bench", cmd_bench, "batch-1 timing and layout-change counts")
    sp.add_argument("target")
    sp.add_argument("--weights")
    sp.add_argument("--resolution", type=int)
    sp.add_argument("--runs", type=int, default=10)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--threads", type=int, default=default_threads())
    sp.add_argument("--scope", action="append", choices=["op", "block", "stage", "model"])
    sp.add_argument("--out", help="write the JSON report here")
    sp.add_argument("--seed", type=int, default=0)

    add("schema", cmd_schema, "print the bench report JSON schema")

    sp = add("infer", cmd_infer, "classify a P6 PPM image")
    sp.add_argument("target")
    sp.add_argument("weights")
    sp.add_argument("image")
    sp.add_argument("--topk", type=int, default=5)
    sp.add_argument("--json", action="store_true")

    sp = add("similarity", cmd_similarity, "per-layer cosine similarity between attention heads", aliases=("analyze",))
    sp.add_argument("target", nargs="?", default="mha-baseline")
    sp.add_argument("--weights")
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--image")
    src.add_argument("--random-input", action="store_true", help="seeded Gaussian input (default)")
    sp.add_argument("--tie-heads", action="store_true", help="make every head compute the same function")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--json", action="store_true")

    sp = add("fuse", cmd_fuse, "fold BN into convolutions and write the fused weights")
    sp.add_argument("target")
    sp.add_argument("weights_in")
    sp.add_argument("weights_out")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("init", cmd_init, "write seeded random weights")
    sp.add_argument("target")
    sp.add_argument("out")
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "runs", None) is not None and args.runs < 5:
        parser.error("--runs must be at least 5")
    if getattr(args, "warmup", None) is not None and args.warmup < 3:
        parser.error("--warmup must be at least 3")
    if getattr(args, "threads", None) is not None and args.threads < 1:
        parser.error("--threads must be positive")
    if getattr(args, "scope", None) is None and args.command == "bench":
        args.scope = ["op", "block", "stage", "model"]
    try:
        return args.fn(args)
    except (WeightIOError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
