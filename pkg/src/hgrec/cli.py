"""Command-line entry point: train, evaluate, bench, selftest.

Configuration comes from a flat key=value file plus flags; flags win.
`HGF_THREADS` sets the default worker count; `--workers 1` guarantees
bitwise-deterministic runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import pathlib
import sys
import time

import numpy as np
import torch

from . import attention, evaluation, geometry, selftest as selftest_mod
from .attention import AttentionConfig, RandomFeatureMap
from .geometry import CurvatureSpace
from .graph import load_interactions, split_train_test
from .model import LossConfig, ModelState, load_checkpoint, save_checkpoint
from .training import GradientError, TrainConfig, Trainer

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIM_MISMATCH = 2
EXIT_NAN_ABORT = 3


@dataclasses.dataclass
class RunConfig:
    data: str = ""
    out: str = "."
    seed: int = 0
    mode: str = "exact"
    k10: bool = False
    k20: bool = False
    workers: int = 0  # 0: resolve from HGF_THREADS, else 1
    epochs: int = 30
    lr: float = 1e-2
    alpha: float = 0.25
    margin: float = 0.5
    curvature: float = 1.0
    layers: int = 4
    heads: int = 1
    rf_dim: int = 256
    temp: float = 1.0
    dim: int = 64
    batch_size: int = 4096
    test_fraction: float = 0.2
    negatives: int = 1
    run_id: str = "run"
    # bench-only knobs
    sizes: str = "2048,4096,8192"
    rf_dims: str = "64,256,1024"
    exact_cap: int = 4096 * 4096

    def resolve_workers(self) -> int:
        if self.workers > 0:
            return self.workers
        env = os.environ.get("HGF_THREADS", "")
        return int(env) if env.strip() else 1

    def ks(self) -> tuple[int, ...]:
        ks = []
        if self.k10:
            ks.append(10)
        if self.k20:
            ks.append(20)
        return tuple(ks) if ks else (10, 20)


_BOOL_KEYS = {"k10", "k20"}
_INT_KEYS = {"seed", "workers", "epochs", "layers", "heads", "rf_dim", "dim",
             "batch_size", "negatives", "exact_cap"}
_FLOAT_KEYS = {"lr", "alpha", "margin", "curvature", "temp", "test_fraction"}
_STR_KEYS = {"data", "out", "mode", "run_id", "sizes", "rf_dims"}
_ALL_KEYS = _BOOL_KEYS | _INT_KEYS | _FLOAT_KEYS | _STR_KEYS


def _parse_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(open(path, encoding="utf-8"), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, _, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        raw = raw.strip()
        if key not in _ALL_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in _BOOL_KEYS:
            values[key] = raw.lower() in ("1", "true", "yes")
        elif key in _INT_KEYS:
            values[key] = int(raw)
        elif key in _FLOAT_KEYS:
            values[key] = float(raw)
        else:
            values[key] = raw
    return values


def _add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", choices=("exact", "linear"), default=None)
    p.add_argument("--k10", action="store_true", default=None)
    p.add_argument("--k20", action="store_true", default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--margin", type=float, default=None)
    p.add_argument("--curvature", type=float, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--rf-dim", dest="rf_dim", type=int, default=None)
    p.add_argument("--temp", type=float, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--test-fraction", dest="test_fraction", type=float,
                   default=None)
    p.add_argument("--negatives", type=int, default=None)
    p.add_argument("--run-id", dest="run_id", type=str, default=None)


def _build_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for key, value in _parse_config_file(args.config).items():
            setattr(cfg, key, value)
    for field in dataclasses.fields(RunConfig):
        value = getattr(args, field.name, None)
        if value is not None:
            setattr(cfg, field.name, value)
    if cfg.mode not in ("exact", "linear"):
        raise ValueError(f"unknown mode {cfg.mode!r}")
    if not 0.0 <= cfg.alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    return cfg


def _attention_config(cfg: RunConfig) -> AttentionConfig:
    return AttentionConfig(
        heads=cfg.heads,
        temperature=cfg.temp,
        mode=cfg.mode,
        feature_dim=cfg.rf_dim,
    )


def _setup(cfg: RunConfig) -> None:
    torch.set_num_threads(cfg.resolve_workers())
    torch.manual_seed(cfg.seed)


def cmd_train(cfg: RunConfig) -> int:
    if not cfg.data:
        print("train: --data is required", file=sys.stderr)
        return EXIT_ERROR
    _setup(cfg)
    out = pathlib.Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    graph = load_interactions(cfg.data)
    split = split_train_test(graph, cfg.test_fraction, cfg.seed)
    state = ModelState(
        num_users=graph.num_users,
        num_items=graph.num_items,
        space=CurvatureSpace(cfg.curvature, cfg.dim),
        num_layers=cfg.layers,
        attn=_attention_config(cfg),
        alpha=cfg.alpha,
        margin=cfg.margin,
        seed=cfg.seed,
    )
    trainer = Trainer(
        state,
        split,
        LossConfig(margin=cfg.margin, negatives_per_positive=cfg.negatives),
        TrainConfig(
            learning_rate=cfg.lr,
            batch_size=cfg.batch_size,
            epochs=cfg.epochs,
            seed=cfg.seed,
        ),
    )
    log_path = out / "loss_log.txt"
    with open(log_path, "w", encoding="utf-8") as log:
        try:
            for epoch in range(cfg.epochs):
                loss = trainer.train_epoch()
                line = f"epoch={epoch} loss={loss:.10g}"
                print(line)
                log.write(line + "\n")
        except GradientError as exc:
            print(f"train aborted: {exc}", file=sys.stderr)
            return EXIT_NAN_ABORT
    save_checkpoint(state, out / "checkpoint.bin")
    print(f"checkpoint written to {out / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, checkpoint: str) -> int:
    if not cfg.data:
        print("evaluate: --data is required", file=sys.stderr)
        return EXIT_ERROR
    _setup(cfg)
    out = pathlib.Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    graph = load_interactions(cfg.data)
    state = load_checkpoint(checkpoint)
    if state.num_users != graph.num_users or state.num_items != graph.num_items:
        print(
            f"evaluate: checkpoint is for ({state.num_users}, "
            f"{state.num_items}) but data has ({graph.num_users}, "
            f"{graph.num_items})",
            file=sys.stderr,
        )
        return EXIT_DIM_MISMATCH
    state.attn.mode = cfg.mode
    state.attn.temperature = cfg.temp
    state.attn.feature_dim = cfg.rf_dim
    split = split_train_test(graph, cfg.test_fraction, cfg.seed)
    rf = None
    if cfg.mode == "linear":
        rf = RandomFeatureMap.draw(state.space.dim, cfg.rf_dim, cfg.seed)
    from .model import forward

    with torch.no_grad():
        u_final, i_final = forward(state, split.train, rf)
    report = evaluation.evaluate_ranking(
        state.space, u_final, i_final, split, ks=cfg.ks(), run_id=cfg.run_id
    )
    print(report.to_json())
    report.append_csv(out / "results.csv")
    return EXIT_OK


def _bench_instance(space, n, m_features, cfg, gen):
    """Time exact and linear attention on one random instance; report the
    linear path's weight error against the factorized-kernel softmax."""
    emb_u = 0.4 * torch.randn(n, space.dim, generator=gen, dtype=torch.float64)
    emb_i = 0.4 * torch.randn(n, space.dim, generator=gen, dtype=torch.float64)
    users = geometry.lift(space, emb_u)
    items = geometry.lift(space, emb_i)
    d = space.dim
    eye = torch.eye(d, dtype=torch.float64).unsqueeze(0)
    heads = attention.HeadParams(*(eye.clone() for _ in range(6)))
    acfg = AttentionConfig(heads=1, temperature=cfg.temp)
    exact_ms = float("nan")
    if n * n <= cfg.exact_cap:
        t0 = time.perf_counter()
        attention.exact_cross_attention(space, acfg, heads, users, items)
        exact_ms = (time.perf_counter() - t0) * 1e3
    rf = RandomFeatureMap.draw(d, m_features, cfg.seed)
    lcfg = AttentionConfig(heads=1, temperature=cfg.temp, mode="linear",
                           feature_dim=m_features)
    t0 = time.perf_counter()
    attention.linear_cross_attention(space, lcfg, heads, rf, users, items)
    linear_ms = (time.perf_counter() - t0) * 1e3
    # Weight error on a query subsample (the full matrix is quadratic).
    probe = min(n, 64)
    q = attention.project_heads(space, heads.w_query, users[:probe])[0]
    k = attention.project_heads(space, heads.w_key, items)[0]
    f = attention.factorized_kernel(
        q.unsqueeze(1), k.unsqueeze(0), cfg.temp
    )
    w_oracle = f / f.sum(1, keepdim=True)
    phi_q = attention.phi(space, q, rf, cfg.temp)
    phi_k = attention.phi(space, k, rf, cfg.temp)
    approx = phi_q @ phi_k.T
    w_lin = approx / approx.sum(1, keepdim=True)
    err = (w_lin - w_oracle).abs().mean().item()
    return exact_ms, linear_ms, err


def cmd_bench(cfg: RunConfig) -> int:
    _setup(cfg)
    space = CurvatureSpace(cfg.curvature, cfg.dim)
    gen = torch.Generator().manual_seed(cfg.seed)
    sizes = [int(s) for s in cfg.sizes.split(",") if s.strip()]
    rf_dims = [int(s) for s in cfg.rf_dims.split(",") if s.strip()]
    lines = ["N,M,d,m,exact_ms,linear_ms,mean_weight_abs_err"]
    print(lines[0])
    for n in sizes:
        for m_features in rf_dims:
            exact_ms, linear_ms, err = _bench_instance(
                space, n, m_features, cfg, gen
            )
            exact_repr = f"{exact_ms:.3f}" if exact_ms == exact_ms else "skipped"
            row = (f"{n},{n},{cfg.dim},{m_features},{exact_repr},"
                   f"{linear_ms:.3f},{err:.6f}")
            lines.append(row)
            print(row)
    if cfg.out and cfg.out != ".":
        out = pathlib.Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_selftest(cfg: RunConfig, inject_fault: bool) -> int:
    _setup(cfg)
    if inject_fault:
        geometry.set_fault_injection(1e-3)
    try:
        results = selftest_mod.run_all(seed=cfg.seed)
    except Exception as exc:  # a broken kernel may raise instead of failing
        print(f"selftest error: {exc}")
        return EXIT_ERROR
    finally:
        geometry.set_fault_injection(0.0)
    failures = [r for r in results if not r[1]]
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    if failures:
        print(f"selftest failed: {failures[0][0]}")
        return EXIT_ERROR
    print(f"selftest passed ({len(results)} checks)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hgrec",
        description="Hyperbolic graph-transformer collaborative filtering",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p_train = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common_flags(p_train)
    p_eval = sub.add_parser("evaluate", help="rank and score a checkpoint")
    _add_common_flags(p_eval)
    p_eval.add_argument("--checkpoint", type=str, required=True)
    p_bench = sub.add_parser(
        "bench", help="time exact vs linear attention across sizes"
    )
    _add_common_flags(p_bench)
    p_bench.add_argument("--sizes", type=str, default=None)
    p_bench.add_argument("--rf-dims", dest="rf_dims", type=str, default=None)
    p_bench.add_argument("--exact-cap", dest="exact_cap", type=int, default=None)
    p_self = sub.add_parser("selftest", help="run built-in property checks")
    _add_common_flags(p_self)
    p_self.add_argument("--inject-fault", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _build_config(args)
    except (ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    try:
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.checkpoint)
        if args.command == "bench":
            return cmd_bench(cfg)
        if args.command == "selftest":
            return cmd_selftest(cfg, args.inject_fault)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    parser.error(f"unknown command {args.command!r}")
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
