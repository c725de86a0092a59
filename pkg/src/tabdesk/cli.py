"""Command line: generate, train, predict, serve, bench.

Every command accepts ``--seed`` and ends by printing one JSON summary line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .model import ModelConfig
from .prior import GeneratorConfig, generate_dataset, write_dataset

log = logging.getLogger("tabdesk")


def _load_config(path) -> dict:
    """JSON file with optional "train", "model" and "generator" sections."""
    if path is None:
        return {}
    cfg = json.loads(Path(path).read_text())
    unknown = set(cfg) - {"train", "model", "generator"}
    if unknown:
        raise SystemExit(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _build(cls, overrides: dict | None, **extra):
    allowed = {f.name for f in fields(cls)}
    values = {k: v for k, v in (overrides or {}).items() if k in allowed}
    bad = set(overrides or {}) - allowed
    if bad:
        raise SystemExit(f"unknown {cls.__name__} keys: {sorted(bad)}")
    values.update({k: v for k, v in extra.items() if v is not None})
    return cls(**values)


def _summary(**kv):
    print(json.dumps(kv, sort_keys=True))


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    gen = _build(GeneratorConfig, cfg.get("generator"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = {"classification": 0, "regression": 0}
    for i in range(args.count):
        ds = generate_dataset(gen, args.seed * 1_000_003 + i, **({"task": args.task} if args.task else {}))
        write_dataset(out / f"ds_{i:05d}.tdsy", ds)
        tasks[ds.task] += 1
    _summary(command="generate", count=args.count, seed=args.seed, out=str(out), **tasks)
    return 0


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    cfg = _load_config(args.config)
    tcfg = _build(TrainConfig, cfg.get("train"), steps=args.steps, seed=args.seed)
    mcfg = _build(ModelConfig, cfg.get("model"))
    gen = _build(GeneratorConfig, cfg.get("generator"), max_features=max(tcfg.max_features, 2)) if cfg.get("generator") else None
    t0 = time.perf_counter()
    res = train(tcfg, mcfg, gen, out_dir=args.out, resume_from=args.resume)
    losses = [h.loss for h in res.history]
    _summary(command="train", steps=res.state.step, seed=tcfg.seed, seconds=round(time.perf_counter() - t0, 2),
             final_loss=float(np.mean(losses[-50:])) if losses else None, skipped=res.skipped,
             checkpoint=str(Path(args.out) / "checkpoint.tdck"))
    return 0


def _holder(path):
    from .service import ModelHolder

    return ModelHolder.from_checkpoint(path)


def cmd_predict(args) -> int:
    from .service import handle_predict

    body = json.loads(Path(args.request).read_text())
    if args.members is not None or args.chunk_size is not None or args.seed is not None:
        opts = dict(body.get("options") or {})
        if args.members is not None:
            opts["ensemble_size"] = args.members
        if args.chunk_size is not None:
            opts["chunk_size"] = args.chunk_size
        if args.seed is not None:
            opts["seed"] = args.seed
        body["options"] = opts
    status, doc = handle_predict(body, _holder(args.checkpoint))
    text = json.dumps(doc, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    _summary(command="predict", status=status, seed=args.seed, rows=len(doc.get("predictions", [])))
    return 0 if status == 200 else 1


def cmd_serve(args) -> int:
    from .service import TOKEN_ENV, make_server

    token = os.environ.get(TOKEN_ENV)
    if token is None and not args.no_auth:
        raise SystemExit(f"set {TOKEN_ENV} or pass --no-auth")
    holder = _holder(args.checkpoint)
    server = make_server(holder, args.host, args.port, token)
    _summary(command="serve", host=args.host, port=server.server_address[1], seed=args.seed,
             model_version=holder.snapshot.version)
    sys.stdout.flush()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_bench(args) -> int:
    from .bench import bench_run
    from .inference import PredictOptions

    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    params = _holder(args.checkpoint).snapshot.params if "model" in methods else None
    opts = PredictOptions(n_members=args.members or 8, chunk_size=args.chunk_size or 512, seed=args.seed or 0)
    res = bench_run(args.data, methods, params, seed=args.seed or 0, options=opts)
    report = res.report()
    if args.out:
        Path(args.out).write_text(report)
    else:
        sys.stdout.write(report)
    _summary(command="bench", datasets=len(res.datasets), seed=args.seed,
             average_rank=dict(zip(res.methods, map(float, res.average_rank))))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tabdesk", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic dataset archives")
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config")
    g.add_argument("--task", choices=["classification", "regression"])
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="pretrain a model on generated data")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--config")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("predict", cmd_predict, "answer a JSON predict request from a file"),
                              ("serve", cmd_serve, "serve the HTTP predict API"),
                              ("bench", cmd_bench, "rank methods over a directory of archives")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--seed", type=int)
        s.add_argument("--config")
        s.add_argument("--checkpoint")
        s.add_argument("--members", type=int)
        s.add_argument("--chunk-size", type=int)
        s.set_defaults(func=func)
        if name == "predict":
            s.add_argument("--request", required=True)
            s.add_argument("--out")
        elif name == "serve":
            s.add_argument("--port", type=int, default=8000)
            s.add_argument("--host", default="127.0.0.1")
            s.add_argument("--no-auth", action="store_true")
        else:
            s.add_argument("--data", required=True)
            s.add_argument("--methods", default="model,knn1,baseline")
            s.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
