"""Command-line entry point.

Subcommands: ``check`` (invariant suites), ``train`` (toy training),
``eval`` (metrics report), ``visualize`` (hierarchical attention masks),
``flops`` (closed-form compute report), ``gen-data`` (synthetic corpus).

Every run command writes exactly one ``manifest.json`` into its output
directory recording the command, config hash, seed, timestamps, metric
outputs and checkpoint paths. Output directories are append-only:
re-running into an existing directory fails unless ``--force`` is given.
All commands are deterministic under a fixed ``--seed``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import checks as ck
from . import data as hdata
from . import hierarchy as hy
from . import metrics as mt
from . import training as tr
from .encoder import ModelConfig, build_model, tiny_config, wrapped_blocks
from .errors import HilaError, TrainingDiverged
from .threads import single_thread_blas


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _args_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "fn"}


def _load_config(path: str | None) -> tuple[ModelConfig, str, bytes]:
    if path is None:
        cfg = tiny_config()
        raw = cfg.to_json().encode()
        return cfg, "<builtin tiny>", raw
    raw = Path(path).read_bytes()
    return ModelConfig.from_json(raw.decode()), path, raw


def _prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise HilaError(
            f"output directory {out} already exists; pass --force to reuse it"
        )
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, args: dict, config_path: str,
                    config_bytes: bytes, seed: int, started: str,
                    metrics_out: dict | None = None,
                    checkpoints: list[str] | None = None) -> None:
    manifest = {
        "command": command,
        "args": args,
        "config_path": config_path,
        "config_sha256": hashlib.sha256(config_bytes).hexdigest(),
        "seed": seed,
        "started": started,
        "finished": _now(),
        "metrics": metrics_out or {},
        "checkpoints": checkpoints or [],
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def _load_model(checkpoint: str):
    tensors, manifest = ag.load_checkpoint(checkpoint)
    if "config" not in manifest:
        raise HilaError(f"checkpoint {checkpoint} carries no model config")
    cfg = ModelConfig.from_json(json.dumps(manifest["config"]))
    model = build_model(cfg, seed=0)
    model.load_state(tensors)
    return model, cfg


def cmd_check(args) -> int:
    cfg, _, _ = _load_config(args.config)
    with single_thread_blas():
        results = ck.run_all(cfg, seed=args.seed, float64=args.float64)
    width = max(len(r.name) for r in results)
    failed = []
    for r in results:
        mark = "PASS" if r.ok else "FAIL"
        print(f"{mark}  {r.name:{width}s}  {r.seconds:6.2f}s  {r.detail}")
        if not r.ok:
            failed.append(r.name)
    if failed:
        print(f"FAILED suites: {', '.join(failed)}")
        return 1
    print("all suites passed")
    return 0


def cmd_gen_data(args) -> int:
    spec = hdata.ShapesSpec(
        image_size=args.size,
        num_classes=args.classes,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    out = _prepare_out(args.out, args.force)
    started = _now()
    hdata.write_dataset(out, spec, args.n)
    # One manifest per run directory: extend the dataset manifest with the
    # run fields rather than writing a second file.
    manifest_path = out / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest.update({
        "command": "gen-data",
        "args": _args_dict(args),
        "config_sha256": hashlib.sha256(
            json.dumps(manifest["spec"], sort_keys=True).encode()
        ).hexdigest(),
        "seed": args.seed,
        "started": started,
        "finished": _now(),
    })
    manifest_path.write_text(json.dumps(manifest, indent=1))
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg, cfg_path, cfg_bytes = _load_config(args.config)
    _, samples = hdata.read_dataset(args.data)
    out = _prepare_out(args.out, args.force)
    started = _now()
    model = build_model(cfg, seed=args.seed)
    tcfg = tr.TrainConfig(
        steps=args.steps,
        lr=args.lr,
        batch_size=args.batch,
        crop=args.crop,
        seed=args.seed,
    )
    ckpt_base = out / "checkpoint"
    try:
        result = tr.train(model, samples, tcfg, log=print)
    except TrainingDiverged as exc:
        dump = out / "divergence.json"
        with open(dump, "w") as fh:
            json.dump(exc.diagnostics, fh, indent=1)
        print(f"training aborted: {exc}; diagnostics in {dump}", file=sys.stderr)
        _write_manifest(out, "train", _args_dict(args), cfg_path, cfg_bytes,
                        args.seed, started, metrics_out={"diverged": True})
        return 1
    ag.save_checkpoint(
        model.state(), ckpt_base, extra={"config": json.loads(cfg.to_json())}
    )
    metrics_out = {
        "final_loss": result.final_loss,
        "history": result.history[-5:],
    }
    if args.steps > 0:
        acc = tr.pixel_accuracy(model, samples, cfg.num_classes)
        metrics_out["train_pixel_accuracy"] = acc
        print(f"train pixel accuracy: {acc:.4f}")
    _write_manifest(out, "train", _args_dict(args), cfg_path, cfg_bytes, args.seed,
                    started, metrics_out=metrics_out,
                    checkpoints=[str(ckpt_base.with_suffix(".bin")),
                                 str(ckpt_base.with_suffix(".json"))])
    print(f"checkpoint written to {ckpt_base}.bin/.json")
    return 0


def cmd_eval(args) -> int:
    model, cfg = _load_model(args.checkpoint)
    _, samples = hdata.read_dataset(args.data)
    crop_sizes = [int(c) for c in args.crop_sizes.split(",")] if args.crop_sizes else None
    report = tr.evaluate(
        model, samples, cfg.num_classes,
        threshold_px=args.threshold_px, crop_sizes=crop_sizes,
    )
    size = samples[0].image.shape[0]
    fc, dot = ck.interlevel_flops_for_config(cfg, size, size)
    report["params"] = model.param_count()
    report["flops"] = {"interlevel_fc": fc, "interlevel_dot": dot}
    text = json.dumps(report, indent=1)
    print(text)
    if args.out:
        out = _prepare_out(args.out, args.force)
        started = _now()
        (out / "metrics.json").write_text(text)
        _write_manifest(out, "eval", _args_dict(args), args.checkpoint, b"", args.seed,
                        started, metrics_out=report)
    return 0


def cmd_visualize(args) -> int:
    model, cfg = _load_model(args.checkpoint)
    image = hdata.read_ppm(args.image)
    arr = image.array[None]
    collect: dict = {}
    with single_thread_blas():
        model.forward_encoder(arr, collect=collect)
    weights = {
        idx: stage.get("top_down")
        for idx, stage in collect.items()
        if isinstance(stage, dict)
    }
    queries = []
    for part in args.queries.split(";"):
        h, w = part.split(",")
        queries.append((int(h), int(w)))
    out = _prepare_out(args.out, args.force)
    started = _now()
    source = 4
    written = []
    for levels in range(1, args.levels + 1):
        needed = source - levels + 1
        if weights.get(needed) is None:
            raise HilaError(
                f"stage {needed} has no top-down weights; the {levels}-level "
                f"composition is undefined for this config"
            )
        mask = hy.compose_chain(weights, source, levels)
        if args.save_raw:
            hy.save_mask(mask, out / f"mask_L{levels}.hilt")
        for qh, qw in queries:
            rendered = hy.render_mask(mask, (qh, qw), image)
            name = f"mask_q{qh}_{qw}_L{levels}.ppm"
            hdata.write_ppm(out / name, rendered)
            written.append(name)
    _write_manifest(out, "visualize", _args_dict(args), args.checkpoint, b"",
                    args.seed, started, metrics_out={"files": written})
    print(f"wrote {len(written)} masks to {out}")
    return 0


def cmd_flops(args) -> int:
    cfg, _, _ = _load_config(args.config)
    h, w = args.height, args.width
    if h % 32 or w % 32:
        raise HilaError(f"dims must be divisible by 32, got {h}x{w}")
    grids = ck.stage_grids(cfg, h, w)
    per_stage = []
    for idx, sc in enumerate(cfg.stages, start=1):
        gh, gw = grids[idx - 1]
        entry = {
            "stage": idx,
            "grid": [gh, gw],
            "selfattn_closed_form": mt.flops_selfattention(gh, gw, sc.d) * sc.N,
            "interlevel_fc": 0,
            "interlevel_dot": 0,
        }
        if sc.hila_enabled:
            prev = cfg.stages[idx - 2]
            hl, wl = grids[idx - 2]
            rep = mt.flops_interlevel(sc.d, prev.d, gh, gw, hl, wl,
                                      slots=sc.p_patch**2)
            n_bu = len(wrapped_blocks(sc.N, sc.s_stride))
            n_td = max(0, n_bu - 1)
            bu_fc = sum(v for k, v in rep.components.items()
                        if k.startswith("bottom_up/") and not k.endswith("dot"))
            td_fc = sum(v for k, v in rep.components.items()
                        if k.startswith("top_down/") and not k.endswith("dot"))
            entry["interlevel_fc"] = n_bu * bu_fc + n_td * td_fc
            entry["interlevel_dot"] = (
                n_bu * rep.components["bottom_up/dot"]
                + n_td * rep.components["top_down/dot"]
            )
        per_stage.append(entry)
    fc_total, dot_total = ck.interlevel_flops_for_config(cfg, h, w)
    model = build_model(cfg, seed=0)
    base_cfg = ModelConfig.from_json(cfg.to_json())
    for sc in base_cfg.stages:
        sc.hila_enabled = False
    baseline = build_model(base_cfg, seed=0)
    report = {
        "input": [h, w],
        "params": model.param_count(),
        "baseline_params": baseline.param_count(),
        "interlevel_fc_total": fc_total,
        "interlevel_dot_total": dot_total,
        "stages": per_stage,
    }
    print(json.dumps(report, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hila", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="run all invariant suites")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--float64", action="store_true",
                   help="tighten the composed gradient tolerance to 1e-5")
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--noise-std", type=float, default=0.04)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--crop", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--threshold-px", type=float, default=3.0)
    p.add_argument("--crop-sizes", default=None,
                   help="comma-separated center-crop sides for the crop series")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("visualize", help="render hierarchical attention masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--queries", required=True,
                   help="semicolon-separated h,w locations on the stage-4 grid")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--save-raw", action="store_true",
                   help="also export each level's dense mask as a .hilt tensor")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_visualize)

    p = sub.add_parser("flops", help="closed-form compute and parameter report")
    p.add_argument("--config", default=None)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.set_defaults(fn=cmd_flops)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except HilaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
