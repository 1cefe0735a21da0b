"""Command-line entry point.

    carsr prepare-data --config run.yaml
    carsr train        --config run.yaml [--desk] [--resume]
    carsr eval         --config run.yaml [--ensemble]
    carsr ablate       --config run.yaml
    carsr preprocess   --config run.yaml [--downsample]

Every command reads the same structured config file; ``--set
section.key=value`` overrides individual entries. Exit codes: 0 success,
2 configuration error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .checkpoint import find_latest_checkpoint, load_checkpoint, restore_model
from .config import RunConfig, ablate_model_cfg, load_config
from .degradation import (
    CODEC_ID,
    DatasetManifest,
    bicubic_downscale,
    bicubic_upscale,
    build_manifest,
    degrade_testset,
    list_image_files,
    load_image_chw,
    save_png,
)
from .errors import ConfigError, InputError, NumericError
from .metrics import EvalResult, evaluate_dataset
from .model import count_params
from .serialization import atomic_write_text, canonical_dumps
from .training import LossReport, desk_preset, train_loop


def _require_set(value: str | None, name: str) -> Path:
    if not value:
        raise ConfigError(f"{name} must be set in the config for this command")
    return Path(value)


def _require_dir(value: str | None, name: str) -> Path:
    p = _require_set(value, name)
    if not p.is_dir():
        raise InputError(f"{name} does not exist or is not a directory: {p}")
    return p


def _require_file(p: Path, what: str) -> Path:
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _resolve_checkpoint(cfg: RunConfig) -> Path:
    if cfg.paths.checkpoint:
        return _require_file(Path(cfg.paths.checkpoint), "checkpoint")
    if cfg.paths.run_dir:
        latest = find_latest_checkpoint(Path(cfg.paths.run_dir))
        if latest is None:
            raise InputError(f"no checkpoint found in {cfg.paths.run_dir}")
        return latest
    raise ConfigError("set paths.checkpoint or paths.run_dir to locate a checkpoint")


def _manifest_path(cfg: RunConfig) -> Path:
    return _require_set(cfg.paths.data_dir, "paths.data_dir") / "manifest.ndjson"


def _qf_histogram(qfs: list[int]) -> dict[str, int]:
    hist: dict[str, int] = {}
    for q in qfs:
        lo = ((q - 1) // 10) * 10 + 1
        label = f"{lo}-{lo + 9}"
        hist[label] = hist.get(label, 0) + 1
    return hist


# ---------------------------------------------------------------------------
# commands


def cmd_prepare_data(cfg: RunConfig) -> int:
    source = _require_dir(cfg.paths.source_dir, "paths.source_dir")
    data_dir = _require_set(cfg.paths.data_dir, "paths.data_dir")
    manifest = build_manifest(
        source, cfg.degrade, cfg.train.seed, cfg.prepare.count, cfg.train.hr_patch
    )
    data_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = data_dir / "manifest.ndjson"
    manifest.save(manifest_path)
    summary = {
        "entries": len(manifest.entries),
        "sources": len({e.source for e in manifest.entries}),
        "patch": manifest.patch,
        "seed": manifest.seed,
        "qf_histogram": _qf_histogram([e.qf for e in manifest.entries]),
        "codec": CODEC_ID,
        "config_hash": cfg.config_hash,
    }
    atomic_write_text(data_dir / "prepare_summary.json", canonical_dumps(summary) + "\n")
    print(f"wrote {len(manifest.entries)} entries to {manifest_path}")
    return 0


def cmd_train(cfg: RunConfig, desk: bool, resume: bool) -> int:
    model_cfg, train_cfg = (
        desk_preset(cfg.model, cfg.train) if desk else (cfg.model, cfg.train)
    )
    source = _require_dir(cfg.paths.source_dir, "paths.source_dir")
    manifest = DatasetManifest.load(_require_file(_manifest_path(cfg), "manifest"))
    run_dir = _require_set(cfg.paths.run_dir, "paths.run_dir")
    result = train_loop(manifest, model_cfg, train_cfg, run_dir, source, resume=resume)
    print(f"final checkpoint: {result.final_checkpoint}")
    return 0


def _eval_csv_rows(method: str, qf: int, res: EvalResult) -> list:
    return [
        method,
        qf,
        res.model_params,
        f"{res.runtime_total_s:.4f}",
        f"{min(res.mean_psnr_y, res.psnr_cap):.4f}",
        f"{res.mean_ssim_y:.6f}",
    ]


def cmd_eval(cfg: RunConfig, ensemble_flag: bool) -> int:
    ensemble = cfg.eval.ensemble or ensemble_flag
    ckpt_path = _resolve_checkpoint(cfg)
    test_dir = _require_dir(cfg.paths.test_dir, "paths.test_dir")
    report_dir = _require_set(cfg.paths.report_dir, "paths.report_dir")
    ckpt = load_checkpoint(ckpt_path)
    model = restore_model(ckpt)
    model.eval()
    scale = model.cfg.scale

    def bicubic_baseline(t: torch.Tensor) -> torch.Tensor:
        return torch.from_numpy(bicubic_upscale(t.detach().cpu().numpy(), scale))

    kwargs = dict(
        shave=cfg.eval.shave,
        psnr_cap=cfg.eval.psnr_cap,
        exclude_inf=cfg.eval.exclude_inf,
    )
    report_dir.mkdir(parents=True, exist_ok=True)
    results: dict[str, dict] = {}
    csv_rows: list[list] = []
    for qf in cfg.eval.qfs:
        pairs, degrade_failures = degrade_testset(test_dir, qf, scale)
        base = evaluate_dataset(bicubic_baseline, pairs, **kwargs)
        direct = evaluate_dataset(model, pairs, **kwargs)
        entry = {
            "bicubic": base.to_dict(),
            "direct": direct.to_dict(),
            "degrade_failures": [{"name": n, "error": e} for n, e in degrade_failures],
        }
        csv_rows.append(_eval_csv_rows("bicubic", qf, base))
        csv_rows.append(_eval_csv_rows("model", qf, direct))
        line = (
            f"qf={qf}: bicubic {min(base.mean_psnr_y, base.psnr_cap):.2f} dB, "
            f"model {min(direct.mean_psnr_y, direct.psnr_cap):.2f} dB"
        )
        if ensemble:
            ens = evaluate_dataset(model, pairs, ensembled=True, **kwargs)
            entry["ensembled"] = ens.to_dict()
            csv_rows.append(_eval_csv_rows("model+ensemble", qf, ens))
            line += f", ensembled {min(ens.mean_psnr_y, ens.psnr_cap):.2f} dB"
        results[str(qf)] = entry
        print(line)
    meta = cfg.report_meta("eval", CODEC_ID)
    meta["checkpoint"] = str(ckpt_path)
    meta["iteration"] = ckpt.iteration
    meta["model_params"] = count_params(model)
    doc = {"meta": meta, "results": results}
    json_path = report_dir / "eval_report.json"
    atomic_write_text(json_path, canonical_dumps(doc) + "\n")
    csv_path = report_dir / "eval_report.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "qf", "params", "runtime_s", "psnr_y", "ssim_y"])
        writer.writerows(csv_rows)
    print(f"report: {json_path}")
    return 0


def _read_log_reports(log_path: Path) -> list[LossReport]:
    reports = []
    with open(log_path) as fh:
        for line in fh:
            if line.strip():
                reports.append(LossReport.from_json_line(line))
    return reports


def cmd_ablate(cfg: RunConfig) -> int:
    source = _require_dir(cfg.paths.source_dir, "paths.source_dir")
    test_dir = _require_dir(cfg.paths.test_dir, "paths.test_dir")
    report_dir = _require_set(cfg.paths.report_dir, "paths.report_dir")
    run_root = _require_set(cfg.paths.run_dir, "paths.run_dir") / "ablate"
    model_base, train_base = desk_preset(cfg.model, cfg.train)
    if cfg.ablate.iters is not None:
        train_base = replace(
            train_base,
            total_iters=cfg.ablate.iters,
            restart_period=min(train_base.restart_period, cfg.ablate.iters),
        )
    manifest = build_manifest(
        source, cfg.degrade, train_base.seed, cfg.prepare.count, train_base.hr_patch
    )
    pairs, _ = degrade_testset(test_dir, cfg.ablate.qf, model_base.scale)

    def run_row(row_name: str, kind: str, lam: float, model_cfg, train_cfg) -> dict:
        run_dir = run_root / row_name.replace("+", "_").replace("=", "_")
        result = train_loop(manifest, model_cfg, train_cfg, run_dir, source)
        model = result.model
        model.eval()
        res = evaluate_dataset(
            model, pairs, shave=cfg.eval.shave, psnr_cap=cfg.eval.psnr_cap
        )
        reports = _read_log_reports(result.log_path)
        final = reports[-1] if reports else None
        return {
            "row": row_name,
            "kind": kind,
            "lambda": lam,
            "params": count_params(model),
            "context_params": count_params(model.context),
            "upsampler_params": count_params(model.upsample),
            "final_l_hr": final.l_hr if final else None,
            "final_total": final.total if final else None,
            "mean_l_lr": (
                float(np.mean([r.l_lr for r in reports])) if reports else None
            ),
            "psnr_y": min(res.mean_psnr_y, res.psnr_cap),
            "ssim_y": res.mean_ssim_y,
        }

    rows = []
    for variant in cfg.ablate.variants:
        model_cfg = ablate_model_cfg(model_base, variant)
        train_cfg = replace(train_base, lambda_recon=0.0)
        rows.append(run_row(variant, "architecture", 0.0, model_cfg, train_cfg))
        print(f"variant {variant}: params={rows[-1]['params']} psnr_y={rows[-1]['psnr_y']:.2f}")
    for lam in cfg.ablate.lambdas:
        model_cfg = replace(model_base, with_car_head=lam > 0)
        train_cfg = replace(train_base, lambda_recon=lam)
        rows.append(run_row(f"lambda={lam:g}", "lambda", lam, model_cfg, train_cfg))
        print(f"lambda={lam:g}: mean_l_lr={rows[-1]['mean_l_lr']:.6f} psnr_y={rows[-1]['psnr_y']:.2f}")
    report_dir.mkdir(parents=True, exist_ok=True)
    meta = cfg.report_meta("ablate", CODEC_ID)
    meta["iters"] = train_base.total_iters
    meta["validation_qf"] = cfg.ablate.qf
    doc = {"meta": meta, "rows": rows}
    json_path = report_dir / "ablation_report.json"
    atomic_write_text(json_path, canonical_dumps(doc) + "\n")
    columns = [
        "row", "kind", "lambda", "params", "context_params", "upsampler_params",
        "final_l_hr", "mean_l_lr", "psnr_y", "ssim_y",
    ]
    with open(report_dir / "ablation_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row[c] for c in columns])
    print(f"report: {json_path}")
    return 0


def cmd_preprocess(cfg: RunConfig, downsample_flag: bool) -> int:
    downsample = cfg.preprocess.downsample or downsample_flag
    ckpt_path = _resolve_checkpoint(cfg)
    input_dir = _require_dir(cfg.paths.input_dir, "paths.input_dir")
    output_dir = _require_set(cfg.paths.output_dir, "paths.output_dir")
    files = list_image_files(input_dir)
    if not files:
        raise InputError(f"no images found in {input_dir}")
    model = restore_model(load_checkpoint(ckpt_path))
    model.eval()
    scale = model.cfg.scale
    output_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[str] = []
    skipped: list[dict] = []
    for path in files:
        try:
            img = load_image_chw(path)
            with torch.no_grad():
                out = model(torch.from_numpy(img))
            pred = np.clip(out.numpy(), 0.0, 1.0)
            if downsample:
                pred = bicubic_downscale(pred, scale)
            name = f"{path.stem}_enhanced.png"
            save_png(output_dir / name, pred)
            outputs.append(name)
        except Exception as exc:
            skipped.append({"name": path.name, "error": f"{type(exc).__name__}: {exc}"})
    meta = cfg.report_meta("preprocess", CODEC_ID)
    meta["checkpoint"] = str(ckpt_path)
    meta["downsample"] = downsample
    doc = {"meta": meta, "outputs": outputs, "skipped": skipped}
    atomic_write_text(output_dir / "preprocess_report.json", canonical_dumps(doc) + "\n")
    print(f"enhanced {len(outputs)} images, skipped {len(skipped)}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carsr",
        description="Joint compression-artifact reduction and super-resolution.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", required=True, help="YAML run config")
        sp.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="SECTION.KEY=VALUE",
            help="override a config entry (repeatable)",
        )

    sp = sub.add_parser("prepare-data", help="synthesize a training-set manifest")
    common(sp)
    sp = sub.add_parser("train", help="train a model from a manifest")
    common(sp)
    sp.add_argument("--desk", action="store_true", help="use the desk-scale preset")
    sp.add_argument(
        "--resume", action="store_true", help="continue from the latest checkpoint"
    )
    sp = sub.add_parser("eval", help="evaluate a checkpoint on a test directory")
    common(sp)
    sp.add_argument(
        "--ensemble", action="store_true", help="also report self-ensembled metrics"
    )
    sp = sub.add_parser("ablate", help="train and compare ablation variants")
    common(sp)
    sp = sub.add_parser("preprocess", help="enhance a corpus for downstream tools")
    common(sp)
    sp.add_argument(
        "--downsample",
        action="store_true",
        help="return outputs at the original size instead of 4x",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "prepare-data":
            return cmd_prepare_data(cfg)
        if args.command == "train":
            return cmd_train(cfg, desk=args.desk, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, ensemble_flag=args.ensemble)
        if args.command == "ablate":
            return cmd_ablate(cfg)
        if args.command == "preprocess":
            return cmd_preprocess(cfg, downsample_flag=args.downsample)
        raise ConfigError(f"unknown command {args.command!r}")
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:  # ConfigError, ShapeError, DomainError
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
