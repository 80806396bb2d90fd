"""Command-line entry point: train, eval, sample, impute, bench and zest."""

import argparse
import json
import logging
import traceback
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from ebflow.architectures import build_from_config
from ebflow.checkpoint import checkpoint_digest, load_checkpoint
from ebflow.config import ISConfig, LangevinConfig, TrainConfig, configure_logging
from ebflow.datasets import DataSource, build_oracle, parse_dataset, write_points_csv
from ebflow.errors import EBFlowError, ShapeError, TrainingDivergedError
from ebflow.evaluation import (
    bench_step_time,
    density_grid,
    evaluate,
    model_log_prob,
    write_density,
    write_report,
)
from ebflow.inference import estimate_log_partition_is, impute_langevin, sample_inverse, write_trajectory
from ebflow.trainer import train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 2


class RunManifest(BaseModel):
    """Everything needed to reproduce and audit one run"""

    config: Dict[str, Any] = Field(description="Validated config snapshot")
    seed: int = Field(description="Seed of the run")
    started_at: str = Field(description="UTC start timestamp")
    finished_at: Optional[str] = Field(default=None, description="UTC end timestamp")
    status: str = Field(default="running", description="running, success, diverged or failed")
    artifacts: List[str] = Field(default_factory=list, description="Files written by the run")
    checkpoint_sha256: Optional[str] = Field(default=None, description="Content hash of the final checkpoint")

    def write(self, path: Path) -> None:
        path.write_text(self.model_dump_json(indent=2))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _load_config(args: argparse.Namespace) -> TrainConfig:
    document: Dict[str, Any] = {}
    if args.config:
        document = json.loads(Path(args.config).read_text())
    for key in ("seed", "dataset", "iterations"):
        value = getattr(args, key, None)
        if value is not None:
            document[key] = value
    return TrainConfig.from_dict(document)


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest_file = out / "manifest.json"
    manifest = RunManifest(config=config.model_dump(mode="json"), seed=config.seed, started_at=_now())
    manifest.write(manifest_file)
    try:
        spec = parse_dataset(config.dataset)
        oracle = build_oracle(spec, config.M, config.sigma_hat, np.random.default_rng([config.seed, 2]))
        model = build_from_config(config, spec.dim, np.random.default_rng([config.seed, 3]))
        source = DataSource(spec, oracle, config.data_source, config.dequantize_scale)
        state = train(model, source, config, oracle=oracle, out_dir=out, progress=args.progress)
        final = out / "final_ema.ebf"
        if not final.exists():
            final = state.last_checkpoint
        manifest.checkpoint_sha256 = checkpoint_digest(final) if final else None
        manifest.status = "success"
        return EXIT_OK
    except TrainingDivergedError:
        manifest.status = "diverged"
        raise
    except Exception:
        manifest.status = "failed"
        raise
    finally:
        manifest.finished_at = _now()
        manifest.artifacts = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())
        manifest.write(manifest_file)


def cmd_eval(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    spec = parse_dataset(args.dataset)
    if spec.dim != model.dim:
        raise ShapeError("eval", [(model.dim,), (spec.dim,)], f"checkpoint dimension does not match {spec.name}")
    oracle = build_oracle(spec, args.M, args.sigma_hat, np.random.default_rng([args.seed, 2]))
    out = Path(args.out)
    method = args.method if spec.dim == 2 else "monte-carlo"
    report = evaluate(oracle, model, n=args.samples, rng=np.random.default_rng(args.seed), method=method)
    write_report(report, out / "report.csv")
    if spec.dim == 2:
        write_density(density_grid(lambda x: model_log_prob(model, x)), out / "model_density")
        write_density(density_grid(oracle.log_pdf), out / "oracle_density")
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    samples = sample_inverse(model, args.n, np.random.default_rng(args.seed))
    write_points_csv(samples, Path(args.out) / "samples.csv")
    return EXIT_OK


def cmd_impute(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    observed = np.array(_floats(args.observed))
    mask = np.isnan(observed)
    x = np.tile(np.where(mask, 0.0, observed), (args.chains, 1))
    config = LangevinConfig(step_size=args.step_size, iterations=args.iterations, thin=args.thin, seed=args.seed)
    result = impute_langevin(model, x, mask, config)
    write_trajectory(result, Path(args.out) / "trajectory.csv")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    dims = _ints(args.dims)
    frames = []
    for objective in args.objectives.split(","):
        fit = bench_step_time(
            objective.strip(), dims, n_linear=args.layers, reps=args.reps, warmup=args.warmup,
            batch_size=args.batch_size, seed=args.seed,
        )
        logger.info(f"{fit.objective}: log-log slope {fit.slope:.3f}")
        frames.append(fit.to_frame())
    path = Path(args.out) / "bench.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)
    logger.info(f"Wrote benchmark to {path}")
    return EXIT_OK


def cmd_zest(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    estimate = estimate_log_partition_is(model, ISConfig(samples=args.samples, seed=args.seed))
    row = {
        "estimate": estimate.estimate,
        "stderr": estimate.stderr,
        "M_is": estimate.samples,
        "D": estimate.dim,
        "log_z": estimate.log_z,
        "log_z_exact": model.log_partition(),
    }
    path = Path(args.out) / "zest.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame([row]).to_csv(path, index=False)
    logger.info(f"Z estimate {estimate.estimate:.6g} +/- {estimate.stderr:.2g} (exact log Z {row['log_z_exact']:.6f})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ebflow", description="Energy-based normalizing flows")
    parser.add_argument("--log-level", default=None, help="Overrides EBFLOW_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=True, seed_default=0):
        p.add_argument("--out", default="runs/latest", help="Output directory")
        p.add_argument("--seed", type=int, default=seed_default)
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="Checkpoint file")

    p = sub.add_parser("train", help="Train a flow from a JSON config")
    common(p, checkpoint=False, seed_default=None)
    p.add_argument("--config", help="JSON config document")
    p.add_argument("--dataset", help="sine, swirl, checkerboard or gauss-D")
    p.add_argument("--iterations", type=int)
    p.add_argument("--progress", action="store_true", help="Show a progress bar")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="KL, Fisher and NLL against the dataset oracle")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--method", choices=["monte-carlo", "quadrature"], default="monte-carlo")
    p.add_argument("--M", type=int, default=2000)
    p.add_argument("--sigma-hat", type=float, default=0.375)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="Draw samples through the inverse flow")
    common(p)
    p.add_argument("-n", type=int, default=1000)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("impute", help="Langevin imputation of masked coordinates")
    common(p)
    p.add_argument("--observed", required=True, help="Comma-separated values; nan marks a masked coordinate")
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--step-size", type=float, default=1e-2)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--thin", type=int, default=10)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("bench", help="Per-step runtime against dimension")
    common(p, checkpoint=False)
    p.add_argument("--objectives", default="ml,dsm,ssm")
    p.add_argument("--dims", default="64,128,256,512")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--reps", type=int, default=21)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("zest", help="Importance-sampling estimate of Z")
    common(p)
    p.add_argument("--samples", type=int, default=200)
    p.set_defaults(func=cmd_zest)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except TrainingDivergedError as e:
        logger.error(f"Training diverged at step {e.step}; last good checkpoint: {e.checkpoint or 'none'}")
        return EXIT_DIVERGED
    except (EBFlowError, OSError, ValueError) as e:
        error_details = {
            "exception_type": type(e).__name__,
            "exception_message": str(e),
            "traceback": traceback.format_exc(),
        }
        logger.error(f"ebflow {args.command} failed: {error_details}")
        return EXIT_ERROR
