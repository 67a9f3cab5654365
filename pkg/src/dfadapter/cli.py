"""Command-line entry point: ``dfadapter <subcommand> ...``.

Every subcommand reads a strict JSON run config (``--config``), either a
path or the name of a bundled config (``tiny``, ``vit-base``).
Failures exit nonzero with a one-line JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import GraphError, ShapeError
from .vit import ConfigError, FreezePolicy, ModelConfig

SCHEMA_VERSION = 1
SEED_ENV = "DFA_SEED"
logger = logging.getLogger("dfadapter")


@dataclass
class RunConfig:
    model: ModelConfig
    train: "TrainConfig"
    data: "SyntheticSpec"
    output_dir: str = "runs/default"
    source: Optional[str] = field(default=None, compare=False)

    @classmethod
    def from_dict(cls, d: dict, source: Optional[str] = None) -> "RunConfig":
        from .training import SyntheticSpec, TrainConfig

        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
        unknown = set(d) - {"schema_version", "model", "train", "data", "output_dir"}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        try:
            return cls(
                model=ModelConfig.from_dict(d.get("model", {})),
                train=TrainConfig.from_dict(d.get("train", {})),
                data=SyntheticSpec.from_dict(d.get("data", {})),
                output_dir=str(d.get("output_dir", "runs/default")),
                source=source,
            )
        except TypeError as e:  # wrong value types surface as constructor errors
            raise ConfigError(str(e)) from None

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return {"schema_version": SCHEMA_VERSION, "model": self.model.to_dict(),
                "train": asdict(self.train), "data": asdict(self.data), "output_dir": self.output_dir}


def bundled_configs() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("dfadapter.configs").iterdir()
                  if p.name.endswith(".json"))


def load_run_config(ref: str) -> RunConfig:
    """Parse a run config from a file path or a bundled config name; apply the seed override."""
    path = Path(ref)
    if path.is_file():
        text = path.read_text()
    elif ref in bundled_configs():
        text = resources.files("dfadapter.configs").joinpath(f"{ref}.json").read_text()
    else:
        raise FileNotFoundError(f"config {ref!r} is neither a file nor one of {bundled_configs()}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{ref}: invalid JSON: {e}") from None
    rc = RunConfig.from_dict(raw, source=ref)
    seed = os.environ.get(SEED_ENV)
    if seed is not None and seed != "":
        try:
            s = int(seed)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from None
        rc.train = replace(rc.train, seed=s)
        rc.data = replace(rc.data, seed=s)
    return rc


def _out_dir(args, rc: RunConfig) -> Path:
    out = Path(args.out if getattr(args, "out", None) else rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _eval_split(rc: RunConfig):
    from .training import synth_splits

    train, val = synth_splits(rc.data)
    return val if val is not None else train


# ---------------------------------------------------------------- subcommands


def cmd_params(args) -> int:
    from .model import count_config_params

    rc = load_run_config(args.config)
    cfg = rc.model
    if args.policy:
        cfg = replace(cfg, freeze_policy=FreezePolicy(args.policy))
    counts = count_config_params(cfg)
    counts["policy"] = cfg.freeze_policy.value
    print(json.dumps(counts, sort_keys=True))
    return 0


def cmd_synth_data(args) -> int:
    from .training import synth_splits

    rc = load_run_config(args.config)
    out = _out_dir(args, rc)
    train, val = synth_splits(rc.data)
    train.save(out / "train.npz")
    written = ["train.npz"]
    if val is not None:
        val.save(out / "val.npz")
        written.append("val.npz")
    print(json.dumps({"out": str(out), "files": written, "train": len(train),
                      "val": 0 if val is None else len(val)}))
    return 0


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .model import build_model
    from .plots import plot_training_curves
    from .training import synth_splits, train_loop

    rc = load_run_config(args.config)
    out = _out_dir(args, rc)
    train, val = synth_splits(rc.data)
    model = build_model(rc.model, seed=rc.train.seed)
    model, log = train_loop(model, train, rc.train, val, log_path=out / "train_log.jsonl")
    save_checkpoint(model, out / "model.dfad", extra={"run": rc.to_dict()})
    _write_json(out / "run_config.json", rc.to_dict())
    plot_training_curves(log, out / "training_curves.png")
    print(json.dumps({"out": str(out), "final": log[-1]}))
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import compute_metrics, corrupt
    from .plots import plot_roc
    from .training import predict_scores

    rc = load_run_config(args.config)
    out = _out_dir(args, rc)
    model = load_checkpoint(args.ckpt)
    ds = _eval_split(rc)
    images = ds.images
    tag = "clean"
    if args.corrupt:
        images = corrupt(images, args.corrupt, args.severity, seed=rc.data.seed)
        tag = f"{args.corrupt}-{args.severity}"
    scores = predict_scores(model, images, rc.train.batch_size)
    m = compute_metrics(scores, ds.labels, args.threshold)
    report = {"condition": tag, "n": int(len(ds)), **m.to_dict()}
    _write_json(out / f"metrics-{tag}.json", report)
    np.savetxt(out / f"roc-{tag}.csv", np.asarray(m.roc), delimiter=",", header="fpr,tpr", comments="")
    plot_roc(m.roc, m.auc, m.eer, out / f"roc-{tag}.png")
    print(json.dumps({k: report[k] for k in ("condition", "n", "acc", "auc", "eer")}))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    rc = load_run_config(args.config)
    report = run_gradcheck(rc.model, seed=rc.train.seed)
    ok = report.passed(args.tol)
    print(json.dumps({"max_rel_error": report.max_rel_error, "checked": report.checked,
                      "skipped_kinks": report.skipped_kinks, "tol": args.tol, "passed": ok}))
    return 0 if ok else 1


def _read_image(ref: str, index: int) -> np.ndarray:
    path = Path(ref)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return np.asarray(z["images"][index])
    img = np.load(path)
    return img[index] if img.ndim == 4 else img


def cmd_saliency(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import saliency_map, write_pgm
    from .plots import plot_saliency

    model = load_checkpoint(args.ckpt)
    image = _read_image(args.image, args.index)
    heat = saliency_map(model, image)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pgm(out, heat)
    plot_saliency(image, heat, out.with_suffix(".png"))
    print(json.dumps({"out": str(out), "overlay": str(out.with_suffix(".png")), "shape": list(heat.shape)}))
    return 0


def cmd_export_emb(args) -> int:
    from .checkpoint import load_checkpoint
    from .evaluation import export_embeddings

    rc = load_run_config(args.config)
    model = load_checkpoint(args.ckpt)
    ds = _eval_split(rc)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    emb = export_embeddings(model, ds.images, ds.labels, out)
    print(json.dumps({"out": str(out), "count": int(emb.shape[0]), "dim": int(emb.shape[1])}))
    return 0


# ---------------------------------------------------------------- wiring


def build_parser() -> argparse.ArgumentParser:
    from .evaluation import CORRUPTIONS, MAX_SEVERITY

    p = argparse.ArgumentParser(prog="dfadapter", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("params", help="print per-group and trainable parameter counts")
    s.add_argument("--config", required=True)
    s.add_argument("--policy", choices=[f.value for f in FreezePolicy])
    s.set_defaults(func=cmd_params)

    s = sub.add_parser("synth-data", help="write the synthetic train/val datasets")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train; writes checkpoint, JSONL log and curves")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics JSON, ROC CSV and ROC plot for a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out")
    s.add_argument("--corrupt", choices=CORRUPTIONS)
    s.add_argument("--severity", type=int, default=3, choices=range(MAX_SEVERITY + 1))
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="float64 finite-difference check of all trainable gradients")
    s.add_argument("--config", required=True)
    s.add_argument("--tol", type=float, default=1e-6)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("saliency", help="Grad-CAM heatmap (PGM plus PNG overlay) for one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True, help=".npy image (C,H,W) or dataset .npz")
    s.add_argument("--index", type=int, default=0, help="image index for batched inputs")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_saliency)

    s = sub.add_parser("export-emb", help="pooled classifier inputs for the evaluation split")
    s.add_argument("--config", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_emb)
    return p


def _fail(kind: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv: Optional[list[str]] = None) -> int:
    from .checkpoint import CheckpointError
    from .training import ContractError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        return _fail("config", e, 2)
    except (CheckpointError, OSError) as e:
        return _fail("io", e, 3)
    except (ContractError, ShapeError, GraphError, ValueError) as e:
        return _fail("contract", e, 4)


if __name__ == "__main__":
    sys.exit(main())
