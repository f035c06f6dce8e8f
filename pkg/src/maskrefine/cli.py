"""Command-line entry point: ``maskrefine <command> ...``.

Exit codes: 0 success, 1 validation error, 2 numerical failure,
3 failed self-check (gradcheck / equiv / bench ordering).
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .diagnostics import GRAD_TOL, bench_heads, equivalence_trials, gradcheck_suite, summarize_gradcheck
from .engine import NonFiniteError
from .formats import load_tensor, read_pgm, sha256_file, write_pgm
from .metrics import evaluate
from .network import HeadConfig, InferenceConfig, Model, ModelConfig, TrunkConfig, propose
from .synthdata import SynthConfig, load_dataset, make_dataset, make_eval_images
from .trainer import (
    TrainConfig,
    TrainingDiverged,
    desk_train_config,
    load_model,
    save_model,
    train_stage1,
    train_stage2,
    write_json,
)

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3
EQUIV_FORWARD_TOL = 1e-9
EQUIV_GRAD_TOL = 1e-8


class ValidationError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a command needs, resolved from defaults, ``--config`` and flags."""

    command: str
    seed: int = 0
    out: str | None = None
    config_path: str | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=desk_train_config)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    n_train: int = 5000
    n_val: int = 500
    eval_images: int = 50

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "seed": self.seed,
            "out": self.out,
            "config_path": self.config_path,
            "synth": self.synth.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "inference": asdict(self.inference),
            "n_train": self.n_train,
            "n_val": self.n_val,
            "eval_images": self.eval_images,
        }


SECTIONS = {"synth", "model", "train", "inference", "data"}


def load_run_config(command: str, path: str | None, seed: int | None, out: str | None) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ValidationError("config must be a JSON object")
        unknown = set(raw) - SECTIONS
        if unknown:
            raise ValidationError(f"unknown config sections: {sorted(unknown)}")
    seed = int(seed if seed is not None else raw.get("data", {}).get("seed", 0))
    try:
        model_raw = dict(raw.get("model", {}))
        trunk = TrunkConfig(**model_raw.pop("trunk", {}))
        head = HeadConfig(**model_raw.pop("head", {}))
        model = ModelConfig(trunk=trunk, head=head, **{"seed": seed, **model_raw})
        train = TrainConfig(**{**desk_train_config(seed).to_dict(), **raw.get("train", {})})
        synth_raw = raw.get("synth", {})
        synth = SynthConfig(**{"patch": trunk.W, **synth_raw})
        inference = InferenceConfig(**raw.get("inference", {}))
        data = dict(raw.get("data", {}))
        data.pop("seed", None)
        cfg = RunConfig(command, seed, out, path, synth, model, train, inference, **data)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid config: {exc}") from exc
    if cfg.synth.patch != cfg.model.trunk.W:
        raise ValidationError(f"synth patch {cfg.synth.patch} does not match trunk W {cfg.model.trunk.W}")
    return cfg


def _out_dir(cfg: RunConfig, default: str) -> Path:
    out = Path(cfg.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, cfg: RunConfig, argv: Sequence[str], extra: dict | None = None) -> Path:
    """``run.json``: resolved config plus the sha256 of every file the run produced."""
    artifacts = {
        str(p.relative_to(out)): sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != "run.json"
    }
    record = {"version": __version__, "argv": list(argv), "config": cfg.to_dict(), "artifacts": artifacts, **(extra or {})}
    return write_json(out / "run.json", record)


def _load_data(cfg: RunConfig, data_dir: str | None):
    if data_dir:
        if not Path(data_dir, "manifest.jsonl").exists():
            raise ValidationError(f"{data_dir} is not a dataset directory")
        return load_dataset(data_dir)
    return make_dataset(cfg.synth, cfg.seed, cfg.n_train, cfg.n_val)


def _checkpoint(path: str) -> tuple[Model, dict]:
    if not Path(path).with_suffix(".json").exists() and not Path(path + ".json").exists():
        raise ValidationError(f"checkpoint {path} not found")
    stem = path[:-5] if path.endswith(".json") else path
    return load_model(stem)


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, args, argv) -> int:
    out = _out_dir(cfg, "data")
    splits = make_dataset(cfg.synth, cfg.seed, cfg.n_train, cfg.n_val, out_dir=out)
    write_manifest(out, cfg, argv, {"counts": {k: len(v) for k, v in splits.items()}})
    print(f"wrote {cfg.n_train} train / {cfg.n_val} val samples to {out}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args, argv) -> int:
    out = _out_dir(cfg, "runs")
    log = out / f"log_stage{args.stage}.jsonl"
    log.unlink(missing_ok=True)
    if args.stage == 2 and not args.from_:
        raise ValidationError("stage 2 needs a stage-1 checkpoint (--from)")
    data = _load_data(cfg, args.data)
    echo = (lambda r: print(json.dumps(r, sort_keys=True))) if args.verbose else None
    if args.stage == 1:
        model = Model(cfg.model)
        state = train_stage1(model, data["train"], cfg.train, data.get("val"), log, echo)
    else:
        model, manifest = _checkpoint(args.from_)
        if manifest.get("stage") != 1:
            raise ValidationError(f"{args.from_} is not a stage-1 checkpoint")
        if args.variant:
            model.cfg.refine_variant = args.variant
        state = train_stage2(model, data["train"], cfg.train, data.get("val"), log, echo)
    ckpt = save_model(out / f"stage{args.stage}", model, args.stage, cfg.train, final_loss=state.losses[-1] if state.losses else None)
    write_manifest(out, cfg, argv)
    print(f"stage {args.stage} checkpoint: {ckpt}")
    return EXIT_OK


def _eval_rows(cfg: RunConfig, args) -> list[dict]:
    images = make_eval_images(cfg.synth, cfg.seed, cfg.eval_images)
    rows = []
    if args.oracle:
        report = evaluate([(e.gt_masks, e.gt_masks) for e in images], cfg.synth.patch, thr=args.threshold)
        rows.append({"source": "oracle", "mode": "ground-truth", **report.to_dict()})
    modes = ["coarse", "refined"] if args.mode == "both" else [args.mode]
    for path in args.from_ or []:
        model, _ = _checkpoint(path)
        for mode in modes:
            if mode == "refined" and model.refiner is None:
                raise ValidationError(f"{path} has no refinement stage")
            infer = InferenceConfig(**{**asdict(cfg.inference), **({"top_n": args.topn} if args.topn else {})})
            results = [(propose(model, e.image, infer=infer, mode=mode), e.gt_masks) for e in images]
            report = evaluate(results, model.W, thr=args.threshold)
            rows.append({"source": path, "mode": mode, **report.to_dict()})
    return rows


def cmd_eval(cfg: RunConfig, args, argv) -> int:
    if not args.from_ and not args.oracle:
        raise ValidationError("eval needs --from CHECKPOINT (repeatable) or --oracle")
    out = _out_dir(cfg, "eval")
    rows = _eval_rows(cfg, args)
    write_json(out / "report.json", {"rows": rows})
    write_manifest(out, cfg, argv)
    for r in rows:
        print(f"{r['source']} [{r['mode']}] AR10={r['AR10']:.4f} AR100={r['AR100']:.4f} AUC={r['AUC']:.4f}")
    return EXIT_OK


def _read_image(path: str) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".pgm":
        return read_pgm(p).astype(np.float64) / 255.0
    if p.suffix in (".f64", ".json"):
        return load_tensor(p)
    raise ValidationError(f"unsupported image format {p.suffix!r} (use .pgm or .f64)")


def cmd_infer(cfg: RunConfig, args, argv) -> int:
    if not args.from_:
        raise ValidationError("infer needs --from CHECKPOINT")
    if not args.image:
        raise ValidationError("infer needs --image")
    model, _ = _checkpoint(args.from_[0])
    if args.mode == "refined" and model.refiner is None:
        raise ValidationError("checkpoint has no refinement stage; use --mode coarse")
    image = _read_image(args.image)
    infer = InferenceConfig(**{**asdict(cfg.inference), **({"top_n": args.topn} if args.topn else {})})
    props = propose(model, image, infer=infer, mode=args.mode)
    out = _out_dir(cfg, "proposals")
    records = []
    for i, p in enumerate(props):
        name = f"mask_{i:03d}.pgm"
        write_pgm(out / name, p.mask >= args.threshold)
        records.append({"x": p.x, "y": p.y, "score": p.score, "mask": name})
    write_json(out / "proposals.json", {"mode": args.mode, "windows": props.windows, "proposals": records})
    write_manifest(out, cfg, argv)
    print(f"{len(records)} proposals written to {out}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args, argv) -> int:
    results = gradcheck_suite(configs=args.trials or 20, seed=cfg.seed)
    summary = summarize_gradcheck(results)
    failed = {op: s for op, s in summary.items() if s["max_error"] > GRAD_TOL}
    for op, s in sorted(summary.items()):
        print(f"{op:22s} configs={s['configs']:3d} max_rel_error={s['max_error']:.3e}")
    if cfg.out:
        out = _out_dir(cfg, "")
        write_json(out / "gradcheck.json", {"tolerance": GRAD_TOL, "ops": summary})
        write_manifest(out, cfg, argv)
    if failed:
        print(f"FAILED: {sorted(failed)} exceed {GRAD_TOL}")
        return EXIT_CHECK
    return EXIT_OK


def cmd_equiv(cfg: RunConfig, args, argv) -> int:
    res = equivalence_trials(trials=args.trials or 100, seed=cfg.seed)
    print(f"trials={res.trials} max_forward_diff={res.max_forward:.3e} max_grad_diff={res.max_grad:.3e}")
    if cfg.out:
        out = _out_dir(cfg, "")
        write_json(out / "equiv.json", asdict(res))
        write_manifest(out, cfg, argv)
    ok = res.max_forward <= EQUIV_FORWARD_TOL and res.max_grad <= EQUIV_GRAD_TOL
    return EXIT_OK if ok else EXIT_CHECK


def cmd_bench(cfg: RunConfig, args, argv) -> int:
    heads = [h.strip() for h in (args.heads or "A,B,C").split(",") if h.strip()]
    for h in heads:
        if h not in ("A", "B", "C"):
            raise ValidationError(f"unknown head {h!r}")
    rows = bench_heads(heads, trunk=cfg.model.trunk, repeats=args.trials or 15, seed=cfg.seed)
    for r in rows:
        print(f"head {r.variant}: params={r.params} time={r.seconds * 1e3:.3f} ms")
    if cfg.out:
        out = _out_dir(cfg, "")
        write_json(out / "bench.json", {"heads": [asdict(r) for r in rows]})
        write_manifest(out, cfg, argv)
    order = sorted(rows, key=lambda r: "CBA".index(r.variant))
    ok = all(a.params <= b.params and a.seconds <= b.seconds for a, b in zip(order, order[1:]))
    if not ok:
        print("FAILED: expected params and time ordered C <= B <= A")
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "equiv": cmd_equiv,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskrefine", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with synth/model/train/inference/data sections")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (created if missing)")

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)

    p = sub.add_parser("train", parents=[common], help="run one training stage")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--from", dest="from_", help="stage-1 checkpoint (required for stage 2)")
    p.add_argument("--data", help="dataset directory written by `synth` (default: generate in memory)")
    p.add_argument("--variant", choices=("full", "no_horizontal", "skip_only"), help="refinement variant for stage 2")
    p.add_argument("--heads", help="head variant for stage 1 (A, B or C)")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("eval", parents=[common], help="AR / AUC on synthetic evaluation scenes")
    p.add_argument("--from", dest="from_", action="append", help="checkpoint (repeatable)")
    p.add_argument("--mode", choices=("coarse", "refined", "both"), default="both")
    p.add_argument("--oracle", action="store_true", help="also score ground-truth masks as proposals")
    p.add_argument("--topn", type=int)
    p.add_argument("--threshold", type=float, default=0.2)
    p.add_argument("--images", type=int)

    p = sub.add_parser("infer", parents=[common], help="proposals for one image")
    p.add_argument("--from", dest="from_", action="append")
    p.add_argument("--image", help=".pgm or .f64 image")
    p.add_argument("--mode", choices=("coarse", "refined"), default="refined")
    p.add_argument("--topn", type=int)
    p.add_argument("--threshold", type=float, default=0.2)

    for name, helptext in (
        ("gradcheck", "finite-difference gradient checks"),
        ("equiv", "merged vs split refinement equivalence"),
        ("bench", "head parameter counts and timing"),
    ):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--trials", type=int)
        if name == "bench":
            p.add_argument("--heads", default="A,B,C")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; that code is reserved for numerical failures
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        cfg = load_run_config(args.command, args.config, args.seed, args.out)
        if getattr(args, "n_train", None) is not None:
            cfg.n_train = args.n_train
        if getattr(args, "n_val", None) is not None:
            cfg.n_val = args.n_val
        if getattr(args, "images", None) is not None:
            cfg.eval_images = args.images
        if args.command == "train" and args.heads:
            cfg.model.head = HeadConfig(args.heads)
        if cfg.n_train < 1 or cfg.n_val < 1:
            raise ValidationError("n_train and n_val must be >= 1")
        thr = getattr(args, "threshold", None)
        if thr is not None and not 0 < thr < 1:
            raise ValidationError("--threshold must be in (0, 1)")
        return COMMANDS[args.command](cfg, args, argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
