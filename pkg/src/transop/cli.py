"""``transop`` command line: synth, preprocess, train, eval, predict, gradcheck, compare."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

THREAD_ENV = "TRANSOP_THREADS"
MANIFEST = "manifest.json"


def _apply_thread_env() -> None:
    n = os.environ.get(THREAD_ENV)
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


def _triple(text: str, kind=int) -> tuple:
    parts = text.replace("x", ",").split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    try:
        return tuple(kind(p) for p in parts)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _prepare_run_dir(out: Path) -> Path:
    if (out / MANIFEST).exists():
        raise FileExistsError(f"{out} already holds a run ({MANIFEST} exists); run directories are append-only")
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, config: dict, seeds: dict, inputs: list, artifacts: list) -> None:
    from . import __version__

    def rel(p: Path) -> str:
        p = Path(p)
        try:
            return str(p.relative_to(out))
        except ValueError:
            return str(p)

    manifest = {
        "tool": "transop",
        "version": __version__,
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): sha256(p) for p in sorted(map(Path, inputs))},
        "artifacts": {rel(p): sha256(p) for p in sorted(map(Path, artifacts))},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- commands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .data.dataset import write_cohort
    from .data.records import split_dataset
    from .data.synth import synth_generate

    cohort = synth_generate(args.n, args.dims, args.clinical_dim, args.seed)
    split = split_dataset(cohort.records, args.seed)
    out = _prepare_run_dir(Path(args.out))
    written = write_cohort(out, cohort, split)
    config = {"n": args.n, "dims": list(args.dims), "clinical_dim": args.clinical_dim}
    write_manifest(out, "synth", config, {"seed": args.seed}, [], written)
    print(f"wrote {args.n} patients to {out} (train/val/test {len(split.train)}/{len(split.val)}/{len(split.test)})")
    return 0


def _volume_inputs(src: Path) -> tuple[Path, list[Path]]:
    if src.is_file():
        return src.parent, [src]
    vol_dir = src / "volumes" if (src / "volumes").is_dir() else src
    files = sorted(vol_dir.glob("*.svl"))
    if not files:
        raise FileNotFoundError(f"{src}: no .svl volumes found")
    return vol_dir, files


def cmd_preprocess(args) -> int:
    from .data.preprocess import preprocess
    from .data.volume import read_volume, write_volume

    src = Path(args.input)
    vol_dir, files = _volume_inputs(src)
    out = _prepare_run_dir(Path(args.out))
    nested = src.is_dir() and vol_dir != src
    dest_dir = out / "volumes" if nested else out
    dest_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for path in files:
        v = read_volume(path)
        try:
            pv = preprocess(v, target=args.target, skull_strip=not args.skip_skull_strip)
        except ValueError as exc:
            raise ValueError(f"{path}: {exc}") from exc
        dest = dest_dir / path.name
        write_volume(dest, pv)
        written.append(dest)
    if nested:
        for name in ("clinical.csv", "split.json"):
            if (src / name).exists():
                shutil.copyfile(src / name, out / name)
                written.append(out / name)
    config = {"target": list(args.target), "skull_strip": not args.skip_skull_strip}
    write_manifest(out, "preprocess", config, {}, files, written)
    print(f"preprocessed {len(files)} volume(s) into {out}")
    return 0


def _resolve_run_config(args, n_features: int):
    from .errors import ConfigError
    from .model import preset
    from .train import RunConfig, TrainConfig

    if args.config:
        run = RunConfig.load(args.config)
    elif args.preset:
        run = RunConfig(preset(args.preset, args.variant or "vit", clinical_dim=n_features), TrainConfig())
    else:
        raise ConfigError("train needs --config or --preset")
    m, t = run.model.to_dict(), run.train.to_dict()
    for flag, section, key in (
        ("variant", m, "variant"),
        ("fusion", m, "fusion"),
        ("epochs", t, "epochs"),
        ("seed", t, "seed"),
        ("batch_size", t, "batch_size"),
        ("lr", t, "lr"),
    ):
        value = getattr(args, flag)
        if value is not None:
            section[key] = value
    if args.no_clinical:
        m["use_clinical"] = False
    if args.no_augment:
        t["augment"] = False
    run = RunConfig.from_dict({"model": m, "train": t})
    if run.model.clinical_dim != n_features:
        raise ConfigError(f"config clinical_dim {run.model.clinical_dim} != {n_features} features in the data")
    return run


def cmd_train(args) -> int:
    from .data.dataset import Dataset
    from .model import TranSOP
    from .train import train_loop

    data = Dataset(args.data)
    run = _resolve_run_config(args, len(data.feature_names))
    data.crop = run.model.crop
    data.load_volumes = run.model.uses_image
    train_set, val_set = data.subset("train"), data.subset("val")
    out = _prepare_run_dir(Path(args.out))
    model = TranSOP(run.model, seed=run.train.seed)
    result = train_loop(model, train_set, val_set, run.train, out_dir=out)
    inputs = [data.root / "clinical.csv", data.root / "split.json"]
    if run.model.uses_image:
        inputs += [data.volume_path(pid) for pid in train_set.ids + val_set.ids]
    artifacts = [out / "checkpoint.zip", out / "history.csv", out / "config.json"]
    write_manifest(out, "train", run.to_dict(), {"seed": run.train.seed}, inputs, artifacts)
    print(f"best val AUC {result.best_val_auc:.4f} at epoch {result.best_epoch}; artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    from .data.dataset import Dataset
    from .errors import ConfigError
    from .evaluate import evaluate
    from .model import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    data = Dataset(args.data, crop=model.cfg.crop, load_volumes=model.cfg.uses_image)
    if len(data.feature_names) != model.cfg.clinical_dim:
        raise ConfigError(
            f"checkpoint expects {model.cfg.clinical_dim} clinical features, data has {len(data.feature_names)}"
        )
    subset = data.subset(args.split)
    out = _prepare_run_dir(Path(args.out))
    report = evaluate(model, subset, out, resamples=args.resamples, seed=args.seed)
    inputs = [Path(args.checkpoint), data.root / "clinical.csv"]
    if model.cfg.uses_image:
        inputs += [data.volume_path(pid) for pid in subset.ids]
    write_manifest(
        out,
        "eval",
        {"split": args.split, "resamples": args.resamples},
        {"bootstrap": args.seed},
        inputs,
        [out / "report.csv", out / "predictions.csv"],
    )
    print(f"{args.split} (n={report.n}): {report.summary()}")
    return 0


def _clinical_vector(value: str, patient_id: str | None):
    import numpy as np

    from .data.records import read_clinical_table
    from .errors import ConfigError

    path = Path(value)
    if path.is_file():
        records, _ = read_clinical_table(path)
        if patient_id is None:
            raise ConfigError("--patient-id is required when --clinical names a table")
        for r in records:
            if r.patient_id == patient_id:
                return r.features
        raise ConfigError(f"{path}: no patient {patient_id!r}")
    try:
        return np.array([float(x) for x in value.split(",")])
    except ValueError as exc:
        raise ConfigError(f"--clinical must be a table path or comma-separated numbers: {exc}") from exc


def cmd_predict(args) -> int:
    from .data.preprocess import prepare_for_model
    from .data.volume import read_volume
    from .errors import ConfigError
    from .model import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    volume = None
    if model.cfg.uses_image:
        if not args.volume:
            raise ConfigError("this model needs --volume")
        volume = prepare_for_model(read_volume(args.volume).voxels, model.cfg.crop)
    features = None
    if model.cfg.use_clinical:
        if not args.clinical:
            raise ConfigError("this model needs --clinical")
        pid = args.patient_id or (Path(args.volume).stem if args.volume else None)
        features = _clinical_vector(args.clinical, pid)
    pred = model.predict(volume, features)
    outcome = "bad (mRS > 2)" if pred.label == 1 else "good (mRS <= 2)"
    print(f"p_good={float(pred.probs[0])!r} p_bad={float(pred.probs[1])!r} label={pred.label} outcome={outcome}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    if args.preset != "tiny":
        print("error: only the tiny preset is finite-difference checked", file=sys.stderr)
        return 2
    report = run_gradcheck(seed=args.seed)
    for line in report.lines():
        print(line)
    print(f"total {report.seconds:.1f}s: {'PASS' if report.passed else 'FAIL'}")
    if not report.passed:
        print("error: gradient check exceeded tolerance", file=sys.stderr)
        return 1
    return 0


def cmd_compare(args) -> int:
    from .experiment import compare_fusion

    comp = compare_fusion(seeds=args.seeds, n=args.n, dims=args.dims, epochs=args.epochs)
    print(comp.table())
    return 0


def cmd_init_config(args) -> int:
    from .model import preset
    from .train import RunConfig, TrainConfig

    run = RunConfig(preset(args.preset, args.variant), TrainConfig())
    print(json.dumps(run.to_dict(), indent=2, sort_keys=True))
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="transop", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic multimodal cohort")
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--dims", type=_triple, default=(8, 24, 16), help="D,W,H")
    s.add_argument("--clinical-dim", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="resample, clip, skull-strip, crop and z-score volumes")
    s.add_argument("--in", dest="input", required=True, help="dataset dir, volume dir, or one .svl file")
    s.add_argument("--out", required=True)
    s.add_argument("--target", type=_triple, default=(32, 192, 128), help="crop D,W,H")
    s.add_argument("--skip-skull-strip", action="store_true")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a model on a dataset directory")
    s.add_argument("--config")
    s.add_argument("--preset", choices=("tiny", "full"))
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variant", choices=("vit", "convit", "clinic_dnn"))
    s.add_argument("--fusion", choices=("concat", "add"))
    s.add_argument("--no-clinical", action="store_true", help="image-only model")
    s.add_argument("--no-augment", action="store_true")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics with bootstrap CIs on one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    s.add_argument("--resamples", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="classify one case")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--volume")
    s.add_argument("--clinical", help="comma-separated features, or a clinical table path")
    s.add_argument("--patient-id", help="row to use when --clinical is a table (default: volume file stem)")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer and model")
    s.add_argument("--preset", default="tiny")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("compare", help="image-only vs clinical-only vs multimodal on synthetic data")
    s.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--dims", type=_triple, default=(8, 24, 16))
    s.add_argument("--epochs", type=int, default=60)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("init-config", help="print a complete run config for a preset")
    s.add_argument("--preset", choices=("tiny", "full"), default="tiny")
    s.add_argument("--variant", choices=("vit", "convit", "clinic_dnn"), default="vit")
    s.set_defaults(func=cmd_init_config)
    return p


def main(argv=None) -> int:
    _apply_thread_env()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
