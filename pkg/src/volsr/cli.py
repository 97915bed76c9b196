"""Command-line pipeline: phantom -> degrade -> upsample / train -> evaluate -> compare.

Exit codes::

    0  success
    2  validation error (bad arguments, shapes, configs)
    3  I/O or file-format error
    4  training diverged (non-finite loss)
    5  refused: checkpoint was trained on a test subject
    6  numerical consistency error
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, fourier, models, phantom, quality, trainkit
from .errors import ConsistencyError, DivergenceError, FormatError, LeakageError, ValidationError
from .volgrid import Volume, read_volume, resample_array, trilinear_resample, write_volume

log = logging.getLogger("volsr")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_DIVERGENCE, EXIT_LEAKAGE, EXIT_CONSISTENCY = 0, 2, 3, 4, 5, 6
MANIFEST_NAME = "run_manifest.json"
DATASET_MANIFEST = "dataset.json"
ZEROFILL = "k-space zero-filling"
TRILINEAR = "trilinear"
PERCEPTUAL_NOTE = ("note: perceptual-loss models use a fixed seeded 3D feature extractor, "
                   "not an ImageNet-pretrained VGG")


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: list[str]
    outputs: list[str]
    seed: int | None = None
    version: str = __version__
    duration_s: float = 0.0
    extra: dict = field(default_factory=dict)

    def write(self, directory) -> Path:
        path = Path(directory) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str))
        return path


def _dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z integers, got {text!r}") from exc
    if len(dims) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    return dims


def _require_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"directory not found: {p}")
    return p


def _volume_files(directory: Path) -> list[Path]:
    files = sorted(directory.glob("*.vol"))
    if not files:
        raise FileNotFoundError(f"no .vol files in {directory}")
    return files


def _copy_dataset_manifest(src: Path, dst: Path):
    m = src / DATASET_MANIFEST
    if m.exists():
        (dst / DATASET_MANIFEST).write_text(m.read_text())


def _load_dataset(data_dir: Path):
    path = data_dir / DATASET_MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    manifest = json.loads(path.read_text())
    records = []
    for entry in manifest["files"]:
        vol = read_volume(data_dir / entry["file"])
        records.append((int(entry["subject"]), int(entry["echo"]), vol))
    return manifest, records


# ---------------------------------------------------------------------------
# commands


def cmd_phantom(args) -> dict:
    spec_kwargs = {}
    if args.dims is not None:
        spec_kwargs["dims"] = args.dims
    if args.noise is not None:
        spec_kwargs["noise_sigma"] = args.noise
    if args.texture_bandwidth is not None:
        spec_kwargs["texture_bandwidth"] = args.texture_bandwidth
    if args.echoes is not None:
        spec_kwargs["echoes"] = args.echoes
    spec = phantom.PhantomSpec(**spec_kwargs)
    records = phantom.generate_dataset(spec, args.subjects, args.seed)
    out = Path(args.out)
    manifest = phantom.write_dataset(out, spec, records, args.seed)
    return {"outputs": [r.filename for r in records] + [DATASET_MANIFEST], "seed": args.seed,
            "extra": {"subjects": manifest["subjects"]}}


def cmd_degrade(args) -> dict:
    src = _require_dir(args.inp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for f in _volume_files(src):
        write_volume(fourier.kspace_truncate_downsample(read_volume(f)), out / f.name)
        outputs.append(f.name)
    _copy_dataset_manifest(src, out)
    return {"outputs": outputs}


def upsample(v: Volume, method: str, edge_filter=None) -> Volume:
    if method == "zerofill":
        return fourier.kspace_zerofill_upsample(v, 2, edge_filter)
    if method == "trilinear":
        return trilinear_resample(v, tuple(2 * n for n in v.dims))
    raise ValidationError(f"unknown upsampling method {method!r}")


def cmd_upsample(args) -> dict:
    src = _require_dir(args.inp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for f in _volume_files(src):
        write_volume(upsample(read_volume(f), args.method, args.edge_filter), out / f.name)
        outputs.append(f.name)
    _copy_dataset_manifest(src, out)
    return {"outputs": outputs}


def cmd_train(args) -> dict:
    data = _require_dir(args.data)
    config = trainkit.TrainConfig.load(args.config)
    manifest, records = _load_dataset(data)
    if "split" in manifest:
        split = trainkit.SplitAssignment.from_dict(manifest["split"])
    else:
        split = trainkit.split_subjects(manifest["subjects"], config.split_ratios, config.seed)
    pairs = trainkit.make_pairs(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = trainkit.train(config, pairs, split, log_path=out / "train_log.jsonl")
    result.checkpoint.save(out / "best.ckpt")
    (out / "split.json").write_text(json.dumps(split.to_dict(), indent=2))
    return {
        "outputs": ["best.ckpt", "train_log.jsonl", "split.json"],
        "seed": config.seed,
        "config": config.to_dict(),
        "extra": {"steps": result.steps, "best_epoch": result.checkpoint.metadata["epoch"],
                  "best_val_ssim": result.checkpoint.metadata["best_val_ssim"]},
    }


ARCH_LABELS = {"resnet": "ResNet", "densenet": "DenseNet"}


def resolve_test_split(manifest: dict, checkpoints) -> trainkit.SplitAssignment:
    if "split" in manifest:
        return trainkit.SplitAssignment.from_dict(manifest["split"])
    for ckpt in checkpoints:
        if "split" in ckpt.metadata:
            return trainkit.SplitAssignment.from_dict(ckpt.metadata["split"])
    raise ValidationError("no test split: add 'split' to the dataset manifest or evaluate a trained checkpoint")


def check_leakage(split: trainkit.SplitAssignment, checkpoints, names) -> None:
    test = set(split.test)
    for ckpt, name in zip(checkpoints, names):
        trained = ckpt.metadata.get("split")
        if trained is None:
            continue
        seen = set(trained.get("train", [])) | set(trained.get("validation", []))
        overlap = sorted(seen & test)
        if overlap:
            raise LeakageError(f"checkpoint {name} was trained on test subjects {overlap}")


def evaluate_methods(records, split, checkpoints, names, window=7) -> quality.MetricsReport:
    """Metrics on the test subjects for zero-fill, trilinear and each checkpoint.

    Every method is compared against the z-scored HR volume in the same units;
    PSNR, NRMSE and SSIM are invariant to a shared affine intensity map, so the
    numbers equal those computed after denormalizing to the HR's own stats.
    """
    nets = [models.from_checkpoint(c) for c in checkpoints]
    entries = []
    volumes = []
    for subject, echo, hr in records:
        if subject not in split.test:
            continue
        pair = trainkit.make_pair(hr, subject, echo)
        volumes.append({"subject": subject, "echo": echo})
        entries.append((ZEROFILL, "n/a", quality.evaluate(pair.target, pair.input, window)))
        lr = fourier.truncate_array(pair.target.data)
        tri = resample_array(lr, pair.target.dims)
        entries.append((TRILINEAR, "n/a", quality.evaluate(pair.target, tri, window)))
        for net, ckpt, name in zip(nets, checkpoints, names):
            pred = trainkit.predict_array(net, pair.input.data)
            entries.append((name, _loss_kind(ckpt), quality.evaluate(pair.target, pred, window)))
    if not volumes:
        raise ValidationError("test split selects no volumes in this dataset")
    report = quality.aggregate_report(entries)
    if any(_loss_kind(c) == "perceptual" for c in checkpoints):
        report.notes.append(PERCEPTUAL_NOTE)
    report.volumes = volumes
    return report


def _loss_kind(ckpt) -> str:
    return ckpt.metadata.get("train_config", {}).get("loss", {}).get("kind", "unknown")


def checkpoint_names(paths, checkpoints) -> list[str]:
    base = [ARCH_LABELS.get(c.config.architecture, c.config.architecture) for c in checkpoints]
    keys = [(b, _loss_kind(c)) for b, c in zip(base, checkpoints)]
    return [f"{b} [{Path(p).stem}]" if keys.count(k) > 1 else b for b, k, p in zip(base, keys, paths)]


def cmd_evaluate(args) -> dict:
    data = _require_dir(args.data)
    manifest, records = _load_dataset(data)
    checkpoints = [models.ModelCheckpoint.load(p) for p in args.checkpoints]
    names = checkpoint_names(args.checkpoints, checkpoints)
    split = resolve_test_split(manifest, checkpoints)
    check_leakage(split, checkpoints, names)
    report = evaluate_methods(records, split, checkpoints, names, args.window)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    payload = json.loads(report.to_json())
    payload["split"] = split.to_dict()
    out.write_text(json.dumps(payload, indent=2))
    table = out.with_suffix(".txt")
    table.write_text(report.render())
    print(report.render(), end="")
    return {"outputs": [out.name, table.name], "manifest_dir": out.parent}


# ---------------------------------------------------------------------------
# comparison panels

DISPLAY_WINDOW = 3.0  # z-score units mapped to [0, 255]


def to_gray(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    scaled = (np.clip(img, lo, hi) - lo) / (hi - lo) * 255.0
    return np.clip(np.round(scaled), 0, 255).astype(np.uint8)


def residual_gray(res: np.ndarray) -> np.ndarray:
    """Symmetric diverging map: 0 -> 128, +-max|res| -> 255 / 0."""
    r = float(np.abs(res).max())
    if r == 0.0:
        return np.full(res.shape, 128, dtype=np.uint8)
    return to_gray(res, -r, r)


def _save_png(arr: np.ndarray, path: Path):
    from PIL import Image

    Image.fromarray(np.ascontiguousarray(arr.T, dtype=np.uint8)).save(path)


def residual_filename(name: str, k: int, res: np.ndarray) -> str:
    return f"{name}_residual_slice{k}_range_{float(res.min()):+.4f}_{float(res.max()):+.4f}.png"


def cmd_compare(args) -> dict:
    hr = read_volume(args.hr)
    lr = read_volume(args.lr)
    if lr.dims != hr.dims:
        if tuple(2 * n for n in lr.dims) != hr.dims:
            raise ValidationError(f"LR dims {lr.dims} match neither HR {hr.dims} nor half of it")
        lr = fourier.kspace_zerofill_upsample(lr)
    preds = [read_volume(p) for p in args.pred]
    names = args.names or [Path(p).stem for p in args.pred]
    if len(names) != len(preds):
        raise ValidationError("--names must list one name per --pred file")
    for p, n in zip(preds, names):
        if p.dims != hr.dims:
            raise ValidationError(f"prediction {n} dims {p.dims} differ from HR {hr.dims}")
    k = args.slice
    if not 0 <= k < hr.dims[2]:
        raise ValidationError(f"slice {k} out of range [0, {hr.dims[2]})")

    mean, sd = float(hr.data.mean()), float(hr.data.std())
    if not sd > 0:
        raise ValidationError("HR volume is constant")

    def z(v):
        return (v.data[:, :, k] - mean) / sd

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    hz = z(hr)
    for label, img in [("hr", hz), ("input", z(lr))]:
        fname = f"{label}_slice{k}.png"
        _save_png(to_gray(img, -DISPLAY_WINDOW, DISPLAY_WINDOW), out / fname)
        outputs.append(fname)
    metrics = {}
    ref_slab = hz[:, :, None]
    for name, vol in [("input", lr)] + list(zip(names, preds)):
        pz = z(vol)
        res = pz - hz
        if name != "input":
            fname = f"{name}_slice{k}.png"
            _save_png(to_gray(pz, -DISPLAY_WINDOW, DISPLAY_WINDOW), out / fname)
            outputs.append(fname)
        rname = residual_filename(name, k, res)
        _save_png(residual_gray(res), out / rname)
        outputs.append(rname)
        win = (min(7, hz.shape[0] - (1 - hz.shape[0] % 2)), min(7, hz.shape[1] - (1 - hz.shape[1] % 2)), 1)
        metrics[name] = {
            "psnr": quality.psnr(ref_slab, pz[:, :, None]),
            "nrmse": quality.nrmse(ref_slab, pz[:, :, None]),
            "ssim": quality.ssim(ref_slab, pz[:, :, None], win),
            "residual_min": float(res.min()),
            "residual_max": float(res.max()),
        }
    (out / "slice_metrics.json").write_text(json.dumps({"slice": k, "methods": metrics}, indent=2, default=str))
    outputs.append("slice_metrics.json")
    return {"outputs": outputs}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="volsr", description="Volumetric MRI super-resolution toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic multi-echo dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=13)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_dims)
    p.add_argument("--echoes", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--texture-bandwidth", type=float)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("degrade", help="factor-2 k-space truncation of every volume")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("upsample", help="factor-2 upsampling baseline")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("zerofill", "trilinear"), default="zerofill")
    p.add_argument("--edge-filter", type=int, default=None)
    p.set_defaults(func=cmd_upsample)

    p = sub.add_parser("train", help="train a network with early stopping")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="test-set report for baselines and checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", nargs="*", default=[])
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=7)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="slice panels and residual maps")
    p.add_argument("--hr", required=True)
    p.add_argument("--lr", required=True)
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--slice", type=int, required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def _inputs(args) -> list[str]:
    keys = ("inp", "data", "config", "hr", "lr", "pred", "checkpoints")
    found = []
    for k in keys:
        v = getattr(args, k, None)
        if v is None:
            continue
        found.extend(str(x) for x in (v if isinstance(v, list) else [v]))
    return found


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.perf_counter()
    try:
        info = args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged (epoch {exc.epoch}): {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except LeakageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_LEAKAGE
    except ConsistencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONSISTENCY
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO

    config = info.get("config") or {k: v for k, v in vars(args).items() if k not in ("func",)}
    manifest_dir = info.get("manifest_dir", getattr(args, "out", "."))
    RunManifest(
        command=args.command,
        config=config,
        inputs=_inputs(args),
        outputs=info.get("outputs", []),
        seed=info.get("seed"),
        duration_s=round(time.perf_counter() - started, 3),
        extra=info.get("extra", {}),
    ).write(manifest_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
