"""Command-line front end.

One command per process. Reports go to standard output, progress logs
to standard error. Exit codes: 0 success, 1 usage error, 2 data or
configuration error, 3 numerical failure.

Heavy imports (numpy and the model modules) are deferred until after
argument parsing so that ``--threads`` can pin the BLAS worker count
through the standard environment variables before numpy loads.
"""

from __future__ import annotations

import argparse
import re
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
)

_ARCH_NAMES = ("ghostcnn-netvlad", "vgg16-netvlad")


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Everything a training run needs, mirroring the config-file keys."""

    manifest: str = ""
    out: str = ""
    size: str = "128x96"
    multiplier: float = 1.0
    scheme: str = "1"
    k: int = 64
    reduction: int = 0
    margin: float = 0.1
    negatives: int = 10
    positive_radius: float = 10.0
    negative_radius: float = 25.0
    candidate_pool: int = 100
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 4
    epochs: int = 30
    seed: int = 0
    init_images: int = 64

    def validate(self):
        if not self.manifest:
            raise ValueError("a manifest path is required (flag --manifest or config key manifest)")
        if not self.out:
            raise ValueError("an output directory is required (flag --out or config key out)")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit value, got {self.seed}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0 (0 saves the initialized pipeline untrained)")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.reduction < 0:
            raise ValueError("reduction must be >= 0 (0 disables it)")
        if self.init_images < 1:
            raise ValueError("init_images must be >= 1")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


def read_config_file(path) -> dict:
    """key=value lines; blank lines and # comments ignored."""
    values = {}
    known = {f.name: f.type for f in fields(RunConfig)}
    casts = {"str": str, "float": float, "int": int}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise ValueError(f"{path}:{line_no}: expected key=value, got {line!r}")
        key, _, value = text.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise ValueError(f"{path}:{line_no}: unknown config key {key!r}")
        try:
            values[key] = casts[known[key]](value)
        except ValueError:
            raise ValueError(f"{path}:{line_no}: bad value for {key}: {value!r}") from None
    return values


def merge_run_config(args) -> RunConfig:
    """File values override defaults; explicit flags override the file."""
    values = read_config_file(args.config) if args.config else {}
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# small parsers


def parse_size(text: str) -> tuple:
    """'640x480' (width x height) -> (480, 640) rows x cols."""
    m = re.fullmatch(r"(\d+)[xX](\d+)", text.strip())
    if not m:
        raise ValueError(f"size must look like 640x480 (width x height), got {text!r}")
    w, h = int(m.group(1)), int(m.group(2))
    if w < 32 or h < 32:
        raise ValueError(f"both sides must be >= 32 pixels, got {text!r}")
    return h, w


def parse_at(text: str) -> tuple:
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ValueError(f"--at wants comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values) or sorted(set(values)) != list(values):
        raise ValueError(f"--at wants strictly increasing positive integers, got {text!r}")
    return values


# ---------------------------------------------------------------------------
# checkpoint plumbing


def save_pipeline(path, model, vlad, meta: dict, pca=None, optimizer=None):
    """Weights + metadata in one container; metadata rides the text tunnel."""
    from .checkpoint import save_arrays, text_to_array

    arrays = dict(model.state_arrays())
    arrays.update(vlad.state_arrays())
    if pca is not None:
        arrays.update(pca.state_arrays())
    if optimizer is not None:
        arrays.update(optimizer.state_arrays())
    for key, value in meta.items():
        arrays[f"meta.{key}"] = text_to_array(str(value))
    save_arrays(path, arrays)


def load_pipeline(path):
    """Rebuild (model, vlad, pca-or-None, meta) from a checkpoint."""
    from .checkpoint import CheckpointError, array_to_text, load_arrays
    from .ghostnet import GhostCNN, default_table1_config
    from .netvlad import PcaWhitening, VladParams

    arrays = load_arrays(path)
    meta = {
        key.split(".", 1)[1]: array_to_text(value)
        for key, value in arrays.items()
        if key.startswith("meta.")
    }
    arch = meta.get("arch")
    if arch != "ghostcnn-netvlad":
        raise CheckpointError(f"{path}: not a ghostcnn-netvlad checkpoint (arch={arch!r})")
    config = default_table1_config(meta["scheme"], float(meta["multiplier"]))
    model = GhostCNN(config, seed=0)
    model.load_state_arrays(arrays)
    vlad = VladParams.from_state_arrays(arrays)
    pca = PcaWhitening.from_state_arrays(arrays) if "pca.mean" in arrays else None
    return model, vlad, pca, meta


def _descriptor_matrix(records, root, size_hw, model, vlad, pca, batch_size=16):
    """(index-ordered records, their stacked descriptors)."""
    from .netvlad import global_descriptor
    from .retrieval import build_index

    index = build_index(
        records,
        lambda batch: global_descriptor(batch, model, vlad, pca),
        root,
        size_hw,
        batch_size=batch_size,
    )
    ordered = sorted(records, key=lambda r: r.id)
    return ordered, index


def _split_records(records, split: str):
    chosen = [r for r in records if r.split == split]
    if not chosen:
        raise ValueError(f"manifest has no records in split {split!r}")
    return chosen


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .retrieval import synth_dataset

    if not 0 <= args.seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit value, got {args.seed}")
    size_hw = parse_size(args.size)
    records = synth_dataset(
        seed=args.seed,
        num_places=args.places,
        views_per_place=args.views,
        out_dir=args.out,
        size_hw=size_hw,
        spacing_m=args.spacing,
        nuisance=args.nuisance,
    )
    counts = {}
    for r in records:
        counts[r.split] = counts.get(r.split, 0) + 1
    by_split = ", ".join(f"{n} {s}" for s, n in sorted(counts.items()))
    print(f"wrote {len(records)} images ({by_split}) under {args.out}")
    print(f"manifest: {Path(args.out) / 'manifest.jsonl'}")
    return EXIT_OK


def _init_vlad(model, pool, root, size_hw, cfg):
    """Calibrate the backbone statistics on a few training images and
    cluster their local descriptors into the starting centers."""
    import numpy as np

    from .images import load_image_chw
    from .netvlad import init_vlad_params, kmeans_init
    from .tensor import Tensor, l2_normalize, no_grad
    from .training import calibrate_batchnorm

    subset = pool[:: max(1, len(pool) // cfg.init_images)][: cfg.init_images]
    batches = []
    for start in range(0, len(subset), 8):
        batches.append(
            np.stack(
                [load_image_chw(Path(root) / r.image, size_hw) for r in subset[start : start + 8]]
            )
        )
    calibrate_batchnorm(model, batches)
    rows = []
    with no_grad():
        for batch in batches:
            fmap = model(Tensor(batch), training=False).data
            n, d = fmap.shape[0], fmap.shape[1]
            rows.append(fmap.transpose(0, 2, 3, 1).reshape(n * fmap.shape[2] * fmap.shape[3], d))
    descriptors = np.concatenate(rows, axis=0).astype(np.float64)
    with no_grad():
        descriptors = l2_normalize(Tensor(descriptors), axis=1).data
    if len(descriptors) < 2 * cfg.k:
        print(
            f"warning: {len(descriptors)} local descriptors for k={cfg.k} centers; "
            "residuals start near zero, training may be unstable "
            "(use more or larger init images, or a smaller k)",
            file=sys.stderr,
        )
    centers = kmeans_init(descriptors, cfg.k, seed=cfg.seed)
    return init_vlad_params(centers, sample=descriptors)


def cmd_train(args) -> int:
    cfg = merge_run_config(args)
    import numpy as np

    from .ghostnet import GhostCNN, default_table1_config
    from .netvlad import fit_pca_whitening
    from .retrieval import load_manifest
    from .training import SgdConfig, Trainer, TripletLossConfig

    size_hw = parse_size(cfg.size)
    records = load_manifest(cfg.manifest)
    root = Path(cfg.manifest).parent
    splits = {r.split for r in records}
    pool = _split_records(records, "train" if "train" in splits else "db")

    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text(), encoding="utf-8")

    model = GhostCNN(default_table1_config(cfg.scheme, cfg.multiplier), seed=cfg.seed)
    print(f"initializing {cfg.k} centers from {min(cfg.init_images, len(pool))} images", file=sys.stderr)
    vlad = _init_vlad(model, pool, root, size_hw, cfg)

    trainer = Trainer(
        model,
        vlad,
        pool,
        root,
        size_hw,
        loss_cfg=TripletLossConfig(
            margin=cfg.margin,
            negatives_per_tuple=cfg.negatives,
            positive_radius_m=cfg.positive_radius,
            negative_radius_m=cfg.negative_radius,
            candidate_pool=cfg.candidate_pool,
        ),
        sgd_cfg=SgdConfig(
            learning_rate=cfg.learning_rate,
            momentum=cfg.momentum,
            weight_decay=cfg.weight_decay,
            batch_size=cfg.batch_size,
        ),
        seed=cfg.seed,
        out_dir=out_dir,
    )
    history = trainer.fit(cfg.epochs)

    pca = None
    if cfg.reduction > 0:
        _, pool_index = _descriptor_matrix(pool, root, size_hw, model, vlad, None)
        pca = fit_pca_whitening(pool_index.descriptors.astype(np.float64), cfg.reduction)
    meta = {
        "arch": "ghostcnn-netvlad",
        "scheme": cfg.scheme,
        "multiplier": cfg.multiplier,
        "k": cfg.k,
        "reduction": cfg.reduction,
        "input_size": cfg.size,
        "seed": cfg.seed,
    }
    final = out_dir / "final.gdnv"
    save_pipeline(final, model, vlad, meta, pca=pca, optimizer=trainer.optimizer)
    if history:
        last = history[-1]
        print(f"trained {len(history)} epochs, final mean loss {last.mean_loss:.6f}, checkpoint {final}")
    else:
        print(f"trained 0 epochs (initialized pipeline only), checkpoint {final}")
    return EXIT_OK


def cmd_extract(args) -> int:
    from .checkpoint import save_arrays
    from .images import load_image_chw
    from .netvlad import global_descriptor

    model, vlad, pca, meta = load_pipeline(args.checkpoint)
    size_hw = parse_size(args.size or meta["input_size"])
    image = load_image_chw(args.image, size_hw)
    descriptor = global_descriptor(image[None], model, vlad, pca)[0]
    if args.out:
        save_arrays(args.out, {"descriptor": descriptor})
        print(f"descriptor ({descriptor.shape[0]} dims) written to {args.out}")
    else:
        print(" ".join(f"{v:.8g}" for v in descriptor))
    return EXIT_OK


def cmd_index(args) -> int:
    from .retrieval import load_manifest

    model, vlad, pca, meta = load_pipeline(args.checkpoint)
    size_hw = parse_size(args.size or meta["input_size"])
    records = load_manifest(args.manifest)
    chosen = _split_records(records, args.split)
    _, index = _descriptor_matrix(chosen, Path(args.manifest).parent, size_hw, model, vlad, pca)
    index.save(args.out)
    print(f"indexed {len(index)} images ({index.dim} dims) from split {args.split!r} into {args.out}")
    return EXIT_OK


def cmd_query(args) -> int:
    from .images import load_image_chw
    from .netvlad import global_descriptor
    from .retrieval import DescriptorIndex, query_topn

    model, vlad, pca, meta = load_pipeline(args.checkpoint)
    index = DescriptorIndex.load(args.index)
    size_hw = parse_size(args.size or meta["input_size"])
    image = load_image_chw(args.image, size_hw)
    descriptor = global_descriptor(image[None], model, vlad, pca)[0]
    for rank, (record_id, distance) in enumerate(query_topn(index, descriptor, args.topn), 1):
        print(f"{rank}\t{record_id}\t{distance:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .retrieval import DescriptorIndex, load_manifest, recall_at_n

    model, vlad, pca, meta = load_pipeline(args.checkpoint)
    index = DescriptorIndex.load(args.index)
    size_hw = parse_size(args.size or meta["input_size"])
    records = load_manifest(args.manifest)
    queries = _split_records(records, args.split)
    at = parse_at(args.at)
    ordered, qindex = _descriptor_matrix(queries, Path(args.manifest).parent, size_hw, model, vlad, pca)
    recalls = recall_at_n(ordered, qindex.descriptors, index, records, args.tolerance, at=at)
    for n in at:
        print(f"recall@{n}\t{recalls[n]:.4f}")
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv = "n,recall\n" + "".join(f"{n},{recalls[n]:.6f}\n" for n in at)
        (out_dir / "recall.csv").write_text(csv, encoding="utf-8")
        from .figures import recall_curve_figure

        figure = recall_curve_figure({"eval": recalls}, out_dir / "recall.png", tolerance_m=args.tolerance)
        print(f"wrote {out_dir / 'recall.csv'} and {figure}", file=sys.stderr)
    return EXIT_OK


def _cost_report(arch: str, size_hw, k: int, multiplier: float, scheme: str):
    from .costmodel import ghostcnn_netvlad_spec, model_cost, vgg16_netvlad_spec
    from .ghostnet import default_table1_config

    input_hw = (size_hw[0], size_hw[1])
    if arch == "ghostcnn-netvlad":
        spec = ghostcnn_netvlad_spec(
            config=default_table1_config(scheme, multiplier), input_hw=input_hw, k=k
        )
    else:
        spec = vgg16_netvlad_spec(input_hw=input_hw, k=k)
    return model_cost(spec)


def cmd_cost(args) -> int:
    for name in (args.arch, args.baseline):
        if name is not None and name not in _ARCH_NAMES:
            raise ValueError(f"unknown architecture {name!r}; choose from {', '.join(_ARCH_NAMES)}")
    size_hw = parse_size(args.input)
    report = _cost_report(args.arch, size_hw, args.k, args.multiplier, args.scheme)
    print(report.render_text())
    payload = {"report": report.to_json_dict()}
    comparison = None
    baseline = None
    if args.baseline:
        from .costmodel import compare_costs

        baseline = _cost_report(args.baseline, size_hw, args.k, args.multiplier, args.scheme)
        comparison = compare_costs(baseline, report)
        print()
        print(baseline.render_text())
        print()
        print(comparison.render_text())
        payload = {
            "report": report.to_json_dict(),
            "baseline": baseline.to_json_dict(),
            "comparison": comparison.to_json_dict(),
        }
    if args.out:
        import json

        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "cost.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        written = [str(out_dir / "cost.json")]
        if baseline is not None:
            from .figures import cost_comparison_figure

            written.append(str(cost_comparison_figure(baseline, report, out_dir / "cost.png")))
        print(f"wrote {' and '.join(written)}", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verification import CHECKS, GRADCHECK_TOLERANCE

    failed = []
    for name, fn in CHECKS:
        err = fn(args.seed)
        ok = err <= GRADCHECK_TOLERANCE
        if not ok:
            failed.append(name)
        print(f"{name:18s} {err:.3e}  {'ok' if ok else 'FAIL'}")
    print(f"tolerance {GRADCHECK_TOLERANCE:.0e}, {len(CHECKS) - len(failed)}/{len(CHECKS)} passed")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch


def _add_checkpoint_size(sub):
    sub.add_argument("--checkpoint", required=True, help="pipeline checkpoint (.gdnv)")
    sub.add_argument("--size", default=None, help="input size WxH (default: checkpoint's)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ghostvlad",
        description="Lightweight ghost-module CNN + NetVLAD place recognition toolkit.",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        metavar="N",
        help="cap BLAS worker threads (must precede numpy's first import to take effect)",
    )
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")

    sub = commands.add_parser("synth", help="generate a synthetic geotagged dataset")
    sub.add_argument("--places", type=int, required=True)
    sub.add_argument("--views", type=int, required=True)
    sub.add_argument("--spacing", type=float, default=100.0, help="distance between places in meters")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--size", default="128x96", help="image size WxH")
    sub.add_argument(
        "--nuisance",
        type=float,
        default=0.5,
        help="view jitter strength in [0, 1]; 1 is the harshest crop/photometric jitter",
    )
    sub.add_argument("--out", required=True, help="output directory")
    sub.set_defaults(func=cmd_synth)

    sub = commands.add_parser("train", help="train the backbone + VLAD end to end")
    sub.add_argument("--config", default=None, help="key=value config file; flags override it")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        sub.add_argument(flag, type={"str": str, "float": float, "int": int}[f.type], default=None)
    sub.set_defaults(func=cmd_train)

    sub = commands.add_parser("extract", help="single-image global descriptor")
    _add_checkpoint_size(sub)
    sub.add_argument("--image", required=True, help="PPM P6 image path")
    sub.add_argument("--out", default=None, help="write the descriptor to this .gdnv file")
    sub.set_defaults(func=cmd_extract)

    sub = commands.add_parser("index", help="build a descriptor index for one split")
    _add_checkpoint_size(sub)
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--split", default="db")
    sub.add_argument("--out", required=True, help="index file (.gdnv)")
    sub.set_defaults(func=cmd_index)

    sub = commands.add_parser("query", help="rank an index against one query image")
    _add_checkpoint_size(sub)
    sub.add_argument("--index", required=True)
    sub.add_argument("--image", required=True)
    sub.add_argument("--topn", type=int, default=5)
    sub.set_defaults(func=cmd_query)

    sub = commands.add_parser("eval", help="recall@N over a query split")
    _add_checkpoint_size(sub)
    sub.add_argument("--index", required=True)
    sub.add_argument("--manifest", required=True)
    sub.add_argument("--split", default="query")
    sub.add_argument("--tolerance", type=float, default=25.0, help="hit radius in meters")
    sub.add_argument("--at", default="1,5,10,20,25")
    sub.add_argument("--out", default=None, help="directory for recall.csv + recall.png")
    sub.set_defaults(func=cmd_eval)

    sub = commands.add_parser("cost", help="analytical MACs/FLOPs/parameter report")
    sub.add_argument("--arch", default="ghostcnn-netvlad", help="|".join(_ARCH_NAMES))
    sub.add_argument("--baseline", default=None, help="second architecture to compare against")
    sub.add_argument("--input", default="640x480", help="input size WxH")
    sub.add_argument("--k", type=int, default=64)
    sub.add_argument("--multiplier", type=float, default=1.0)
    sub.add_argument("--scheme", default="1", help="dilation scheme, e.g. 1, 2, 5-2")
    sub.add_argument("--out", default=None, help="directory for cost.json + cost.png")
    sub.set_defaults(func=cmd_cost)

    sub = commands.add_parser("gradcheck", help="finite-difference verification suite")
    sub.add_argument("--seed", type=int, default=0)
    sub.set_defaults(func=cmd_gradcheck)

    return parser


def _apply_thread_env(argv):
    """Honor --threads before anything imports numpy."""
    value = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            value = argv[i + 1]
        elif arg.startswith("--threads="):
            value = arg.split("=", 1)[1]
    if value is not None and value.isdigit() and int(value) > 0:
        for var in _THREAD_VARS:
            os.environ[var] = value


def dispatch(argv) -> int:
    _apply_thread_env(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage problems
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except Exception as exc:
        from .training import NumericalError

        if isinstance(exc, NumericalError):
            print(f"numerical failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc, (ValueError, OSError, KeyError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


def entry():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    entry()
