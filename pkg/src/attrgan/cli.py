"""Single command-line entry point for the full experiment pipeline.

Subcommands: gen-data, train-cls, train-reg, train-gan, eval, traverse,
sefa, report. Every run writes a RunRecord JSON next to its outputs; all
randomness flows from --seed. Exit codes: 0 success, 1 usage, 2 config
error, 3 data error, 4 numeric failure.

Environment overrides: ATTRGAN_OUT_ROOT prefixes relative output paths,
ATTRGAN_WORKERS sets the default worker count.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .core import ConfigError, ExperimentConfig, NumericError, RangeViolation

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _out_path(raw: str) -> Path:
    root = os.environ.get("ATTRGAN_OUT_ROOT")
    path = Path(raw)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _default_workers() -> int:
    return int(os.environ.get("ATTRGAN_WORKERS", "1"))


def _prepare_out(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"output {path} exists and is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)


def _file_sha(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_run_record(out_dir: Path, subcommand: str, args: argparse.Namespace,
                      inputs: dict, outputs: list[str], started: float) -> None:
    record = {
        "subcommand": subcommand,
        "argv": {k: v for k, v in vars(args).items() if k != "func"},
        "inputs": inputs,
        "outputs": outputs,
        "wall_time_s": round(time.time() - started, 3),
        "version": __version__,
    }
    (out_dir / "run_record.json").write_text(json.dumps(record, indent=1, default=str))


def _log(msg: str) -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .synthdata import generate_dataset

    started = time.time()
    out = _out_path(args.out)
    _prepare_out(out, args.force)
    manifest = generate_dataset(
        n=args.n, resolution=args.resolution, seed=args.seed, out_dir=out,
        view_distribution=args.view_dist, ingredient_p=args.ingredient_p,
        workers=args.workers,
    )
    _log(f"wrote {manifest.count} images at {manifest.resolution}^2 to {out}")
    _log(f"checksum {manifest.checksum}")
    _write_run_record(out, "gen-data", args, {}, ["manifest.jsonl"], started)
    return EXIT_OK


def cmd_train_cls(args) -> int:
    from .regularizers import save_classifier, train_ingredient_classifier
    from .synthdata import SceneDataset, load_manifest

    started = time.time()
    out = _out_path(args.out)
    _prepare_out(out, args.force)
    manifest = load_manifest(_out_path(args.data))
    dataset = SceneDataset(manifest)
    if args.limit:
        manifest_limited = manifest.records[:args.limit]
        import dataclasses as _dc
        dataset = SceneDataset(_dc.replace(manifest, records=manifest_limited,
                                           count=len(manifest_limited)))
    config = ExperimentConfig(image_resolution=dataset.resolution, random_seed=args.seed)
    model, val_map = train_ingredient_classifier(
        dataset, epochs=args.epochs, seed=args.seed, log=_log,
    )
    ckpt = out / "classifier.pt"
    save_classifier(ckpt, model, config, val_map)
    _log(f"classifier val mAP {val_map:.4f} -> {ckpt}")
    _write_run_record(out, "train-cls", args,
                      {"dataset_checksum": manifest.checksum},
                      ["classifier.pt"], started)
    return EXIT_OK


def cmd_train_reg(args) -> int:
    from .regularizers import save_regressor, train_view_regressor
    from .synthdata import SceneDataset, load_manifest

    started = time.time()
    out = _out_path(args.out)
    _prepare_out(out, args.force)
    manifest = load_manifest(_out_path(args.data))
    dataset = SceneDataset(manifest)
    config = ExperimentConfig(image_resolution=dataset.resolution, random_seed=args.seed)
    model, rmse = train_view_regressor(
        dataset, steps=args.steps, seed=args.seed, log=_log,
    )
    ckpt = out / "regressor.pt"
    save_regressor(ckpt, model, config, rmse)
    _log("regressor val RMSE " + ", ".join(f"{k}={v:.3f}" for k, v in rmse.items()))
    _write_run_record(out, "train-reg", args,
                      {"dataset_checksum": manifest.checksum},
                      ["regressor.pt"], started)
    return EXIT_OK


def cmd_pseudo_label(args) -> int:
    from .regularizers import load_regressor, pseudo_label_views
    from .synthdata import SceneDataset, attach_pseudo_views, load_manifest, write_manifest

    started = time.time()
    data = _out_path(args.data)
    manifest = load_manifest(data)
    regressor, _ = load_regressor(_out_path(args.reg))
    dataset = SceneDataset(manifest)
    pseudo = pseudo_label_views(regressor, dataset)
    updated = attach_pseudo_views(manifest, pseudo)
    write_manifest(updated, manifest.root / "manifest.jsonl")
    _log(f"imputed view labels for {manifest.count} samples in {manifest.root}")
    _write_run_record(manifest.root, "pseudo-label", args,
                      {"dataset_checksum": manifest.checksum}, ["manifest.jsonl"], started)
    return EXIT_OK


def cmd_train_gan(args) -> int:
    from .regularizers import load_classifier, load_regressor
    from .synthdata import SceneDataset, load_manifest
    from .training import init_train_state, load_train_state, train

    started = time.time()
    out = _out_path(args.out)
    resume_file = out / "train_state.pt"
    resuming = args.resume and resume_file.exists()
    if not resuming:
        _prepare_out(out, args.force)

    manifest = load_manifest(_out_path(args.data))
    dataset = SceneDataset(manifest)
    classifier, _ = load_classifier(_out_path(args.cls))
    regressor, _ = load_regressor(_out_path(args.reg))

    if resuming:
        state = load_train_state(resume_file)
        _log(f"resuming from step {state.step}")
    else:
        if args.config:
            config = ExperimentConfig.from_kv_text(Path(_out_path(args.config)).read_text())
        else:
            config = ExperimentConfig.desk_profile(seed=args.seed).replace(
                image_resolution=dataset.resolution
            )
        overrides = {}
        if args.batch_size:
            overrides["batch_size"] = args.batch_size
        if args.lambda_ingr is not None:
            overrides["lambda_ingr"] = args.lambda_ingr
        if args.lambda_view is not None:
            overrides["lambda_view"] = args.lambda_view
        if args.conditioning:
            overrides["conditioning"] = args.conditioning
        if args.view_labels:
            overrides["view_labels"] = args.view_labels
        overrides["random_seed"] = args.seed
        config = config.replace(**overrides)
        (out / "config.txt").write_text(config.to_kv_text())
        state = init_train_state(config)

    train(state, dataset, classifier, regressor, steps=args.steps, out_dir=out,
          checkpoint_every=args.checkpoint_every, log=_log)
    _log(f"trained to step {state.step}; checkpoints in {out}")
    _write_run_record(out, "train-gan", args, {
        "dataset_checksum": manifest.checksum,
        "classifier_sha": _file_sha(_out_path(args.cls)),
        "regressor_sha": _file_sha(_out_path(args.reg)),
    }, [f"ckpt_{state.step:07d}.pt", "metrics.jsonl"], started)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import (
        ConditionalResult,
        FeatureExtractor,
        conditional_metric,
        dependency_analysis,
        fid_from_features,
        generate_batch,
        heatmap_image,
        mean_ap,
        model_judge,
        oracle_judge,
        MetricsReport,
        view_rmse,
    )
    from .networks import load_generator
    from .regularizers import load_classifier, load_regressor, predict_ingredients
    from .synthdata import SceneDataset, load_manifest
    from .training import ConditioningSource

    started = time.time()
    out = _out_path(args.out)
    _prepare_out(out, args.force)
    manifest = load_manifest(_out_path(args.data))
    dataset = SceneDataset(manifest)
    classifier, cls_extra = load_classifier(_out_path(args.cls))
    regressor, reg_extra = load_regressor(_out_path(args.reg))
    generator, config, step = load_generator(_out_path(args.checkpoint))

    rng = np.random.Generator(np.random.Philox(key=args.seed))
    n_eval = min(args.samples, len(dataset))
    extractor = FeatureExtractor.from_classifier(classifier)

    _log(f"eval: checkpoint step {step}, {n_eval} samples")
    real_idx = rng.permutation(len(dataset))[:n_eval]
    real_images = dataset.image_batch(real_idx)
    real_features = extractor(real_images)

    # Real-vs-real floor from two disjoint halves.
    half = n_eval // 2
    fid_floor = fid_from_features(real_features[:half], real_features[half:2 * half])

    # Conditioning for fakes: real rows (ingredients + pseudo/oracle views).
    source = ConditioningSource(dataset, config)
    fake_idx = rng.integers(0, len(dataset), size=n_eval)
    fake_attrs = source.attrs[fake_idx].copy()
    fakes = generate_batch(generator, fake_attrs, rng)
    fake_features = extractor(fakes)
    fid_value = fid_from_features(real_features, fake_features)

    labels = fake_attrs[:, :10] >= 0.5
    per_cat, map_mean = mean_ap(predict_ingredients(classifier, fakes), labels, warn=_log)
    oracle_scores = oracle_judge(fakes)
    oracle_cat, oracle_mean = mean_ap(oracle_scores[:, :10], labels, warn=_log)

    intended_views = _denormalize_views(fake_attrs[:, 10:])
    rmse = view_rmse(regressor, fakes, intended_views)

    conditional: list[ConditionalResult] = []
    if not args.skip_conditional:
        pseudo = dataset.pseudo_views if dataset.pseudo_views is not None else dataset.views
        for attr_i, attr_name in enumerate(("angle", "scale", "dx", "dy")):
            for mode in ("targeting", "3sigma"):
                for metric in ("fid", "map"):
                    res = conditional_metric(
                        generator, attr_name, metric, range_mode=mode,
                        samples_per_value=args.cond_samples, seed=args.seed,
                        real_features=real_features, extractor=extractor,
                        classifier=classifier, source_attrs=source.attrs,
                        predicted_values=pseudo[:, attr_i],
                    )
                    conditional.append(res)
                    _log(f"c-{metric} {attr_name} [{mode}]: {res.average:.4f}")

    def render_fn(attrs: np.ndarray, rng2: np.random.Generator) -> np.ndarray:
        return generate_batch(generator, attrs, rng2)

    dep = dependency_analysis(model_judge(classifier, regressor), render_fn,
                              seed=args.seed, source_attrs=source.attrs)
    heatmap_image(dep.matrix, out / "dependency_heatmap.png")
    np.savetxt(out / "dependency_matrix.csv", dep.matrix, delimiter=",",
               header=",".join(map(str, range(14))))
    (out / "dependency_scatter.json").write_text(json.dumps(dep.scatter))

    report = MetricsReport(
        fid=fid_value,
        fid_floor=fid_floor,
        map_per_category=per_cat,
        map_mean=map_mean,
        oracle_map_per_category=oracle_cat,
        oracle_map_mean=oracle_mean,
        view_rmse=rmse,
        conditional=[c.to_dict() for c in conditional],
        dependency_diag_mean=float(np.mean(np.abs(dep.diagonal()))),
        dependency_offdiag_mean=float(np.mean(np.abs(dep.off_diagonal()))),
        provenance={
            "checkpoint": str(args.checkpoint),
            "checkpoint_sha": _file_sha(_out_path(args.checkpoint)),
            "checkpoint_step": step,
            "dataset_checksum": manifest.checksum,
            "classifier": str(args.cls), "classifier_val_map": cls_extra.get("val_map"),
            "regressor": str(args.reg), "regressor_val_rmse": reg_extra.get("val_rmse"),
            "extractor": extractor.name,
            "n_samples": int(n_eval),
            "cond_samples": int(args.cond_samples),
            "covariance_eps": 1e-6,
            "seed": int(args.seed),
        },
    )
    report.save(out / "metrics.json")
    _log(f"FID {fid_value:.3f} (floor {fid_floor:.3f}), mAP {map_mean:.4f} "
         f"(oracle {oracle_mean:.4f})")
    _log("view RMSE " + ", ".join(f"{k}={v:.2f}" for k, v in rmse.items()))
    _write_run_record(out, "eval", args, dict(report.provenance),
                      ["metrics.json", "dependency_heatmap.png"], started)
    return EXIT_OK


def _denormalize_views(norm: np.ndarray) -> np.ndarray:
    from .core import VIEW_NAMES, VIEW_RANGES

    out = np.empty_like(norm)
    for j, name in enumerate(VIEW_NAMES):
        lo, hi = VIEW_RANGES[name]
        out[:, j] = lo + (np.clip(norm[:, j], -1, 1) + 1.0) * (hi - lo) / 2.0
    return out


def cmd_traverse(args) -> int:
    from .evaluation import TraversalAxis, traversal_grid
    from .networks import load_generator

    started = time.time()
    out = _out_path(args.out)
    _prepare_out(out, args.force)
    generator, _, _ = load_generator(_out_path(args.checkpoint))
    axis = TraversalAxis(args.axis)
    path = out / f"traversal_{args.axis}.png"
    traversal_grid(generator, axis, steps=args.steps, rows=args.rows,
                   seed=args.seed, out_path=path)
    _log(f"wrote {path}")
    _write_run_record(out, "traverse", args,
                      {"checkpoint_sha": _file_sha(_out_path(args.checkpoint))},
                      [path.name, path.with_suffix(".json").name], started)
    return EXIT_OK


def cmd_sefa(args) -> int:
    import torch

    from .networks import load_generator, sefa_directions

    started = time.time()
    out = _out_path(args.out)
    _prepare_out(out, args.force)
    generator, config, _ = load_generator(_out_path(args.checkpoint))
    pairs = sefa_directions(generator, layer_range=args.layers, k=args.k)
    (out / "eigenvalues.json").write_text(json.dumps(
        [{"rank": i, "eigenvalue": ev} for i, (ev, _) in enumerate(pairs)], indent=1))

    rng = np.random.Generator(np.random.Philox(key=args.seed))
    from .evaluation import _sample_conditioning

    base = _sample_conditioning(rng, 1, None)[0]
    z = rng.standard_normal((1, config.noise_dim))
    res = config.image_resolution
    magnitudes = np.linspace(-args.magnitude, args.magnitude, args.steps)
    grid = np.zeros((args.k * res, args.steps * res, 3), dtype=np.float32)
    with torch.no_grad():
        for r, (_, direction) in enumerate(pairs):
            for c, mag in enumerate(magnitudes):
                raw = generator(
                    torch.as_tensor(base[None], dtype=torch.float32),
                    torch.as_tensor(z, dtype=torch.float32),
                    noise_mode="frozen",
                    style_offset=torch.as_tensor(mag * direction, dtype=torch.float32),
                )
                img = ((raw + 1) / 2).clamp(0, 1)[0].permute(1, 2, 0).numpy()
                grid[r * res:(r + 1) * res, c * res:(c + 1) * res] = img
    from PIL import Image

    path = out / f"sefa_{args.layers}.png"
    Image.fromarray(np.round(grid * 255).astype(np.uint8), "RGB").save(path)
    (out / f"sefa_{args.layers}.json").write_text(json.dumps({
        "layers": args.layers, "k": args.k, "magnitudes": magnitudes.tolist(),
        "base_attrs": base.tolist(), "seed": args.seed,
        "eigenvalues": [ev for ev, _ in pairs],
    }, indent=1))
    _log(f"wrote {path}")
    _write_run_record(out, "sefa", args,
                      {"checkpoint_sha": _file_sha(_out_path(args.checkpoint))},
                      [path.name], started)
    return EXIT_OK


def cmd_report(args) -> int:
    from .evaluation import MetricsReport

    started = time.time()
    out = _out_path(args.out)
    _prepare_out(out, args.force)
    rows = []
    missing = []
    for spec in args.runs:
        label, _, path = spec.partition("=")
        if not path:
            label, path = Path(spec).name, spec
        metrics_path = _out_path(path) / "metrics.json"
        if not metrics_path.exists():
            missing.append(str(metrics_path))
            continue
        rows.append((label, MetricsReport.load(metrics_path)))
    if missing:
        raise ConfigError("missing eval outputs: " + ", ".join(missing))
    if not rows:
        raise ConfigError("no eval outputs given")

    table_lines = [_report_header()]
    for label, rep in rows:
        table_lines.append(_report_row(label, rep))
    table = "\n".join(table_lines)
    (out / "summary.txt").write_text(table + "\n")
    (out / "summary.json").write_text(json.dumps(
        {label: json.loads(rep.to_json()) for label, rep in rows}, indent=1))
    print(table)

    _plot_conditional_curves(rows, out)
    _plot_losses(args, rows, out)
    _write_run_record(out, "report", args, {}, ["summary.txt", "summary.json"], started)
    return EXIT_OK


def _report_header() -> str:
    cols = ["run", "FID", "floor", "mAP", "mAP_orc", "RMSE_angle", "RMSE_scale",
            "RMSE_dx", "RMSE_dy", "avg_cFID", "avg_cFID_3s", "avg_cmAP", "avg_cmAP_3s"]
    return " | ".join(f"{c:>11s}" for c in cols)


def _report_row(label: str, rep) -> str:
    def fmt(v, nd=3):
        return f"{v:.{nd}f}" if isinstance(v, (int, float)) and v is not None else "-"

    cond = {"fid": {"targeting": [], "3sigma": []}, "map": {"targeting": [], "3sigma": []}}
    for c in rep.conditional:
        cond[c["metric"]][c["range_mode"]].append(c["average"])
    cells = [
        f"{label:>11s}", fmt(rep.fid), fmt(rep.fid_floor), fmt(rep.map_mean, 4),
        fmt(rep.oracle_map_mean, 4),
        fmt(rep.view_rmse.get("angle"), 2), fmt(rep.view_rmse.get("scale"), 3),
        fmt(rep.view_rmse.get("dx"), 2), fmt(rep.view_rmse.get("dy"), 2),
        fmt(np.mean(cond["fid"]["targeting"]) if cond["fid"]["targeting"] else None),
        fmt(np.mean(cond["fid"]["3sigma"]) if cond["fid"]["3sigma"] else None),
        fmt(np.mean(cond["map"]["targeting"]) if cond["map"]["targeting"] else None, 4),
        fmt(np.mean(cond["map"]["3sigma"]) if cond["map"]["3sigma"] else None, 4),
    ]
    return " | ".join(f"{c:>11s}" for c in cells)


def _plot_conditional_curves(rows, out: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for metric in ("fid", "map"):
        fig, axes = plt.subplots(1, 4, figsize=(16, 3.4))
        for ax, attr in zip(axes, ("angle", "scale", "dx", "dy")):
            for label, rep in rows:
                for c in rep.conditional:
                    if c["attr_name"] != attr or c["metric"] != metric:
                        continue
                    if c["range_mode"] != "targeting":
                        continue
                    ax.plot(c["grid"], c["per_value"], marker="o", label=label)
            ax.set_title(f"c-{metric.upper()} vs {attr}")
            ax.set_xlabel(attr)
        axes[0].set_ylabel(metric.upper())
        handles, labels = axes[0].get_legend_handles_labels()
        if handles:
            fig.legend(handles, labels, loc="upper right", fontsize=7)
        fig.tight_layout()
        fig.savefig(out / f"conditional_{metric}.png", dpi=130)
        plt.close(fig)


def _plot_losses(args, rows, out: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    logs = getattr(args, "loss_logs", None) or []
    if not logs:
        return
    fig, ax = plt.subplots(figsize=(8, 4))
    for spec in logs:
        label, _, path = spec.partition("=")
        if not path:
            label, path = Path(spec).parent.name, spec
        steps, gt, dt = [], [], []
        with open(_out_path(path)) as fh:
            for line in fh:
                rec = json.loads(line)
                steps.append(rec["step"]); gt.append(rec["g_total"]); dt.append(rec["d_total"])
        ax.plot(steps, gt, label=f"{label} G")
        ax.plot(steps, dt, label=f"{label} D", linestyle="--")
    ax.set_xlabel("step"); ax.set_ylabel("loss"); ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=130)
    plt.close(fig)


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attrgan",
                     description="Attribute-conditioned image synthesis pipeline")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-data", help="render a labeled synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--view-dist", choices=("uniform", "natural"), default="uniform")
    p.add_argument("--ingredient-p", type=float, default=0.3)
    p.add_argument("--workers", type=int, default=_default_workers())
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-cls", help="train the ingredient classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--limit", type=int, default=0, help="cap training samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_cls)

    p = sub.add_parser("train-reg", help="train the view regressor")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_reg)

    p = sub.add_parser("pseudo-label", help="impute view labels into a manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--reg", required=True)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("train-gan", help="adversarial training")
    p.add_argument("--data", required=True)
    p.add_argument("--cls", required=True)
    p.add_argument("--reg", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--batch-size", type=int, default=0)
    p.add_argument("--lambda-ingr", type=float, default=None)
    p.add_argument("--lambda-view", type=float, default=None)
    p.add_argument("--conditioning", choices=("multi_scale", "shared", "premap"),
                   default=None)
    p.add_argument("--view-labels", choices=("pseudo", "oracle"), default=None)
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("eval", help="full metrics report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--cls", required=True)
    p.add_argument("--reg", required=True)
    p.add_argument("--samples", type=int, default=2048)
    p.add_argument("--cond-samples", type=int, default=256)
    p.add_argument("--skip-conditional", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("traverse", help="render an attribute traversal grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--rows", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_traverse)

    p = sub.add_parser("sefa", help="closed-form latent directions + grids")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--layers", choices=("all", "bottom", "middle", "top"), default="all")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--steps", type=int, default=7)
    p.add_argument("--magnitude", type=float, default=8.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sefa)

    p = sub.add_parser("report", help="summarize eval outputs into tables/plots")
    p.add_argument("runs", nargs="+", help="label=path pairs of eval output dirs")
    p.add_argument("--loss-logs", nargs="*", default=None,
                   help="label=path pairs of metrics.jsonl logs")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, OSError, RangeViolation) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
