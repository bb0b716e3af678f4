"""Command-line entry points for the full pipeline.

Subcommands: synth, train, infer, postprocess, quantify, eval, ci,
summary, serve, workflow. Every subcommand accepts --seed, --precision
{f32,f64}, and --config <ini-file> (sections [model], [train],
[workflow] supply defaults that explicit flags override).

Report-producing commands write delimited output plus a rendered PNG
figure next to it.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
from pathlib import Path

import numpy as np

from . import data, maskops, tensor
from .errors import CxrsegError
from .metrics import CIParams, confidence_radius, evaluate_run, format_report_table
from .models import ModelConfig, build_model, forward, model_summary
from .quantify import run_pipeline
from .tensor import Tensor
from .training import TrainConfig, train


def load_config(path) -> dict:
    parser = configparser.ConfigParser()
    parser.read(path)
    return {section: dict(parser[section]) for section in parser.sections()}


def _cfg(args, section: str, key: str, fallback, cast=None):
    """Flag value if given, else config-file value, else fallback."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    raw = args.config_values.get(section, {}).get(key)
    if raw is None:
        return fallback
    return (cast or type(fallback))(raw) if fallback is not None else (cast or str)(raw)


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        arch=_cfg(args, "model", "arch", "unet"),
        depth=_cfg(args, "model", "depth", 3),
        base_channels=_cfg(args, "model", "base_channels", 8),
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        alpha=_cfg(args, "train", "alpha", 1e-4),
        batch_size=_cfg(args, "train", "batch_size", 4),
        max_epochs=_cfg(args, "train", "max_epochs", 40),
        seed=args.seed,
        precision=args.precision,
    )


def cmd_synth(args) -> int:
    manifest = data.synth_generate(args.n, args.size, args.seed, args.out)
    print(manifest)
    return 0


def cmd_train(args) -> int:
    from . import reporting

    records = data.load_manifest(args.manifest)
    samples = data.load_samples(records, kind=args.kind)
    rng = np.random.default_rng(args.seed)
    order = rng.permutation(len(samples))
    n_val = max(1, round(args.val_fraction * len(samples)))
    val_set = [samples[i] for i in order[:n_val]]
    train_set = [samples[i] for i in order[n_val:]]

    model = build_model(_model_config(args), seed=args.seed)
    result = train(model, train_set, val_set, _train_config(args))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data.save_weights(model, out / "weights.segw")
    reporting.write_history_tsv(result.history, out / "history.tsv")
    reporting.plot_history(result.history, out / "curves.png")
    last = result.history[-1]
    print(
        f"stopped at epoch {result.stopped_epoch} (best {result.best_epoch}); "
        f"val loss {result.best_val_loss:.6f}, last val DSC {last.val_dsc:.4f}"
    )
    print(out / "weights.segw")
    return 0


def cmd_infer(args) -> int:
    model = data.load_weights(args.weights)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = data.load_manifest(args.manifest)
    for record in records:
        image = data.read_image(record.image)
        if args.size and image.shape != (args.size, args.size):
            image = data.resize(image, args.size)
        probs = forward(model, Tensor(image[None, None, :, :] / 255.0)).data[0]
        np.save(out / f"{record.id}.npy", probs)
        data.write_mask(out / f"{record.id}.pgm", maskops.threshold(probs))
    print(f"wrote {len(records)} probability maps to {out}")
    return 0


def cmd_postprocess(args) -> int:
    probs = np.load(args.probs)
    if args.kind == "lung":
        mask = maskops.postprocess_lung(probs)
    else:
        lung = data.read_mask(args.lung_mask)
        mask = maskops.postprocess_infection(probs, lung, remove_small=args.remove_small)
    data.write_mask(args.out, mask)
    print(args.out)
    return 0


def cmd_quantify(args) -> int:
    from . import reporting

    image = data.read_image(args.image)
    lung_model = data.load_weights(args.lung_weights)
    inf_model = data.load_weights(args.inf_weights)
    if args.size and image.shape != (args.size, args.size):
        image = data.resize(image, args.size)
    report = run_pipeline(
        image, lung_model, inf_model, mode=args.mode, case_id=Path(args.image).stem
    )
    print(json.dumps(report.to_dict(), indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
        x = image.astype(np.float64) / 255.0
        lung_probs = forward(lung_model, Tensor(x[None, None])).data[0]
        lung_mask = maskops.postprocess_lung(lung_probs)
        inf_input = x * lung_mask if args.mode == "cascaded" else x
        inf_probs = forward(inf_model, Tensor(inf_input[None, None])).data[0]
        infection = maskops.postprocess_infection(inf_probs, lung_mask)
        title = f"{report.detection} / {report.overall_pct:.1f}% infected"
        reporting.render_overlay(image, lung_mask, infection, out / "overlay.png", title=title)
    return 0


def cmd_eval(args) -> int:
    from . import reporting

    records = data.load_manifest(args.manifest)
    pred_dir = Path(args.pred_dir)
    if args.task == "detection":
        preds, gts = {}, {}
        for record in records:
            mask = data.read_mask(pred_dir / f"{record.id}.pgm")
            preds[record.id] = int(mask.any())
            gts[record.id] = int(record.cls == "covid")
    else:
        kind = "lung_mask" if args.task == "lung_seg" else "infection_mask"
        preds, gts = {}, {}
        for record in records:
            preds[record.id] = data.read_mask(pred_dir / f"{record.id}.pgm")
            gt_path = getattr(record, kind)
            gts[record.id] = (
                data.read_mask(gt_path)
                if gt_path
                else np.zeros_like(preds[record.id])
            )
    report = evaluate_run(preds, gts, args.task, model=args.label, averaging=args.averaging)
    print(format_report_table([report]))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        reporting.write_metrics_tsv([report], out / "metrics.tsv")
        reporting.plot_metrics([report], out / "metrics.png")
    return 0


def cmd_ci(args) -> int:
    radius = confidence_radius(args.metric, CIParams(n=args.n, z=args.z))
    print(f"{radius:.4f}")
    return 0


def cmd_summary(args) -> int:
    from . import reporting  # noqa: F401  (figure path shares the import)
    import matplotlib.pyplot as plt

    size = args.size
    rows = []
    if args.weights:
        models = [data.load_weights(w) for w in args.weights]
        names = [Path(w).stem for w in args.weights]
    else:
        configs = [ModelConfig(a, _cfg(args, "model", "depth", 3),
                               _cfg(args, "model", "base_channels", 8))
                   for a in ("unet", "unetpp", "fpn")]
        models = [build_model(c, seed=args.seed) for c in configs]
        names = [c.arch for c in configs]
    timing = Tensor(np.zeros((1, 1, size, size)))
    for name, model in zip(names, models):
        rec = model_summary(model, timing)
        rows.append((name, rec.param_count, rec.inference_ms))
        print(f"{name}\t{rec.param_count}\t{rec.inference_ms:.2f} ms")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["model\ttrainable_parameters\tinference_ms"]
        lines += [f"{n}\t{p}\t{t:.3f}" for n, p, t in rows]
        (out / "summary.tsv").write_text("\n".join(lines) + "\n")
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
        ax1.bar([r[0] for r in rows], [r[1] for r in rows], color="tab:blue")
        ax1.set_ylabel("trainable parameters")
        ax2.bar([r[0] for r in rows], [r[2] for r in rows], color="tab:orange")
        ax2.set_ylabel("inference ms / sample")
        fig.tight_layout()
        fig.savefig(out / "summary.png", dpi=120)
        plt.close(fig)
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.workdir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_workflow(args) -> int:
    from .errors import UsageError
    from .workflow import WorkflowEngine

    if args.action == "init":
        if not args.manifest:
            raise UsageError("workflow init needs --manifest")
        records = data.load_manifest(args.manifest)
        classes = {r.id: r.cls for r in records}
        image_refs = {r.id: str(r.image) for r in records if r.image}
        rng = np.random.default_rng(args.seed)
        ids = sorted(classes)
        pool_size = max(1, round(args.pool_fraction * len(ids)))
        pool = sorted(ids[i] for i in rng.choice(len(ids), size=pool_size, replace=False))
        log = Path(args.workdir) / "events.jsonl"
        log.parent.mkdir(parents=True, exist_ok=True)
        engine = WorkflowEngine(log_path=log)
        engine.init(classes, pool, seed=args.seed, image_refs=image_refs)
        print(f"initialized {log} with {len(ids)} items ({pool_size} in the stage II pool)")
        return 0
    log = Path(args.workdir) / "events.jsonl"
    engine = WorkflowEngine.from_log(log)
    if args.action == "status":
        print(json.dumps(engine.progress(), indent=2))
    else:  # replay-check
        replayed = WorkflowEngine.replay(engine.events)
        same = replayed.state.to_dict() == engine.state.to_dict()
        print(f"{len(engine.events)} events; replay {'consistent' if same else 'MISMATCH'}")
        if not same:
            return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--precision", choices=("f32", "f64"), default="f64")
    common.add_argument("--config", default=None, help="INI file with [model]/[train]/[workflow] sections")

    parser = argparse.ArgumentParser(prog="cxrseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="samples per class")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a segmentation model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", choices=("lung", "infection"), default="lung")
    p.add_argument("--arch", choices=("unet", "unetpp", "fpn"), default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--base-channels", dest="base_channels", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="run a model over a manifest")
    p.add_argument("--weights", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("postprocess", parents=[common], help="post-process a probability map")
    p.add_argument("--probs", required=True, help=".npy probability map")
    p.add_argument("--kind", choices=("lung", "infection"), default="lung")
    p.add_argument("--lung-mask", default=None, help="required for --kind infection")
    p.add_argument("--remove-small", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_postprocess)

    p = sub.add_parser("quantify", parents=[common], help="detect and quantify one radiograph")
    p.add_argument("--image", required=True)
    p.add_argument("--lung-weights", required=True)
    p.add_argument("--inf-weights", required=True)
    p.add_argument("--mode", choices=("parallel", "cascaded"), default="parallel")
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_quantify)

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--task", choices=("lung_seg", "infection_seg", "detection"), required=True)
    p.add_argument("--averaging", choices=("micro", "macro"), default="micro")
    p.add_argument("--label", default="")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ci", parents=[common], help="confidence radius for a metric")
    p.add_argument("--metric", type=float, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--z", type=float, default=1.96)
    p.set_defaults(func=cmd_ci)

    p = sub.add_parser("summary", parents=[common], help="parameter counts and timing")
    p.add_argument("--weights", nargs="*", default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--base-channels", dest="base_channels", type=int, default=None)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_summary)

    p = sub.add_parser("serve", parents=[common], help="run the annotation HTTP service")
    p.add_argument("--workdir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("workflow", parents=[common], help="inspect or seed a workflow log")
    p.add_argument("--action", choices=("init", "status", "replay-check"), required=True)
    p.add_argument("--workdir", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--pool-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_workflow)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    tensor.set_precision(args.precision)
    args.config_values = load_config(args.config) if args.config else {}
    try:
        return args.func(args)
    except CxrsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
