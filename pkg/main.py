import argparse
import dataclasses
import json
import logging
import os
import re
import sys

import numpy as np

from src.anchors.kmeans import AnchorSet, kmeans_fit
from src.loss.objective import LossConfig
from src.model.checkpoint import load_checkpoint
from src.model.config import ModelConfig, count_parameters
from src.model.network import build_model, predict
from src.pipeline.evaluator import DEFAULT_IOU_THRESHOLD, detect_dataset, evaluate_map
from src.pipeline.experiments import PRESETS, ExperimentConfig, run_experiment
from src.pipeline.sampling import sample_training_stack
from src.pipeline.trainer import TrainConfig, model_gradient_check, train
from src.report import generator
from src.synthvid.dataset_io import export_dataset, load_dataset, read_annotations, read_ppm
from src.synthvid.generator import SceneSpec, SequenceSample, build_benchmark
from src.tensor.core import Tensor
from src.utils import data_manager
from src.utils.config import DEFAULT_CONFIG_PATH, from_dict, load_config
from src.utils.errors import (CheckpointError, ConfigError, DatasetError, DetNetError, NumericError)

logger = logging.getLogger("detnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOLERANCE = 1e-5


class CliParser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; detnet reserves 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def setup_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _section(config, name, cls):
    """Builds a config dataclass from one section of a loaded file (or from the whole file)."""
    if name in config and isinstance(config[name], dict):
        return from_dict(cls, config[name])
    known = {f for f in cls.__dataclass_fields__}
    if config and set(config) <= known:
        return from_dict(cls, config)
    return cls()


def _load(path):
    if path:
        return load_config(path)
    if os.path.exists(DEFAULT_CONFIG_PATH):
        return load_config(DEFAULT_CONFIG_PATH)
    return {}


def _progress(args):
    return not args.quiet and sys.stderr.isatty()


def cmd_generate(args):
    print("--- Generating synthetic video benchmark ---")
    config = _load(args.spec)
    spec = _section(config, "scene", SceneSpec)
    master_seed = spec.seed if args.master_seed is None else args.master_seed
    mix = args.mix or {spec.scenario: 1.0}
    samples = build_benchmark(args.sequences, mix, master_seed, spec, args.workers, _progress(args))
    export_dataset(samples, args.out, metadata={"mix": mix, "master_seed": master_seed})
    counts = {}
    for s in samples:
        counts[s.scenario] = counts.get(s.scenario, 0) + 1
    print(f"Saved {len(samples)} sequences to {args.out}")
    for scenario, n in sorted(counts.items()):
        print(f"- {scenario}: {n}")
    return EXIT_OK


def cmd_anchors(args):
    print("--- Clustering anchor priors ---")
    table = read_annotations(args.ann)
    dims = np.array([[b.w, b.h] for frames in table.values() for boxes in frames.values() for b in boxes])
    if len(dims) == 0:
        raise DatasetError(f"{args.ann}: no boxes to cluster")
    result = kmeans_fit(dims / args.stride, k=args.k, seed=args.seed, n_init=args.n_init)
    print(f"Clustered {len(dims)} boxes into {args.k} priors (mean 1-IoU {result.objective:.4f}, "
          f"{result.iterations} iterations)")
    for p in result.anchors:
        print(f"- {p.p_w:.3f} x {p.p_h:.3f} cells")
    text = result.anchors.to_json(args.stride)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
        print(f"Anchors saved to {args.out}")
    else:
        print(text)
    return EXIT_OK


def _model_config(config, anchors_path=None):
    cfg = _section(config, "model", ModelConfig)
    if anchors_path:
        with open(anchors_path, "r", encoding="utf-8") as f:
            anchors, stride = AnchorSet.from_json(f.read())
        if stride is not None and stride != cfg.stride:
            raise ConfigError(f"{anchors_path}: anchors were clustered at stride {stride}, model stride is {cfg.stride}")
        cfg = cfg.replace(priors=tuple((p.p_w, p.p_h) for p in anchors), num_anchors=len(anchors))
    return cfg


def cmd_train(args):
    print("--- Training ---")
    config = _load(args.config)
    model_cfg = _model_config(config, args.anchors)
    train_cfg = _section(config, "train", TrainConfig)
    loss_cfg = _section(config, "loss", LossConfig)
    if args.epochs:
        train_cfg = train_cfg.replace(epochs=args.epochs, lr_boundary=min(train_cfg.lr_boundary, args.epochs))
    dataset = load_dataset(args.data)
    model = build_model(model_cfg, seed=args.seed)
    print(f"Model: {model_cfg.temporal_mode}, {count_parameters(model_cfg)} parameters, stride {model_cfg.stride}")
    result = train(model, dataset, train_cfg, loss_cfg, out_dir=args.out, progress=_progress(args))
    print(f"Finished {result.steps} steps; final loss {result.final_loss:.6f}")
    print(f"Checkpoint saved to {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args):
    print("--- Evaluating ---")
    model = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    found = detect_dataset(model, dataset, score_thresh=args.score_thresh, nms_thresh=args.nms_thresh,
                           frame_step=args.frame_step, workers=args.workers, progress=_progress(args))
    report = evaluate_map(found["detections"], found["gts"], args.iou, scenarios=found["scenarios"],
                          interpolation=args.interpolation, num_classes=model.cfg.num_classes)
    print(f"mAP@{args.iou:g}: {report.mean_ap:.4f} over {report.num_frames} frames")
    for scenario, value in report.scenarios.items():
        print(f"- {scenario}: {value:.4f}")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2)
        print(f"Report saved to {args.report}")
    if args.pr:
        report.pr_frame().to_csv(args.pr, index=False)
        print(f"PR curve saved to {args.pr}")
    if args.plot:
        generator.plot_pr_curves(report.pr_frame(), args.plot)
    return EXIT_OK


def _read_sequence_dir(path):
    if not os.path.isdir(path):
        raise DatasetError(f"sequence directory not found: {path}")
    names = sorted(n for n in os.listdir(path) if re.fullmatch(r"frame_\d+\.ppm", n))
    if not names:
        raise DatasetError(f"{path}: no frame_*.ppm files")
    frames = np.stack([read_ppm(os.path.join(path, n)) for n in names])
    return SequenceSample(Tensor.wrap(frames), [[] for _ in names], "unknown", 0)


def cmd_predict(args):
    print("--- Predicting ---")
    model = load_checkpoint(args.ckpt)
    sequence = _read_sequence_dir(args.seq)
    seq_name = os.path.basename(os.path.normpath(args.seq))
    lines = []
    for ref in range(sequence.num_frames):
        stack = sample_training_stack(sequence, ref, num_frames=model.cfg.frames, train=False)
        dets = predict(model, stack.frames[None].astype(model.dtype), args.score_thresh, args.nms_thresh)[0]
        lines.append(json.dumps({"seq": seq_name, "frame": ref, "boxes": [d.to_dict() for d in dets]}))
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    print(f"Saved detections for {len(lines)} frames to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    print("--- Gradient check ---")
    config = _load(args.config)
    model_cfg = _section(config, "model", ModelConfig)
    if args.activation:
        model_cfg = model_cfg.replace(activation=args.activation)
    loss_cfg = dataclasses.replace(_section(config, "loss", LossConfig), objectness_target="fixed")
    error = model_gradient_check(model_cfg, loss_cfg, seed=args.seed, epsilon=args.epsilon, max_coords=args.coords)
    print(f"Max relative error: {error:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    if not error < GRADCHECK_TOLERANCE:
        raise NumericError(f"gradient check failed: max relative error {error:.3e}")
    print("Gradient check passed.")
    return EXIT_OK


def cmd_experiment(args):
    print(f"--- Experiment: {args.preset} ---")
    config = _load(args.config)
    exp = _section(config, "experiment", ExperimentConfig)
    overrides = {}
    if args.sequences:
        overrides["sequences"] = args.sequences
    if args.epochs:
        overrides["epochs"] = args.epochs
    if args.seeds:
        overrides["seeds"] = tuple(args.seeds)
    if overrides:
        exp = dataclasses.replace(exp, **overrides)
    if args.out:
        out_dir = args.out
    else:
        data_manager.setup_directories()
        out_dir = os.path.join(data_manager.RUNS_DIR, args.preset)
    table = run_experiment(args.preset, exp, out_dir=out_dir, progress=_progress(args))
    print(table.to_markdown(index=False, floatfmt=".4f"))
    report_path = os.path.join(out_dir, f"{args.preset}.md")
    generator.generate_experiment_report(table, report_path, args.preset,
                                         settings={"Sequences": exp.sequences, "Epochs": exp.epochs,
                                                   "Seeds": list(exp.seeds)})
    return EXIT_OK


def cmd_report(args):
    print("--- Generating report ---")
    if not os.path.exists(args.eval):
        raise FileNotFoundError(f"evaluation report not found: {args.eval}")
    with open(args.eval, "r", encoding="utf-8") as f:
        report = json.load(f)
    generator.generate_eval_report(report, args.out, lang=args.lang)
    return EXIT_OK


def build_parser():
    parser = CliParser(prog="detnet", description="Video vehicle detection with 3D convolutional temporal fusion.")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    parser.add_argument("--quiet", action="store_true", help="warnings only, no progress bars")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p = sub.add_parser("generate", help="render a synthetic video benchmark")
    p.add_argument("--spec", help="scene spec file (YAML/JSON, optionally under a 'scene' key)")
    p.add_argument("--out", required=True)
    p.add_argument("-n", "--sequences", type=int, default=1)
    p.add_argument("--mix", help="scenario mix name (standard, blur_heavy, clean); default is the spec scenario only")
    p.add_argument("--master-seed", type=int, help="defaults to the spec seed")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("anchors", help="cluster box extents into anchor priors")
    p.add_argument("--ann", required=True, help="annotations.jsonl")
    p.add_argument("-k", type=int, default=5)
    p.add_argument("--stride", type=int, default=8, help="pixels per grid cell")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-init", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--anchors", help="anchors JSON written by 'detnet anchors'")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, default=0, help="parameter initialisation seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="compute mAP of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iou", type=float, default=DEFAULT_IOU_THRESHOLD)
    p.add_argument("--interpolation", choices=["all_point", "eleven_point"], default="all_point")
    p.add_argument("--score-thresh", type=float, default=0.01)
    p.add_argument("--nms-thresh", type=float, default=0.45)
    p.add_argument("--frame-step", type=int, default=1)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", help="report JSON path")
    p.add_argument("--pr", help="precision-recall CSV path")
    p.add_argument("--plot", help="precision-recall PNG path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="detect objects in every frame of a sequence directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--score-thresh", type=float, default=0.5)
    p.add_argument("--nms-thresh", type=float, default=0.45)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of model and loss gradients")
    p.add_argument("--config")
    p.add_argument("--activation", choices=["leaky_relu", "logistic"], default="logistic")
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("experiment", help="run an experiment preset")
    p.add_argument("--preset", choices=PRESETS, required=True)
    p.add_argument("--config")
    p.add_argument("--sequences", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="render a markdown report from an evaluation JSON")
    p.add_argument("--eval", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--lang", choices=["EN", "KO"], default="EN")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, FileNotFoundError) as e:
        print(f"Data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"Numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DetNetError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
