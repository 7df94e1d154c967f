"""Command line interface.

Subcommands mirror the pipeline stages: ``dataset gen``, ``train-classifier``,
``attack``, ``quantize``, ``detect train|eval``, ``report`` (full experiment
from a JSON config), and ``serve`` (a stdio gradient-exchange provider so a
subprocess endpoint can wrap the toy classifier or stand in for a real one).
Metrics sidecars are line-delimited JSON.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import harness
from .attacks import AttackConfig, run_attack
from .classifier import load_classifier, save_classifier, train_toy
from .detector import (
    evaluate_detector,
    load_detector,
    save_detector,
    train_detector,
)
from .image_core import ContinuousImage, read_png, read_tensor, write_png, write_tensor
from .providers import serve_stdio
from .quantizer import COST_MODELS, SearchConfig, post_process


def _write_jsonl(path, records):
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def _read_jsonl(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def cmd_dataset_gen(args):
    spec = harness.DatasetSpec(
        classes=args.classes,
        train=args.train,
        test=args.test,
        height=args.height,
        width=args.width,
        channels=args.channels,
    )
    images, labels = harness.generate_synthetic_dataset(spec, args.seed)
    harness.write_labeled_dir(os.path.join(args.out, "train"), images[: spec.train], labels[: spec.train])
    harness.write_labeled_dir(os.path.join(args.out, "test"), images[spec.train :], labels[spec.train :])
    print(f"wrote {spec.train} train / {spec.test} test images to {args.out}")


def cmd_train_classifier(args):
    _, images, labels = harness.read_labeled_dir(args.data)
    clf, acc = train_toy(
        images,
        labels,
        seed=args.seed,
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        hidden=args.hidden,
    )
    save_classifier(clf, args.out)
    print(f"training accuracy {acc:.4f}; saved classifier to {args.out}")


def cmd_attack(args):
    clf = load_classifier(args.model)
    names, images, labels = harness.read_labeled_dir(args.input)
    config = AttackConfig(
        kind=args.kind,
        max_iterations=args.max_iterations,
        eps_init=args.eps_init,
        growth=args.growth,
        refine_steps=args.refine_steps,
    )
    os.makedirs(args.out, exist_ok=True)
    records = []
    for name, image, label in zip(names, images, labels):
        label = int(label)
        if clf.predict_pixel(image).predicted_class != label:
            records.append({"image": name, "label": label, "skipped": "misclassified"})
            continue
        result = run_attack(clf, image, label, config)
        stem = os.path.splitext(name)[0]
        tensor_name = f"{stem}.xa.stga"
        write_tensor(os.path.join(args.out, tensor_name), result.x_a.values)
        records.append(
            {
                "image": name,
                "label": label,
                "tensor": tensor_name,
                "success": result.success,
                "l2": result.final_l2,
                "iterations": result.iterations_used,
                "c_a": result.c_a,
            }
        )
    _write_jsonl(os.path.join(args.out, "attack.jsonl"), records)
    n_ok = sum(1 for r in records if r.get("success"))
    print(f"attacked {len(records)} images, {n_ok} successes; results in {args.out}")


def cmd_quantize(args):
    clf = load_classifier(args.model)
    attack_rows = _read_jsonl(os.path.join(args.attack_out, "attack.jsonl"))
    search = SearchConfig(rel_tol=args.rel_tol, max_probes=args.max_probes)
    os.makedirs(args.out, exist_ok=True)
    records = []
    for row in attack_rows:
        if not row.get("success"):
            continue
        cover = read_png(os.path.join(args.input, row["image"]))
        x_a = ContinuousImage(
            np.clip(read_tensor(os.path.join(args.attack_out, row["tensor"])), 0.0, 255.0),
            "pixel",
        )
        result = post_process(cover, x_a, clf, row["label"], args.cost, args.d, search)
        out_name = os.path.splitext(row["image"])[0] + ".quant.png"
        write_png(result.i_q, os.path.join(args.out, out_name))
        records.append(
            {
                "image": row["image"],
                "quantized": out_name,
                "label": row["label"],
                "adversarial": result.adversarial,
                "lam": result.lam,
                "distortion": result.distortion,
                "l2": float(np.sqrt(np.sum(result.moves.astype(np.float64) ** 2))),
                "loss": result.loss,
                "network_calls": result.network_calls,
            }
        )
    _write_jsonl(os.path.join(args.out, "quantize.jsonl"), records)
    n_ok = sum(1 for r in records if r["adversarial"])
    print(f"quantized {len(records)} images under {args.cost} (d={args.d}), "
          f"{n_ok} stayed adversarial; results in {args.out}")


def _read_pairs(pairs_dir):
    cover_dir = os.path.join(pairs_dir, "cover")
    adv_dir = os.path.join(pairs_dir, "adv")
    names = sorted(n for n in os.listdir(cover_dir) if n.endswith(".png"))
    pairs = []
    for name in names:
        adv_path = os.path.join(adv_dir, name)
        if not os.path.exists(adv_path):
            raise FileNotFoundError(f"no adversarial counterpart for {name}")
        pairs.append((read_png(os.path.join(cover_dir, name)), read_png(adv_path)))
    return pairs


def cmd_detect_train(args):
    pairs = _read_pairs(args.pairs)
    det = train_detector(pairs, seed=args.seed, regularization=args.reg)
    save_detector(det, args.out)
    print(f"trained detector on {len(pairs)} pairs; saved to {args.out}")


def _read_dir_images(directory):
    return [
        read_png(os.path.join(directory, n))
        for n in sorted(os.listdir(directory))
        if n.endswith(".png")
    ]


def cmd_detect_eval(args):
    det = load_detector(args.model)
    covers = _read_dir_images(args.covers)
    advs = _read_dir_images(args.advs)
    report = evaluate_detector(det, covers, advs, fpr=args.fpr)
    out = {
        "tpr": report.tpr,
        "fpr": report.fpr,
        "covers": len(covers),
        "advs": len(advs),
    }
    print(json.dumps(out, sort_keys=True))
    if args.out:
        full = dict(out)
        full["roc"] = report.roc
        full["cover_scores"] = report.cover_scores.tolist()
        full["adv_scores"] = report.adv_scores.tolist()
        with open(args.out, "w") as f:
            json.dump(full, f, sort_keys=True, indent=2)


def cmd_report(args):
    with open(args.config) as f:
        config = harness.ExperimentConfig.from_json(f.read())
    report = harness.run_experiment(config, args.out)
    print(harness.format_report_table(report), end="")


def cmd_serve(args):
    clf = load_classifier(args.model)
    serve_stdio(clf, sys.stdin.buffer, sys.stdout.buffer)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stegadv")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dataset", help="synthetic corpus management")
    dsub = p.add_subparsers(dest="dataset_command", required=True)
    g = dsub.add_parser("gen", help="generate a labeled synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--train", type=int, default=260)
    g.add_argument("--test", type=int, default=200)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--channels", type=int, default=3)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_dataset_gen)

    t = sub.add_parser("train-classifier", help="train the toy classifier")
    t.add_argument("--data", required=True, help="directory with PNGs and labels.tsv")
    t.add_argument("--out", required=True)
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--epochs", type=int, default=150)
    t.add_argument("--learning-rate", type=float, default=0.05)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train_classifier)

    a = sub.add_parser("attack", help="run a best-effort attack over a directory")
    a.add_argument("--kind", choices=["fgsm", "pgd2"], default="pgd2")
    a.add_argument("--input", required=True)
    a.add_argument("--model", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--max-iterations", type=int, default=200)
    a.add_argument("--eps-init", type=float, default=1.0)
    a.add_argument("--growth", type=float, default=2.0)
    a.add_argument("--refine-steps", type=int, default=4)
    a.set_defaults(func=cmd_attack)

    q = sub.add_parser("quantize", help="post-process attacked images")
    q.add_argument("--cost", choices=list(COST_MODELS), required=True)
    q.add_argument("--d", type=int, default=2)
    q.add_argument("--attack-out", required=True, help="directory written by `attack`")
    q.add_argument("--input", required=True, help="cover directory used for the attack")
    q.add_argument("--model", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--rel-tol", type=float, default=1e-3)
    q.add_argument("--max-probes", type=int, default=40)
    q.set_defaults(func=cmd_quantize)

    d = sub.add_parser("detect", help="train or evaluate the detector")
    dsub2 = d.add_subparsers(dest="detect_command", required=True)
    dt = dsub2.add_parser("train")
    dt.add_argument("--pairs", required=True, help="directory with cover/ and adv/ PNGs")
    dt.add_argument("--out", required=True)
    dt.add_argument("--seed", type=int, default=0)
    dt.add_argument("--reg", type=float, default=1e-3)
    dt.set_defaults(func=cmd_detect_train)
    de = dsub2.add_parser("eval")
    de.add_argument("--model", required=True)
    de.add_argument("--covers", required=True)
    de.add_argument("--advs", required=True)
    de.add_argument("--fpr", type=float, default=0.05)
    de.add_argument("--out", default=None)
    de.set_defaults(func=cmd_detect_eval)

    r = sub.add_parser("report", help="run the full experiment from a config file")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)

    s = sub.add_parser("serve", help="answer gradient-exchange requests on stdio")
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_serve)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
