"""Command-line entry point: certify, attack, selftest, bench, train, predict.

Exit codes: 0 ok, 2 bad flags, 3 I/O or malformed file, 4 shape/label
mismatch, 5 undefined metric, 6 certificate above attacked accuracy,
7 self-test failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from segcert import __version__
from segcert import certify as engine
from segcert.tensor import SegtError, Tensor, read_tensor, write_tensor

EXIT_OK = 0
EXIT_FLAGS = 2
EXIT_IO = 3
EXIT_SHAPE = 4
EXIT_UNDEFINED = 5
EXIT_UNSOUND = 6
EXIT_SELFTEST = 7

DEFAULTS = {
    "metric": "pixel-acc",
    "lipschitz": 1.0,
    "p": 2.0,
    "eps": [0.0],
    "gamma": [],
    "class_index": None,
    "ignore_label": engine.DEFAULT_IGNORE,
    "threads": os.cpu_count() or 1,
    "seed": 0,
}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def float_list(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def ignore_value(text: str):
    if text.lower() in ("none", "off", "-1"):
        return -1
    return int(text)


def grid_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}")
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError("size extents must be positive")
    return h, w


def file_digest(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    return {"path": os.fspath(path), "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)}


def _read(path, role):
    try:
        return read_tensor(path)
    except FileNotFoundError:
        raise CliError(EXIT_IO, f"{role}: no such file {path}")
    except SegtError as exc:
        raise CliError(EXIT_IO, f"{role}: {exc.code}: {exc}")
    except OSError as exc:
        raise CliError(EXIT_IO, f"{role}: {exc}")


def _write_json(payload, path):
    text = json.dumps(payload, indent=2)
    if path is None or path == "-":
        print(text)
        return
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}")


def _manifest(command, argv, inputs, timings):
    return {
        "command": command,
        "argv": list(argv),
        "tool": "segcert",
        "version": __version__,
        "inputs": inputs,
        "timings_ms": timings,
    }


def _resolve(args, config):
    """Flags win over the JSON config file, which wins over defaults."""
    out = {}
    for key, default in DEFAULTS.items():
        value = getattr(args, key, None)
        if value is None:
            value = config.get(key, config.get(key.replace("_", "-"), default))
        out[key] = value
    for key in ("eps", "gamma"):
        if isinstance(out[key], (int, float)):
            out[key] = [float(out[key])]
        elif isinstance(out[key], str):
            out[key] = float_list(out[key])
    return out


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(EXIT_IO, f"config: {exc}")
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_FLAGS, f"config: invalid JSON: {exc}")


# --- certify -----------------------------------------------------------------


def _split_batch(logits: Tensor, labels: Tensor | None):
    if logits.dtype != "real32":
        raise CliError(EXIT_SHAPE, f"logits must be real32, got {logits.dtype}")
    lg = logits.data
    if lg.ndim == 3:
        lg = lg[None]
    if lg.ndim != 4:
        raise CliError(EXIT_SHAPE, f"logits must be K x H x W or N x K x H x W, got {logits.shape}")
    if labels is None:
        return list(lg), None
    if labels.dtype not in ("index8", "index32"):
        raise CliError(EXIT_SHAPE, f"labels must be an index tensor, got {labels.dtype}")
    lb = labels.data
    if lb.ndim == 2:
        lb = lb[None]
    if lb.shape != (lg.shape[0],) + lg.shape[2:]:
        raise CliError(EXIT_SHAPE, f"labels {labels.shape} do not match logits {logits.shape}")
    return list(lg), list(lb)


VALUE_KEYS = {"pixel-acc": "crpa", "fnr": "fnr_bound", "stability": "crs", "class-iou": "worst_class_iou"}
CLEAN_KEYS = {"pixel-acc": "pixel_accuracy", "fnr": "fnr", "stability": "stability", "class-iou": "class_iou"}


def aggregate_reports(reports, metric, cfg) -> dict:
    key = VALUE_KEYS[metric]
    eps_rows = []
    for j, eps in enumerate(cfg.epsilons):
        values = [r.epsilons[j][key] for r in reports]
        eps_rows.append({"epsilon": eps, "mean": float(np.mean(values)),
                         "min": float(np.min(values)), "max": float(np.max(values))})
    gamma_rows = []
    for j, g in enumerate(cfg.gammas):
        values = [r.gammas[j]["radius_lower_bound"] for r in reports]
        gamma_rows.append({"gamma": g, "mean_radius_lower_bound": float(np.mean(values)),
                           "min_radius_lower_bound": float(np.min(values))})
    times = [r.metadata["elapsed_ms"] for r in reports]
    return {
        "metric": metric,
        "value_key": key,
        "n_images": len(reports),
        "clean_mean": float(np.mean([r.clean[CLEAN_KEYS[metric]] for r in reports])),
        "epsilons": eps_rows,
        "gammas": gamma_rows,
        "certify_ms_total": float(np.sum(times)),
        "certify_ms_per_image": float(np.mean(times)),
    }


def cmd_certify(args, argv) -> int:
    t0 = time.perf_counter()
    conf = _resolve(args, _load_config(args.config))
    metric = conf["metric"]
    if metric not in engine.METRICS:
        raise CliError(EXIT_FLAGS, f"unknown metric {metric!r}")
    if args.logits is None:
        raise CliError(EXIT_FLAGS, "--logits is required")
    if args.labels is None and metric != "stability":
        raise CliError(EXIT_FLAGS, f"--labels is required for metric {metric}")
    ignore = conf["ignore_label"]
    try:
        cfg = engine.CertConfig(
            lipschitz=float(conf["lipschitz"]), norm_order=float(conf["p"]),
            epsilons=conf["eps"], gammas=conf["gamma"], class_index=conf["class_index"],
            ignore_label=None if ignore is None or ignore < 0 else int(ignore),
        )
    except engine.InvalidConfig as exc:
        raise CliError(EXIT_FLAGS, str(exc))
    logits = _read(args.logits, "logits")
    labels = _read(args.labels, "labels") if args.labels else None
    inputs = [{"role": "logits", **file_digest(args.logits)}]
    if args.labels:
        inputs.append({"role": "labels", **file_digest(args.labels)})
    lg, lb = _split_batch(logits, labels)
    t1 = time.perf_counter()
    reports = engine.certify_batch(lg, lb, cfg, metric, threads=max(1, int(conf["threads"])))
    t2 = time.perf_counter()
    payload = {
        "manifest": _manifest("certify", argv, inputs, {}),
        "config": {
            "metric": metric, "lipschitz": cfg.lipschitz, "p": cfg.norm_order,
            "epsilons": list(cfg.epsilons), "gammas": list(cfg.gammas),
            "class_index": cfg.class_index, "ignore_label": cfg.ignore_label,
            "threads": int(conf["threads"]),
        },
        "per_image": [{"index": i, **r.to_dict()} for i, r in enumerate(reports)],
        "aggregate": aggregate_reports(reports, metric, cfg),
    }
    payload["manifest"]["timings_ms"] = {
        "load": (t1 - t0) * 1e3, "certify": (t2 - t1) * 1e3,
    }
    _write_json(payload, args.out)
    return EXIT_OK


# --- attack ------------------------------------------------------------------


def cmd_attack(args, argv) -> int:
    from segcert import attacks, lipnet

    t0 = time.perf_counter()
    manifest_path = os.path.join(args.model, lipnet.MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise CliError(EXIT_IO, f"model manifest not found: {manifest_path}")
    try:
        model = lipnet.load_model(args.model)
    except (OSError, SegtError, ValueError, KeyError) as exc:
        raise CliError(EXIT_IO, f"model: {exc}")
    images = _read(args.images, "images")
    masks = _read(args.labels, "labels")
    if images.dtype != "real32" or images.data.ndim != 4:
        raise CliError(EXIT_SHAPE, f"images must be real32 N x C x H x W, got {images.dtype} {images.shape}")
    if masks.dtype not in ("index8", "index32") or masks.shape != (images.shape[0],) + images.shape[2:]:
        raise CliError(EXIT_SHAPE, f"labels {masks.shape} do not match images {images.shape}")
    if images.shape[1] != model.input_channels:
        raise CliError(EXIT_SHAPE, "image channels do not match the model")
    limit = images.shape[0] if args.limit is None else min(args.limit, images.shape[0])
    xs = images.data[:limit].astype(np.float64)
    ys = masks.data[:limit].astype(np.int64)
    if np.any(xs < 0) or np.any(xs > 1):
        raise CliError(EXIT_SHAPE, "images must lie in [0, 1]")
    ignore = None if args.ignore_label is None or args.ignore_label < 0 else args.ignore_label
    eps = args.eps if args.eps is not None else [0.0]
    try:
        acfg = attacks.AttackConfig(epsilon=max(eps), steps=args.steps, step_size=args.step_size,
                                    restarts=args.restarts, objective=args.objective, seed=args.seed)
        cfg = engine.CertConfig(model.global_lip, 2.0, eps, ignore_label=ignore)
    except (ValueError, engine.InvalidConfig) as exc:
        raise CliError(EXIT_FLAGS, str(exc))
    t1 = time.perf_counter()
    logits = lipnet.forward(model, xs)
    samples = [lipnet.SyntheticSample(x, y) for x, y in zip(xs, ys)]
    sweep = attacks.empirical_accuracy_under_attack(model, samples, eps, acfg, ignore_label=ignore)
    per_image, violations = [], 0
    crpa_rows = []
    for i in range(limit):
        try:
            cr = engine.crpa(logits[i], ys[i], cfg)
        except engine.UndefinedMetric as exc:
            raise CliError(EXIT_UNDEFINED, str(exc))
        crpa_rows.append(cr)
        emp = sweep.per_sample[i].tolist()
        bad = [j for j in range(len(eps)) if cr[j] > emp[j]]
        violations += len(bad)
        per_image.append({"index": i, "crpa": cr, "empirical": emp, "violations": len(bad)})
    crpa_arr = np.array(crpa_rows)
    t2 = time.perf_counter()
    payload = {
        "manifest": _manifest("attack", argv, [
            {"role": "model_manifest", **file_digest(manifest_path)},
            {"role": "images", **file_digest(args.images)},
            {"role": "labels", **file_digest(args.labels)},
        ], {"load": (t1 - t0) * 1e3, "attack": (t2 - t1) * 1e3}),
        "config": {"lipschitz": model.global_lip, "p": 2.0, "epsilons": list(map(float, eps)),
                   "steps": acfg.steps, "restarts": acfg.restarts, "step_size": args.step_size,
                   "objective": acfg.objective, "seed": acfg.seed, "ignore_label": ignore},
        "per_image": per_image,
        "aggregate": {
            "n_images": limit,
            "violations": violations,
            "epsilons": [{"epsilon": float(e), "crpa_mean": float(crpa_arr[:, j].mean()),
                          "empirical_mean": float(sweep.per_sample[:, j].mean())}
                         for j, e in enumerate(eps)],
        },
    }
    _write_json(payload, args.out)
    if violations:
        print(f"soundness violation: {violations} (image, epsilon) pairs with CRPA above attacked accuracy",
              file=sys.stderr)
        return EXIT_UNSOUND
    return EXIT_OK


# --- selftest ------------------------------------------------------------------


def cmd_selftest(args, argv) -> int:
    from segcert import selftest

    results = selftest.run_all(args.instances, args.seed)
    summary = {
        "manifest": _manifest("selftest", argv, [], {"total": sum(r.seconds for r in results) * 1e3}),
        "seed": args.seed,
        "suites": [r.to_dict() for r in results],
        "passed": all(r.passed for r in results),
    }
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"[{status}] {r.name}: {r.instances} instances, {r.failures} failures, "
              f"max error {r.max_error:.3g}", file=sys.stderr)
    if args.out:
        _write_json(summary, args.out)
    return EXIT_OK if summary["passed"] else EXIT_SELFTEST


# --- bench -------------------------------------------------------------------


def bench_once(logits, labels, cfg, metric, threads=1) -> float:
    start = time.perf_counter()
    engine.certify_report(logits, labels, cfg, metric, threads=threads)
    return (time.perf_counter() - start) * 1e3


def run_bench(size=(1024, 1024), classes=19, metric="pixel-acc", class_index=None, repeat=10,
              seed=0, epsilons=(0.1, 0.17), gammas=(0.5,), lipschitz=1.0, p=2.0, threads=1) -> dict:
    """Median wall-clock of one certification on random logits; input generation excluded."""
    rng = np.random.default_rng(seed)
    h, w = size
    logits = rng.standard_normal((classes, h, w), dtype=np.float32)
    labels = rng.integers(0, classes, size=(h, w)).astype(np.int32)
    if metric == "class-iou" and class_index is None:
        class_index = 11 if classes > 11 else 1
    cfg = engine.CertConfig(lipschitz, p, epsilons, gammas if metric != "class-iou" else (),
                            class_index=class_index)
    bench_once(logits, labels, cfg, metric, threads)  # warm-up: JIT compile and page-in
    times = [bench_once(logits, labels, cfg, metric, threads) for _ in range(repeat)]
    return {
        "size": f"{h}x{w}", "classes": classes, "metric": metric, "class_index": class_index,
        "threads": threads,
        "repeat": repeat, "min_ms": float(np.min(times)), "median_ms": float(np.median(times)),
        "max_ms": float(np.max(times)), "times_ms": times,
    }


def cmd_bench(args, argv) -> int:
    try:
        result = run_bench(args.size, args.classes, args.metric, args.class_index, args.repeat,
                           args.seed, args.eps or (0.1, 0.17), args.gamma or (0.5,),
                           threads=max(1, args.threads))
    except (engine.CertError, ValueError) as exc:
        raise CliError(EXIT_FLAGS, str(exc))
    result["manifest"] = _manifest("bench", argv, [], {})
    print(f"{result['metric']} {result['size']} K={result['classes']}: median {result['median_ms']:.1f} ms "
          f"(min {result['min_ms']:.1f}, max {result['max_ms']:.1f}) over {result['repeat']} runs",
          file=sys.stderr)
    _write_json(result, args.out)
    return EXIT_OK


# --- train / predict -------------------------------------------------------------


def cmd_train(args, argv) -> int:
    from segcert import lipnet

    train = lipnet.generate_synthetic_dataset(args.seed, args.train_count, args.size, args.classes)
    test = lipnet.generate_synthetic_dataset(args.seed + 1, args.test_count, args.size, args.classes)
    model = lipnet.build_toy_model(1, args.classes, args.width, args.blocks, (args.size, args.size), args.seed)
    model = lipnet.train_toy(model, train, args.steps, args.lr, args.temperature, seed=args.seed)
    model = model.as_float32()
    os.makedirs(args.out, exist_ok=True)
    model_dir = os.path.join(args.out, "model")
    lipnet.save_model(model, model_dir)
    xs, ys = lipnet.stack_dataset(test)
    write_tensor(Tensor.real32(xs), os.path.join(args.out, "test_images.segt"))
    write_tensor(Tensor.index(ys), os.path.join(args.out, "test_masks.segt"))
    acc = lipnet.pixel_accuracy(model, xs, ys)
    summary = {"model": model_dir, "global_lip": model.global_lip, "test_pixel_accuracy": acc,
               "train_count": args.train_count, "test_count": args.test_count, "steps": args.steps}
    _write_json(summary, None)
    return EXIT_OK


def cmd_predict(args, argv) -> int:
    from segcert import lipnet

    try:
        model = lipnet.load_model(args.model)
    except (OSError, SegtError, ValueError, KeyError) as exc:
        raise CliError(EXIT_IO, f"model: {exc}")
    images = _read(args.images, "images")
    if images.dtype != "real32" or images.data.ndim not in (3, 4):
        raise CliError(EXIT_SHAPE, "images must be real32 C x H x W or N x C x H x W")
    try:
        logits = lipnet.forward(model, images.data.astype(np.float64))
    except ValueError as exc:
        raise CliError(EXIT_SHAPE, str(exc))
    write_tensor(Tensor.real32(logits), args.out)
    print(json.dumps({"logits": args.out, "shape": list(logits.shape), "lipschitz": model.global_lip}))
    return EXIT_OK


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="segcert", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"segcert {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    c = sub.add_parser("certify", help="certificates from stored logits")
    c.add_argument("--logits")
    c.add_argument("--labels")
    c.add_argument("--metric", choices=engine.METRICS, default=None)
    c.add_argument("--lipschitz", type=float)
    c.add_argument("--p", type=float)
    c.add_argument("--eps", type=float_list)
    c.add_argument("--gamma", type=float_list)
    c.add_argument("--class", dest="class_index", type=int)
    c.add_argument("--ignore-label", dest="ignore_label", type=ignore_value,
                   help="label excluded from every pixel set (default 255; 'none' disables)")
    c.add_argument("--threads", type=int)
    c.add_argument("--seed", type=int)
    c.add_argument("--config", help="JSON file with the same keys; flags win")
    c.add_argument("--out")

    a = sub.add_parser("attack", help="PGD attack vs CRPA on a toy model")
    a.add_argument("--model", required=True)
    a.add_argument("--images", required=True)
    a.add_argument("--labels", required=True)
    a.add_argument("--eps", type=float_list)
    a.add_argument("--steps", type=int, default=100)
    a.add_argument("--restarts", type=int, default=3)
    a.add_argument("--step-size", dest="step_size", type=float)
    a.add_argument("--objective", choices=("maximize_misclassified", "untargeted_margin"),
                   default="maximize_misclassified")
    a.add_argument("--ignore-label", dest="ignore_label", type=ignore_value, default=None)
    a.add_argument("--limit", type=int)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out")

    s = sub.add_parser("selftest", help="engine vs brute-force oracles, Lipschitz and gradient checks")
    s.add_argument("--instances", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")

    b = sub.add_parser("bench", help="time certification on random logits")
    b.add_argument("--size", type=grid_size, default=(1024, 1024))
    b.add_argument("--classes", type=int, default=19)
    b.add_argument("--metric", choices=engine.METRICS, default="pixel-acc")
    b.add_argument("--class", dest="class_index", type=int)
    b.add_argument("--repeat", type=int, default=10)
    b.add_argument("--eps", type=float_list)
    b.add_argument("--gamma", type=float_list)
    b.add_argument("--threads", type=int, default=1, help="split the per-pixel scan across threads")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")

    t = sub.add_parser("train", help="train the toy network on synthetic shapes")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--train-count", dest="train_count", type=int, default=200)
    t.add_argument("--test-count", dest="test_count", type=int, default=50)
    t.add_argument("--size", type=int, default=16)
    t.add_argument("--classes", type=int, choices=(2, 3), default=2)
    t.add_argument("--width", type=int, default=8)
    t.add_argument("--blocks", type=int, default=2)
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--temperature", type=float, default=5.0)

    pr = sub.add_parser("predict", help="write toy-model logits as SEGT")
    pr.add_argument("--model", required=True)
    pr.add_argument("--images", required=True)
    pr.add_argument("--out", required=True)
    return parser


COMMANDS = {
    "certify": cmd_certify,
    "attack": cmd_attack,
    "selftest": cmd_selftest,
    "bench": cmd_bench,
    "train": cmd_train,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args, argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except engine.UndefinedMetric as exc:
        print(f"error: undefined metric: {exc}", file=sys.stderr)
        return EXIT_UNDEFINED
    except (engine.MissingLabels, engine.InvalidConfig) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FLAGS
    except (engine.ShapeMismatch, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE


if __name__ == "__main__":
    sys.exit(main())
