"""Operator surface: synthesize data, train, detect, evaluate, and run the
verification suites.

Exit codes: 0 success, 2 usage/validation error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import data as dio
from . import detection as det
from . import evaluation as ev
from .model import SpectralEncoder
from .training import DivergenceError, TrainConfig, load_config, train

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class ValidationFailure(Exception):
    pass


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, seed,
                    inputs: dict, outputs: list[Path], started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {p.name: _sha256(p) for p in outputs if p.exists()},
        "wall_time_s": round(time.monotonic() - started, 3),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_scene_spec(path) -> dio.SyntheticSceneSpec:
    spec = dio.SyntheticSceneSpec()
    known = {f.name for f in fields(dio.SyntheticSceneSpec)}
    ints = {"height", "width", "bands", "endmembers", "target_count", "seed"}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationFailure(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValidationFailure(f"{path}:{lineno}: unknown key {key!r}")
        setattr(spec, key, int(value) if key in ints else float(value))
    return spec


# -- subcommands -----------------------------------------------------------


def cmd_synth(args) -> int:
    started = time.monotonic()
    spec = _load_scene_spec(args.spec) if args.spec else dio.SyntheticSceneSpec()
    if args.seed is not None:
        spec.seed = args.seed
    try:
        spec.validate()
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cube, mask, _signature = dio.generate_scene(spec)
    dio.write_cube(out / "cube.hsb", cube)
    dio.write_mask(out / "mask.hsm", mask)
    # the detection prior is an in-scene target pixel (the one closest to the
    # mean target spectrum), the same convention evaluation protocols use
    dio.write_spectrum(out / "target.txt", dio.select_target_spectrum(cube, mask))
    _write_manifest(
        out, "synth", asdict(spec), spec.seed,
        {"spec": args.spec or "<defaults>"},
        [out / "cube.hsb", out / "mask.hsm", out / "target.txt"], started,
    )
    return EXIT_OK


def cmd_train(args) -> int:
    started = time.monotonic()
    cfg = TrainConfig()
    if args.config:
        try:
            cfg = load_config(args.config, cfg)
        except ValueError as exc:
            raise ValidationFailure(str(exc)) from exc
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
    try:
        cfg.validate()
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from exc
    cube = dio.read_cube(args.cube)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        train(cube, cfg, out, progress=not args.quiet)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    _write_manifest(
        out, "train", asdict(cfg), cfg.seed, {"cube": args.cube},
        [out / "model.ckpt", out / "loss.csv"], started,
    )
    return EXIT_OK


def cmd_detect(args) -> int:
    started = time.monotonic()
    if args.delta <= 0:
        raise ValidationFailure(f"--delta must be positive, got {args.delta}")
    cube = dio.read_cube(args.cube)
    target = dio.read_spectrum(args.target, cube)
    model = SpectralEncoder.load(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scores = det.detect(cube, target, model, delta=args.delta)
    outputs = []
    if args.raw:
        det.write_scores(out / "scores_raw.htds", scores.raw)
        outputs.append(out / "scores_raw.htds")
    else:
        det.write_scores(out / "scores.htds", scores.suppressed)
        outputs.append(out / "scores.htds")
    _write_manifest(
        out, "detect", {"delta": args.delta, "raw": args.raw}, None,
        {"cube": args.cube, "target": args.target, "ckpt": args.ckpt},
        outputs, started,
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.monotonic()
    scores = det.read_scores(args.scores)
    mask = dio.read_mask(args.mask)
    if scores.shape != mask.shape:
        raise ValidationFailure(
            f"score map {scores.shape} and mask {mask.shape} differ in extent"
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        curves = ev.roc(scores, mask)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from exc
    report = ev.auc_all(curves)
    stats = ev.separability_stats(ev.normalize_scores(scores), mask)
    ev.write_roc_csv(out / "roc.csv", curves)
    ev.write_auc_csv(out / "auc.csv", report)
    ev.write_separability_csv(out / "separability.csv", stats)
    _write_manifest(
        out, "eval", {}, None, {"scores": args.scores, "mask": args.mask},
        [out / "roc.csv", out / "auc.csv", out / "separability.csv"], started,
    )
    return EXIT_OK


def cmd_verify(args) -> int:
    suites = ("grad", "scan", "metrics") if args.suite == "all" else (args.suite,)
    ok = True
    for suite in suites:
        passed, worst, bound = _run_suite(suite, args.seed or 0)
        status = "PASS" if passed else "FAIL"
        print(f"{suite}: {status} (max error {worst:.3e}, bound {bound:g})")
        ok = ok and passed
    return EXIT_OK if ok else EXIT_RUNTIME


def _run_suite(suite: str, seed: int) -> tuple[bool, float, float]:
    rng = np.random.default_rng(seed)
    if suite == "scan":
        from .scan import parallel_scan_states, sequential_scan_states

        worst = 0.0
        for _ in range(100):
            length = int(rng.integers(1, 257))
            c = int(rng.integers(1, 17))
            d = int(rng.integers(1, 9))
            gain = rng.uniform(0.0, 1.0, size=(length, c, d))
            drive = rng.standard_normal((length, c, d))
            h_seq = sequential_scan_states(gain, drive)
            h_par = parallel_scan_states(gain, drive)
            denom = np.abs(h_seq).max() or 1.0
            worst = max(worst, float(np.abs(h_seq - h_par).max() / denom))
        return worst < 1e-10, worst, 1e-10
    if suite == "grad":
        from .autodiff import Tensor, grad_check
        from .loss import batch_loss
        from .model import ModelConfig, SpectralEncoder

        model = SpectralEncoder(
            ModelConfig(bands=40, group_length=8, embed_size=8,
                        state_size=8, feature_size=16),
            rng=np.random.default_rng(seed + 1), dtype=np.float64,
        )
        x = Tensor(rng.standard_normal((4, 40)) * 0.5 + 1.0)
        y = Tensor(rng.standard_normal((4, 40)) * 0.5 + 1.0)

        def f():
            feats = model.forward(Tensor(np.concatenate([x.data, y.data])))
            return batch_loss(feats[:4], feats[4:], 0.1)

        worst = grad_check(
            f, list(model.parameters().values()), eps=1e-5,
            max_coords_per_tensor=6, rng=rng,
        )
        return worst < 1e-4, worst, 1e-4
    if suite == "metrics":
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(10, 60))
            scores = rng.permutation(n) / n + rng.uniform(0, 0.5 / n)
            mask = np.zeros(n, dtype=np.uint8)
            mask[rng.choice(n, size=max(1, n // 4), replace=False)] = 1
            if mask.all() or not mask.any():
                continue
            trap = ev.auc_all(ev.roc(scores, mask)).auc_pf_pd
            ref = ev.pairwise_auc(scores, mask)
            worst = max(worst, abs(trap - ref))
        return worst < 1e-12, worst, 1e-12
    raise ValidationFailure(f"unknown suite {suite!r}")


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="htd", description="Hyperspectral target detection toolkit"
    )
    parser.add_argument(
        "--threads", type=int,
        default=int(os.environ.get("HTD_THREADS", "0")) or None,
        help="cap internal parallelism (compute is sequential by default)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--spec", help="scene spec file (key = value lines)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the detector on a cube")
    p.add_argument("--cube", required=True)
    p.add_argument("--config", help="training config file")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="score a cube against a target spectrum")
    p.add_argument("--cube", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--raw", action="store_true",
                   help="emit the raw cosine statistic instead of the suppressed one")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="ROC/AUC evaluation of a score map")
    p.add_argument("--scores", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run the oracle suites")
    p.add_argument("--suite", required=True,
                   choices=["grad", "scan", "metrics", "all"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationFailure, dio.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
