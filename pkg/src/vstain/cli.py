"""Command-line entry point: synth / train / predict / evaluate / gradcheck / ablate.

Every subcommand accepts ``--config FILE`` with plain ``key = value`` lines
(``#`` starts a comment; keys match the long flag names, dashes or
underscores). Values given on the command line override the file.

Exit codes: 0 success, 1 runtime or I/O error, 2 invalid options,
3 training divergence (non-finite loss).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ablate import AblateOptions, run_ablation
from .errors import ConfigError, TrainingDivergedError, VstainError
from .image import ORGANELLES, normalize_min_max, read_image, write_image
from .metrics import MetricRow, aggregate, evaluate_pair, format_table, write_report_csv
from .model import (
    SEPARATE,
    SHARED,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from .objective import ObjectiveWeights, SsimConfig, grad_check
from .synth import DEFAULT_SPARSITY, SynthConfig, generate
from .training import (
    TRAIN,
    VALIDATION,
    TrainConfig,
    build_index,
    end_to_end_gradient_error,
    predict_image,
    predict_resampled,
    train,
    write_history,
)

_thread_limiter = None


def _limit_threads(n: int | None) -> None:
    global _thread_limiter
    if n is None:
        return
    if n < 1:
        raise ConfigError(f"--threads must be >= 1, got {n}")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - present in supported environments
        return
    _thread_limiter = threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# flag value parsers

def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _weights(text: str) -> ObjectiveWeights:
    parts = [tok.strip() for tok in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"expected 4 comma-separated weights, got {text!r}")
    try:
        return ObjectiveWeights(*(float(p) for p in parts))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _sparsity(text: str) -> dict[str, float]:
    out = dict(DEFAULT_SPARSITY)
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise argparse.ArgumentTypeError(f"expected organelle=prob, got {item!r}")
        key, value = item.split("=", 1)
        if key.strip() not in ORGANELLES:
            raise argparse.ArgumentTypeError(f"unknown organelle {key.strip()!r}")
        try:
            out[key.strip()] = float(value)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad probability {value!r}") from exc
    return out


def _organelle_list(text: str) -> tuple[str, ...]:
    names = tuple(tok.strip() for tok in text.split(",") if tok.strip())
    for name in names:
        if name not in ORGANELLES:
            raise argparse.ArgumentTypeError(f"unknown organelle {name!r}")
    return names


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert_config_value(action: argparse.Action, value: str):
    if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"option {action.dest!r} expects a boolean, got {value!r}")
    if action.choices is not None and value not in action.choices:
        raise ConfigError(f"option {action.dest!r} must be one of {sorted(action.choices)}, got {value!r}")
    if action.type is not None:
        try:
            return action.type(value)
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise ConfigError(f"option {action.dest!r}: {exc}") from exc
    return value


def load_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment."""
    data: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        data[key.strip().replace("-", "_")] = value.strip()
    return data


def _merge_config(parser: argparse.ArgumentParser, ns: argparse.Namespace, argv) -> argparse.Namespace:
    if not getattr(ns, "config", None):
        return ns
    sub: argparse.ArgumentParser = ns._subparser
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    data = load_config_file(ns.config)
    unknown = sorted(set(data) - set(actions))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    sub.set_defaults(**{k: _convert_config_value(actions[k], v) for k, v in data.items()})
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(ns) -> int:
    if ns.out is None:
        raise ConfigError("--out is required")
    cfg = SynthConfig(
        seed=ns.seed,
        n_studies=ns.studies,
        images_per_study=ns.per_study,
        image_size=ns.size,
        sparsity=ns.sparsity or dict(DEFAULT_SPARSITY),
        noise_sigma=ns.noise_sigma,
    )
    manifest = generate(cfg, ns.out)
    print(f"wrote {cfg.n_studies * cfg.images_per_study} records to {manifest}")
    return 0


def _elastic_flag(value: str) -> bool | None:
    return {"auto": None, "on": True, "off": False}[value]


def cmd_train(ns) -> int:
    if ns.manifest is None or ns.out_checkpoint is None:
        raise ConfigError("--manifest and --out-checkpoint are required")
    if ns.strategy == SEPARATE and ns.organelle is None:
        raise ConfigError("--organelle is required for the separate strategy")
    index = build_index(ns.manifest, ns.split_ratio, ns.seed, ns.split_level)
    model_cfg = ModelConfig(
        levels=ns.levels, base_channels=ns.base_channels, strategy=ns.strategy, seed=ns.seed
    )
    train_cfg = TrainConfig(
        strategy=ns.strategy,
        organelle=ns.organelle if ns.strategy == SEPARATE else None,
        patch_size=ns.patch_size,
        stride=ns.stride,
        steps=ns.steps,
        batch_size=ns.batch_size,
        lr=ns.lr,
        seed=ns.seed,
        augment_flips=ns.augment_flips,
        augment_elastic=_elastic_flag(ns.elastic),
        weights=ns.weights,
        val_interval=ns.val_interval,
        val_limit=ns.val_limit,
    )
    result = train(index, model_cfg, train_cfg)

    out = Path(ns.out_checkpoint)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.params, result.config, out)
    history_path = Path(ns.history) if ns.history else out.parent / (out.stem + ".history.csv")
    write_history(result.history, history_path)
    first, last = result.history[0], result.history[-1]
    print(f"checkpoint: {out}")
    print(f"history: {history_path}")
    print(f"combined loss: step 1 = {first.combined:.6f}, step {last.step} = {last.combined:.6f}")
    return 0


def cmd_predict(ns) -> int:
    if ns.checkpoint is None or ns.out_dir is None:
        raise ConfigError("--checkpoint and --out-dir are required")
    params, cfg = load_checkpoint(ns.checkpoint)
    if cfg.strategy == SHARED:
        organelles = ns.organelles or ORGANELLES
    else:
        if not ns.organelles or len(ns.organelles) != 1:
            raise ConfigError(
                "--organelles must name exactly one organelle for a separate-strategy checkpoint"
            )
        organelles = ns.organelles

    inputs = [Path(p) for p in ns.inputs]
    if ns.manifest is not None:
        index = build_index(ns.manifest, ns.split_ratio, ns.seed)
        for split in (ns.split,) if ns.split != "all" else (TRAIN, VALIDATION):
            inputs.extend(index.records[i].input_path for i in index.indices(split))
    if not inputs:
        raise ConfigError("no inputs: pass image paths or --manifest")

    out_dir = Path(ns.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for path in inputs:
        img = read_image(path)
        for org in organelles:
            route = org if cfg.strategy == SHARED else None
            if ns.resample_size:
                pred = predict_resampled(params, cfg, img, route, ns.resample_size)
            else:
                pred = predict_image(params, cfg, img, route, ns.patch_size, ns.stride)
            write_image(out_dir / f"{path.stem}.{org}.lmci", pred)
            written += 1
    print(f"wrote {written} prediction(s) to {out_dir}")
    return 0


def cmd_evaluate(ns) -> int:
    if ns.manifest is None or ns.pred_dir is None:
        raise ConfigError("--manifest and --pred-dir are required")
    index = build_index(ns.manifest, ns.split_ratio, ns.seed)
    pred_dir = Path(ns.pred_dir)
    splits = (TRAIN, VALIDATION) if ns.split == "all" else (ns.split,)
    rows: list[MetricRow] = []
    for split in splits:
        for i in index.indices(split):
            rec = index.records[i]
            for org, gt_path in rec.targets.items():
                pred_path = pred_dir / f"{rec.input_path.stem}.{org}.lmci"
                if not pred_path.exists():
                    continue
                pred = read_image(pred_path)
                gt = normalize_min_max(read_image(gt_path))
                rows.append(evaluate_pair(pred, gt, org, rec.input_path.name))
    if not rows:
        raise VstainError(f"no (prediction, target) pairs found under {pred_dir}")
    report = aggregate(rows)
    if ns.out:
        write_report_csv(report, ns.out)
        print(f"report: {ns.out}")
    print(format_table([("model", report)]), end="")
    return 0


def cmd_gradcheck(ns) -> int:
    rng = np.random.default_rng(ns.seed)
    p = rng.uniform(0.0, 1.0, (16, 16))
    gt = rng.uniform(0.0, 1.0, (16, 16))
    checks: list[tuple[str, float, float]] = []
    terms = ("mse", "ssim", "pcc", "cd") if ns.term == "all" else (ns.term,)
    for term in terms:
        if term == "model":
            continue
        checks.append((term, grad_check(term, p, gt), ns.tol))
    if ns.term in ("all", "model"):
        err = end_to_end_gradient_error(
            ModelConfig(levels=1, base_channels=2, seed=ns.seed), size=8, seed=ns.seed
        )
        checks.append(("model", err, ns.tol_model))

    failed = False
    print(f"{'term':<8} {'max_rel_err':>12} {'threshold':>10} status")
    for name, err, tol in checks:
        ok = err < tol
        failed |= not ok
        print(f"{name:<8} {err:>12.3e} {tol:>10.0e} {'PASS' if ok else 'FAIL'}")
    return 1 if failed else 0


def cmd_ablate(ns) -> int:
    if ns.manifest is None or ns.out_dir is None:
        raise ConfigError("--manifest and --out-dir are required")
    opts = AblateOptions(
        manifest=Path(ns.manifest),
        out_dir=Path(ns.out_dir),
        axes=tuple(ns.axes.split(",")) if ns.axes else ("strategy", "patch", "objective"),
        steps=ns.steps,
        seed=ns.seed,
        levels=ns.levels,
        base_channels=ns.base_channels,
        default_patch=ns.default_patch,
        patch_sizes=ns.patch_sizes,
        resample_size=ns.resample_size,
        lr=ns.lr,
        split_ratio=ns.split_ratio,
        eval_limit=ns.eval_limit,
    )
    results = run_ablation(opts)
    for axis, entry in results.items():
        print(entry["table"], end="")
        print(f"[{axis}] table: {entry['txt']}, csv: {entry['csv']}")
    return 0


# ---------------------------------------------------------------------------
# parser construction

def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, help="key = value config file; flags override it")
    sub.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vstain", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"vstain {__version__}")
    parser.add_argument("--threads", type=int, default=None, help="cap numeric worker threads")
    subs = parser.add_subparsers(dest="command", required=True)

    sp = subs.add_parser("synth", help="generate a synthetic dataset")
    _add_common(sp)
    sp.add_argument("--studies", type=int, default=3)
    sp.add_argument("--per-study", type=int, default=10)
    sp.add_argument("--size", type=int, default=256)
    sp.add_argument("--noise-sigma", type=float, default=0.02)
    sp.add_argument("--sparsity", type=_sparsity, default=None,
                    help="overrides, e.g. nucleus=1.0,actin=0.2")
    sp.add_argument("--out", default=None, help="output dataset directory")
    sp.set_defaults(_handler=cmd_synth)

    tp = subs.add_parser("train", help="train one model")
    _add_common(tp)
    tp.add_argument("--manifest", default=None)
    tp.add_argument("--strategy", choices=(SEPARATE, SHARED), default=SEPARATE)
    tp.add_argument("--organelle", choices=ORGANELLES, default=None)
    tp.add_argument("--steps", type=int, default=500)
    tp.add_argument("--patch-size", type=int, default=512)
    tp.add_argument("--stride", type=int, default=None)
    tp.add_argument("--batch-size", type=int, default=1)
    tp.add_argument("--lr", type=float, default=1e-3)
    tp.add_argument("--levels", type=int, default=3)
    tp.add_argument("--base-channels", type=int, default=8)
    tp.add_argument("--split-ratio", type=float, default=0.8)
    tp.add_argument("--split-level", choices=("image", "study"), default="image")
    tp.add_argument("--weights", type=_weights, default=ObjectiveWeights(),
                    help="alpha,beta,lambda,omega (default 1.0,0.2,0.1,0.1)")
    tp.add_argument("--no-flips", dest="augment_flips", action="store_false")
    tp.add_argument("--elastic", choices=("auto", "on", "off"), default="auto")
    tp.add_argument("--val-interval", type=int, default=50)
    tp.add_argument("--val-limit", type=int, default=8)
    tp.add_argument("--out-checkpoint", default=None)
    tp.add_argument("--history", default=None)
    tp.set_defaults(_handler=cmd_train)

    pp = subs.add_parser("predict", help="predict organelle channels for images")
    _add_common(pp)
    pp.add_argument("inputs", nargs="*", help="input image files")
    pp.add_argument("--checkpoint", default=None)
    pp.add_argument("--manifest", default=None, help="predict over dataset inputs instead")
    pp.add_argument("--split", choices=(TRAIN, VALIDATION, "all"), default=VALIDATION)
    pp.add_argument("--split-ratio", type=float, default=0.8)
    pp.add_argument("--organelles", type=_organelle_list, default=None)
    pp.add_argument("--patch-size", type=int, default=512)
    pp.add_argument("--stride", type=int, default=None)
    pp.add_argument("--resample-size", type=int, default=None,
                    help="fixed-resolution baseline instead of tiling")
    pp.add_argument("--out-dir", default=None)
    pp.set_defaults(_handler=cmd_predict)

    ep = subs.add_parser("evaluate", help="score predictions against ground truth")
    _add_common(ep)
    ep.add_argument("--manifest", default=None)
    ep.add_argument("--pred-dir", default=None)
    ep.add_argument("--split", choices=(TRAIN, VALIDATION, "all"), default=VALIDATION)
    ep.add_argument("--split-ratio", type=float, default=0.8)
    ep.add_argument("--out", default=None, help="report CSV path")
    ep.set_defaults(_handler=cmd_evaluate)

    gp = subs.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    _add_common(gp)
    gp.add_argument("--term", choices=("all", "mse", "ssim", "pcc", "cd", "model"), default="all")
    gp.add_argument("--tol", type=float, default=1e-4)
    gp.add_argument("--tol-model", type=float, default=1e-3)
    gp.set_defaults(_handler=cmd_gradcheck)

    ap = subs.add_parser("ablate", help="run the ablation matrix and emit report tables")
    _add_common(ap)
    ap.add_argument("--manifest", default=None)
    ap.add_argument("--out-dir", default=None)
    ap.add_argument("--axes", default=None, help="comma list from strategy,patch,objective")
    ap.add_argument("--steps", type=int, default=80)
    ap.add_argument("--levels", type=int, default=3)
    ap.add_argument("--base-channels", type=int, default=8)
    ap.add_argument("--default-patch", type=int, default=128)
    ap.add_argument("--patch-sizes", type=_int_list, default=(512, 256, 128))
    ap.add_argument("--resample-size", type=int, default=256)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--split-ratio", type=float, default=0.8)
    ap.add_argument("--eval-limit", type=int, default=6)
    ap.set_defaults(_handler=cmd_ablate)

    for name, sub in subs.choices.items():
        sub.set_defaults(_subparser=sub, command=name)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        ns = _merge_config(parser, ns, argv)
        _limit_threads(ns.threads)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        return ns._handler(ns)
    except ConfigError as exc:
        sub = getattr(ns, "_subparser", None)
        if sub is not None:
            print(sub.format_usage(), end="", file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (VstainError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
