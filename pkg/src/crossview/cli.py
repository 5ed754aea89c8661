"""Command-line pipeline: generate data, train, evaluate, merge, audit.

Every command echoes its fully-resolved configuration before doing work, so a
captured log is enough to rerun it. Config files are JSON with explicit keys;
unknown keys are errors, never warnings. Exit codes follow the error taxonomy
(config 2, data 3, numeric 4, contract 5).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import re
import sys
from pathlib import Path

from .checkpoint import (
    _check_keys,
    build_model,
    load_checkpoint,
    model_config_from_dict,
    model_config_to_dict,
    save_checkpoint,
    train_config_from_dict,
)
from .data import (
    SyntheticSpec,
    bayes_oracle,
    generate,
    load_dataset,
    save_dataset,
)
from .errors import ConfigError, CrossviewError, DataError, NumericError
from .gradcheck import gradcheck_suite
from .lora import merge_lora
from .model import ModelConfig, preset
from .training import TrainConfig, evaluate, train

__all__ = ["main"]

_GRADCHECK_TOLERANCE = 1e-4


# -- plumbing ----------------------------------------------------------------


def _fmt(x: float) -> str:
    """Compact float: 128.0 -> '128', 2e-05 -> '2e-5'."""
    return re.sub(r"e([+-])0+(\d)", r"e\1\2", f"{x:g}")


def _load_json(path) -> dict:
    try:
        text = Path(path).read_text("utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    try:
        blob = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from None
    if not isinstance(blob, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return blob


def _spec_from_dict(d: dict) -> SyntheticSpec:
    fields = {f.name for f in dataclasses.fields(SyntheticSpec)}
    _check_keys(d, fields, "dataset spec")
    kwargs = dict(d)
    if "scenarios" in kwargs:
        kwargs["scenarios"] = tuple(kwargs["scenarios"])
    try:
        return SyntheticSpec(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad dataset spec: {exc}") from None


def _resolve_configs(blob: dict) -> tuple[str | None, ModelConfig, TrainConfig]:
    """Config file schema: {"preset": name?, "model": {...}?, "train": {...}?}.

    Model overrides are applied on top of the preset (backbone merged
    key-by-key); both override blocks reject unknown keys.
    """
    _check_keys(blob, {"preset", "model", "train"}, "config file")
    name = blob.get("preset")
    base = model_config_to_dict(preset(name) if name is not None else ModelConfig())
    override = blob.get("model", {})
    if not isinstance(override, dict):
        raise ConfigError("'model' must be a mapping of overrides")
    _check_keys(override, set(base), "model config")
    for key, value in override.items():
        if key == "backbone":
            if not isinstance(value, dict):
                raise ConfigError("backbone config must be a mapping")
            _check_keys(value, set(base["backbone"]), "backbone")
            base["backbone"] = {**base["backbone"], **value}
        else:
            base[key] = value
    model_config = model_config_from_dict(base)
    train_config = train_config_from_dict(blob.get("train", {}))
    return name, model_config, train_config


def _echo_spec(spec: SyntheticSpec) -> None:
    print(
        "resolved spec: "
        f"views={spec.views} frames={spec.frames} image={spec.image_size} "
        f"channels={spec.channels} sigma_n={_fmt(spec.sigma_n)} "
        f"skew={_fmt(spec.skew)} scenarios={','.join(spec.scenarios)} "
        f"seed={spec.seed}"
    )


def _echo_model(
    config: ModelConfig, lr: float, preset_name: str | None = None
) -> None:
    bits = [] if preset_name is None else [f"preset={preset_name}"]
    b = config.backbone
    bits += [
        f"V={config.views}",
        f"T={config.frames}",
        f"r={config.lora_rank}",
        f"α={_fmt(config.lora_alpha)}",
        f"Hid={config.fusion_hidden}",
        f"lr={_fmt(lr)}",
        f"fusion_dim={config.fusion_dim}",
        f"fusion_heads={config.fusion_heads}",
        f"dropout={_fmt(config.dropout)}",
        f"classes={config.num_classes}",
        f"encoder=dim{b.dim}/depth{b.depth}/heads{b.heads}"
        f"/patch{b.patch_size}/img{b.image_size}",
    ]
    print("resolved config: " + " ".join(bits))


def _echo_train(config: TrainConfig) -> None:
    print(
        "resolved training: "
        f"epochs={config.epochs} batch={config.batch} "
        f"wd={_fmt(config.weight_decay)} "
        f"betas={_fmt(config.betas[0])},{_fmt(config.betas[1])} "
        f"seed={config.seed} eval_split={_fmt(config.eval_split)}"
        + ("" if config.base_lr is None else f" lr={_fmt(config.base_lr)}")
    )


def _effective_lr(model_config: ModelConfig, train_config: TrainConfig | None) -> float:
    if train_config is not None and train_config.base_lr is not None:
        return train_config.base_lr
    return model_config.base_lr


# -- commands ----------------------------------------------------------------


def cmd_gen_data(args) -> None:
    spec = _spec_from_dict(_load_json(args.spec))
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    _echo_spec(spec)
    print(f"generating n={args.n} threads={args.threads}")
    samples = generate(spec, args.n, threads=args.threads)
    save_dataset(args.out, samples, spec)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_train(args) -> None:
    name, model_config, train_config = _resolve_configs(_load_json(args.config))
    _echo_model(model_config, _effective_lr(model_config, train_config), name)
    _echo_train(train_config)
    samples = load_dataset(args.data)
    print(f"loaded {len(samples)} samples from {args.data}")
    result = train(model_config, train_config, samples)
    for record in result.history:
        print(json.dumps(record))
    save_checkpoint(args.out, result.model, train_config=train_config)
    sidecar = f"{args.out}.metrics.json"
    Path(sidecar).write_text(
        json.dumps(
            {
                "history": result.history,
                "loss_curve": result.loss_curve,
                "best_epoch": result.best_epoch,
            },
            indent=2,
        )
    )
    kept = "final epoch" if result.best_epoch is None else f"epoch {result.best_epoch}"
    print(f"saved checkpoint ({kept} weights) to {args.out}; history in {sidecar}")


def cmd_eval(args) -> None:
    checkpoint = load_checkpoint(args.ckpt)
    model = build_model(checkpoint)
    _echo_model(
        checkpoint.model_config,
        _effective_lr(checkpoint.model_config, checkpoint.train_config),
    )
    samples = load_dataset(args.data)
    metrics = evaluate(model, samples, batch=args.batch, merged=args.merged)
    mode = "merged" if args.merged or checkpoint.merged else "adapted"
    print(f"evaluated {len(samples)} samples ({mode} weights)")
    print(f"overall accuracy: {metrics.overall:.4f}")
    print("per-scenario accuracy:")
    counts = {}
    for s in samples:
        counts[s.scenario] = counts.get(s.scenario, 0) + 1
    for scenario, acc in metrics.per_scenario.items():
        print(f"  {scenario:<10s} {acc:.4f}  ({counts[scenario]} samples)")
    print("confusion matrix (rows true, columns predicted):")
    k = metrics.confusion.shape[0]
    print("        " + " ".join(f"pred{j:<2d}" for j in range(k)))
    for i in range(k):
        row = " ".join(f"{int(n):6d}" for n in metrics.confusion[i])
        print(f"  true{i} {row}")


def cmd_merge(args) -> None:
    checkpoint = load_checkpoint(args.ckpt)
    model = build_model(checkpoint)
    _echo_model(
        checkpoint.model_config,
        _effective_lr(checkpoint.model_config, checkpoint.train_config),
    )
    folded = merge_lora(model)
    save_checkpoint(args.out, model, train_config=checkpoint.train_config)
    print(f"folded {folded} adapted layers; wrote {args.out}")


def cmd_gradcheck(args) -> None:
    if args.config is not None:
        name, model_config, train_config = _resolve_configs(_load_json(args.config))
        _echo_model(model_config, _effective_lr(model_config, train_config), name)
    errs = gradcheck_suite(args.seed)
    for stage, err in errs.items():
        print(f"  {stage:<18s} max relative error {err:.3e}")
    worst = max(errs.values())
    print(f"seed {args.seed}: worst {worst:.3e} (tolerance {_GRADCHECK_TOLERANCE:g})")
    if worst > _GRADCHECK_TOLERANCE:
        raise NumericError(
            f"gradient check failed: {worst:.3e} > {_GRADCHECK_TOLERANCE:g}"
        )


def cmd_oracle(args) -> None:
    spec = _spec_from_dict(_load_json(args.spec))
    _echo_spec(spec)
    if args.views.strip().lower() == "all":
        subset = tuple(range(spec.views))
    else:
        try:
            subset = tuple(int(v) for v in args.views.split(","))
        except ValueError:
            raise ConfigError(
                f"--views must be comma-separated integers or 'all', got {args.views!r}"
            ) from None
    estimate = bayes_oracle(spec, subset, m=args.m)
    print(
        f"views {list(subset)}: bayes accuracy {estimate.accuracy:.4f} "
        f"± {estimate.std_error:.4f} ({estimate.draws} draws)"
    )


# -- entry point -------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossview",
        description="Multi-view proficiency classifier pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic multi-view dataset")
    p.add_argument("--spec", required=True, help="JSON dataset spec file")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.add_argument("--threads", type=int, default=1, help="rendering parallelism cap")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a classifier on a dataset")
    p.add_argument("--config", required=True, help="JSON config (preset + overrides)")
    p.add_argument("--data", required=True, help="dataset path")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset path")
    p.add_argument("--merged", action="store_true", help="fold adapters before scoring")
    p.add_argument("--batch", type=int, default=16, help="evaluation batch size")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("merge", help="fold adapters into dense weights")
    p.add_argument("--ckpt", required=True, help="input checkpoint path")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all blocks")
    p.add_argument("--config", default=None, help="JSON config to echo alongside")
    p.add_argument("--seed", type=int, default=0, help="randomization seed")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle", help="best achievable accuracy from a view subset")
    p.add_argument("--spec", required=True, help="JSON dataset spec file")
    p.add_argument("--views", required=True, help="comma-separated views, or 'all'")
    p.add_argument("--m", type=int, default=100_000, help="Monte-Carlo draws")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        args.func(args)
    except CrossviewError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
