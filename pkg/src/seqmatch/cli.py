"""Command-line front end.

Exit codes: 0 success, 2 bad configuration, 3 training halted on a
non-finite loss, 4 missing artifact (dataset, checkpoint, config file),
64 command-line usage error. A SEED environment variable, when set,
overrides the configured training seed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluate as eval_mod
from .config import ConfigError, ModelConfig, RunConfig, TrainConfig, VARIANTS
from .recurrent import dense_equivalent_flops, flop_estimate, param_count
from .siamese import SiameseModel, pair_loss, param_shapes
from .tensor import Tensor, finite_diff_check
from .training import (
    NanLossError,
    init_params,
    latest_checkpoint,
    load_checkpoint,
    train,
)

log = logging.getLogger(__name__)

USAGE_EXIT = 64


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems with exit code 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints: {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="seqmatch", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic walker dataset")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--spec", help="key = value generator spec file")
    g.add_argument("--seed", type=int, help="override the generator seed")

    t = sub.add_parser("train", help="train a matcher")
    t.add_argument("--config", help="key = value run config file")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="run directory for checkpoints")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    t.add_argument("--workers", type=int, default=1, help="parallel pair workers")
    _model_flags(t, with_pool=True)
    t.add_argument("--init", choices=("uniform", "scaled"), help="override weight init")
    t.add_argument("--freeze-encoder", action="store_true", default=None,
                   help="keep encoder weights fixed during training")
    t.add_argument("--seed", type=int, help="override the training seed")
    t.add_argument("--epochs", type=int, help="override the epoch count")

    e = sub.add_parser("eval", help="CMC of view-a probes vs the view-b gallery")
    e.add_argument("--checkpoint", required=True, help="checkpoint or run directory")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--out", required=True, help="CMC csv path")
    e.add_argument("--pool", choices=("attention", "mean", "max", "fisher"),
                   help="override the pooling mode at evaluation time")
    e.add_argument("--tta", action="store_true",
                   help="average distances over mirrored and shifted copies")
    e.add_argument("--max-len", type=int, help="cap sequence length")
    e.add_argument("--ranks", type=_ints, default=(1, 5, 10, 20))
    e.add_argument("--gmm-components", type=int, default=None,
                   help="mixture size for fisher pooling")

    a = sub.add_parser("ablate-length", help="rank-1 over probe/gallery length caps")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True, help="csv matrix path")
    a.add_argument("--lengths", type=_ints, default=(1, 2, 4, 8, 16, 32, 64, 128))
    a.add_argument("--pool", choices=("attention", "mean", "max"))

    c = sub.add_parser("gradcheck", help="finite-difference audit of the full loss")
    c.add_argument("--tol", type=float, default=5e-4)
    c.add_argument("--seed", type=int, default=0)
    _model_flags(c)

    at = sub.add_parser("attend", help="dump spatial and temporal attention for a sequence")
    at.add_argument("--checkpoint", required=True)
    at.add_argument("--data", required=True)
    at.add_argument("--identity", required=True)
    at.add_argument("--view", default="a", choices=data_mod.VIEWS)
    at.add_argument("--seq", type=int, default=0)
    at.add_argument("--out", required=True, help="csv path")

    pc = sub.add_parser("param-count", help="parameter and flop accounting per variant")
    _model_flags(pc)
    return p


def _model_flags(sp, with_pool: bool = False) -> None:
    sp.add_argument("--variant", choices=sorted(VARIANTS), help="recurrent kernel layout")
    if with_pool:
        sp.add_argument("--pool", dest="pool_mode",
                        choices=("attention", "mean", "max", "fisher"),
                        help="temporal pooling mode")
    sp.add_argument("--mute-attention", action="store_true", default=None,
                    help="replace learned spatial weights with the uniform map")
    sp.add_argument("--collapse-attention", action="store_true", default=None,
                    help="sum the attended cube to a single vector per step")


def _load_run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = RunConfig.from_file(path)
    else:
        cfg = RunConfig(model=ModelConfig(), train=TrainConfig())
    overrides = {}
    for field in ("variant", "pool_mode", "mute_attention", "collapse_attention",
                  "init", "freeze_encoder", "seed", "epochs"):
        value = getattr(args, field, None)
        if value is not None:
            overrides[field] = value
    if "SEED" in os.environ:
        try:
            overrides["seed"] = int(os.environ["SEED"])
        except ValueError as e:
            raise ConfigError(f"SEED must be an integer, got {os.environ['SEED']!r}") from e
    return cfg.with_overrides(**overrides) if overrides else cfg


def _load_dataset(path_text: str) -> data_mod.Dataset:
    path = Path(path_text)
    if not path.exists():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    return data_mod.load(path)


def _load_model(path_text: str):
    path = Path(path_text)
    if (path / "manifest.json").exists():
        ckpt = path
    else:
        found = latest_checkpoint(path) if path.exists() else None
        if found is None:
            raise FileNotFoundError(f"no checkpoint under {path}")
        ckpt = found
    cfg, params, _acc, _epoch, _rng = load_checkpoint(ckpt)
    return cfg, SiameseModel(cfg.model, params)


def _cmd_gen_data(args) -> int:
    if args.spec:
        spec_path = Path(args.spec)
        if not spec_path.exists():
            raise FileNotFoundError(f"spec file not found: {spec_path}")
        spec = data_mod.SynthSpec.from_file(spec_path)
    else:
        spec = data_mod.SynthSpec()
    if args.seed is not None:
        from dataclasses import replace

        spec = replace(spec, seed=args.seed)
    dataset = data_mod.generate(spec)
    data_mod.save(dataset, Path(args.out))
    print(f"wrote {dataset.n_sequences()} sequences for "
          f"{len(dataset.identities())} identities to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_run_config(args)
    dataset = _load_dataset(args.data)
    result = train(dataset, cfg, Path(args.out), resume=args.resume,
                   workers=args.workers)
    final = result.loss_rows[-1][1] if result.loss_rows else float("nan")
    print(f"trained {len(result.loss_rows)} epochs, final mean loss {final:.6f}, "
          f"checkpoint {result.checkpoint}")
    return 0


def _eval_gmm(args, cfg, model, dataset):
    pool = args.pool or cfg.model.pool_mode
    if pool != "fisher":
        return None
    comps = args.gmm_components or cfg.train.gmm_components
    rng = np.random.default_rng(cfg.train.seed)
    return eval_mod.fit_state_gmm(model, dataset, comps, rng=rng)


def _cmd_eval(args) -> int:
    cfg, model = _load_model(args.checkpoint)
    dataset = _load_dataset(args.data)
    gmm = _eval_gmm(args, cfg, model, dataset)
    rates = eval_mod.evaluate_model(
        model, dataset, ranks=args.ranks, max_len=args.max_len,
        pool=args.pool, gmm=gmm, tta=args.tta,
    )
    eval_mod.write_cmc_csv(args.out, args.ranks, rates, [0.0] * len(args.ranks))
    for r, rate in zip(args.ranks, rates):
        print(f"rank {r}: {rate:.2f}%")
    return 0


def _cmd_ablate(args) -> int:
    cfg, model = _load_model(args.checkpoint)
    dataset = _load_dataset(args.data)
    matrix = eval_mod.length_ablation(model, dataset, args.lengths, pool=args.pool)
    eval_mod.write_length_csv(args.out, args.lengths, matrix)
    print(f"wrote {len(args.lengths)}x{len(args.lengths)} rank-1 matrix to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    overrides = {k: v for k in ("variant", "mute_attention", "collapse_attention")
                 if (v := getattr(args, k, None)) is not None}
    model_cfg = ModelConfig(
        frame_h=8, frame_w=8, encoder_channels=(4, 3),
        channels=(2, 2), kernels=((3, 3), (3, 3)), pools=(1,),
        variant="custom", dtype="float64",
    )
    if overrides:
        from dataclasses import replace

        if "variant" in overrides:
            model_cfg = replace(model_cfg, variant=overrides.pop("variant"),
                                kernels=(), channels=(2, 2, 2), pools=(1, 1))
        model_cfg = replace(model_cfg, **overrides)
    cfg = RunConfig(model=model_cfg, train=TrainConfig(seed=args.seed, window=2,
                                                       dropout=0.0, init="uniform"))
    rng = np.random.default_rng(args.seed)
    params = init_params(cfg, rng)
    model = SiameseModel(model_cfg, params)
    fa = rng.random((2, 8, 8, 3)).astype(np.float64)
    fb = rng.random((2, 8, 8, 3)).astype(np.float64)

    def loss() -> Tensor:
        res = model.pair(fa, fb, train=False)
        value, _clamped = pair_loss(res, 1, lam=1.0)
        return value

    report = finite_diff_check(loss, params)
    worst = 0.0
    for name in sorted(report):
        err = report[name]
        worst = max(worst, err)
        print(f"{name}: {err:.3e}")
    print(f"max relative error: {worst:.3e} (tol {args.tol:.1e})")
    return 0 if worst < args.tol else 1


def _cmd_attend(args) -> int:
    cfg, model = _load_model(args.checkpoint)
    dataset = _load_dataset(args.data)
    if args.identity not in dataset.identities():
        raise ConfigError(f"unknown identity {args.identity!r}")
    frames = dataset.get(args.identity, args.view, args.seq)
    res = model.branch(frames, train=False)
    t_steps = len(res.tops)
    if res.alpha is not None:
        alpha = res.alpha.data.reshape(-1)
    else:
        alpha = np.full(t_steps, 1.0 / t_steps)
    n_loc = res.spatial[0].data.size
    lines = ["frame,temporal_weight," + ",".join(f"cell_{i + 1}" for i in range(n_loc))]
    for t in range(t_steps):
        cells = ",".join(repr(float(v)) for v in res.spatial[t].data.reshape(-1))
        lines.append(f"{t},{repr(float(alpha[t]))},{cells}")
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote attention for {t_steps} frames to {args.out}")
    return 0


def _cmd_param_count(args) -> int:
    variant = args.variant or "G55"
    model_cfg = ModelConfig(variant=variant,
                            mute_attention=bool(args.mute_attention),
                            collapse_attention=bool(args.collapse_attention))
    stack = model_cfg.stack_config()
    per_layer, total = param_count(stack)
    kernels = model_cfg.resolved_kernels()
    print(f"variant {variant}")
    for i, (n, spec) in enumerate(zip(per_layer, stack.layers), start=1):
        k1, k2 = kernels[i - 1]
        print(f"layer {i}: {spec.channels} channels, {k1}x{k2} kernels, {n} parameters")
    print(f"recurrent parameters: {total}")
    shapes = param_shapes(model_cfg)
    grand = sum(int(np.prod(s)) if s else 1 for s in shapes.values())
    print(f"whole model parameters: {grand}")
    t_ref = 20
    flops = flop_estimate(stack, t_ref)
    dense = dense_equivalent_flops(stack, t_ref)
    print(f"multiplies for a {t_ref}-frame sequence: {flops:.3e} "
          f"(dense equivalent {dense:.3e}, {dense / flops:.1f}x)")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate-length": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "attend": _cmd_attend,
    "param-count": _cmd_param_count,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except NanLossError as e:
        print(f"training halted: {e}", file=sys.stderr)
        return 3
    except FileNotFoundError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
