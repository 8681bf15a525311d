"""Command-line entry point.

Subcommands: gen-data, train, eval, diagnose, compare-weighting (alias
compare), gradcheck. Exit codes: 0 success, 2 usage or configuration
error, 3 numeric failure. A flat `key = value` file passed via --config
can stand in for any flag set; explicit flags win over file values.
"""

import argparse
import os
import shutil
import sys

import numpy as np

from . import diagnostics
from .backbone import ModelConfig, PansharpenModel, load_checkpoint
from .cacw import WEIGHT_GENERATORS
from .data import (
    blur_bands,
    build_dataset,
    load_sample,
    read_manifest,
    split_ids,
)
from .errors import AdwmError, NumericError, UsageError
from .metrics import evaluate_noreference, evaluate_reference, write_report_csv
from .tensor import Tensor, concat, conv2d, gradcheck, softmax, spatial_mean, stack
from .trainer import TrainConfig, train
from .weighting import adwm_param_count

VARIANT_CHOICES = ("baseline", "ifw", "cfw", "adwm", "all")


# ----------------------------------------------------------------------
# config file support

def _read_config_file(path):
    if not os.path.isfile(path):
        raise UsageError(f"config file {path} does not exist")
    out = {}
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{ln}: expected key = value, got {line!r}")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def _parse_bool(raw):
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"cannot read {raw!r} as a boolean")


def _apply_config(args, argv):
    """Fill unset flags from the config file; explicit flags win."""
    if not getattr(args, "config", None):
        return args
    file_vals = _read_config_file(args.config)
    explicit = {
        tok[2:].split("=", 1)[0].replace("-", "_")
        for tok in argv if tok.startswith("--")
    }
    actions = {a.dest: a for a in args._subparser._actions}
    for key, raw in file_vals.items():
        if key == "config":
            continue
        action = actions.get(key)
        if action is None:
            raise UsageError(f"config file sets unknown option {key!r}")
        if key in explicit:
            continue
        try:
            if isinstance(action, argparse._StoreTrueAction):
                val = _parse_bool(raw)
            elif action.nargs == 2:
                parts = raw.replace(",", " ").split()
                if len(parts) != 2:
                    raise ValueError("expected two values")
                val = [(action.type or str)(p) for p in parts]
            else:
                val = (action.type or str)(raw)
        except ValueError as e:
            raise UsageError(f"config value {key}={raw!r}: {e}")
        setattr(args, key, val)
    return args


def _check_required(args):
    missing = [
        name for name in getattr(args, "required_flags", ())
        if getattr(args, name) is None
    ]
    if missing:
        flags = ", ".join("--" + m.replace("_", "-") for m in missing)
        raise UsageError(f"missing required option(s): {flags}")


# ----------------------------------------------------------------------
# shared helpers

def _load_pairs(data_dir):
    rows = read_manifest(data_dir)
    return rows, [load_sample(data_dir, r["id"]) for r in rows]


def _split_pairs(pairs, test_count):
    ids = [p.id for p in pairs]
    train_ids, test_ids = split_ids(ids, test_count)
    by_id = {p.id: p for p in pairs}
    return [by_id[i] for i in train_ids], [by_id[i] for i in test_ids]


def _run_training(args, variant, out_dir, d_frac=None, generator=None):
    rows, pairs = _load_pairs(args.data)
    bands = rows[0]["c"]
    if d_frac is None:
        try:
            d_frac = float(args.d_frac)
        except ValueError:
            raise UsageError(f"--d-frac must be a single number here, "
                             f"got {args.d_frac!r}")
    gen = generator if generator is not None else getattr(args, "generator", "cacw")
    cfg = ModelConfig(
        bands=bands, channels=args.channels, blocks=args.blocks,
        variant=variant, ifw_d_fraction=d_frac, cfw_d_fraction=d_frac,
        generator=gen,
    )
    model = PansharpenModel(cfg, seed=args.seed)
    train_pairs, val_pairs = _split_pairs(pairs, args.test_count)
    tcfg = TrainConfig(
        epochs=args.epochs, lr0=args.lr0, batch_size=args.batch_size,
        seed=args.seed, halve_every=args.halve_every,
    )
    return train(model, train_pairs, val_pairs, tcfg, out_dir), model


# ----------------------------------------------------------------------
# subcommands

def cmd_gen_data(args):
    manifest = build_dataset(
        args.seed, args.count, args.size[0], args.size[1], args.bands, args.out
    )
    print(manifest)
    return 0


def cmd_train(args):
    variants = list(VARIANT_CHOICES[:-1]) if args.variant == "all" else [args.variant]
    for variant in variants:
        out_dir = (os.path.join(args.out, variant)
                   if args.variant == "all" else args.out)
        result, _ = _run_training(args, variant, out_dir)
        print(f"{variant}: best_val_psnr={result.best_val_psnr:.4f} "
              f"final={result.final_path}")
        if args.log and args.variant != "all":
            shutil.copyfile(result.log_path, args.log)
            print(args.log)
    return 0


def _pan_degraded(pan, scale):
    return blur_bands(pan[:, :, None])[::scale, ::scale, 0]


def cmd_eval(args):
    model = load_checkpoint(args.model)
    rows, pairs = _load_pairs(args.data)
    if rows[0]["c"] != model.config.bands:
        raise UsageError(
            f"dataset has {rows[0]['c']} bands but the checkpoint was "
            f"trained with {model.config.bands}"
        )
    scale = model.config.scale
    report_rows = []
    for s in pairs:
        pred = model.forward(s.pan, s.lrms).data
        m = {"id": s.id}
        m.update(evaluate_reference(s.gt, pred))
        if args.full_res:
            m.update(
                evaluate_noreference(pred, s.lrms, s.pan,
                                     _pan_degraded(s.pan, scale))
            )
        report_rows.append(m)
    write_report_csv(
        args.report, report_rows,
        metadata={"dataset": args.data, "model": args.model,
                  "variant": model.config.variant},
    )
    means = {
        k: float(np.mean([r[k] for r in report_rows]))
        for k in report_rows[0] if k != "id"
    }
    print(args.report)
    print(" ".join(f"{k}={v:.4f}" for k, v in means.items()))
    return 0


def cmd_diagnose(args):
    model = load_checkpoint(args.model)
    rows, _ = _load_pairs(args.data)
    probe = load_sample(args.data, args.sample or rows[0]["id"])
    os.makedirs(args.out, exist_ok=True)

    entries = diagnostics.layer_spectra(model, probe.pan, probe.lrms)
    scree_rows = []
    entropy_rows = []
    series = []
    for e in entries:
        diagnostics.svg_heatmap(
            os.path.join(args.out, f"covariance_layer{e['layer']}.svg"),
            e["covariance"],
            title=f"channel covariance, block {e['layer']}",
        )
        for idx, v in enumerate(e["scree"]):
            scree_rows.append((e["layer"], idx, float(v)))
        entropy_rows.append((e["layer"], float(e["entropy"])))
        series.append(
            (f"block {e['layer']}", list(range(len(e["scree"]))),
             [float(v) for v in e["scree"]])
        )
    diagnostics.write_rows_csv(
        os.path.join(args.out, "scree.csv"), ["layer", "index", "value"], scree_rows
    )
    diagnostics.write_rows_csv(
        os.path.join(args.out, "entropy.csv"), ["layer", "entropy"], entropy_rows
    )
    diagnostics.svg_line_plot(
        os.path.join(args.out, "scree.svg"), series, title="eigenvalue spectra"
    )

    if model.ifw is not None or model.cfw is not None:
        trace = diagnostics.weight_trace(model, probe)
        diagnostics.write_rows_csv(
            os.path.join(args.out, "weight_trace.csv"),
            ["epoch", "layer", "index", "weight"], trace,
        )

    H, W = probe.pan.shape
    wcfg = model.config.weighting_config()
    f = diagnostics.count_flops(
        H, W, model.config.channels, model.config.blocks,
        d_ifw=wcfg.ifw_d, d_cfw=wcfg.cfw_d,
    )
    diagnostics.write_rows_csv(
        os.path.join(args.out, "flops.csv"), ["component", "count"],
        sorted(f.as_dict().items()),
    )
    print(args.out)
    return 0


def cmd_compare(args):
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in WEIGHT_GENERATORS:
            raise UsageError(
                f"unknown weighting method {m!r}; "
                f"choose from {sorted(WEIGHT_GENERATORS)}"
            )
    fracs = [float(x) for x in str(args.d_frac).split(",")]
    rows, _ = _load_pairs(args.data)
    H, W = rows[0]["H"], rows[0]["W"]
    os.makedirs(args.out, exist_ok=True)

    lines = [
        "# params column counts the weighting modules only",
        "# flops column is the dual-level weighting multiply count "
        "(covariance + mlp + gate + combine) at these dimensions",
        "method,d_frac,params,flops,psnr",
    ]
    for method in methods:
        for frac in fracs:
            run_dir = os.path.join(args.out, f"{method}_d{frac:g}")
            result, model = _run_training(
                args, "adwm", run_dir, d_frac=frac, generator=method
            )
            params = adwm_param_count(model.config.weighting_config())
            flops = diagnostics.count_flops(
                H, W, args.channels, args.blocks, d_fraction=frac
            ).total
            lines.append(
                f"{method},{frac:g},{params},{flops},{result.best_val_psnr:.10g}"
            )
            print(lines[-1])
    csv_path = os.path.join(args.out, "comparison.csv")
    with open(csv_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    print(csv_path)
    return 0


def _gradcheck_suite(seed, corrupt=False):
    """Per-op finite-difference verification; returns [(name, err)]."""
    from .cacw import CacwModule, cacw_forward, compute_covariance, normalize_covariance
    from .weighting import AdwmConfig, adwm_forward, make_adwm_modules
    from .backbone import upsample_bilinear

    rng = np.random.default_rng(seed)

    def t(*shape):
        return Tensor(rng.standard_normal(shape))

    fixed_k = t(2, 2, 3, 3)
    proj33 = t(3, 3)
    cases = [
        ("add", lambda: gradcheck(lambda a, b: (a + b).sum(), [t(3, 4), t(3, 4)])),
        ("mul", lambda: gradcheck(lambda a, b: (a * b).sum(), [t(3, 4), t(3, 4)])),
        ("div", lambda: gradcheck(
            lambda a, b: (a / b).sum(),
            [t(3, 3), Tensor(rng.standard_normal((3, 3)) + 3.0)])),
        ("matmul", lambda: gradcheck(lambda a, b: (a @ b).sum(), [t(3, 4), t(4, 2)])),
        ("conv2d", lambda: gradcheck(
            lambda x, k: conv2d(x, k).sum(), [t(2, 5, 5), fixed_k])),
        ("relu", lambda: gradcheck(lambda a: a.relu().sum(), t(4, 4))),
        ("leaky_relu", lambda: gradcheck(lambda a: a.leaky_relu().sum(), t(4, 4))),
        ("sigmoid", lambda: gradcheck(lambda a: a.sigmoid().sum(), t(4, 4))),
        ("sqrt", lambda: gradcheck(
            lambda a: a.sqrt().sum(), Tensor(rng.random((4, 4)) + 0.5))),
        ("abs", lambda: gradcheck(lambda a: a.abs().sum(), t(4, 4))),
        ("sum", lambda: gradcheck(lambda a: (a.sum(axis=0) * proj33).sum(),
                                  t(4, 3, 3))),
        ("mean", lambda: gradcheck(lambda a: a.mean().sum(), t(4, 4))),
        ("reshape", lambda: gradcheck(lambda a: a.reshape(2, 6).abs().sum(),
                                      t(3, 4))),
        ("transpose", lambda: gradcheck(lambda a: (a.T * a.T).sum(), t(3, 4))),
        ("diagonal", lambda: gradcheck(lambda a: a.diagonal().sum(), t(4, 4))),
        ("softmax", lambda: gradcheck(lambda a: (softmax(a) * proj33).sum(),
                                      t(3, 3))),
        ("spatial_mean", lambda: gradcheck(
            lambda a: spatial_mean(a).sum(), t(3, 4, 4))),
        ("concat", lambda: gradcheck(
            lambda a, b: concat([a, b], axis=0).abs().sum(), [t(2, 3), t(1, 3)])),
        ("stack", lambda: gradcheck(
            lambda a, b: stack([a, b], axis=0).abs().sum(), [t(2, 3), t(2, 3)])),
        ("upsample", lambda: gradcheck(
            lambda a: upsample_bilinear(a, 2).abs().sum(), t(2, 3, 3))),
        ("covariance", lambda: gradcheck(
            lambda X: compute_covariance(X).abs().sum(), t(8, 3))),
        ("correlation", lambda: gradcheck(
            lambda X: normalize_covariance(compute_covariance(X)).abs().sum(),
            t(8, 3))),
    ]

    results = []
    for name, fn in cases:
        results.append((name, float(fn())))

    mod = CacwModule(4, seed=seed)
    for p in mod.params():
        p.data[...] = 0.3 * rng.standard_normal(p.data.shape)
    X = t(10, 4)
    probe = [X] + mod.params()
    results.append((
        "weight_generator",
        float(gradcheck(lambda x, *_: cacw_forward(mod, x).sum(), probe)),
    ))

    wcfg = AdwmConfig(n_layers=2, channels=3)
    modules = make_adwm_modules(wcfg, seed=seed)
    for gen in modules["ifw"] + [modules["cfw"]]:
        for p in gen.params():
            p.data[...] = 0.3 * rng.standard_normal(p.data.shape)
    feats = [t(3, 3, 3), t(3, 3, 3)]
    wparams = [p for gen in modules["ifw"] + [modules["cfw"]] for p in gen.params()]
    results.append((
        "dual_level_weighting",
        float(gradcheck(
            lambda *_: adwm_forward(wcfg, modules, feats).abs().sum(),
            [feats[0], feats[1]] + wparams)),
    ))

    model = PansharpenModel(
        ModelConfig(bands=2, channels=3, blocks=2, variant="adwm"), seed=seed
    )
    mrng = np.random.default_rng(seed + 1)
    for p in model.params():
        p.data[...] = 0.1 * mrng.standard_normal(p.data.shape)
    pan = mrng.random((8, 8))
    lrms = Tensor(mrng.random((2, 2, 2)))
    mproj = Tensor(mrng.standard_normal((8, 8, 2)))
    mparams = [lrms, model.enc_w, model.blocks[0]["w1"], model.dec_w,
               model.ifw[0].W2, model.cfw.W1]
    results.append((
        "model_end_to_end",
        float(gradcheck(
            lambda lt, *_: (model.forward(pan, lt) * mproj).sum(), mparams)),
    ))

    if corrupt:
        def bad_square(x):
            out = Tensor(x.data * x.data, True, (x,))

            def _backward():
                x._accumulate(1.9 * x.data * out.grad)  # wrong factor, on purpose

            out._backward = _backward
            return out

        results.append(
            ("corrupted_square", float(gradcheck(lambda a: bad_square(a).sum(),
                                                 t(3, 3))))
        )
    return results


def cmd_gradcheck(args):
    results = _gradcheck_suite(args.seed, corrupt=args.corrupt)
    worst = 0.0
    for name, err in results:
        print(f"{name}: {err:.3e}")
        worst = max(worst, err)
    if worst >= 1e-4:
        raise NumericError(f"gradient verification failed, worst error {worst:.3e}")
    print(f"all gradients verified, worst error {worst:.3e}")
    return 0


# ----------------------------------------------------------------------
# parser

def _add_common_train_flags(p):
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-frac", dest="d_frac", default="0.8")
    p.add_argument("--channels", type=int, default=48)
    p.add_argument("--blocks", type=int, default=6)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr0", type=float, default=2e-3)
    p.add_argument("--halve-every", type=int, default=150)
    p.add_argument("--test-count", type=int, default=32)


def build_parser():
    ap = argparse.ArgumentParser(
        prog="adwm",
        description="correlation-weighted pansharpening experiments",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def new_command(name, fn, required, **kw):
        p = sub.add_parser(name, **kw)
        p.add_argument("--config", help="flat key = value file; flags override")
        p.set_defaults(fn=fn, _subparser=p, required_flags=required)
        return p

    p = new_command("gen-data", cmd_gen_data, ("out", "count", "size"),
                    help="write a synthetic dataset")
    p.add_argument("--out")
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--bands", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)

    p = new_command("train", cmd_train, ("data", "out"),
                    help="train one variant or all four")
    p.add_argument("--variant", choices=VARIANT_CHOICES, default="adwm")
    p.add_argument("--out", help="run directory")
    p.add_argument("--log", help="also copy the log CSV here")
    p.add_argument("--generator", default="cacw",
                   choices=sorted(WEIGHT_GENERATORS))
    _add_common_train_flags(p)

    p = new_command("eval", cmd_eval, ("model", "data", "report"),
                    help="metrics report for a checkpoint")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--report")
    p.add_argument("--full-res", action="store_true", dest="full_res")

    p = new_command("diagnose", cmd_diagnose, ("model", "data", "out"),
                    help="redundancy and weight artifacts")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--sample", help="probe sample id (default: first)")

    p = new_command("compare-weighting", cmd_compare, ("data", "out"),
                    aliases=["compare"],
                    help="sweep weight generators and reduction fractions")
    p.add_argument("--methods", default="cacw")
    p.add_argument("--out")
    _add_common_train_flags(p)

    p = new_command("gradcheck", cmd_gradcheck, (),
                    help="finite-difference verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true",
                   help="inject a wrong backward rule; must fail")
    return ap


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        args = _apply_config(args, argv)
        _check_required(args)
        return args.fn(args)
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except AdwmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
