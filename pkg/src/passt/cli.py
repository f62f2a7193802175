"""Command-line entry point.

Settings resolve in this order, later wins: built-in defaults, the
``PASST_SEED`` environment variable (seed only), a ``--config`` file of flat
``key=value`` lines, then explicit flags. Every command echoes the resolved
settings to stderr as a ``#``-prefixed header so a run can be repeated.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

import argparse
import csv
import logging
import os
import sys

import numpy as np

from passt import bench, frontend, net, tensorbin, train
from passt.eval import accuracy, ensemble_logits, mean_ap
from passt.tokenizer import (
    PatchGeometry,
    PatchoutSpec,
    apply_patchout,
    extract_patch_grid,
    project_patches,
    sequence_length,
)

# key -> (default, type, help)
SETTINGS = {
    "embed_dim": (768, int, "embedding width E"),
    "heads": (12, int, "attention heads"),
    "depth": (12, int, "number of transformer blocks"),
    "n_classes": (527, int, "output labels"),
    "mlp_ratio": (4, int, "MLP expansion factor"),
    "stride": (10, int, "patch stride on both axes"),
    "n_mels": (frontend.N_MELS, int, "mel bands"),
    "n_frames": (1001, int, "spectrogram frames the positional tables are sized for"),
    "dist_token": (True, bool, "use a distillation token"),
    "patchout": ("none", str, "none | unstructured:K | structured:F,T"),
    "seed": (0, int, "master seed"),
    "norm_mean": (frontend.NORM_MEAN, float, "spectrogram normalization mean"),
    "norm_std": (frontend.NORM_STD, float, "spectrogram normalization std"),
    "lr_max": (1e-5, float, "peak learning rate"),
    "lr_min": (1e-7, float, "final learning rate"),
    "warm_hold_epochs": (50.0, float, "epochs at lr_max"),
    "decay_end_epoch": (100.0, float, "epoch where linear decay reaches lr_min"),
    "finetune_epochs": (20.0, float, "epochs at lr_min after the decay"),
    "weight_decay": (1e-4, float, "AdamW decoupled weight decay"),
    "batch_size": (4, int, "training batch size"),
    "epoch_size": (0, int, "examples drawn per epoch (0 = all)"),
    "max_steps": (0, int, "stop after this many optimizer steps (0 = full schedule)"),
    "clip_seconds": (10.0, float, "clip length after pad/crop"),
}

GROUPS = {
    "model": ["embed_dim", "heads", "depth", "n_classes", "mlp_ratio", "stride", "n_mels",
              "n_frames", "dist_token"],
    "train": ["patchout", "lr_max", "lr_min", "warm_hold_epochs", "decay_end_epoch",
              "finetune_epochs", "weight_decay", "batch_size", "epoch_size", "max_steps",
              "clip_seconds"],
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_bool(text):
    text = str(text).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(key, value):
    kind = SETTINGS[key][1]
    try:
        return _parse_bool(value) if kind is bool else kind(value)
    except ValueError as exc:
        raise UsageError(f"bad value for {key}: {value!r}") from exc


def read_config_file(path):
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in SETTINGS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _convert(key, value)
    return out


def resolve_settings(args):
    settings = {k: v[0] for k, v in SETTINGS.items()}
    if os.environ.get("PASST_SEED"):
        settings["seed"] = _convert("seed", os.environ["PASST_SEED"])
    if getattr(args, "config", None):
        settings.update(read_config_file(args.config))
    for key in SETTINGS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = _convert(key, value)
    return settings


def model_config(s):
    geom = PatchGeometry(s["stride"], s["stride"], s["n_mels"], s["n_frames"])
    return net.ModelConfig(
        embed_dim=s["embed_dim"], heads=s["heads"], depth=s["depth"], n_classes=s["n_classes"],
        mlp_ratio=s["mlp_ratio"], geometry=geom, has_dist_token=s["dist_token"],
    )


def _add_settings(p, keys):
    for key in keys:
        default, kind, help_text = SETTINGS[key]
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None,
                       metavar=kind.__name__.upper(), help=f"{help_text} (default {default})")


def _echo_header(command, settings, keys, extra=()):
    items = [f"{k}={settings[k]}" for k in keys] + list(extra)
    print(f"# passt {command} " + " ".join(items), file=sys.stderr)


def _spectrogram(path, s):
    w = frontend.load_pcm(path)
    spec = frontend.mel_spectrogram(w)
    return frontend.normalize(spec, s["norm_mean"], s["norm_std"])


def cmd_tokenize(args, s):
    keys = ["stride", "patchout", "seed"]
    _echo_header("tokenize", s, keys, [f"training={not args.eval}"])
    spec = _spectrogram(args.wav, s)
    geom = PatchGeometry(s["stride"], s["stride"], spec.n_mels, spec.frame_count)
    po = PatchoutSpec.parse(s["patchout"], seed=s["seed"])
    training = not args.eval
    n_special = 2 if s["dist_token"] else 1
    seq = sequence_length(geom, po, training, n_special)
    if po.mode == "none" or not training:
        print(f"patches={geom.n_patches} seq={seq}")
    else:
        print(f"patches={geom.n_patches} kept={seq - n_special} seq={seq}")
    if args.dump:
        grid = extract_patch_grid(spec.values, geom)
        eye = np.eye(geom.patch_dim, dtype=np.float32)
        tokens = project_patches(grid, eye, np.zeros(geom.patch_dim, dtype=np.float32))
        tokens = apply_patchout(tokens, geom, po, training)
        tensorbin.save(args.dump, {
            "spectrogram": spec.values,
            "patches": np.ascontiguousarray(tokens.values, dtype=np.float32),
            "provenance": tokens.provenance.astype(np.float32),
        })
    return 0


def cmd_init_weights(args, s):
    _echo_header("init-weights", s, GROUPS["model"] + ["seed"])
    config = model_config(s)
    net.save_weights(net.init_params(config, seed=s["seed"]), args.out)
    print(f"params={net.param_count(config)}")
    return 0


def _load_model(path, s):
    params = tensorbin.load(path)
    config = net.infer_config(params, s["heads"], s["stride"], s["stride"], s["n_mels"])
    return params, config


def cmd_forward(args, s):
    _echo_header("forward", s, ["heads", "stride", "norm_mean", "norm_std"], [f"weights={args.weights}"])
    params, config = _load_model(args.weights, s)
    logits = np.stack([net.model_forward(_spectrogram(p, s), params, config) for p in args.wav])
    if args.out:
        tensorbin.save(args.out, {"logits": logits})
    for path, row in zip(args.wav, logits):
        print(path + "\t" + " ".join(f"{v:.6g}" for v in row))
    return 0


def cmd_train_toy(args, s):
    if args.manifest:
        dataset = train.load_manifest(args.manifest)
    else:
        dataset = train.synthetic_dataset(args.synthetic, s["n_classes"], s["clip_seconds"], s["seed"])
    _echo_header("train-toy", s, GROUPS["model"] + GROUPS["train"] + ["seed", "norm_mean", "norm_std"],
                 [f"examples={len(dataset)}"])
    config = model_config(s)
    schedule = train.ScheduleConfig(s["lr_max"], s["lr_min"], s["warm_hold_epochs"],
                                    s["decay_end_epoch"], s["finetune_epochs"], s["weight_decay"])
    cfg = train.TrainConfig(batch_size=s["batch_size"], clip_seconds=s["clip_seconds"],
                            epoch_size=s["epoch_size"], max_steps=s["max_steps"], seed=s["seed"],
                            norm_mean=s["norm_mean"], norm_std=s["norm_std"], init_seed=s["seed"])
    po = PatchoutSpec.parse(s["patchout"], seed=s["seed"])
    result = train.train_loop(dataset, config, schedule, po, cfg, metrics_path=args.metrics)
    net.save_weights(result.params, args.out)
    maps = [r["train_map"] for r in result.metrics if r["train_map"] != ""]
    print(f"steps={len(result.metrics)} final_loss={result.metrics[-1]['loss']:.6f} "
          f"train_map={maps[-1]:.4f}")
    return 0


def cmd_bench(args, s):
    _echo_header("bench", s, GROUPS["model"] + ["seed"],
                 [f"n={args.n}", f"batch={args.batch}", f"repeats={args.repeats}",
                  f"backward={args.backward}"])
    ns = [int(v) for v in args.n.split(",")]
    config = model_config(s)
    rows = bench.measure_throughput(config, ns, args.batch, args.repeats, backward=args.backward,
                                    seed=s["seed"])
    if args.out:
        with open(args.out, "w", newline="") as f:
            bench.write_csv(rows, f)
    else:
        bench.write_csv(rows, sys.stdout)
    if args.figure:
        with open(args.figure, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["n", "speed", "mem", "map"], lineterminator="\n")
            w.writeheader()
            w.writerows(bench.figure_rows(rows))
    return 0


def _load_matrix(path, key):
    tensors = tensorbin.load(path)
    if key not in tensors:
        if len(tensors) != 1:
            raise KeyError(f"{path} has no tensor {key!r}")
        return next(iter(tensors.values()))
    return tensors[key]


def cmd_ensemble(args, s):
    _echo_header("ensemble", s, [], [f"inputs={','.join(args.logits)}"])
    avg = ensemble_logits([_load_matrix(p, "logits") for p in args.logits])
    tensorbin.save(args.out, {"logits": avg})
    if args.targets:
        print(f"mAP={mean_ap(avg, _load_matrix(args.targets, 'targets')):.6f}")
    return 0


def cmd_eval(args, s):
    _echo_header("eval", s, [], [f"logits={args.logits}", f"targets={args.targets}"])
    logits = _load_matrix(args.logits, "logits")
    targets = _load_matrix(args.targets, "targets")
    if targets.ndim == 2 and targets.shape == logits.shape:
        print(f"mAP={mean_ap(logits, targets):.6f}")
        if np.all(targets.sum(axis=1) == 1):
            print(f"accuracy={accuracy(logits, targets.argmax(axis=1)):.6f}")
    else:
        print(f"accuracy={accuracy(logits, targets):.6f}")
    return 0


def cmd_crop_time_pos(args, s):
    _echo_header("crop-time-pos", s, ["heads", "stride"], [f"length={args.length}"])
    params, config = _load_model(args.weights, s)
    cropped, _ = net.crop_time_positions(params, config, args.length)
    net.save_weights(cropped, args.out)
    print(f"time_pos {params['time_pos'].shape[0]} -> {cropped['time_pos'].shape[0]}")
    return 0


def build_parser():
    parser = _Parser(prog="passt", description="Patchout spectrogram transformer toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, fn, groups, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value settings file")
        keys = [k for g in groups for k in GROUPS[g]] + ["seed", "norm_mean", "norm_std"]
        _add_settings(p, dict.fromkeys(keys))
        p.set_defaults(fn=fn)
        return p

    p = command("tokenize", cmd_tokenize, ["model"], "spectrogram and token-sequence statistics")
    p.add_argument("--patchout", dest="patchout", default=None)
    p.add_argument("--eval", action="store_true", help="inference mode: no Patchout")
    p.add_argument("--dump", help="write spectrogram/patches/provenance as TENSORBIN")
    p.add_argument("wav")

    p = command("init-weights", cmd_init_weights, ["model"], "write freshly initialized weights")
    p.add_argument("--out", required=True)

    p = command("forward", cmd_forward, ["model"], "logits for one or more WAV files")
    p.add_argument("--weights", required=True)
    p.add_argument("--out", help="write logits as TENSORBIN")
    p.add_argument("wav", nargs="+")

    p = command("train-toy", cmd_train_toy, ["model", "train"], "train on a manifest or synthetic tones")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic clips")
    p.add_argument("--out", required=True, help="weights output path")
    p.add_argument("--metrics", help="metrics CSV output path")

    p = command("bench", cmd_bench, ["model"], "analytic cost and throughput vs sequence length")
    p.add_argument("--n", default="254,474,790,1190", help="comma-separated sequence lengths")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--backward", action="store_true", help="time forward + backward")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("--figure", help="also write n,speed,mem,map CSV here")

    p = command("ensemble", cmd_ensemble, [], "average logits from several models")
    p.add_argument("logits", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--targets")

    p = command("eval", cmd_eval, [], "mAP / accuracy of logits against targets")
    p.add_argument("--logits", required=True)
    p.add_argument("--targets", required=True)

    p = command("crop-time-pos", cmd_crop_time_pos, ["model"], "shorten the time positional table")
    p.add_argument("--weights", required=True)
    p.add_argument("--length", type=int, required=True)
    p.add_argument("--out", required=True)
    return parser


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code
    if not getattr(args, "fn", None):
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve_settings(args)
    except (UsageError, OSError) as exc:
        print(f"passt: error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.fn(args, settings)
    except UsageError as exc:
        print(f"passt: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, IndexError, FloatingPointError) as exc:
        print(f"passt: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())
