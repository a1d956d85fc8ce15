"""Command line front end.

Every command writes its outputs plus ``manifest.json`` (resolved config,
seed, toolkit version and output hashes) under ``--out-dir``.  Settings can
come from a flat ``key = value`` config file, from flags, and from
``--set key=value`` overrides, in increasing order of precedence.

Exit codes: 0 ok, 2 bad config, 3 precondition failed, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from . import bounds as B
from . import harness as H
from . import lock as L
from . import nn
from . import stain as S
from . import tensor as T
from .trigger import (ReductionMap, TriggerError, apply_patch, extract_patch, load_image, load_patch,
                      optimize_trigger, save_patch, write_ppm)

log = logging.getLogger("sealkit")

EXIT_OK, EXIT_CONFIG, EXIT_PRECONDITION, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# (flag, default, help); None defaults mean "must be supplied" only when checked
_DATA = [("data_seed", 1, "dataset seed"), ("count", 500, "number of images"), ("size", 32, "image size"),
         ("channels", 3, "image channels"), ("classes", 5, "number of classes")]
_TRIGGER = [("iters", 1500, "trigger ascent iterations"), ("restarts", 5, "trigger restarts")]

COMMANDS = {
    "gen-model": [("arch", "toy-cnn", "toy-cnn or toy-mlp"), ("seed", None, "init seed"), ("size", 32, ""),
                  ("channels", 3, ""), ("classes", 5, ""), ("hidden", 32, "mlp hidden width"),
                  ("inject_sqex", -1, "insert a Sq-Ex block after this layer (-1: none)"),
                  ("bottleneck", 4, "Sq-Ex bottleneck"), ("init_scale", 0.0, "Sq-Ex init scale")],
    "train": [("model", None, "model file"), ("seed", None, "shuffle seed"), ("epochs", 8, ""), ("lr", 0.02, ""),
              ("batch", 32, ""), ("train_count", 2000, ""), ("test_seed", 2, "")] + _DATA,
    "stain": [("model", None, ""), ("layer", None, "layer index j"), ("index", "min-l1", "neuron index or min-l1"),
              ("delta", 10.0, "trigger response after surgery"), ("delta_lo", None, "non-trigger offset"),
              ("additive", False, ""), ("schema", "none", "none, weight, activation or output"),
              ("message", "", "bit string for the weight/activation schemas"), ("target_class", 0, ""),
              ("a", 0, "position row"), ("b", 0, "position column"), ("reduction", "position", "position or mean"),
              ("seed", None, ""), ("probes", 256, "calibration images from the shapes task (0: uniform noise)")]
             + _TRIGGER + _DATA,
    "lock": [("model", None, ""), ("kind", "internal", "internal or sqex"), ("layer", None, ""),
             ("index", "min-l1", ""), ("delta", 10.0, ""), ("delta_lo", None, ""), ("a", 0, ""), ("b", 0, ""),
             ("s", None, "disruption scale (default 10*|bias|)"), ("seed", None, ""),
             ("printed_sign", False, "use the uncorrected disruptor column"), ("conduit_noise", 0.0, ""),
             ("keep_backup", False, "store the original bias in the record"),
             ("tune", False, "tune s on the shapes task"), ("target_drop", 0.3, ""), ("probes", 256, "")]
            + _TRIGGER + _DATA,
    "edited": [("model", None, "locked model"), ("record", None, "lock record with backup")],
    "trigger": [("model", None, ""), ("layer", None, ""), ("record", "", "stain record supplying v"),
                ("a", 0, ""), ("b", 0, ""), ("seed", None, "")] + _TRIGGER,
    "patch-apply": [("image", None, "SEALTEN1 or P6 PPM image"), ("patch", None, ""), ("output", "patched.ppm", "")],
    "verify": [("model", None, ""), ("record", None, "stain or lock record"), ("threshold", None, "default 0.9*delta")],
    "certify": [("thm", "1", "1, 2, finetune or collision"), ("d", None, ""), ("cov_trace", None, ""),
                ("mu_norm", 0.0, ""), ("threshold", None, ""), ("features", "", "SEALTEN1 (m, d) feature samples"),
                ("m", None, ""), ("n", None, ""), ("perturbation", 0.0, ""), ("theta", None, ""), ("seed", 0, "")],
    "eval-fpr": [("model", None, ""), ("record", None, ""), ("threshold", None, "default: trigger response")] + _DATA,
    "eval-lock": [("original", None, ""), ("locked", None, ""), ("record", None, "lock record with backup")] + _DATA,
    "prune-attack": [("model", None, ""), ("record", None, "stain or lock record"), ("fraction", 0.3, ""),
                     ("structured", False, "")] + _DATA,
    "validate-bounds": [("thm", "1", "1 or 2"), ("seed", None, ""), ("d", 64, ""), ("trials", 100, ""),
                        ("pairs", 2000, ""), ("mu_norm", 1.0, ""), ("m", 2000, ""), ("test_n", 10000, ""),
                        ("repeats", 1000, "")],
}

SEEDED = {"gen-model", "train", "stain", "lock", "trigger", "validate-bounds"}
_FLAGS_BOOL = {"additive", "printed_sign", "keep_backup", "tune", "structured"}


def read_config(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; values are JSON or bare strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = _parse_value(value)
    return out


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text.strip("\"'")


def _coerce(key, value, default):
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sealkit", description="Detector stains, locks and their certificates.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, spec in COMMANDS.items():
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--out-dir", default=".")
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("-v", "--verbose", action="store_true")
        for key, _, help_ in spec:
            flag = "--" + key.replace("_", "-")
            if key in _FLAGS_BOOL:
                sp.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=help_)
            else:
                sp.add_argument(flag, dest=key, default=None, help=help_)
    return p


def resolve(args) -> dict:
    spec = COMMANDS[args.command]
    defaults = {k: d for k, d, _ in spec}
    cfg = dict(defaults)
    if args.config:
        with open(args.config) as fh:
            loaded = read_config(fh.read())
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in defaults:
        value = getattr(args, key)
        if value is not None:
            cfg[key] = _parse_value(value) if isinstance(value, str) and key not in ("message", "index") else value
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r} for {args.command}")
        cfg[key] = _parse_value(value.strip())
    cfg = {k: _coerce(k, v, defaults[k]) for k, v in cfg.items()}
    if args.command in SEEDED and cfg.get("seed") is None:
        raise ConfigError(f"{args.command} needs an explicit --seed")
    return cfg


def _need(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise ConfigError(f"missing required setting {k!r}")


def _int(cfg, key):
    _need(cfg, key)
    try:
        return int(cfg[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key} must be an integer") from exc


def _float(cfg, key):
    try:
        return None if cfg.get(key) in (None, "") else float(cfg[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key} must be a number") from exc


def _dataset(cfg, seed_key="data_seed", count_key="count"):
    return H.ShapesDataset(int(cfg[seed_key]), int(cfg[count_key]), int(cfg["size"]), int(cfg["channels"]),
                           int(cfg["classes"]))


def _bits(text):
    if not text or set(str(text)) - {"0", "1"}:
        raise ConfigError("message must be a non-empty string of 0s and 1s")
    return np.array([int(c) for c in str(text)])


def _index(cfg):
    k = cfg.get("index", "min-l1")
    if k in (None, "min-l1"):
        return None
    try:
        return int(k)
    except ValueError as exc:
        raise ConfigError("index must be an integer or min-l1") from exc


def _load_any_record(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data.startswith(L.LOCK_MAGIC):
        return L.record_from_bytes(data)
    return S.record_from_bytes(data)


def _probe_images(cfg, net):
    n = int(cfg.get("probes", 0) or 0)
    if n <= 0 or tuple(net.input_shape) != (int(cfg["channels"]), int(cfg["size"]), int(cfg["size"])):
        return None
    return H.ShapesDataset(int(cfg["data_seed"]) + 7919, n, int(cfg["size"]), int(cfg["channels"]),
                           int(cfg["classes"])).images


class Run:
    def __init__(self, out_dir):
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.outputs = {}
        self.result = {}

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def write(self, name, data):
        if isinstance(data, str):
            data = data.encode()
        with open(self.path(name), "wb") as fh:
            fh.write(data)
        self.outputs[name] = hashlib.sha256(data).hexdigest()


# -- commands -------------------------------------------------------------------------

def cmd_gen_model(cfg, run, jobs):
    rng = T.Rng(int(cfg["seed"]))
    if cfg["arch"] == "toy-cnn":
        net = H.toy_cnn(rng, cfg["channels"], cfg["size"], cfg["classes"])
    elif cfg["arch"] == "toy-mlp":
        net = H.toy_mlp(rng, (cfg["channels"], cfg["size"], cfg["size"]), (cfg["hidden"],), cfg["classes"])
    else:
        raise ConfigError(f"unknown arch {cfg['arch']!r}")
    if cfg["inject_sqex"] >= 0:
        net = L.inject_sqex(net, cfg["inject_sqex"], cfg["bottleneck"], cfg["init_scale"], rng.spawn(1))
    run.write("model.snet", nn.serialize(net))
    run.result = {"layers": net.names(), "input_shape": list(net.input_shape)}


def cmd_train(cfg, run, jobs):
    _need(cfg, "model")
    net = nn.load(cfg["model"])
    train = _dataset(cfg, count_key="train_count")
    test = H.ShapesDataset(cfg["test_seed"], cfg["count"], cfg["size"], cfg["channels"], cfg["classes"])
    res = H.train_small(net, train, cfg["epochs"], cfg["lr"], cfg["seed"], batch=cfg["batch"], test=test)
    if not all(np.isfinite(res.losses)):
        raise FloatingPointError("training diverged")
    run.write("model.snet", nn.serialize(res.net))
    run.result = {"train_accuracy": res.train_accuracy, "test_accuracy": res.test_accuracy, "losses": res.losses}


def cmd_stain(cfg, run, jobs):
    _need(cfg, "model")
    j = _int(cfg, "layer")
    net = nn.load(cfg["model"])
    rng = T.Rng(cfg["seed"])
    opts = {"iters": cfg["iters"], "restarts": cfg["restarts"]}
    delta, delta_lo = cfg["delta"], _float(cfg, "delta_lo")
    probes = _probe_images(cfg, net)
    schema = cfg["schema"]
    if schema == "none":
        red = ReductionMap.mean() if cfg["reduction"] == "mean" else ReductionMap("position", cfg["a"], cfg["b"])
        out, rec = S.stain(net, j, _index(cfg), delta, delta_lo, cfg["additive"], red, rng,
                           probes=probes, trigger_opts=opts)
    elif schema == "weight":
        out, rec = S.schema_weight(net, j, _index(cfg), _bits(cfg["message"]), delta,
                                   -abs(delta) if delta_lo is None else delta_lo, rng, opts)
    elif schema == "activation":
        out, rec = S.schema_activation(net, j, _bits(cfg["message"]), delta, rng, opts)
    elif schema == "output":
        out, rec = S.schema_output(net, j, _index(cfg), cfg["target_class"], delta, delta_lo, rng,
                                   probes=probes, trigger_opts=opts)
    else:
        raise ConfigError(f"unknown schema {schema!r}")
    run.write("model.snet", nn.serialize(out))
    run.write("stain.sstn", S.record_to_bytes(rec))
    run.result = {"layer": rec.layer, "index": rec.index, "response": rec.response,
                  "delta_lo": rec.delta_lo, "readout": float(np.ravel(S.readout(out, rec, rec.x_star))[0])
                  if rec.index >= 0 else None}


def cmd_lock(cfg, run, jobs):
    _need(cfg, "model")
    j = _int(cfg, "layer")
    net = nn.load(cfg["model"])
    rng = T.Rng(cfg["seed"])
    opts = {"iters": cfg["iters"], "restarts": cfg["restarts"]}
    kw = dict(probes=_probe_images(cfg, net), trigger_opts=opts, printed_sign=cfg["printed_sign"])
    if cfg["kind"] == "internal":
        kw["conduit_noise"] = cfg["conduit_noise"]
    elif cfg["kind"] != "sqex":
        raise ConfigError(f"unknown lock kind {cfg['kind']!r}")
    locked, rec = L.lock(net, cfg["kind"], j, _index(cfg), cfg["delta"], _float(cfg, "delta_lo"),
                         cfg["a"], cfg["b"], _float(cfg, "s"), None, rng, **kw)
    result = {}
    if cfg["tune"]:
        data = _dataset(cfg)
        ref = H.accuracy(net, data.images, data.labels, jobs)
        locked, rec, acc = H.tune_scale(locked, rec, data, cfg["target_drop"], ref, jobs=jobs)
        result.update(reference_accuracy=ref, locked_accuracy=acc)
    run.write("model.snet", nn.serialize(locked))
    run.write("lock.slck", L.record_to_bytes(rec, cfg["keep_backup"]))
    save_patch(rec.patch, run.path("patch.spat"))
    with open(run.path("patch.spat"), "rb") as fh:
        run.outputs["patch.spat"] = hashlib.sha256(fh.read()).hexdigest()
    result.update(kind=rec.kind, s=rec.s, gamma=rec.gamma, delta_lo=rec.detector.delta_lo,
                  original_index=rec.original_index, patch_region=list(rec.patch.region))
    run.result = result


def cmd_edited(cfg, run, jobs):
    _need(cfg, "model", "record")
    net = nn.load(cfg["model"])
    rec = L.load_record(cfg["record"])
    run.write("model.snet", nn.serialize(L.make_edited(net, rec)))


def cmd_trigger(cfg, run, jobs):
    _need(cfg, "model")
    j = _int(cfg, "layer")
    net = nn.load(cfg["model"])
    rng = T.Rng(cfg["seed"])
    if cfg["record"]:
        v = _load_any_record(cfg["record"])
        v = v.detector.v if isinstance(v, L.LockRecord) else v.v
    else:
        shape = nn.weight_of(net[j]).shape[1:]
        v = T.sample_unit_sphere(rng, int(np.prod(shape))).reshape(shape)
    red = ReductionMap("position", cfg["a"], cfg["b"]) if isinstance(net[j], nn.Conv2d) else None
    x_star, response = optimize_trigger(net, j, v, red, iters=cfg["iters"], restarts=cfg["restarts"],
                                        seed=int(rng.integers(2**63)))
    run.write("trigger.sten", T.tensor_to_bytes(x_star))
    if red is not None:
        save_patch(extract_patch(net, j, x_star, cfg["a"], cfg["b"]), run.path("patch.spat"))
        with open(run.path("patch.spat"), "rb") as fh:
            run.outputs["patch.spat"] = hashlib.sha256(fh.read()).hexdigest()
    run.result = {"response": response}


def cmd_patch_apply(cfg, run, jobs):
    _need(cfg, "image", "patch")
    img = apply_patch(load_image(cfg["image"]), load_patch(cfg["patch"]))
    name = os.path.basename(cfg["output"])
    run.write(name, write_ppm(img) if name.endswith(".ppm") else T.tensor_to_bytes(img))


def cmd_verify(cfg, run, jobs):
    _need(cfg, "model", "record")
    net = nn.load(cfg["model"])
    rec = _load_any_record(cfg["record"])
    if isinstance(rec, L.LockRecord):
        rec = rec.detector
    res = S.verify_stain(net, rec, _float(cfg, "threshold"))
    run.write("verify.json", json.dumps(res, sort_keys=True, indent=2))
    run.result = res


def cmd_certify(cfg, run, jobs):
    thm = str(cfg["thm"])
    seed = cfg["seed"]
    if thm in ("1", "finetune"):
        _need(cfg, "threshold")
        if cfg["features"]:
            est = B.estimate_moments(T.load_tensor(cfg["features"]))
        else:
            _need(cfg, "d", "cov_trace")
            est = B.MomentEstimate(int(cfg["d"]), float(cfg["mu_norm"]), float(cfg["cov_trace"]), 0)
        if thm == "1":
            cert = B.geometric_bound(est, float(cfg["threshold"]), seed)
        else:
            cert = B.finetune_bound(est, float(cfg["threshold"]), float(cfg["perturbation"]), seed)
    elif thm == "2":
        cert = B.dkw_bound(_int(cfg, "m"), _int(cfg, "n"), seed)
    elif thm == "collision":
        _need(cfg, "d", "theta")
        d, theta = int(cfg["d"]), float(cfg["theta"])
        raw = B.collision_bound(d, theta)
        cert = B.BoundCertificate("collision", {"d": d, "theta": theta}, min(raw, 1.0), raw, raw > 1.0, seed=seed)
    else:
        raise ConfigError(f"unknown bound {thm!r}")
    run.write("certificate.json", cert.to_json())
    run.result = {"kind": cert.kind, "value": cert.value, "clamped": cert.clamped}


def cmd_eval_fpr(cfg, run, jobs):
    _need(cfg, "model", "record")
    net = nn.load(cfg["model"])
    rec = _load_any_record(cfg["record"])
    if isinstance(rec, L.LockRecord):
        rec = rec.detector
    rep = H.eval_fpr(net, rec, _dataset(cfg), _float(cfg, "threshold"), jobs=jobs)
    run.write("report.csv", H.reports_csv([rep]))
    run.write("histogram.csv", H.histogram_csv(rep))
    run.write("report.json", json.dumps(rep.summary(), sort_keys=True, indent=2))
    run.result = rep.summary()


def cmd_eval_lock(cfg, run, jobs):
    _need(cfg, "original", "locked", "record")
    original, locked = nn.load(cfg["original"]), nn.load(cfg["locked"])
    rec = L.load_record(cfg["record"])
    reps = H.eval_lock(original, L.make_edited(locked, rec), locked, rec.patch, _dataset(cfg), jobs)
    run.write("report.csv", H.reports_csv(reps))
    summary = [r.summary() for r in reps]
    run.write("report.json", json.dumps(summary, sort_keys=True, indent=2))
    run.result = {r.setting: r.accuracy for r in reps}


def cmd_prune_attack(cfg, run, jobs):
    _need(cfg, "model", "record")
    net = nn.load(cfg["model"])
    rec = _load_any_record(cfg["record"])
    det = rec.detector if isinstance(rec, L.LockRecord) else rec
    pruned = H.prune_l1(net, float(cfg["fraction"]), cfg["structured"])
    result = {"fraction": float(cfg["fraction"]), "structured": cfg["structured"],
              "survival_change": H.detector_survival(net, pruned, det)}
    if isinstance(rec, L.LockRecord):
        data = _dataset(cfg)
        result["locked_accuracy"] = H.accuracy(net, data.images, data.labels, jobs)
        result["detector_pruned_accuracy"] = H.accuracy(L.prune_detector(net, rec), data.images, data.labels, jobs)
        if rec.bias_backup is not None:
            result["edited_accuracy"] = H.accuracy(L.make_edited(net, rec), data.images, data.labels, jobs)
    run.write("model.snet", nn.serialize(pruned))
    run.write("report.json", json.dumps(result, sort_keys=True, indent=2))
    run.result = result


def cmd_validate_bounds(cfg, run, jobs):
    thm = str(cfg["thm"])
    if thm == "1":
        rows = H.thm1_montecarlo(cfg["d"], {"kind": "gaussian", "mu_norm": cfg["mu_norm"]}, None, cfg["trials"],
                                 cfg["pairs"], cfg["seed"])
        bad_trials = len({r["trial"] for r in rows if not r["ok"]})
        run.result = {"trials": cfg["trials"], "trials_respected": cfg["trials"] - bad_trials}
    elif thm == "2":
        res = H.thm2_montecarlo(cfg["m"], cfg["test_n"], cfg["repeats"], cfg["seed"])
        rows = res.pop("rows")
        run.result = res
    else:
        raise ConfigError(f"unknown bound {thm!r}")
    run.write("bounds.csv", H.rows_csv(rows))


HANDLERS = {
    "gen-model": cmd_gen_model, "train": cmd_train, "stain": cmd_stain, "lock": cmd_lock, "edited": cmd_edited,
    "trigger": cmd_trigger, "patch-apply": cmd_patch_apply, "verify": cmd_verify, "certify": cmd_certify,
    "eval-fpr": cmd_eval_fpr, "eval-lock": cmd_eval_lock, "prune-attack": cmd_prune_attack,
    "validate-bounds": cmd_validate_bounds,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        run = Run(args.out_dir)
        HANDLERS[args.command](cfg, run, max(1, args.jobs))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TriggerError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, TypeError, IndexError) as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    manifest = {"command": args.command, "config": cfg, "version": __version__, "rng": T.RNG_TAG,
                "outputs": run.outputs, "result": run.result}
    with open(run.path("manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2, default=float)
    print(json.dumps(run.result, sort_keys=True, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
