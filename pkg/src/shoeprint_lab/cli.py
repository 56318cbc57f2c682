"""Command line entry point: ``shoeprint-lab <command> [options]``.

Exit codes: 0 success, 1 verification failure or divergence, 2 usage or
configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import shutil
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint as C
from . import config as K
from . import imaging as I
from . import metrics as M
from . import synth as S
from . import training as T
from . import zoo
from .optim import AdamState, OptimizerConfig
from .pgm import signed_to_pgm, write_pgm
from .svg import line_plot
from .tensor import ShapeError

log = logging.getLogger("shoeprint_lab")

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
DEFAULT_METRICS = "mae,pct_acc,mcs2,mcs3,cs0..cs10"


class UsageError(ValueError):
    pass


class VerificationFailed(RuntimeError):
    pass


# --------------------------------------------------------------------------
# defaults per command; keys double as config-file keys
# --------------------------------------------------------------------------

COMMON = {"run.seed": 0, "run.threads": 0}


def _synth_defaults() -> dict:
    d = {"synth.subjects": 200, "synth.out": "", "synth.versions": S.VERSIONS}
    for f in fields(S.SynthConfig):
        d[f"synth.{f.name}"] = getattr(S.SynthConfig(), f.name)
    return d


DEFAULTS = {
    "synth": _synth_defaults,
    "preprocess": lambda: {"preprocess.data": "", "preprocess.out": "",
                           "preprocess.threshold": I.DEFAULT_THRESHOLD, "preprocess.size": (64, 32)},
    "train": lambda: {
        "train.arch": "shoenet", "train.loss": "", "train.data": "", "train.out": "",
        "train.epochs": 5, "train.batch_size": 32, "train.J": 2, "train.epsilon": 0.1,
        "optimizer.lr0": 0.001, "optimizer.beta1": 0.99, "optimizer.beta2": 0.999,
        "optimizer.eps": 1e-8, "optimizer.decay_step": 10000, "optimizer.decay_factor": 0.5,
        "optimizer.l2_lambda": 0.001,
        "train.base_filters": 8, "train.blocks": 3, "train.convs_per_block": 3,
        "train.fc_width": 64, "train.max_train": 0,
    },
    "eval": lambda: {"eval.ckpt": "", "eval.data": "", "eval.out": "", "eval.split": "test",
                     "eval.metrics": DEFAULT_METRICS, "eval.age_range": "7:80",
                     "eval.round": False},
    "baseline": lambda: {"baseline.method": "random", "baseline.range": "7:80", "baseline.n": 0,
                         "baseline.data": "", "baseline.out": "", "baseline.split": "test",
                         "baseline.metrics": DEFAULT_METRICS, "baseline.age_range": "7:80"},
    "analyze": lambda: {"analyze.data": "", "analyze.out": "", "analyze.grouping": "typeB",
                        "analyze.gender_split": False, "analyze.masked": False,
                        "analyze.early_age": 20},
    "gradcheck": lambda: {"gradcheck.arch": "shoenet", "gradcheck.loss": "", "gradcheck.samples": 100,
                          "gradcheck.epsilon": 1e-4, "gradcheck.batch": 4, "gradcheck.tol": 1e-4,
                          "gradcheck.out": ""},
    "export": lambda: {"export.ckpt": "", "export.out": ""},
}


def defaults_for(command: str) -> dict:
    return {**COMMON, **DEFAULTS[command]()}


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _flag(p, flag: str, key: str, **kw) -> None:
    if flag.startswith("-"):
        kw.setdefault("metavar", flag.lstrip("-").upper().replace("-", "_"))
    p.add_argument(flag, dest=key, default=None, **kw)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shoeprint-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, help_: str):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat section.key = value file; flags override it")
        _flag(p, "--seed", "run.seed", type=int, help=f"global seed (fallback: ${K.SEED_ENV})")
        _flag(p, "--threads", "run.threads", type=int, help="BLAS threads; 1 gives bit-reproducible runs")
        return p

    p = command("synth", "generate a synthetic cohort and its dataset versions")
    _flag(p, "--subjects", "synth.subjects", type=int)
    _flag(p, "--out", "synth.out")
    _flag(p, "--versions", "synth.versions", help="comma list from A..G (A is always written)")
    _flag(p, "--age-dist", "synth.age_dist", choices=("lognormal", "uniform"))

    p = command("preprocess", "segment and resize every print of a dataset")
    _flag(p, "--data", "preprocess.data")
    _flag(p, "--out", "preprocess.out")
    _flag(p, "--threshold", "preprocess.threshold", type=int)
    _flag(p, "--size", "preprocess.size", help="HxW of one print, e.g. 64x32")

    p = command("train", "train one architecture")
    _flag(p, "--arch", "train.arch", choices=zoo.ARCHS)
    _flag(p, "--loss", "train.loss", choices=T.LOSSES)
    _flag(p, "--data", "train.data")
    _flag(p, "--epochs", "train.epochs", type=int)
    _flag(p, "--batch-size", "train.batch_size", type=int)
    _flag(p, "--lr", "optimizer.lr0", type=float)
    _flag(p, "--J", "train.J", type=int)
    _flag(p, "--epsilon", "train.epsilon", type=float)
    _flag(p, "--max-train", "train.max_train", type=int, help="use at most this many training rows")
    _flag(p, "--out", "train.out", help="checkpoint path")

    p = command("eval", "evaluate a checkpoint on a dataset split")
    _flag(p, "--ckpt", "eval.ckpt")
    _flag(p, "--data", "eval.data")
    _flag(p, "--metrics", "eval.metrics")
    _flag(p, "--split", "eval.split", choices=S.SPLITS)
    _flag(p, "--out", "eval.out", help="metrics CSV path")
    p.add_argument("--round", dest="eval.round", action="store_const", const=True, default=None,
                   help="round predictions to whole years first (sensitivity check)")

    p = command("baseline", "score the uniform random age predictor")
    p.add_argument("baseline.method", nargs="?", default=None, choices=("random",), metavar="method")
    _flag(p, "--range", "baseline.range", help="inclusive age range lo:hi")
    _flag(p, "--n", "baseline.n", type=int, help="evaluate the first N rows of the split (0 = all)")
    _flag(p, "--data", "baseline.data")
    _flag(p, "--split", "baseline.split", choices=S.SPLITS)
    _flag(p, "--metrics", "baseline.metrics")
    _flag(p, "--out", "baseline.out")

    p = command("analyze", "category means, subtraction maps and region pressure curves")
    _flag(p, "--data", "analyze.data")
    _flag(p, "--out", "analyze.out")
    _flag(p, "--grouping", "analyze.grouping", choices=tuple(I.SCHEMES))
    p.add_argument("--gender-split", dest="analyze.gender_split", action="store_const", const=True, default=None)
    p.add_argument("--masked", dest="analyze.masked", action="store_const", const=True, default=None)

    p = command("gradcheck", "finite-difference check of a whole graph")
    _flag(p, "--arch", "gradcheck.arch", choices=zoo.ARCHS)
    _flag(p, "--loss", "gradcheck.loss", choices=T.LOSSES)
    _flag(p, "--samples", "gradcheck.samples", type=int)
    _flag(p, "--epsilon", "gradcheck.epsilon", type=float)
    _flag(p, "--out", "gradcheck.out", help="report path")

    p = command("export", "dump checkpoint arrays as .npy files with a JSON index")
    _flag(p, "--ckpt", "export.ckpt")
    _flag(p, "--out", "export.out")
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _require(cfg: K.RunConfig, *keys: str) -> None:
    missing = [k for k in keys if cfg[k] in ("", None)]
    if missing:
        flags = ", ".join("--" + k.split(".", 1)[1].replace("_", "-") for k in missing)
        raise UsageError(f"{cfg.command}: missing required setting(s) {flags}")


def _age_range(text: str) -> tuple:
    try:
        lo, hi = (int(v) for v in str(text).split(":"))
    except ValueError:
        raise UsageError(f"age range must look like lo:hi, got {text!r}") from None
    if hi < lo:
        raise UsageError(f"age range {text!r} is empty")
    return lo, hi


def _size(value) -> tuple:
    if isinstance(value, str):
        try:
            return tuple(int(v) for v in value.lower().replace(",", "x").split("x"))
        except ValueError:
            raise UsageError(f"size must look like HxW, got {value!r}") from None
    return tuple(value)


def _record(cfg: K.RunConfig, out: Path) -> None:
    """Resolved config beside a file output, or inside a directory output."""
    target = out / K.RECORD_NAME if out.is_dir() else Path(str(out) + "." + K.RECORD_NAME)
    cfg.write(target)


def _rows_for(arch: str, man: S.DatasetManifest, split_name: str) -> S.DatasetManifest:
    want = I.SIDES if zoo.input_kind(arch) == "single" else ("pair",)
    sel = S.DatasetManifest([r for r in man.rows if r.side in want and r.split == split_name], man.root)
    return sel


def _arrays(man: S.DatasetManifest):
    X = np.stack([man.image(r) for r in man.rows]).astype(np.float64) / 255.0
    ages = np.array([r.age for r in man.rows], dtype=np.float64)
    genders = np.array([S.GENDERS.index(r.gender) for r in man.rows], dtype=np.int64)
    return X, ages, genders


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(cfg: K.RunConfig) -> int:
    _require(cfg, "synth.out")
    sc = {k: v for k, v in cfg.section("synth").items() if k not in ("subjects", "out", "versions")}
    scfg = S.SynthConfig(**sc)
    versions = [v.strip().upper() for v in cfg["synth.versions"] if v.strip()]
    bad = [v for v in versions if v not in S.VERSIONS]
    if bad:
        raise UsageError(f"unknown dataset version(s) {bad}; choose from {','.join(S.VERSIONS)}")
    if cfg["synth.subjects"] < 1:
        raise UsageError("--subjects must be at least 1")
    out = Path(cfg["synth.out"])
    out.mkdir(parents=True, exist_ok=True)
    man = S.generate_dataset(cfg["synth.subjects"], cfg["run.seed"], out / "A", scfg)
    derived = [v for v in versions if v != "A"]
    if derived:
        S.derive_versions(man, derived, out, cfg["run.seed"], scfg)
    _record(cfg, out)
    log.info("wrote %d subjects, versions %s", cfg["synth.subjects"], ",".join(["A"] + derived))
    return EXIT_OK


def cmd_preprocess(cfg: K.RunConfig) -> int:
    _require(cfg, "preprocess.data", "preprocess.out")
    man = S.read_manifest(cfg["preprocess.data"])
    h, w = _size(cfg["preprocess.size"])
    thr = cfg["preprocess.threshold"]
    out = Path(cfg["preprocess.out"])
    (out / "images").mkdir(parents=True, exist_ok=True)
    for r in man.rows:
        px = man.image(r)
        if r.side == "pair":
            half = px.shape[1] // 2
            seg = np.hstack([I.segment(px[:, :half], (h, w), thr).pixels,
                             I.segment(px[:, half:], (h, w), thr).pixels])
        else:
            seg = I.segment(px, (h, w), thr).pixels
        target = out / r.path
        target.parent.mkdir(parents=True, exist_ok=True)
        write_pgm(target, seg)
    S.DatasetManifest(list(man.rows), out).write(out / "manifest.csv")
    _record(cfg, out)
    return EXIT_OK


def _default_loss(arch: str) -> str:
    return "ce" if arch == "gender" else "clf"


def cmd_train(cfg: K.RunConfig) -> int:
    _require(cfg, "train.data", "train.out")
    arch = cfg["train.arch"]
    loss = cfg["train.loss"] or _default_loss(arch)
    if arch not in zoo.ARCHS:
        raise UsageError(f"unknown architecture {arch!r}")
    man = S.read_manifest(cfg["train.data"])
    tr = _rows_for(arch, man, "train")
    if cfg["train.max_train"] > 0:
        tr = S.DatasetManifest(tr.rows[: cfg["train.max_train"]], tr.root)
    if len(tr) < 2:
        kind = "single-print" if zoo.input_kind(arch) == "single" else "pairwise"
        raise UsageError(f"{arch} needs {kind} training rows; {cfg['train.data']} has {len(tr)}")
    va = _rows_for(arch, man, "val")
    X, ages, genders = _arrays(tr)
    y = genders if arch == "gender" else ages
    h, w = X.shape[1:3]
    if zoo.input_kind(arch) == "single":
        w *= 2
    acfg = zoo.ArchConfig(input_hw=(h, w), base_filters=cfg["train.base_filters"], blocks=cfg["train.blocks"],
                          convs_per_block=cfg["train.convs_per_block"], fc_widths=(cfg["train.fc_width"],) * 3)
    graph = zoo.build(arch, acfg, seed=cfg["run.seed"])
    try:
        T.check_loss(graph, loss)
    except T.TaskMismatch as exc:
        raise UsageError(str(exc)) from None
    if loss != "ce":
        T.init_output_bias(graph, y)
    o = cfg.section("optimizer")
    try:
        opt = OptimizerConfig(lr0=o["lr0"], beta1=o["beta1"], beta2=o["beta2"], adam_eps=o["eps"],
                              decay_step=o["decay_step"], decay_factor=o["decay_factor"],
                              l2_lambda=o["l2_lambda"])
        clf = M.ClfConfig(J=cfg["train.J"], epsilon=cfg["train.epsilon"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    state = AdamState()
    Xv = yv = None
    if len(va):
        Xv, av, gv = _arrays(va)
        yv = gv if arch == "gender" else av
    res = T.TrainResult(state=state)
    if cfg["train.epochs"] > 0:
        res = T.train(graph, X, y, loss, opt, cfg["train.epochs"], cfg["train.batch_size"],
                      cfg["run.seed"], Xv, yv, clf, state)
    out = Path(cfg["train.out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    C.save_model(graph, out, state.step, state if state.step else None)
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["epoch", "train_loss", "val_loss"])
    for rec in res.history:
        wr.writerow([rec["epoch"], f"{rec['train_loss']:.6f}", f"{rec['val_loss']:.6f}"])
    _write(Path(str(out) + ".history.csv"), buf.getvalue())
    _record(cfg, out)
    return EXIT_OK


def _metric_rows(batch: M.EvaluationBatch, spec: str, age_range) -> list:
    try:
        names = M.parse_metric_names(spec)
        return M.compute_metrics(batch, names, age_range)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _emit_metrics(out: Path, rows: list, batch: M.EvaluationBatch | None) -> None:
    _write(out, M.metrics_to_csv(rows))
    if batch is not None:
        curve = [(f"cs{j}", v) for j, v in enumerate(M.cs_curve(batch, 10))]
        _write(Path(str(out) + ".cs_curve.csv"), M.metrics_to_csv(curve))


def cmd_eval(cfg: K.RunConfig) -> int:
    _require(cfg, "eval.ckpt", "eval.data", "eval.out")
    try:
        graph, _ = C.load_model(cfg["eval.ckpt"])
    except C.CheckpointError as exc:
        raise UsageError(str(exc)) from None
    man = S.read_manifest(cfg["eval.data"])
    sel = _rows_for(graph.arch, man, cfg["eval.split"])
    if not len(sel):
        raise UsageError(f"no usable {cfg['eval.split']} rows for {graph.arch} in {cfg['eval.data']}")
    X, ages, genders = _arrays(sel)
    out = Path(cfg["eval.out"])
    try:
        if graph.head == "softmax_2":
            rep = M.classification_report(T.evaluate(graph, X, genders, task="gender"))
            rows = [("accuracy", rep["accuracy"])]
            for g in S.GENDERS:
                rows += [(f"{g}_precision", rep[g].precision), (f"{g}_recall", rep[g].recall),
                         (f"{g}_f1", rep[g].f1)]
            _emit_metrics(out, rows, None)
        else:
            batch = T.evaluate(graph, X, ages)
            if cfg["eval.round"]:
                batch = batch.rounded()
            _emit_metrics(out, _metric_rows(batch, cfg["eval.metrics"], _age_range(cfg["eval.age_range"])), batch)
    except ShapeError as exc:
        raise UsageError(f"data does not fit the checkpoint: {exc}") from None
    _record(cfg, out)
    return EXIT_OK


def cmd_baseline(cfg: K.RunConfig) -> int:
    _require(cfg, "baseline.data", "baseline.out")
    lo, hi = _age_range(cfg["baseline.range"])
    man = S.read_manifest(cfg["baseline.data"])
    # one row per subject so pairwise and single-print versions agree
    seen, ages = set(), []
    for r in man.rows:
        if r.split == cfg["baseline.split"] and r.provenance == "original" and r.subject_id not in seen:
            seen.add(r.subject_id)
            ages.append(r.age)
    if cfg["baseline.n"] > 0:
        ages = ages[: cfg["baseline.n"]]
    if not ages:
        raise UsageError(f"no {cfg['baseline.split']} subjects in {cfg['baseline.data']}")
    pred = M.random_baseline(len(ages), (lo, hi), cfg["run.seed"])
    batch = M.EvaluationBatch(np.array(ages, dtype=np.float64), pred)
    out = Path(cfg["baseline.out"])
    # percent accuracy is normalized by the age domain, not the predictor's range
    domain = _age_range(cfg["baseline.age_range"])
    _emit_metrics(out, _metric_rows(batch, cfg["baseline.metrics"], domain), batch)
    _record(cfg, out)
    return EXIT_OK


def _analysis_groups(man: S.DatasetManifest, gender_split: bool) -> dict:
    """(group name) -> list of (age, side, pixels) from original rows."""
    groups: dict = {}
    for r in man.rows:
        if r.provenance != "original":
            continue
        px = man.image(r)
        if r.side == "pair":
            half = px.shape[1] // 2
            parts = [("left", px[:, :half]), ("right", px[:, half:])]
        else:
            parts = [(r.side, px)]
        for side, img in parts:
            groups.setdefault(side, []).append((r.age, side, img))
            if gender_split:
                groups.setdefault(f"{side}_{r.gender}", []).append((r.age, side, img))
    return groups


def cmd_analyze(cfg: K.RunConfig) -> int:
    _require(cfg, "analyze.data", "analyze.out")
    scheme = cfg["analyze.grouping"]
    if scheme not in I.SCHEMES:
        raise UsageError(f"unknown grouping {scheme!r}")
    cats = I.SCHEMES[scheme]
    man = S.read_manifest(cfg["analyze.data"])
    groups = _analysis_groups(man, cfg["analyze.gender_split"])
    if not groups:
        raise UsageError(f"no original prints in {cfg['analyze.data']}")
    out = Path(cfg["analyze.out"])
    for sub in ("means", "subtractions", "early_vs_rest", "curves", "plots"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    early = cfg["analyze.early_age"]
    for name in sorted(groups):
        items = groups[name]
        side = items[0][1]
        means = {}
        for cat in cats:
            members = [img for age, _, img in items if age in cat]
            if not members:
                raise UsageError(f"category {cat.label} ({cat.lo}-{cat.hi}) is empty for group {name}")
            means[cat.label] = I.superimpose(members)
            write_pgm(out / "means" / f"{name}_{cat.label}.pgm", np.clip(np.rint(means[cat.label]), 0, 255))
        labels = [c.label for c in cats]
        for lower, upper in zip(labels, labels[1:]):
            diff = I.subtract_categories(means[upper], means[lower])
            stem = out / "subtractions" / f"{name}_{upper}_minus_{lower}"
            _write(Path(str(stem) + ".csv"), I.signed_map_to_csv(diff))
            write_pgm(Path(str(stem) + ".pgm"), signed_to_pgm(diff))
        young = [img for age, _, img in items if age < early]
        rest = [img for age, _, img in items if age >= early]
        if young and rest:
            diff = I.subtract_categories(I.superimpose(rest), I.superimpose(young))
            _write(out / "early_vs_rest" / f"{name}.csv", I.signed_map_to_csv(diff))
            write_pgm(out / "early_vs_rest" / f"{name}.pgm", signed_to_pgm(diff))
        rows = I.region_pressure_curve(means, side, cfg["analyze.masked"])
        _write(out / "curves" / f"{name}.csv", I.curve_to_csv(rows))
        series = {f"R_{r}": [row.mean_pressure for row in rows if row.region == r] for r in range(8)}
        _write(out / "plots" / f"{name}.svg",
               line_plot(series, labels, title=f"region pressure by age category ({name})",
                         y_label="mean intensity"))
    _record(cfg, out)
    return EXIT_OK


def cmd_gradcheck(cfg: K.RunConfig) -> int:
    arch = cfg["gradcheck.arch"]
    if arch not in zoo.ARCHS:
        raise UsageError(f"unknown architecture {arch!r}")
    loss = cfg["gradcheck.loss"] or _default_loss(arch)
    graph = zoo.build(arch, zoo.ArchConfig.check(), seed=cfg["run.seed"])
    try:
        T.check_loss(graph, loss)
    except T.TaskMismatch as exc:
        raise UsageError(str(exc)) from None
    X, y = gradcheck_inputs(graph, cfg["gradcheck.batch"], cfg["run.seed"], loss)
    rep = T.graph_gradcheck(graph, X, y, loss, n_coords=cfg["gradcheck.samples"],
                            seed=cfg["run.seed"], epsilon=cfg["gradcheck.epsilon"])
    ok = rep.passed(cfg["gradcheck.tol"])
    text = (f"arch {arch} loss {loss} params {graph.n_parameters()}\n"
            f"checked {rep.n_checked} skipped {rep.n_skipped}\n"
            f"max_relative_error {rep.max_relative_error:.3e} at {rep.worst}\n"
            f"{'PASS' if ok else 'FAIL'}\n")
    sys.stdout.write(text)
    if cfg["gradcheck.out"]:
        out = Path(cfg["gradcheck.out"])
        _write(out, text)
        _record(cfg, out)
    if not ok:
        raise VerificationFailed(f"gradient mismatch at {rep.worst} (relative error {rep.max_relative_error:.3e})")
    return EXIT_OK


def gradcheck_inputs(graph, batch: int, seed: int, loss: str):
    """Random images and targets at a generic parameter point.

    BN scales and shifts are jittered off 1 and 0. At that symmetric init a
    BN feeding relu and a bias-free conv into another BN is scale invariant,
    so d(loss)/d(gamma) is ~1e-8 and central differences only see roundoff.
    Regression heads start at the target mean.
    """
    jitter = np.random.default_rng([int(seed), 6])
    for name in sorted(graph.params):
        p = graph.params[name]
        if name.endswith("bn.gamma"):
            p[...] = jitter.uniform(0.8, 1.2, p.shape)
        elif name.endswith("bn.beta"):
            p[...] = jitter.normal(0.0, 0.2, p.shape)
    rng = np.random.default_rng([int(seed), 5])
    h, w = graph.meta["config"].input_hw
    if zoo.input_kind(graph.arch) == "single":
        w //= 2
    X = rng.random((batch, h, w))
    if loss == "ce":
        y = np.arange(batch) % 2
    else:
        y = rng.uniform(20, 40, batch)
        T.init_output_bias(graph, y)
    return X, y


def cmd_export(cfg: K.RunConfig) -> int:
    _require(cfg, "export.ckpt", "export.out")
    try:
        graph, ckpt = C.load_model(cfg["export.ckpt"])
    except C.CheckpointError as exc:
        raise UsageError(str(exc)) from None
    out = Path(cfg["export.out"])
    if out.exists():
        shutil.rmtree(out / "arrays", ignore_errors=True)
    (out / "arrays").mkdir(parents=True, exist_ok=True)
    index = {"arch": graph.arch, "step": ckpt.step, "parameters": graph.n_parameters(), "arrays": {}}
    for name, arr in ckpt.arrays.items():
        fname = name.replace("/", "_") + ".npy"
        np.save(out / "arrays" / fname, arr, allow_pickle=False)
        index["arrays"][name] = {"file": f"arrays/{fname}", "shape": list(arr.shape)}
    _write(out / "index.json", json.dumps(index, indent=1, sort_keys=True) + "\n")
    _record(cfg, out)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
    "baseline": cmd_baseline, "analyze": cmd_analyze, "gradcheck": cmd_gradcheck, "export": cmd_export,
}


def resolve_args(args: argparse.Namespace) -> K.RunConfig:
    command = args.command
    defaults = defaults_for(command)
    file_values = K.load_file(args.config) if args.config else {}
    flags = {k: v for k, v in vars(args).items() if k in defaults}
    return K.resolve(command, defaults, file_values, flags)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_args(args)
        threads = cfg["run.threads"]
        if threads > 0:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=threads):
                return COMMANDS[cfg.command](cfg)
        return COMMANDS[cfg.command](cfg)
    except (UsageError, K.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except T.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
