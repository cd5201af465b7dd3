"""Command-line experiment driver.

Every verb reads its inputs from and writes its outputs to ``--out DIR``::

    gen-data    dataset.l3dt, data_summary.csv
    train-toy   model.l3dt, toy_loss.csv                (needs dataset.l3dt)
    decompose   basis.l3dt, l3d_loss.csv, pact.csv      (needs model.l3dt)
                --sweep adds sweep.csv and basis_nv<N>_r<R>.l3dt per point
    eval        weights.csv, pact.csv, assignment.csv, group_scores.csv,
                eval.json and, for single-hidden-layer models, cosine.csv and
                (linear tasks) coefficients.csv
    intervene   intervene.csv, intervene_pairs.csv, selectivity.csv
    report      <name>.svg for each CSV it knows how to draw (needs matplotlib)

Each CSV starts with a ``# config_hash=...`` line followed by a header row
whose column names carry units in brackets.  Floats use 17 significant
digits.  Wall-clock data goes to ``meta_<verb>.json`` only, so every other
file is byte-identical across reruns with the same config and seed.

Exit status: 0 success, 2 configuration error (including model/basis
mismatch and unknown subnetwork indices), 3 numerical divergence,
4 I/O or file-format failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, _accel
from . import analysis as an
from .config import load_config
from .decomposition import evaluate_l3d, train_l3d
from .errors import ConfigError, FormatError, NumericalError, ShapeError
from .io import dumps_json, load_basis, load_dataset, load_params, save_basis, save_dataset, save_params
from .models import train_toy
from .numkit import Rng

log = logging.getLogger("l3d")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# output helpers


def fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path, cfg_hash, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# config_hash={cfg_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])
    return path


def read_csv(path):
    """``(header, rows)`` of a CSV written by :func:`write_csv`, values as strings."""
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return rows[0], rows[1:]


def write_json(path, obj):
    Path(path).write_text(dumps_json(obj) + "\n", encoding="utf-8")


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if np.isfinite(x) else None
    return x


# ---------------------------------------------------------------------------
# shared plumbing


class Run:
    """Resolved config, seed and output directory for one invocation."""

    def __init__(self, args):
        overrides = list(args.set or [])
        if args.seed is not None:
            overrides.append(f"experiment.seed={args.seed}")
        # verb flags become config overrides so the hash reflects them
        section = {"train-toy": "toy", "decompose": "l3d"}.get(args.verb)
        for flag, key in (("epochs", "epochs"), ("n_v", "n_v"), ("rank", "rank")):
            if getattr(args, flag, None) is not None:
                overrides.append(f"{section}.{key}={getattr(args, flag)}")
        self.cfg = load_config(args.config, overrides)
        self.seed = self.cfg.seed
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = self.cfg.hash()
        self.rng = Rng(self.seed)
        (self.out / "config.ini").write_text(self.cfg.to_ini(), encoding="utf-8")

    def path(self, name):
        return self.out / name

    def require(self, name, verb):
        p = self.path(name)
        if not p.is_file():
            raise FileNotFoundError(f"{p} not found; run `l3d {verb}` first")
        return p

    def csv(self, name, header, rows):
        return write_csv(self.path(name), self.hash, header, rows)

    def task(self):
        return self.cfg.make_task(self.rng.child("task"))

    def load_task(self):
        task, data, _ = load_dataset(self.require("dataset.l3dt", "gen-data"))
        if task.kind != self.cfg.task.kind or (task.n_in, task.n_out) != (self.cfg.model.n_in, self.cfg.model.n_out):
            raise ConfigError("dataset.l3dt was generated for a different task or model")
        return task, data

    def load_model(self):
        spec, params, _ = load_params(self.require("model.l3dt", "train-toy"))
        if spec != self.cfg.model:
            raise ConfigError("model.l3dt does not match the [model] section of the config")
        return spec, params

    def load_basis(self, name="basis.l3dt"):
        basis, _ = load_basis(self.require(name, "decompose"))
        return basis


def _progress(label, every=100):
    def report(epoch, loss):
        if epoch % every == 0:
            log.info("%s epoch %d loss %.6g", label, epoch, loss)

    return report


# ---------------------------------------------------------------------------
# verbs


def cmd_gen_data(run, args):
    task = run.task()
    data = task.sample(run.rng.child("data"), run.cfg.toy.n_data)
    save_dataset(run.path("dataset.l3dt"), task, data, {"seed": run.seed, "config_hash": run.hash})
    X = data.X
    rows = [
        ("n_samples", X.shape[0]),
        ("n_features", X.shape[1]),
        ("active_fraction", float(np.mean(X != 0))),
        ("all_zero_rows", float(np.mean(~X.any(axis=1)))),
        ("x_min", float(X.min())),
        ("x_max", float(X.max())),
        ("y_mean", float(data.Y.mean())),
    ]
    run.csv("data_summary.csv", ["statistic", "value [units of statistic]"], rows)
    for name, value in rows:
        print(f"{name:>16s} {fmt(value)}")
    return {}


def cmd_train_toy(run, args):
    task, data = run.load_task()
    tc = run.cfg.toy
    res = train_toy(run.cfg.model, task, tc, run.rng.child("toy"), data=data, progress=_progress("toy"))
    save_params(run.path("model.l3dt"), run.cfg.model, res.params, {"seed": run.seed, "config_hash": run.hash})
    run.csv("toy_loss.csv", ["epoch [count]", "mse [output units^2]"], enumerate(res.losses))
    print(f"final toy MSE {fmt(res.losses[-1])} after {tc.epochs} epochs")
    return {"final_loss": res.losses[-1]}


def _l3d_inputs(run, task):
    return task.sample_inputs(run.rng.child("l3d-data"), run.cfg.l3d.n_data)


def cmd_decompose(run, args):
    spec, params = run.load_model()
    task, _ = run.load_task()
    lc = run.cfg.l3d
    X = _l3d_inputs(run, task)
    meta = {"seed": run.seed, "config_hash": run.hash}
    if args.sweep:
        grid = [(n, r) for n in (run.cfg.sweep_n_v or (lc.n_v,)) for r in (run.cfg.sweep_rank or (lc.rank,))]
        rows, curves = [], []
        for n_v, rank in grid:
            c = replace(lc, n_v=n_v, rank=rank)
            basis, st = train_l3d(spec, params, X, c, run.rng.child("l3d"), progress=_progress(f"nv={n_v} r={rank}"))
            save_basis(run.path(f"basis_nv{n_v}_r{rank}.l3dt"), basis, meta)
            rows.append((n_v, rank, st.final_loss, len(st.dead())))
            curves.extend((n_v, rank, e, loss) for e, loss in enumerate(st.losses))
            print(f"n_v {n_v} rank {rank} final loss {fmt(st.final_loss)} dead {len(st.dead())}")
        run.csv("sweep.csv", ["n_v [count]", "rank [count]", "final_loss [ratio]", "n_dead [count]"], rows)
        run.csv("sweep_loss.csv", ["n_v [count]", "rank [count]", "epoch [count]", "loss [ratio]"], curves)
        return {"grid": grid}
    basis, st = train_l3d(spec, params, X, lc, run.rng.child("l3d"), progress=_progress("l3d"))
    save_basis(run.path("basis.l3dt"), basis, meta)
    run.csv("l3d_loss.csv", ["epoch [count]", "loss [ratio]"], enumerate(st.losses))
    _write_pact(run, st.pact)
    print(f"final reconstruction loss {fmt(st.final_loss)}; dead subnetworks {st.dead().tolist()}")
    return {"final_loss": st.final_loss, "epoch_seconds": st.epoch_seconds}


def _write_pact(run, pact):
    run.csv("pact.csv", ["subnetwork [index]", "pact [fraction]", "dead [bool]"],
            [(k, p, p == 0.0) for k, p in enumerate(pact)])


def cmd_eval(run, args):
    spec, params = run.load_model()
    task, _ = run.load_task()
    basis = run.load_basis()
    lc = replace(run.cfg.l3d, n_v=basis.n_v)
    X = task.sample_inputs(run.rng.child("eval-data"), lc.n_data)
    loss, pact = evaluate_l3d(spec, params, basis, X, lc, run.rng.child("eval-pairing"))
    _write_pact(run, pact)
    dead = np.flatnonzero(pact == 0.0)

    rows = []
    for k in range(basis.n_v):
        for name, w in basis.direction(k).items():
            w2 = w.reshape(w.shape[0], -1)
            for i in range(w2.shape[0]):
                for j in range(w2.shape[1]):
                    rows.append((k, name, i, j, w2[i, j]))
    run.csv("weights.csv", ["subnetwork [index]", "tensor [name]", "row [index]", "col [index]",
                            "value [unit-norm direction]"], rows)

    ac = run.cfg.analysis
    scores = an.group_scores(spec, params, basis, task, run.rng.child("scores"), ac.n_per_group, ac.n_refs,
                             lc.divergence)
    run.csv("group_scores.csv", ["subnetwork [index]", "group [index]", "impact [divergence units]"],
            [(k, g, scores[k, g]) for k in range(basis.n_v) for g in range(task.n_groups)])
    asg = an.match_subnetworks(scores, dead=dead)
    run.csv("assignment.csv", ["subnetwork [index]", "group [index]", "impact [divergence units]"],
            [(k, j, scores[k, j]) for k, j in asg.pairs()])
    summary = {
        "config_hash": run.hash,
        "eval_loss": loss,
        "pact": pact,
        "dead": dead,
        "assignment": asg.pairs(),
        "all_groups_matched": len(asg.pairs()) == task.n_groups,
    }

    if spec.n_layers == 2:
        cos = an.cosine_alignment(spec, params, basis)
        matched = {(k, j) for k, j in asg.pairs()}
        run.csv("cosine.csv", ["subnetwork [index]", "feature [index]", "abs_cosine [ratio]", "matched [bool]"],
                [(k, j, cos[k, j], (k, j) in matched) for k in range(basis.n_v) for j in range(spec.n_in)])
        summary["matched_abs_cosine"] = [cos[k, j] for k, j in asg.pairs()] if task.group_size == 1 else None
    if spec.n_layers == 2 and task.A is not None and task.group_size == 1:
        a_hat, j_star = an.extract_coefficients(spec, basis)
        live = [k for k in range(basis.n_v) if k not in set(dead.tolist())]
        r2 = an.coefficient_r2(task.A, a_hat[live], j_star[live]) if live else float("nan")
        crow = []
        for k in live:
            a, t = a_hat[k], task.A[:, j_star[k]]
            s = (a @ t) / (a @ a) if a @ a > 0 else 0.0
            crow.extend((k, j_star[k], o, t[o], a[o], s * a[o]) for o in range(spec.n_out))
        run.csv("coefficients.csv", ["subnetwork [index]", "input [index]", "output [index]", "a_true [coefficient]",
                                     "a_hat [path weight]", "a_hat_scaled [coefficient]"], crow)
        summary["coefficient_r2"] = r2
    write_json(run.path("eval.json"), _jsonable(summary))
    print(f"eval loss {fmt(loss)}; dead {dead.tolist()}; assignment {asg.pairs()}")
    if "coefficient_r2" in summary:
        print(f"coefficient r^2 {fmt(summary['coefficient_r2'])}")
    return {}


def _parse_pairs(text):
    out = []
    for item in text.split(","):
        if item.strip():
            a, sep, b = item.partition(":")
            if not sep:
                raise ConfigError(f"pair {item!r} must look like K0:K1")
            out.append((int(a), int(b)))
    return out


def cmd_intervene(run, args):
    spec, params = run.load_model()
    task, _ = run.load_task()
    basis = run.load_basis()
    try:
        subs = list(range(basis.n_v)) if args.subnetworks is None else [int(s) for s in args.subnetworks.split(",")]
        pairs = _parse_pairs(args.pairs or "")
    except ValueError as exc:
        raise ConfigError(f"bad subnetwork list: {exc}") from None
    for k in subs + [k for p in pairs for k in p]:
        if not 0 <= k < basis.n_v:
            raise ConfigError(f"unknown subnetwork {k}; the basis has {basis.n_v}")
    ac = run.cfg.analysis
    deltas = ac.deltas()
    X = task.sample_inputs(run.rng.child("intervene"), ac.n_inputs)
    results = an.intervention_sweep(spec, params, basis, deltas, X, subs, pairs)
    singles, grids = results[: len(subs)], results[len(subs):]
    rows = []
    for res in singles:
        mac = res.mean_abs_change()
        rows.extend((res.subnetworks[0], d, o, mac[i, o]) for i, d in enumerate(deltas) for o in range(spec.n_out))
    run.csv("intervene.csv", ["subnetwork [index]", "delta [direction units]", "output [index]",
                              "mean_abs_change [output units]"], rows)
    rows = []
    for res in grids:
        mac = res.mean_abs_change()
        k0, k1 = res.subnetworks
        rows.extend((k0, k1, d0, d1, o, mac[i, j, o]) for i, d0 in enumerate(deltas)
                    for j, d1 in enumerate(deltas) for o in range(spec.n_out))
    run.csv("intervene_pairs.csv", ["subnetwork0 [index]", "subnetwork1 [index]", "delta0 [direction units]",
                                    "delta1 [direction units]", "output [index]", "mean_abs_change [output units]"],
            rows)
    # output index j belongs to feature j only for the identity-indexed tasks
    rows = []
    if task.kind in ("tms", "square") and np.any(np.isclose(np.abs(deltas), ac.magnitude)):
        scores = an.group_scores(spec, params, basis, task, run.rng.child("scores"), ac.n_per_group, ac.n_refs,
                                 run.cfg.l3d.divergence)
        asg = an.match_subnetworks(scores)
        by_k = {res.subnetworks[0]: res for res in singles}
        for k, j in asg.pairs():
            if k in by_k:
                rows.append((k, j, ac.magnitude, an.selectivity(by_k[k], task.output_groups()[j], ac.magnitude)))
    run.csv("selectivity.csv", ["subnetwork [index]", "feature [index]", "abs_delta [direction units]",
                                "selectivity [ratio]"], rows)
    print(f"{len(singles)} single sweeps, {len(grids)} pair grids over {len(deltas)} deltas")
    for k, j, _, s in rows:
        print(f"subnetwork {k} -> feature {j}: selectivity {s:.3g}")
    return {}


def cmd_report(run, args):
    try:
        import matplotlib
    except ImportError:
        print("matplotlib is not installed; no SVGs written", file=sys.stderr)
        return {"svgs": []}
    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "l3d"
    written = []

    def table(name):
        p = run.path(name)
        if not p.is_file():
            return None
        header, rows = read_csv(p)
        return header, np.array([[float(v) for v in r] for r in rows])

    def save(fig, name):
        fig.savefig(run.path(name), format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(name)

    for name, title in (("toy_loss.csv", "toy model training"), ("l3d_loss.csv", "decomposition training")):
        t = table(name)
        if t is not None and len(t[1]):
            fig, ax = plt.subplots(figsize=(5, 3.5))
            ax.plot(t[1][:, 0], t[1][:, 1])
            ax.set_yscale("log")
            ax.set_xlabel(t[0][0])
            ax.set_ylabel(t[0][1])
            ax.set_title(title)
            save(fig, name.replace(".csv", ".svg"))
    t = table("sweep.csv")
    if t is not None and len(t[1]):
        d = t[1]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for r in np.unique(d[:, 1]):
            sel = d[:, 1] == r
            ax.plot(d[sel, 0], d[sel, 2], "o-", label=f"rank {int(r)}")
        ax.set_xlabel("n_v")
        ax.set_ylabel("final loss")
        ax.legend()
        save(fig, "sweep.svg")
    t = table("pact.csv")
    if t is not None and len(t[1]):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(t[1][:, 0], t[1][:, 1])
        ax.set_xlabel("subnetwork")
        ax.set_ylabel("P_act")
        save(fig, "pact.svg")
    t = table("coefficients.csv")
    if t is not None and len(t[1]):
        d = t[1]
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(d[:, 3], d[:, 5], s=8)
        ax.set_xlabel("a (true)")
        ax.set_ylabel("a_hat (scaled)")
        save(fig, "coefficients.svg")
    t = table("intervene.csv")
    if t is not None and len(t[1]):
        d = t[1]
        ks = np.unique(d[:, 0]).astype(int)
        fig, axes = plt.subplots(1, len(ks), figsize=(2.6 * len(ks), 2.8), sharey=True, squeeze=False)
        for ax, k in zip(axes[0], ks):
            dk = d[d[:, 0] == k]
            for o in np.unique(dk[:, 2]).astype(int):
                s = dk[dk[:, 2] == o]
                ax.plot(s[:, 1], s[:, 3], label=str(o))
            ax.set_title(f"subnetwork {k}")
            ax.set_xlabel("delta")
        axes[0][0].set_ylabel("mean |change|")
        axes[0][-1].legend(title="output", fontsize="x-small")
        save(fig, "intervene.svg")
    print("wrote " + (", ".join(written) if written else "nothing (no CSVs found)"))
    return {"svgs": written}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-toy": cmd_train_toy,
    "decompose": cmd_decompose,
    "eval": cmd_eval,
    "intervene": cmd_intervene,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="tms", help="config file path or preset name (tms, tmcs, highrank, square)")
    common.add_argument("--seed", type=int, default=None, help="overrides [experiment] seed")
    common.add_argument("--out", default="runs/default", help="directory for all inputs and outputs")
    common.add_argument("--threads", type=int, default=None, help="numba worker threads (env L3D_THREADS)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress every 100 epochs")

    parser = argparse.ArgumentParser(prog="l3d", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen-data", parents=[common], help="sample the task's training set")
    p = sub.add_parser("train-toy", parents=[common], help="train the toy model")
    p.add_argument("--epochs", type=int, default=None, help="overrides [toy] epochs")
    p = sub.add_parser("decompose", parents=[common], help="learn the subnetwork basis")
    p.add_argument("--epochs", type=int, default=None, help="overrides [l3d] epochs")
    p.add_argument("--n-v", type=int, default=None, help="overrides [l3d] n_v")
    p.add_argument("--rank", type=int, default=None, help="overrides [l3d] rank")
    p.add_argument("--sweep", action="store_true", help="run every ([sweep] n_v, [sweep] rank) combination")
    sub.add_parser("eval", parents=[common], help="analyse a learned basis")
    p = sub.add_parser("intervene", parents=[common], help="sweep parameters along subnetworks")
    p.add_argument("--subnetworks", default=None, help="comma-separated indices (default: all)")
    p.add_argument("--pairs", default=None, help="comma-separated K0:K1 pairs for delta-grid sweeps")
    sub.add_parser("report", parents=[common], help="render SVG plots from the CSVs in --out")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    threads = args.threads if args.threads is not None else os.environ.get("L3D_THREADS")
    started = time.time()
    try:
        if threads not in (None, ""):
            _accel.set_threads(int(threads))
        run = Run(args)
        info = COMMANDS[args.verb](run, args)
    except (OSError, FormatError) as exc:
        print(f"l3d: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"l3d: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ShapeError, ValueError) as exc:
        # FormatError is also a ValueError, hence the order
        print(f"l3d: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    meta = {
        "verb": args.verb,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "config_hash": run.hash,
        "seed": run.seed,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "seconds": time.time() - started,
        "backend": _accel.BACKEND,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "l3d": __version__,
        "info": _jsonable(info),
    }
    write_json(run.path(f"meta_{args.verb}.json"), meta)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
