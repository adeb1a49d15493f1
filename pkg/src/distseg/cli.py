"""``distseg`` command line: train, gradcheck, sweep, project, synth.

Exit codes: 0 success, 1 check failure, 2 invalid input, 3 numeric divergence.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, _backend
from . import config as cfgmod
from . import gradcheck as gc
from .distance import DistancePenalty
from .losses import BoundingBox, SizeSumPenalty, SupervisionMask, bbox_to_supervision, load_mask_csv
from .network import init_params, forward, save_checkpoint
from .projections import (
    Cardinality,
    FractionBounds,
    Intersection,
    L1Ball,
    MaxRank,
    check_nonempty,
    fraction_bounds_to_cardinality,
    project,
)
from .synth import argmax_segmentation, corrupt, gen_disc_scene, iou_all, read_pgm, write_channel_pgm, write_label_pgm
from .tensor import NumericError, ShapeError, load_tensor, save_tensor
from .trainer import DivergenceError, TrainConfig, train, write_history_csv

log = logging.getLogger("distseg")

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3


class InputError(ValueError):
    pass


# -- building blocks from a resolved config ----------------------------------


def build_data(cfg):
    """``(data, truth or None, meta)``."""
    dc = cfg["data"]
    if "tensor" in dc:
        try:
            data = load_tensor(cfgmod.input_path(cfg, dc["tensor"]))
        except FileNotFoundError as exc:
            raise InputError(f"data tensor not found: {exc.filename}") from exc
        if data.ndim == 2:
            data = data[None]
        truth = None
        if "truth" in dc:
            tp = cfgmod.input_path(cfg, dc["truth"])
            truth = read_pgm(tp) if tp.suffix == ".pgm" else load_tensor(tp).astype(np.int64)
        return data, truth, {"source": str(dc["tensor"])}
    scene = gen_disc_scene(
        dc["H"], dc["W"], dc["area_fraction"], dc["sigma"], n_chan=dc["n_chan"], seed=dc["seed"],
        center=dc.get("center"), contrast=dc["contrast"],
    )
    data = scene.data
    meta = dict(scene.meta)
    if dc.get("missing_fraction"):
        data, _ = corrupt(scene, dc["missing_fraction"], seed=dc["seed"])
        meta["missing_fraction"] = dc["missing_fraction"]
    return data, scene.truth, meta


def constraint_from_spec(spec):
    t = spec["type"]
    if t == "cardinality":
        if "max_count" in spec:
            return Cardinality(spec["channel"], spec["max_count"]), None
        if "max_fraction" in spec:
            return None, spec  # needs the pixel count
        raise InputError("cardinality constraint needs max_count or max_fraction")
    if t == "l1":
        return L1Ball(spec["channel"], spec["radius"]), None
    if t == "rank":
        return MaxRank(spec["channel"], spec["k"]), None
    members = [constraint_from_spec(m)[0] for m in spec["members"]]
    if any(m is None for m in members):
        raise InputError("fractional cardinality inside an intersection needs the pixel count")
    return Intersection(tuple(members), spec.get("max_sweeps", 200), spec.get("tol", 1e-10)), None


def build_constraints(specs, N):
    out = []
    for spec in specs:
        cset, deferred = constraint_from_spec(spec)
        if deferred is not None:
            cset = Cardinality(spec["channel"], math.floor(spec["max_fraction"] * N + 1e-9))
        out.append(cset)
    return out


def truth_box(truth, channel=0, margin=0):
    rows, cols = np.nonzero(truth == channel)
    if rows.size == 0:
        raise InputError("box from truth: the object class is absent")
    H, W = truth.shape
    return BoundingBox(
        max(rows.min() - margin, 0), max(cols.min() - margin, 0),
        min(rows.max() + 1 + margin, H), min(cols.max() + 1 + margin, W), channel,
    )


def build_supervision(cfg, truth, shape):
    """``(mask, extra constraint sets, box or None)``."""
    sc = cfg["supervision"]
    kind = sc["kind"]
    if kind == "none":
        return SupervisionMask.empty(shape), [], None
    if kind == "mask":
        try:
            return load_mask_csv(cfgmod.input_path(cfg, sc["path"]), shape), [], None
        except FileNotFoundError as exc:
            raise InputError(f"mask file not found: {exc.filename}") from exc
    if kind == "bbox":
        if sc["box"] == "truth":
            if truth is None:
                raise InputError("bbox from truth requested but the data has no truth")
            box = truth_box(truth, sc["channel"], sc["margin"])
        else:
            box = BoundingBox(*sc["box"], channel=sc["channel"])
        mask, sets = bbox_to_supervision(box, *shape, rho_min=sc["rho_min"])
        return mask, sets, box
    # points drawn from the truth map
    if truth is None:
        raise InputError("point supervision needs truth to sample from")
    rng = np.random.default_rng(sc["seed"])
    cand = np.flatnonzero(np.isin(truth.ravel(), sc["classes"]))
    if cand.size < sc["count"]:
        raise InputError(f"only {cand.size} candidate pixels for {sc['count']} point labels")
    pix = np.sort(rng.choice(cand, size=sc["count"], replace=False))
    return SupervisionMask(pix, truth.ravel()[pix], shape), [], None


def build_penalty(cfg, extra_sets, N, n_class=2, box=None):
    pc = cfg["penalty"]
    bounds = cfg.get("area_bounds")
    if pc["kind"] == "size-sum":
        if bounds is not None:
            lo, hi = bounds["a1"] * N, bounds["a2"] * N
        elif box is not None:
            lo, hi = math.ceil(cfg["supervision"]["rho_min"] * box.area - 1e-9), box.area
        else:
            raise InputError("size-sum penalty needs area_bounds or a bounding box")
        channel = box.channel if box is not None else 0
        return SizeSumPenalty(channel, lo, hi, pc["lam"])
    sets = build_constraints(cfg["constraints"], N) + list(extra_sets)
    if bounds is not None:
        sets += fraction_bounds_to_cardinality(FractionBounds(bounds["a1"], bounds["a2"]), N, n_class)
    if not sets:
        return None
    check_nonempty(sets, n_class, N)
    return DistancePenalty(tuple(sets), tuple(pc["weights"]), pc["mode"])


def build_params(cfg, n_chan):
    nc = cfg["network"]
    seed = nc["seed"] if nc["seed"] is not None else cfg["trainer"]["seed"]
    return init_params(
        nc["arch"], n_chan, width=nc["width"], n_layers=nc["layers"], kernel_size=nc["kernel_size"],
        seed=seed, h=nc["h"], activation=nc["activation"], block_channels=nc["block_channels"],
    )


def train_config(cfg):
    t = dict(cfg["trainer"])
    t["max_iter"] = t.pop("iters")
    return TrainConfig(**t)


# -- manifests -----------------------------------------------------------------


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(out, command, cfg, status, **extra):
    _write_json(out / "manifest.json", {
        "format": "distseg-run v1",
        "command": command,
        "status": status,
        "version": __version__,
        "backend": _backend.NAME,
        "numpy": np.__version__,
        "config": cfgmod.public(cfg),
        **extra,
    })


def write_metrics_csv(path, ious):
    lines = ["# distseg-metrics v1", "class,iou"] + [f"{k},{v!r}" for k, v in enumerate(ious)]
    Path(path).write_text("\n".join(lines) + "\n")


# -- train -----------------------------------------------------------------------


def run_experiment(cfg, out: Path, command="train"):
    """Train per ``cfg`` and write every artifact into ``out``.

    Returns a summary dict. Raises :class:`DivergenceError` after flagging
    the manifest.
    """
    data, truth, meta = build_data(cfg)
    H, W = data.shape[-2:]
    N = H * W
    mask, extra, box = build_supervision(cfg, truth, (H, W))
    penalty = build_penalty(cfg, extra, N, box=box)
    tcfg = train_config(cfg)
    params0 = build_params(cfg, data.shape[0])

    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfgmod.public(cfg))
    write_manifest(out, command, cfg, "incomplete", data=meta)
    t0 = time.perf_counter()
    try:
        res = train(params0, data, mask, penalty, tcfg)
    except (DivergenceError, NumericError) as exc:
        write_manifest(out, command, cfg, "diverged", data=meta, error=str(exc))
        raise DivergenceError(getattr(exc, "iteration", -1), str(exc)) from exc
    elapsed = time.perf_counter() - t0

    write_history_csv(out / "history.csv", res)
    save_checkpoint(out / "checkpoints" / "final", res.params, res.iterations)
    if res.best is not None:
        save_checkpoint(out / "checkpoints" / "best", res.best[0], res.best[1])
    chosen = res.selected_params()
    _, probs, _ = forward(chosen, data)
    seg = argmax_segmentation(probs)
    save_tensor(out / "probs.raw", probs)
    save_tensor(out / "prediction.raw", seg.astype(np.float64))
    write_label_pgm(out / "prediction.pgm", seg)
    write_channel_pgm(out / "prob_class0.pgm", probs[0])
    summary = {
        "iterations": res.iterations,
        "d_final": res.distance[-1],
        "eps": res.eps,
        "feasible": bool(res.feasible),
        "best_iteration": None if res.best is None else res.best[1],
        "class0_fraction": float(np.mean(seg == 0)),
        "train_seconds": elapsed,
    }
    if truth is not None:
        ious = iou_all(seg, truth, n_class=probs.shape[0])
        write_metrics_csv(out / "metrics.csv", ious)
        summary["iou"] = ious
    write_manifest(out, command, cfg, "complete", data=meta, result=summary)
    return summary


def cmd_train(args):
    cfg = cfgmod.load(args.config, _overrides(args))
    out = cfgmod.output_dir(cfg)
    s = run_experiment(cfg, out)
    line = f"{out}: {s['iterations']} iterations, d_final={s['d_final']:.6g}, feasible={s['feasible']}"
    if "iou" in s:
        line += ", iou=" + ",".join(f"{v:.4f}" for v in s["iou"])
    print(line)
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------------

MAX_CHECK_LAYERS, MAX_CHECK_SIDE = 3, 16


def cmd_gradcheck(args):
    if args.config:
        cfg = cfgmod.load(args.config, _overrides(args))
    else:
        cfg = cfgmod.resolve({"network": {"layers": 2, "width": 4}, "data": {"generator": "disc", "H": 8, "W": 8, "n_chan": 2}},
                             _overrides(args))
    nc, dc = cfg["network"], cfg["data"]
    if "tensor" in dc:
        shape = load_tensor(cfgmod.input_path(cfg, dc["tensor"])).shape
        n_chan, H, W = (1, *shape) if len(shape) == 2 else shape
    else:
        n_chan, H, W = dc["n_chan"], dc["H"], dc["W"]
    if nc["layers"] > MAX_CHECK_LAYERS or H > MAX_CHECK_SIDE or W > MAX_CHECK_SIDE:
        raise InputError(
            f"gradcheck runs on small instances only (<= {MAX_CHECK_LAYERS} layers, "
            f"<= {MAX_CHECK_SIDE}x{MAX_CHECK_SIDE}); got {nc['layers']} layers, {H}x{W}"
        )
    archs = [nc["arch"]] if args.config else ["resnet", "hyperbolic"]
    cases = [gc.small_case(a, n_layers=nc["layers"], H=H, W=W, width=nc["width"], kernel_size=nc["kernel_size"],
                           n_chan=n_chan, seed=cfg["trainer"]["seed"], activation=nc["activation"], h=nc["h"])
             for a in archs]
    results = gc.run_all(cases, corrupt_backward=args.corrupt_backward)
    for name, err in results.items():
        ok = err <= gc.TOLERANCES[name]
        print(f"{name:12s} max_rel_err={err:.3e} tol={gc.TOLERANCES[name]:.0e} {'ok' if ok else 'FAILED'}")
    failed = gc.failures(results)
    if failed:
        print("gradcheck failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# -- sweep -------------------------------------------------------------------------


def parse_grid(text):
    pairs = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        a, sep, b = item.partition(":")
        if not sep:
            raise InputError(f"grid entry {item!r} is not a1:a2")
        try:
            pairs.append((float(a), float(b)))
        except ValueError as exc:
            raise InputError(f"grid entry {item!r}: {exc}") from exc
    if not pairs:
        raise InputError("empty bounds grid")
    return pairs


def _sweep_point(job):
    i, cfg, a1, a2, out = job
    row = {"point": i, "a1": a1, "a2": a2}
    try:
        if a1 > a2:
            raise InputError(f"a1={a1} exceeds a2={a2}")
        pcfg = copy.deepcopy(cfg)
        pcfg["area_bounds"] = {"a1": a1, "a2": a2}
        pcfg["trainer"]["mode"] = "feasibility"
        pcfg["supervision"] = {"kind": "none"}
        cfgmod.validate(cfgmod.public(pcfg))
        s = run_experiment(pcfg, Path(out), command="sweep")
        row.update(status="ok", **{k: s[k] for k in ("iterations", "d_final", "feasible", "class0_fraction")})
        row["iou"] = s.get("iou")
    except (ValueError, ArithmeticError) as exc:
        log.error("sweep point %d (%s, %s) failed: %s", i, a1, a2, exc)
        row.update(status="failed", error=str(exc).splitlines()[0])
    return row


def write_sweep_csv(path, rows, n_class=2):
    header = ["point", "a1", "a2", "status", "iterations", "d_final", "feasible", "class0_fraction"]
    header += [f"iou{k}" for k in range(n_class)]
    lines = ["# distseg-sweep v1", ",".join(header)]
    for r in rows:
        vals = [r["point"], repr(r["a1"]), repr(r["a2"]), r["status"]]
        if r["status"] == "ok":
            vals += [r["iterations"], repr(r["d_final"]), int(r["feasible"]), repr(r["class0_fraction"])]
            vals += [repr(v) for v in r["iou"]] if r.get("iou") else [""] * n_class
        else:
            vals += [""] * (4 + n_class)
        lines.append(",".join(str(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_sweep(args):
    cfg = cfgmod.load(args.config, _overrides(args))
    grid = []
    if args.grid:
        grid += parse_grid(args.grid)
    for pair in args.bounds or ():
        grid.append(tuple(pair))
    if not grid:
        raise InputError("sweep needs --grid or --bounds")
    out = cfgmod.output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, cfg, a1, a2, str(out / f"point_{i:03d}")) for i, (a1, a2) in enumerate(grid)]
    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    write_sweep_csv(out / "sweep.csv", rows)
    n_ok = sum(r["status"] == "ok" for r in rows)
    print(f"{out / 'sweep.csv'}: {n_ok}/{len(rows)} points completed")
    return EXIT_OK if n_ok else EXIT_INPUT


# -- project -----------------------------------------------------------------------


def cmd_project(args):
    try:
        y = load_tensor(args.tensor)
    except FileNotFoundError as exc:
        raise InputError(f"tensor file not found: {args.tensor}") from exc
    text = args.constraint
    if text.startswith("@"):
        text = Path(text[1:]).read_text()
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InputError(f"constraint spec is not valid JSON: {exc}") from exc
    specs = spec if isinstance(spec, list) else [spec]
    # validate through the config schema's constraint list
    cfgmod.validate({"constraints": specs})
    squeeze = y.ndim < 3 and y.ndim > 0
    yc = y.reshape((1,) + y.shape) if squeeze else y
    N = int(np.prod(yc.shape[1:]))
    sets = build_constraints(specs, N)
    cset = sets[0] if len(sets) == 1 else Intersection(tuple(sets))
    for s in (cset.members if isinstance(cset, Intersection) else [cset]):
        if s.channel >= yc.shape[0]:
            raise InputError(f"constraint binds channel {s.channel}, tensor has {yc.shape[0]}")
    p = project(yc, cset)
    before = float(np.linalg.norm(yc - p))
    after = float(np.linalg.norm(p - project(p, cset)))
    out = Path(args.out) if args.out else Path(args.tensor).with_name(Path(args.tensor).stem + "_projected.raw")
    save_tensor(out, p.reshape(y.shape))
    feasible = before <= args.tol
    report = [
        "# distseg-project v1",
        f"input={args.tensor}",
        f"output={out}",
        f"constraint={json.dumps(spec, sort_keys=True)}",
        f"distance_before={before!r}",
        f"distance_after={after!r}",
        f"feasible={str(feasible).lower()}",
    ]
    report_path = Path(args.report) if args.report else out.with_suffix(".txt")
    report_path.write_text("\n".join(report) + "\n")
    print("\n".join(report[4:]))
    return EXIT_OK


# -- synth -------------------------------------------------------------------------


def cmd_synth(args):
    cfg = cfgmod.load(args.config, _overrides(args))
    if "generator" not in cfg["data"]:
        raise InputError("synth needs a data.generator section")
    data, truth, meta = build_data(cfg)
    out = cfgmod.output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "scene.raw", data)
    save_tensor(out / "truth.raw", truth.astype(np.float64))
    write_label_pgm(out / "truth.pgm", truth)
    for c in range(data.shape[0]):
        write_channel_pgm(out / f"channel_{c:02d}.pgm", data[c])
    _write_json(out / "manifest.json", {"format": "distseg-scene v1", "config": cfgmod.public(cfg), "meta": meta})
    print(f"{out}: scene {data.shape}, class fractions {meta['fractions']}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def _overrides(args):
    ov = list(getattr(args, "set", None) or [])
    for flag, key in (("seed", "trainer.seed"), ("iters", "trainer.iters"), ("lr", "trainer.lr"),
                      ("output", "output.dir")):
        v = getattr(args, flag, None)
        if v is not None:
            ov.append(f"{key}={json.dumps(v)}")
    return ov


def build_parser():
    p = argparse.ArgumentParser(prog="distseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        if config_required:
            sp.add_argument("config", help="experiment config (JSON)")
        else:
            sp.add_argument("config", nargs="?", help="experiment config (JSON); small default if omitted")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. trainer.lr=0.05 (repeatable)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--iters", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--output", help="output directory (relative paths honour $DISTSEG_OUTPUT_ROOT)")

    common(sub.add_parser("train", help="run constrained training"))
    g = sub.add_parser("gradcheck", help="finite-difference checks of every gradient")
    common(g, config_required=False)
    g.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    s = sub.add_parser("sweep", help="feasibility runs over a grid of area bounds")
    common(s)
    s.add_argument("--grid", help="comma-separated a1:a2 pairs, e.g. 0.2:0.4,0.25:0.45")
    s.add_argument("--bounds", nargs=2, type=float, action="append", metavar=("A1", "A2"))
    s.add_argument("--parallel", type=int, default=1, help="worker processes (default 1: sequential)")
    pr = sub.add_parser("project", help="project a tensor file onto a constraint set")
    pr.add_argument("tensor")
    pr.add_argument("--constraint", required=True, help="JSON constraint (or list), or @file")
    pr.add_argument("--out")
    pr.add_argument("--report")
    pr.add_argument("--tol", type=float, default=1e-12, help="distance below which the input counts as feasible")
    common(sub.add_parser("synth", help="write a synthetic scene"))
    return p


COMMANDS = {"train": cmd_train, "gradcheck": cmd_gradcheck, "sweep": cmd_sweep, "project": cmd_project,
            "synth": cmd_synth}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (DivergenceError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (cfgmod.ConfigError, InputError, ShapeError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
