"""Command-line pipeline: simulate, preprocess, train, infer, eval, report.

Every subcommand accepts ``--config run.json`` and ``--seed``. Failures
exit nonzero after printing one JSON line ``{"error", "message", "key"}``
to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import infer as inf
from . import io
from . import metrics as mt
from .errors import ConfigError, CryomorphError
from .preprocess import preprocess, preprocess_stack
from .sim import PHANTOM_KINDS, make_phantom, simulate_dataset
from .train import build_model, history_csv, train
from .volume import Volume

log = logging.getLogger("cryomorph")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _fail(exc, code):
    doc = {"error": type(exc).__name__, "message": str(exc), "key": getattr(exc, "key", None)}
    print(json.dumps(doc), file=sys.stderr)
    return code


def _load_cfg(args) -> io.RunConfig:
    cfg = io.load_config(args.config) if args.config else io.RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _replace(cfg, section, **changes):
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    try:
        sub = dataclasses.replace(getattr(cfg, section), **changes)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section} override: {e}", key=section) from e
    return dataclasses.replace(cfg, **{section: sub})


def _vol_name(i: int, fmt: str) -> str:
    return f"vol_{i:05d}." + ("mrc" if fmt == "mrc" else "raw")


# ---------------------------------------------------------------- subcommands


def cmd_simulate(args, cfg: io.RunConfig):
    kinds = cfg.sim.kinds
    if args.classes is not None:
        if not 2 <= args.classes <= len(PHANTOM_KINDS):
            raise ConfigError(f"--classes must lie in [2, {len(PHANTOM_KINDS)}]", key="sim.kinds")
        kinds = PHANTOM_KINDS[:args.classes]
    cfg = _replace(cfg, "sim", kinds=tuple(kinds), n_per_class=args.n, snr=args.snr,
                   wedge_half_angle=args.wedge, box=args.box)
    if args.no_ctf:
        cfg = _replace(cfg, "sim", apply_ctf=False)
    s = cfg.sim
    out = Path(args.out)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    (out / "templates").mkdir(exist_ok=True)
    templates = [make_phantom(k, s.box, s.voxel_size, class_id=i) for i, k in enumerate(s.kinds)]
    p = s.imaging()
    vols, records = simulate_dataset(templates, s.n_per_class, p, cfg.seed)
    entries = []
    for v, rec in zip(vols, records):
        name = "volumes/" + _vol_name(rec.index, s.fmt)
        io.write_volume(out / name, Volume(v, s.voxel_size))
        entries.append({"path": name, "class_id": rec.class_id, "pose": rec.pose.to_list(),
                        "seed": rec.seed})
    tpaths = []
    for t in templates:
        name = f"templates/class_{t.class_id}.mrc"
        io.write_mrc(out / name, t.volume)
        tpaths.append(name)
    meta = {"d": s.box, "voxel_size": s.voxel_size, "snr": s.snr,
            "wedge_half_angle": s.wedge_half_angle, "creation_seed": cfg.seed,
            "ctf": dataclasses.asdict(p.ctf) | {"applied": p.apply_ctf},
            "classes": list(s.kinds), "templates": tpaths}
    io.write_manifest(out / "manifest.json", io.Manifest(entries, meta))
    (out / "config.json").write_text(io.dumps_config(cfg))
    log.info("wrote %d volumes to %s", len(entries), out)


def cmd_preprocess(args, cfg: io.RunConfig):
    src = Path(args.manifest)
    man = io.read_manifest(src)
    stack, vs = io.load_stack(man, src.parent)
    out = Path(args.out)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    processed, new_vs = preprocess_stack(stack, vs, cfg.preprocess)
    entries = []
    for i, (e, v) in enumerate(zip(man.entries, processed)):
        name = "volumes/" + _vol_name(i, "mrc")
        io.write_mrc(out / name, Volume(v, new_vs))
        entries.append({**e, "path": name})
    meta = dict(man.metadata, d=cfg.preprocess.box_out, voxel_size=new_vs,
                preprocess=dataclasses.asdict(cfg.preprocess))
    if "templates" in man.metadata:
        (out / "templates").mkdir(exist_ok=True)
        tpaths = []
        for tp in man.metadata["templates"]:
            # references go through the same chain so they are comparable with decodes
            t = preprocess(io.read_volume(src.parent / tp), cfg.preprocess)
            name = "templates/" + Path(tp).name
            io.write_mrc(out / name, t)
            tpaths.append(name)
        meta["templates"] = tpaths
    io.write_manifest(out / "manifest.json", io.Manifest(entries, meta))


def cmd_train(args, cfg: io.RunConfig):
    if args.epochs is not None:
        cfg = _replace(cfg, "train", epochs=args.epochs,
                       schedule_switch_epoch=min(cfg.train.schedule_switch_epoch, args.epochs))
    cfg = _replace(cfg, "train", seed=cfg.seed, n_candidates=args.candidates)
    src = Path(args.manifest)
    man = io.read_manifest(src)
    stack, _ = io.load_stack(man, src.parent)
    if stack.shape[1] != cfg.net.box:
        cfg = _replace(cfg, "net", box=int(stack.shape[1]))
    out = Path(args.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    enc, dec = build_model(cfg.net, cfg.seed)
    meta = {"seed": cfg.seed, "train": io.config_to_dict(cfg)["train"]}

    def ckpt(epoch, e, d):
        io.save_checkpoint(out / "checkpoints" / f"epoch_{epoch:04d}.ckpt", e, d,
                           dict(meta, epoch=epoch))

    model = train(stack, cfg.train, enc, dec, checkpoint_fn=ckpt)
    io.save_checkpoint(out / "model.ckpt", enc, dec, dict(meta, epoch=cfg.train.epochs))
    (out / "history.csv").write_text(history_csv(model.history))
    (out / "config.json").write_text(io.dumps_config(cfg))


def cmd_infer(args, cfg: io.RunConfig):
    cfg = _replace(cfg, "infer", K=args.K, seed=cfg.seed)
    if args.no_reduction:
        cfg = _replace(cfg, "infer", reduction="none")
    src = Path(args.manifest)
    man = io.read_manifest(src)
    stack, vs = io.load_stack(man, src.parent)
    enc, dec, _ = io.load_checkpoint(args.checkpoint)
    z, theta = inf.extract_latents(stack, enc)
    coords, model, post, labels = inf.cluster(z, cfg.infer)
    if coords.shape[1] < 2:
        coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
    out = Path(args.out)
    (out / "templates").mkdir(parents=True, exist_ok=True)
    io.write_latent_csv(out / "latents.csv", z, theta, coords, post, labels)
    for k in range(cfg.infer.K):
        if (labels == k).any():
            io.write_mrc(out / "templates" / f"template_{k}.mrc",
                         inf.class_template(z, labels, k, dec, vs))
    gmm = {"K": model.K, "weights": model.weights.tolist(), "means": model.means.tolist(),
           "covariances": model.covariances.tolist(), "iterations": len(model.log_likelihood),
           "log_likelihood": model.log_likelihood[-1], "checkpoint": str(args.checkpoint)}
    (out / "gmm.json").write_text(json.dumps(gmm, indent=2, sort_keys=True) + "\n")


def _final_recon(checkpoint):
    hist = Path(checkpoint).parent / "history.csv"
    if not hist.exists():
        return None
    lines = hist.read_text().strip().splitlines()
    if len(lines) < 2:
        return None
    head, last = lines[0].split(","), lines[-1].split(",")
    row = dict(zip(head, last))
    return float(row["recon_self"]) + float(row["recon_aug"])


def cmd_eval(args, cfg: io.RunConfig):
    src = Path(args.manifest)
    man = io.read_manifest(src)
    gt = man.labels()
    n_gt = len(np.unique(gt))
    refs = [io.read_volume(src.parent / t) for t in man.metadata.get("templates", [])]
    names = args.names or [Path(d).name for d in args.infer]
    if len(names) != len(args.infer):
        raise ConfigError("--names must match --infer in length", key="names")
    fsc_dir = Path(args.fsc_dir) if args.fsc_dir else None
    if fsc_dir:
        fsc_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, d in zip(names, args.infer):
        d = Path(d)
        lat = io.read_latent_csv(d / "latents.csv")
        pred = lat["label"]
        K = max(int(pred.max()) + 1, n_gt, lat["posteriors"].shape[1])
        rows.append((name, "ari", mt.adjusted_rand_index(pred, gt)))
        rows.append((name, "matched_accuracy", mt.matched_accuracy(pred, gt, K)))
        rows.append((name, "sap", mt.sap_score(lat["z"], lat["theta"], gt, seed=cfg.seed)))
        gmm = d / "gmm.json"
        if gmm.exists():
            recon = _final_recon(json.loads(gmm.read_text())["checkpoint"])
            if recon is not None:
                rows.append((name, "final_recon_loss", recon))
        if not refs:
            continue
        counts = np.zeros((K, K), dtype=np.int64)
        np.add.at(counts, (pred, gt), 1)
        perm, _ = mt.hungarian_match(-counts)
        for k in range(K):
            tpath = d / "templates" / f"template_{k}.mrc"
            if not tpath.exists() or perm[k] >= len(refs):
                continue
            ref, mov = refs[perm[k]], io.read_volume(tpath)
            a = mt.align(ref, mov, cfg.eval.align_max_shift)
            if cfg.eval.refine_alignment:
                a = mt.refine_alignment(ref, mov, a.transform)
            aligned = mt.fsc(ref, a.volume)
            raw = mt.fsc(ref, mov)
            rows.append((name, f"auc_fsc_aligned_class{k}", mt.auc_fsc(aligned)))
            rows.append((name, f"auc_fsc_unaligned_class{k}", mt.auc_fsc(raw)))
            rows.append((name, f"template_ncc_class{k}", a.ncc))
            if fsc_dir:
                io.write_fsc_csv(fsc_dir / f"fsc_{name}_class{k}.csv", aligned)
    io.write_metrics_csv(args.out, rows)


def cmd_report(args, cfg: io.RunConfig):
    from . import plots

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.history:
        import csv
        with open(args.history, newline="") as f:
            hist = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(f)]
        plots.plot_history(hist, out / "loss_curves.svg")
    if args.latents:
        lat = io.read_latent_csv(args.latents)
        plots.plot_latents(lat["coords"], lat["label"], out / "latent_scatter.svg")
    if args.fsc_dir:
        curves = {}
        for p in sorted(Path(args.fsc_dir).glob("*.csv")):
            data = np.loadtxt(p, delimiter=",", skiprows=1, ndmin=2)
            curves[p.stem] = (data[:, 0], data[:, 1])
        plots.plot_fsc(curves, out / "fsc_curves.svg")


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="cryomorph", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--seed", type=int, help="run seed (overrides the config)")
        p.add_argument("-v", "--verbose", action="store_true")
        p.set_defaults(fn=fn)
        return p

    p = add("simulate", cmd_simulate, "simulate a posed, degraded phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--n", type=int, help="volumes per class")
    p.add_argument("--snr", type=float)
    p.add_argument("--wedge", type=float, help="missing-wedge half angle in degrees")
    p.add_argument("--box", type=int)
    p.add_argument("--no-ctf", action="store_true")

    p = add("preprocess", cmd_preprocess, "low-pass, crop, standardize and mask")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "train the encoder/decoder")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--candidates", type=int, help="number of candidate transforms N")

    p = add("infer", cmd_infer, "latents, GMM classes and decoded templates")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--K", type=int)
    p.add_argument("--no-reduction", action="store_true", help="cluster the full latent")

    p = add("eval", cmd_eval, "metrics CSV against the manifest ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--infer", nargs="+", required=True, help="infer output directories")
    p.add_argument("--names", nargs="+", help="run names (default: directory names)")
    p.add_argument("--out", required=True)
    p.add_argument("--fsc-dir", help="write aligned FSC curves here")

    p = add("report", cmd_report, "SVG figures")
    p.add_argument("--out", required=True)
    p.add_argument("--history")
    p.add_argument("--latents")
    p.add_argument("--fsc-dir")
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _load_cfg(args)
        args.fn(args, cfg)
    except ConfigError as e:
        return _fail(e, 2)
    except (CryomorphError, OSError, KeyError, ValueError) as e:
        return _fail(e, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
