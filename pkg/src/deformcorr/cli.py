"""Command-line front end: ``deformcorr {gen,train,eval,fit,edit,texture,template}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
The default seed comes from ``DEFORMCORR_SEED`` when ``--seed`` is not given.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SEED_ENV = "DEFORMCORR_SEED"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_seed():
    v = os.environ.get(SEED_ENV)
    if v is None:
        return 0
    try:
        return int(v)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {v!r}") from None


def _parse_pairs(items, what):
    out = {}
    for it in items or []:
        for part in it.split(","):
            if not part:
                continue
            if "=" not in part:
                raise UsageError(f"{what} override {part!r} is not key=value")
            k, v = part.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _write_config(out_dir: Path, cfg: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str))


def build_parser():
    p = _Parser(prog="deformcorr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate an articulated toy dataset")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--poses", type=int, default=20)
    g.add_argument("--segments", default=None, help="length:radius,... (default three segments)")
    g.add_argument("--max-angle-deg", type=float, default=100.0)
    g.add_argument("--n-surface", type=int, default=5000)
    g.add_argument("--n-interior", type=int, default=2000)
    g.add_argument("--n-free", type=int, default=3000)
    g.add_argument("--noise-sigma", type=float, default=None)
    g.add_argument("--seed", type=int, default=None)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--checkpoint", required=True, type=Path)
    t.add_argument("--out", type=Path, default=None, help="directory for the log and resolved config")
    t.add_argument("--arch", default="desk", choices=["desk", "full"])
    t.add_argument("--arch-set", action="append", default=[], help="architecture overrides key=value")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--config", action="append", default=[], help="train config overrides key=value")
    t.add_argument("--weights", action="append", default=[], help="loss weight overrides key=value")
    t.add_argument("--resume", action="store_true")
    t.add_argument("--checkpoint-every", type=int, default=500)
    t.add_argument("--seed", type=int, default=None)

    for name, hlp in [("eval", "reconstruction and correspondence metrics"), ("template", "export the template mesh")]:
        e = sub.add_parser(name, help=hlp)
        e.add_argument("--checkpoint", required=True, type=Path)
        e.add_argument("--out", required=True, type=Path)
        e.add_argument("--resolution", type=int, default=64)
        if name == "eval":
            e.add_argument("--data", required=True, type=Path)
            e.add_argument("--poses", default=None, help="comma separated pose ids (default: first 10)")
            e.add_argument("--corr-points", type=int, default=500)
            e.add_argument("--seed", type=int, default=None)

    f = sub.add_parser("fit", help="fit a latent code to an observation of a dataset pose")
    f.add_argument("--checkpoint", required=True, type=Path)
    f.add_argument("--data", required=True, type=Path)
    f.add_argument("--pose", type=int, required=True)
    f.add_argument("--out", required=True, type=Path)
    f.add_argument("--partial", action="store_true", help="keep only points seen from one virtual view")
    f.add_argument("--view", default="0,0,-1", help="view direction for --partial")
    f.add_argument("--rotate-deg", type=float, default=0.0, help="rotate the observation about --rotate-axis")
    f.add_argument("--rotate-axis", default="0,0,1")
    f.add_argument("--steps", type=int, default=800)
    f.add_argument("--resolution", type=int, default=64)
    f.add_argument("--seed", type=int, default=None)

    d = sub.add_parser("edit", help="edit the template by moving surface points")
    d.add_argument("--checkpoint", required=True, type=Path)
    d.add_argument("--out", required=True, type=Path)
    d.add_argument("--constraints", required=True, type=Path, help="JSON list of [[x1,y1,z1],[x2,y2,z2]] pairs")
    d.add_argument("--steps", type=int, default=500)
    d.add_argument("--edit-weights", action="append", default=[], help="w1..w4 overrides key=value")
    d.add_argument("--resolution", type=int, default=64)
    d.add_argument("--seed", type=int, default=None)

    x = sub.add_parser("texture", help="transfer segment colours from one pose to another")
    x.add_argument("--checkpoint", required=True, type=Path)
    x.add_argument("--data", required=True, type=Path)
    x.add_argument("--src", type=int, required=True)
    x.add_argument("--dst", type=int, required=True)
    x.add_argument("--out", required=True, type=Path)
    return p


def _vec(s, what):
    try:
        v = np.array([float(x) for x in s.split(",")])
    except ValueError:
        raise UsageError(f"{what} must be three comma separated numbers") from None
    if v.shape != (3,):
        raise UsageError(f"{what} must be three comma separated numbers")
    return v


def _load_data(path):
    from . import datagen

    try:
        return datagen.load_dataset(path)
    except FileNotFoundError as e:
        raise DataError(f"dataset not found: {e}") from None
    except (datagen.DatasetFormatError, KeyError, ValueError) as e:
        raise DataError(f"invalid dataset at {path}: {e}") from None


def _load_ckpt(path):
    from . import training

    if not Path(path).exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        return training.load_checkpoint(path)
    except training.CheckpointFormatError as e:
        raise DataError(str(e)) from None


def cmd_gen(a):
    from . import datagen

    seed = _default_seed() if a.seed is None else a.seed
    segs = None
    if a.segments:
        try:
            segs = [tuple(float(x) for x in s.split(":")) for s in a.segments.split(",")]
        except ValueError:
            raise UsageError("--segments must look like length:radius,length:radius") from None
    if a.poses < 1:
        raise UsageError("--poses must be at least 1")
    try:
        spec = datagen.default_spec(n_poses=a.poses, seed=seed, max_angle_deg=a.max_angle_deg, segments=segs)
        sets = datagen.generate_dataset(spec, (a.n_surface, a.n_interior, a.n_free), a.noise_sigma, seed)
    except (ValueError, datagen.GeometryTooThinError) as e:
        raise UsageError(f"invalid spec: {e}") from None
    try:
        datagen.save_dataset(a.out, spec, sets, seed, a.noise_sigma)
    except OSError as e:
        raise DataError(f"cannot write dataset: {e}") from None
    allpts = np.concatenate([s.surface_points for s in sets])
    print(f"poses={len(sets)} surface={a.n_surface} interior={a.n_interior} free={a.n_free} "
          f"bounds=[{allpts.min():.4f}, {allpts.max():.4f}] noise_sigma={a.noise_sigma}")
    _write_config(Path(a.out), {"command": "gen", **{k: v for k, v in vars(a).items()}, "seed": seed})
    return EXIT_OK


def cmd_train(a):
    from . import losses, nets, training

    seed = _default_seed() if a.seed is None else a.seed
    spec, sets, index = _load_data(a.data)
    out_dir = a.out or a.checkpoint.parent
    if a.resume:
        state = _load_ckpt(a.checkpoint)
        if a.steps is not None:
            state.config = state.config.with_overrides(steps=a.steps)
    else:
        arch = nets.FULL_ARCH if a.arch == "full" else training.DESK_ARCH
        try:
            arch_kw = _parse_pairs(a.arch_set, "architecture")
            if arch_kw:
                cur = arch.to_dict()
                unknown = set(arch_kw) - set(cur)
                if unknown:
                    raise UsageError(f"unknown architecture key(s): {sorted(unknown)}")
                arch = nets.ArchConfig.from_dict({**cur, **{k: type(cur[k])(v) if not isinstance(cur[k], bool)
                                                             else v.lower() in ("1", "true", "yes") for k, v in arch_kw.items()}})
            cfg_kw = _parse_pairs(a.config, "config")
            if a.steps is not None:
                cfg_kw["steps"] = a.steps
            cfg_kw["seed"] = seed
            base_cfg = training.TrainConfig() if a.arch == "full" else training.DESK_CONFIG
            if "warmup_steps" not in cfg_kw:
                # Short runs shrink the default warm-up to fit.
                cfg_kw["warmup_steps"] = min(base_cfg.warmup_steps, int(cfg_kw.get("steps", base_cfg.steps)))
            cfg = base_cfg.with_overrides(**cfg_kw)
            base_w = losses.LossWeights() if a.arch == "full" else training.DESK_WEIGHTS
            weights = base_w.with_overrides(**_parse_pairs(a.weights, "weight"))
        except KeyError as e:
            raise UsageError(str(e.args[0])) from None
        except ValueError as e:
            raise UsageError(str(e)) from None
        state = training.ModelState.create(arch, [s.pose_id for s in sets], cfg, weights)
    if len(sets) != state.model.n_shapes:
        raise DataError(f"dataset has {len(sets)} poses, checkpoint expects {state.model.n_shapes}")
    _write_config(out_dir, {
        "command": "train", "data": str(a.data), "checkpoint": str(a.checkpoint),
        "arch": state.model.arch.to_dict(), "config": state.config.to_dict(), "weights": state.weights.to_dict(),
        "resume": a.resume,
    })
    log = training.LossLog(out_dir / "train_log.csv", append=a.resume)
    t0 = time.time()
    try:
        res = training.train(state, sets, log=log, checkpoint_path=a.checkpoint, checkpoint_every=a.checkpoint_every)
    except training.NonFiniteLossError as e:
        print(f"error: {e}; partial checkpoint kept at {a.checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC
    final = res[-1].total if res else float("nan")
    print(f"steps={state.step} final_loss={final:.6g} seconds={time.time() - t0:.1f}")
    return EXIT_OK


def cmd_template(a):
    from . import geometry, training

    state = _load_ckpt(a.checkpoint)
    a.out.mkdir(parents=True, exist_ok=True)
    mesh = training.extract_template(state, a.resolution)
    geometry.save_mesh(mesh, a.out / "template.obj")
    print(f"template vertices={mesh.n_vertices} triangles={mesh.n_triangles} components={mesh.n_components()}")
    return EXIT_OK


def cmd_eval(a):
    from . import evalapps as E

    seed = _default_seed() if a.seed is None else a.seed
    state = _load_ckpt(a.checkpoint)
    spec, sets, _ = _load_data(a.data)
    model = state.model
    poses = list(range(min(10, len(sets)))) if a.poses is None else [int(x) for x in a.poses.split(",")]
    a.out.mkdir(parents=True, exist_ok=True)
    _write_config(a.out, {"command": "eval", **vars(a), "seed": seed, "poses": poses})
    rows, corr_rows = E.evaluate_model(model, spec, sets, poses, a.resolution, a.corr_points, seed)
    E.write_metrics_csv(a.out / "recon_metrics.csv", rows)
    E.write_metrics_csv(a.out / "corr_metrics.csv", corr_rows)
    mean = lambda key, rs: float(np.mean([r[key] for r in rs])) if rs else float("nan")
    print(f"cd_x1000={mean('cd_x1000', rows):.4f} iou={mean('iou', rows):.4f} corr={mean('corr', corr_rows):.4f}")
    return EXIT_OK


def cmd_fit(a):
    from . import datagen, evalapps as E, geometry

    seed = _default_seed() if a.seed is None else a.seed
    state = _load_ckpt(a.checkpoint)
    spec, sets, _ = _load_data(a.data)
    if not 0 <= a.pose < len(sets):
        raise DataError(f"pose {a.pose} not in dataset of {len(sets)} poses")
    s = sets[a.pose]
    obs = E.Observation(s.surface_points, s.surface_normals, s.free_points, s.free_sdf)
    if a.partial:
        mask = datagen.partial_view(s.surface_points, s.surface_normals, _vec(a.view, "--view"))
        obs = E.Observation(s.surface_points[mask], s.surface_normals[mask])
    if a.rotate_deg:
        from scipy.spatial.transform import Rotation

        axis = _vec(a.rotate_axis, "--rotate-axis")
        rot = Rotation.from_rotvec(np.deg2rad(a.rotate_deg) * axis / np.linalg.norm(axis)).as_matrix()
        obs = obs.transformed(rot)
    cfg = E.FitConfig(steps=a.steps, resolution=a.resolution, seed=seed)
    res = E.fit_latent(state.model, obs, cfg, state.weights)
    if res.aborted:
        print("error: fitting loss became non-finite", file=sys.stderr)
        return EXIT_NUMERIC
    a.out.mkdir(parents=True, exist_ok=True)
    _write_config(a.out, {"command": "fit", **vars(a), "seed": seed, "fit": cfg.to_dict()})
    if res.mesh is not None:
        geometry.save_mesh(res.mesh, a.out / "fitted.obj")
    gt = lambda p: datagen.analytic_sdf(spec, a.pose, p)[0]
    m = E.evaluate_reconstruction(E.reconstruction_field(state.model, res.alpha), gt, s.surface_points, a.resolution, seed=seed)
    E.write_metrics_csv(a.out / "fit_metrics.csv", [{"pose": a.pose, "partial": int(a.partial), "cd_x1000": m.cd, "iou": m.iou,
                                                     "rotation_deg": float(np.rad2deg(np.linalg.norm(res.axis_angle)))}])
    np.save(a.out / "alpha.npy", res.alpha)
    print(f"iou={m.iou:.4f} cd_x1000={m.cd:.4f} points={len(obs.surface_points)}")
    return EXIT_OK


def cmd_edit(a):
    from . import evalapps as E, geometry

    seed = _default_seed() if a.seed is None else a.seed
    state = _load_ckpt(a.checkpoint)
    try:
        pairs = np.asarray(json.loads(Path(a.constraints).read_text()), dtype=np.float64)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read constraints: {e}") from None
    if pairs.ndim != 3 or pairs.shape[1:] != (2, 3):
        raise DataError("constraints must be a list of [[x1,y1,z1],[x2,y2,z2]] pairs")
    try:
        cons = E.EditConstraintSet(pairs[:, 0], pairs[:, 1])
        cons.validate(state.model)
        kw = {k: float(v) for k, v in _parse_pairs(a.edit_weights, "edit weight").items()}
        w = E.EditWeights(**kw)
    except TypeError as e:
        raise UsageError(str(e)) from None
    except ValueError as e:
        raise DataError(str(e)) from None
    res = E.edit_shape(state.model, cons, w, steps=a.steps, resolution=a.resolution, seed=seed, validate=False)
    a.out.mkdir(parents=True, exist_ok=True)
    _write_config(a.out, {"command": "edit", **vars(a), "seed": seed, "edit_weights": vars(w) if hasattr(w, "__dict__") else str(w)})
    if res.mesh is not None:
        geometry.save_mesh(res.mesh, a.out / "edited.obj")
    E.write_metrics_csv(a.out / "edit_metrics.csv", [{"constraint": i, "residual": float(r), "surface_residual": float(s)}
                                                     for i, (r, s) in enumerate(zip(res.residuals, res.surface_residuals))])
    print(f"max_residual={res.residuals.max():.4f}")
    return EXIT_OK


SEGMENT_COLORS = np.array([[0.85, 0.2, 0.2], [0.2, 0.7, 0.3], [0.2, 0.35, 0.85], [0.9, 0.75, 0.1],
                           [0.6, 0.3, 0.7], [0.1, 0.7, 0.75]])


def cmd_texture(a):
    from . import evalapps as E, geometry

    state = _load_ckpt(a.checkpoint)
    _, sets, _ = _load_data(a.data)
    for k in (a.src, a.dst):
        if not 0 <= k < len(sets):
            raise DataError(f"pose {k} not in dataset of {len(sets)} poses")
    src, dst = sets[a.src], sets[a.dst]
    colors = SEGMENT_COLORS[src.surface_segments % len(SEGMENT_COLORS)]
    m = state.model
    out, idx = E.texture_transfer(m, m.latents[a.src], src.surface_points, colors, m.latents[a.dst], dst.surface_points)
    a.out.mkdir(parents=True, exist_ok=True)
    _write_config(a.out, {"command": "texture", **vars(a)})
    geometry.write_obj(a.out / "texture_dst.obj", dst.surface_points, colors=out)
    agree = float(np.mean(src.surface_segments[idx] == dst.surface_segments))
    E.write_metrics_csv(a.out / "texture_metrics.csv", [{"src": a.src, "dst": a.dst, "segment_agreement": agree}])
    print(f"segment_agreement={agree:.4f}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "fit": cmd_fit,
            "edit": cmd_edit, "texture": cmd_texture, "template": cmd_template}


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
        return COMMANDS[a.command](a)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
