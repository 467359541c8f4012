"""Command-line entry point: ``svpsf {gen,fit,render,depth,eval,ablate,mosaic}``.

Every command takes an optional JSON ``--config``; command-line flags
override its keys and unknown keys are rejected. Exit codes: 0 success,
2 input or configuration error, 3 numerical failure, 4 protocol violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .core import (
    CameraConfig,
    DepthMap,
    DivergenceError,
    ParameterError,
    ProtocolError,
    SvpsfError,
    crop_center,
    to_polar,
)
from .dfd import DepthFromDefocus, FocalStack, save_depth
from .estimator import GaussianPsfBaseline, PsfGridEstimator
from .evalkit import HoldoutSpec, depth_mae, eval_psf_grid, render_psf_mosaic, sha256_file
from .imageio import read_pfm, read_pgm, write_pfm, write_pgm
from .optics import (
    AberrationModel,
    Manifest,
    OracleSource,
    gen_one_plane_scene,
    gen_pair_dataset,
    gen_two_plane_scene,
    make_texture,
    render_blur,
)
from .psf_model import PsfGrid

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_PROTOCOL = 0, 2, 3, 4

GEN_KEYS = {
    "kind": "pairs",
    "camera": {},
    "aberration": {},
    "n_textures": 2,
    "depths": None,
    "n_depths": 20,
    "depth": 0.7,
    "depth_fg": None,
    "depth_bg": None,
    "radius": 12,
    "seed": 0,
}
FIT_KEYS = {
    "mode": "ih-polar",
    "focus_index": 0,
    "patch_size": 64,
    "batch_size": 16,
    "steps": 20000,
    "lr": 0.05,
    "alpha": 1.0,
    "beta": 10.0,
    "charbonnier_eps": 1e-6,
    "n_ih_bins": 9,
    "n_depth_bins": 12,
    "n_xy_bins": 9,
    "radius": 12,
    "center_sampling": "uniform",
    "seed": 0,
}
DFD_KEYS = {
    "candidates": None,
    "n_candidates": 33,
    "patch_size": 32,
    "stride": 16,
    "mode": "ih-variant",
    "margin_tau": 0.98,
    "charbonnier_eps": 1e-6,
}
HOLDOUT_KEYS = {"depths": None, "n_side": 8}


class ConfigError(SvpsfError, ValueError):
    pass


def load_config(path, defaults, overrides=None):
    """Merge ``defaults`` < JSON file < non-None ``overrides``; reject unknown keys."""
    cfg = dict(defaults)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except ValueError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        unknown = sorted(set(data) - set(defaults))
        if unknown:
            raise ConfigError(f"{path}: unknown config keys: {', '.join(unknown)}")
        cfg.update(data)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    return cfg


def _camera(d):
    try:
        return CameraConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(f"camera: {exc}") from exc


def _aberration(d):
    return AberrationModel.from_dict(d) if d else AberrationModel()


def _fit_params(cfg):
    params = {k: v for k, v in cfg.items() if k != "seed"}
    params["random_state"] = cfg["seed"]
    return params


def _existing(path, what):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


# -- commands -----------------------------------------------------------------


def cmd_gen(args):
    cfg = load_config(args.config, GEN_KEYS, {"seed": args.seed})
    camera = _camera(cfg["camera"])
    ab = _aberration(cfg["aberration"])
    lo, hi = camera.depth_range
    out = Path(args.out)
    rng = np.random.default_rng(cfg["seed"])
    K = cfg["radius"]
    shape = (camera.image_height + 2 * K, camera.image_width + 2 * K)
    if cfg["kind"] == "pairs":
        depths = cfg["depths"] if cfg["depths"] is not None else list(np.linspace(lo, hi, cfg["n_depths"]))
        for i, d in enumerate(depths):
            if not lo <= d <= hi:
                raise ConfigError(f"depths[{i}] = {d} lies outside camera.depth_range [{lo}, {hi}]")
        textures = [make_texture(shape, rng) for _ in range(cfg["n_textures"])]
        manifest = gen_pair_dataset(camera, ab, textures, [float(d) for d in depths], out, cfg["seed"], K)
        for n in manifest.focus_indices():
            count = sum(1 for r in manifest.records if r.role == "blurred" and r.focus_index == n)
            print(f"focus {n}: {count} pairs")
        print(f"wrote {out / 'manifest.json'} ({len(manifest.records)} images, seed {cfg['seed']})")
    elif cfg["kind"] == "one-plane":
        if not lo <= cfg["depth"] <= hi:
            raise ConfigError(f"depth = {cfg['depth']} lies outside camera.depth_range [{lo}, {hi}]")
        stack, gt = gen_one_plane_scene(camera, ab, make_texture(shape, rng), cfg["depth"], K)
        path = FocalStack(stack, camera).save(out, gt)
        print(f"wrote {path} ({len(stack)} images, plane at {cfg['depth']} m, seed {cfg['seed']})")
    elif cfg["kind"] == "two-plane":
        for key in ("depth_fg", "depth_bg"):
            if cfg[key] is None or not lo <= cfg[key] <= hi:
                raise ConfigError(f"{key} = {cfg[key]} must lie in camera.depth_range [{lo}, {hi}]")
        mask = np.zeros(shape)
        h, w = shape
        mask[h // 4 : 3 * h // 4, w // 4 : 3 * w // 4] = 1.0
        stack, gt = gen_two_plane_scene(
            camera, ab, make_texture(shape, rng), make_texture(shape, rng), cfg["depth_fg"], cfg["depth_bg"], mask, cfg["seed"], K
        )
        path = FocalStack(stack, camera).save(out, gt)
        print(f"wrote {path} ({len(stack)} images, seed {cfg['seed']})")
    else:
        raise ConfigError(f"kind must be pairs, one-plane or two-plane, got {cfg['kind']!r}")
    return EXIT_OK


def cmd_fit(args):
    cfg = load_config(
        args.config,
        FIT_KEYS,
        {"mode": args.mode, "focus_index": args.focus_index, "steps": args.steps, "seed": args.seed},
    )
    if cfg["mode"] == "xy-cartesian":
        raise ConfigError("xy-cartesian fits have no file format; compare them with `svpsf ablate`")
    manifest = Manifest.load(_existing(args.manifest, "manifest"))
    est = PsfGridEstimator(**_fit_params(cfg)).fit(manifest)
    out = Path(args.out)
    est.grid_.save(out)
    log_path = out.with_name(out.name + ".log")
    log_path.write_text(est.training_log())
    final = est.smoothed_loss()[-1] if est.n_steps_ else float("nan")
    print(f"wrote {out} ({cfg['mode']}, focus {cfg['focus_index']}, {est.n_steps_} steps, seed {cfg['seed']})")
    print(f"final smoothed training loss {final:.6g}")
    return EXIT_OK


def _grid_provider(source, depth, width, height):
    def provider(xs, ys):
        ih, th = to_polar(np.asarray(xs, float), np.asarray(ys, float), width, height)
        return np.stack([source.kernel_at(a, b, depth) for a, b in zip(ih, th)])

    return provider


def cmd_render(args):
    texture = read_pfm(_existing(args.texture, "texture"))
    grids = [PsfGrid.load(_existing(g, f"grid for focus index {n}")) for n, g in enumerate(args.grids)]
    K = grids[0].radius
    h, w = texture.shape[0] - 2 * K, texture.shape[1] - 2 * K
    if h < 1 or w < 1:
        raise ConfigError(f"texture {texture.shape} is smaller than the 2K={2 * K} margin")
    images = []
    for g in grids:
        provider = _grid_provider(g, args.depth, w, h)
        images.append(np.clip(render_blur(texture, provider, K), 0.0, 1.0))
    gt = DepthMap.constant(args.depth, w, h, (args.depth, args.depth))
    path = FocalStack(images).save(args.out, gt)
    write_pfm(Path(args.out) / "sharp.pfm", crop_center(texture, K))
    print(f"wrote {path} ({len(images)} images at {args.depth} m)")
    return EXIT_OK


def _load_stack(path):
    path = Path(_existing(path, "stack file"))
    stack = FocalStack.load(path)
    meta = json.loads(path.read_text())
    gt = None
    if "depth_gt" in meta:
        d = read_pfm(path.parent / meta["depth_gt"])
        gt = DepthMap(d, np.ones(d.shape, bool), (float(d.min()), float(d.max())))
    return stack, gt


def cmd_depth(args):
    cfg = load_config(args.config, DFD_KEYS, {"mode": args.mode})
    stack, _ = _load_stack(args.stack)
    grids = []
    for n, g in enumerate(args.grids):
        grids.append(PsfGrid.load(_existing(g, f"grid file for focus index {n}")))
    if len(grids) != len(stack):
        raise ConfigError(f"stack has {len(stack)} images but {len(grids)} grid files were given")
    for n, g in enumerate(grids):
        if g.focus_index != n:
            raise ConfigError(f"grid {args.grids[n]} was fitted for focus index {g.focus_index}, expected {n}")
    dm = DepthFromDefocus(**cfg).fit(grids).predict(stack)
    path = save_depth(dm, args.out)
    print(f"wrote {path} (valid fraction {dm.valid.mean():.3f})")
    return EXIT_OK


def cmd_eval(args):
    if args.depth_est is not None:
        est = read_pfm(_existing(args.depth_est, "depth estimate"))
        _, gt = _load_stack(args.stack) if args.stack else (None, None)
        if gt is None:
            raise ConfigError("depth evaluation needs --stack with a ground-truth depth map")
        mask_path = Path(args.depth_est).with_name(Path(args.depth_est).stem + "_mask.pgm")
        valid = read_pgm(mask_path) > 0.5 if mask_path.exists() else est > 0
        emap = DepthMap(est, valid, (float(est.min()), float(est.max())))
        mae, frac = depth_mae(emap, gt)
        report = {"depth_mae": mae, "valid_fraction": frac, "provenance": {"estimate": sha256_file(args.depth_est)}}
        text = json.dumps(report, indent=1, sort_keys=True) + "\n"
        if args.out:
            Path(args.out).write_text(text)
        print(text, end="")
        return EXIT_OK
    manifest_path = _existing(args.manifest, "manifest")
    manifest = Manifest.load(manifest_path)
    if manifest.camera is None:
        raise ConfigError(f"{manifest_path} has no camera block to build the oracle from")
    hold = load_config(args.holdout, HOLDOUT_KEYS)
    if not hold["depths"]:
        raise ConfigError("holdout config needs a non-empty 'depths' list")
    grid_path = _existing(args.grid, "grid file")
    grid = PsfGrid.load(grid_path)
    cam = manifest.camera
    spec = HoldoutSpec(tuple(hold["depths"]), cam.image_width, cam.image_height, hold["n_side"])
    oracle = OracleSource(cam, manifest.aberration or AberrationModel(), grid.focus_index, grid.radius)
    prov = {"grid_sha256": sha256_file(grid_path), "manifest_sha256": sha256_file(manifest_path)}
    report = eval_psf_grid(grid, oracle, spec, manifest.depths(), {"grid": str(grid_path)}, prov)
    if args.out:
        report.save(args.out)
    print(f"aggregate psf mae {report.aggregate:.6g} over {len(report.records)} samples")
    return EXIT_OK


def cmd_ablate(args):
    cfg = load_config(args.config, FIT_KEYS, {"focus_index": args.focus_index, "steps": args.steps, "seed": args.seed})
    manifest_path = _existing(args.manifest, "manifest")
    manifest = Manifest.load(manifest_path)
    hold = load_config(args.holdout, HOLDOUT_KEYS)
    if not hold["depths"]:
        raise ConfigError("holdout config needs a non-empty 'depths' list")
    cam = manifest.camera
    spec = HoldoutSpec(tuple(hold["depths"]), cam.image_width, cam.image_height, hold["n_side"])
    oracle = OracleSource(cam, manifest.aberration or AberrationModel(), cfg["focus_index"], cfg["radius"])
    rows = []
    for mode in ("invariant", "xy-cartesian", "ih-polar"):
        params = _fit_params(dict(cfg, mode=mode))
        est = PsfGridEstimator(**params).fit(manifest)
        rep = eval_psf_grid(est.grid_, oracle, spec, manifest.depths())
        rows.append({"mode": mode, "psf_mae": rep.aggregate, "grid_sha256": est.grid_.digest()})
    if args.baseline:
        base = GaussianPsfBaseline(focus_index=cfg["focus_index"], radius=cfg["radius"], random_state=cfg["seed"]).fit(manifest)
        rows.append({"mode": "gaussian", "psf_mae": eval_psf_grid(base, oracle, spec, manifest.depths()).aggregate})
    result = {"manifest_sha256": sha256_file(manifest_path), "seed": cfg["seed"], "rows": rows}
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    print(f"{'mode':<14} psf_mae")
    for r in rows:
        print(f"{r['mode']:<14} {r['psf_mae']:.6g}")
    return EXIT_OK


def cmd_mosaic(args):
    grid = PsfGrid.load(_existing(args.grid, "grid file"))
    depths = args.depths if args.depths else list(np.linspace(*grid.depth_range, 4))
    img = render_psf_mosaic(grid, args.ih, depths, args.theta)
    write_pgm(args.out, img)
    print(f"wrote {args.out} ({img.shape[1]}x{img.shape[0]})")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="svpsf", description="Spatially variant PSF estimation and depth from defocus.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render a synthetic dataset or focal stack")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fit", help="fit a PSF grid for one focus distance")
    p.add_argument("manifest")
    p.add_argument("--config")
    p.add_argument("--focus-index", type=int)
    p.add_argument("--mode", choices=("ih-polar", "invariant"))
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("render", help="render a focal stack of a plane through fitted grids")
    p.add_argument("--texture", required=True, help="sharp PFM, 2K larger than the output on each axis")
    p.add_argument("--grids", nargs="+", required=True)
    p.add_argument("--depth", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("depth", help="estimate a depth map from a focal stack")
    p.add_argument("stack")
    p.add_argument("--grids", nargs="+", required=True)
    p.add_argument("--config")
    p.add_argument("--mode", choices=("ih-variant", "invariant"))
    p.add_argument("--out", required=True, help="output prefix; writes .pfm, _vis.pgm and _mask.pgm")
    p.set_defaults(func=cmd_depth)

    p = sub.add_parser("eval", help="held-out PSF error of a grid, or depth error of a depth map")
    p.add_argument("--grid")
    p.add_argument("--manifest")
    p.add_argument("--holdout")
    p.add_argument("--depth-est")
    p.add_argument("--stack")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare invariant, xy-cartesian and ih-polar fits")
    p.add_argument("manifest")
    p.add_argument("--holdout", required=True)
    p.add_argument("--config")
    p.add_argument("--focus-index", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--baseline", action="store_true", help="also fit the Gaussian baseline")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("mosaic", help="tile grid kernels into a PGM")
    p.add_argument("grid")
    p.add_argument("--ih", type=float, nargs="+", default=[0.0, 0.5, 1.0])
    p.add_argument("--depths", type=float, nargs="+")
    p.add_argument("--theta", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mosaic)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except (SvpsfError, ParameterError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
