"""Command-line interface: ``shapeapp <command> --help`` lists each command's flags."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from shapeapp import formats, inference, report
from shapeapp.core import VARIANTS, HyperParams, ImageDataset, validate_hyper, variant_hyper
from shapeapp.distrib import master_train, serve_worker
from shapeapp.trainer import train

log = logging.getLogger("shapeapp")


class UsageError(Exception):
    """Flag values that parse but make no sense together (exit code 2)."""


# -- flag parsing -------------------------------------------------------------

def _floats(n):
    def parse(text):
        try:
            vals = tuple(float(x) for x in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}") from None
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {len(vals)}")
        return vals
    return parse


def _endpoint(text):
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _endpoints(text):
    return [_endpoint(t) for t in text.split(",") if t]


def _add_hyper_flags(p, variant=True):
    d = HyperParams()
    p.add_argument("-K", type=int, default=4, help="number of latent variables (default 4)")
    if variant:
        p.add_argument("--variant", choices=VARIANTS, default="shared",
                       help="latent layout: shared (default), split, shape-only, appearance-only")
    p.add_argument("--model-kind", choices=("gaussian", "bernoulli", "categorical"),
                   help="noise model (default: from the dataset kind)")
    p.add_argument("--iters", type=int, default=d.em_iters, help=f"EM iterations (default {d.em_iters})")
    p.add_argument("--lambda", dest="lam", type=_floats(2), default=(d.lambda1, d.lambda2),
                   help="lambda1,lambda2 regularisation mix (default %s)" % ",".join(map(str, (d.lambda1, d.lambda2))))
    p.add_argument("--omega-a", type=_floats(3), default=d.omega_a, help="appearance operator, 3 values")
    p.add_argument("--omega-v", type=_floats(5), default=d.omega_v, help="shape operator, 5 values")
    p.add_argument("--omega-mu", type=_floats(3), default=d.omega_mu,
                   help="mean operator, 3 values, absolute (not scaled by N)")
    p.add_argument("--nu0", type=float, help="Wishart degrees of freedom (default K)")
    p.add_argument("--shoot-steps", type=int, default=d.shoot_steps, help="Euler steps per shoot (default 8)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")


def _hyper(args, noise, variant=None) -> HyperParams:
    base = HyperParams(
        omega_v=args.omega_v, omega_a=args.omega_a, omega_mu=args.omega_mu,
        lambda1=args.lam[0], lambda2=args.lam[1], shoot_steps=args.shoot_steps,
        em_iters=args.iters, noise=args.model_kind or noise,
    )
    if args.nu0 is not None:
        base = base.replace(nu0=args.nu0)
    hyper = variant_hyper(base, variant or getattr(args, "variant", "shared"), args.K)
    if args.nu0 is not None:
        hyper = hyper.replace(nu0=args.nu0, Lambda0=None)
    validate_hyper(hyper)
    return hyper


def _load_data(path) -> ImageDataset:
    return formats.load_dataset(path)


def _write_log(path, report_):
    Path(path).write_text(report_.jsonl())


# -- commands -----------------------------------------------------------------

def cmd_train(args):
    ds = _load_data(args.data)
    hyper = _hyper(args, ds.noise_kind)
    model, _, rep = train(ds, hyper, seed=args.seed, threads=args.threads)
    formats.save_model(args.out, model)
    _write_log(args.log or str(args.out) + ".jsonl", rep)
    if args.grid_out:
        report.save_grid(args.grid_out, report.mode_images(model, args.sd), model.K, 3)
    print(f"trained {hyper.K} latents on {ds.n_images} images; objective {rep.objective[-1] if rep.objective else rep.initial_objective:.6f}")


def cmd_fit(args):
    model = formats.load_model(args.model)
    ds = _load_data(args.data)
    posts = [inference.fit(model, ds.image(n), ds.mask[n]) for n in range(ds.n_images)]
    Z = np.stack([p.z_hat for p in posts], axis=1) if posts else np.zeros((model.K, 0))
    Hd = np.stack([np.diag(p.hessian) for p in posts], axis=1) if posts else np.zeros((model.K, 0))
    Path(args.out).write_bytes(formats.features_to_bytes(Z, Hd))
    print(f"fitted {ds.n_images} images")


def cmd_classify(args):
    models = [formats.load_model(p) for p in args.models.split(",") if p]
    priors = None
    if args.priors:
        priors = np.array([float(x) for x in args.priors.split(",")])
        if priors.size != len(models):
            raise UsageError("--priors needs one value per model")
    ds = _load_data(args.data)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image"] + [f"p{k}" for k in range(len(models))] + ["predicted"])
        for n in range(ds.n_images):
            p = inference.classify(ds.image(n), models, priors, ds.mask[n])
            w.writerow([n] + [repr(float(x)) for x in p] + [int(np.argmax(p))])
    print(f"classified {ds.n_images} images")


def cmd_sample(args):
    model = formats.load_model(args.model)
    rng = np.random.default_rng(args.seed)
    seeds = rng.integers(0, 2 ** 63, size=args.rows * args.cols)
    images = [inference.sample(model, int(s)) for s in seeds]
    written = report.save_grid(args.out, images, args.rows, args.cols, png=not args.no_png)
    if args.modes_out:
        written += report.save_grid(args.modes_out, report.mode_images(model, args.sd), model.K, 3,
                                    png=not args.no_png)
    print("wrote " + ", ".join(map(str, written)))


def cmd_impute(args):
    model = formats.load_model(args.model)
    ds = _load_data(args.data)
    filled = np.stack([inference.impute(model, ds.image(n), ds.mask[n]) for n in range(ds.n_images)])
    out = ImageDataset(ds.grid, filled, ds.kind)
    formats.save_dataset(args.out, out)
    if args.grid_out:
        n = min(ds.n_images, args.cols)
        pairs = [ds.image(i) for i in range(n)] + [filled[i] for i in range(n)]
        report.save_grid(args.grid_out, pairs, 2, n)
    print(f"imputed {int((~ds.mask).sum())} voxels in {ds.n_images} images")


def cmd_xval(args):
    ds = _load_data(args.data)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    base = _hyper(args, ds.noise_kind, variant="shared")
    results = inference.cross_validate(ds, variants, base, args.K, args.fraction, args.seed, args.threads)
    rows = [(r.variant, r.heldout_loglik, r.mse, r.meanfill_mse) for r in results]
    header = ("variant", "heldout_loglik", "mse", "meanfill_mse")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows([(v, repr(ll), repr(m), repr(b)) for v, ll, m, b in rows])
    print("%-12s %16s %12s %12s" % header)
    for v, ll, m, b in rows:
        print("%-12s %16.4f %12.6f %12.6f" % (v, ll, m, b))
    if args.grid_out:
        for r in results:
            report.save_grid(f"{args.grid_out}-{r.variant}", report.mode_images(r.model, 2.0), r.model.K, 3)


def cmd_serve_worker(args):
    ds = _load_data(args.data)
    log.info("worker serving %d images on %s:%d", ds.n_images, args.host, args.port)
    serve_worker(ds, (args.host, args.port), threads=args.threads, connections=args.connections)


def cmd_train_distributed(args):
    if not args.workers:
        raise UsageError("--workers needs at least one host:port")
    hyper = _hyper(args, args.model_kind or "gaussian")
    model, rep = master_train(args.workers, hyper, seed=args.seed)
    formats.save_model(args.out, model)
    _write_log(args.log or str(args.out) + ".jsonl", rep)
    print(f"trained {hyper.K} latents over {len(args.workers)} workers")


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapeapp", description="Joint shape and appearance models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model to a dataset")
    p.add_argument("--data", required=True, help="input dataset (SAMD)")
    p.add_argument("--out", required=True, help="output model (SAMM)")
    p.add_argument("--log", help="JSON-lines iteration log (default <out>.jsonl)")
    p.add_argument("--grid-out", help="also write a modes grid (PGM/PPM + PNG) at this path")
    p.add_argument("--sd", type=float, default=2.0, help="standard deviations for the modes grid")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    _add_hyper_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fit", help="fit latent variables of new images")
    p.add_argument("--model", required=True, help="model (SAMM)")
    p.add_argument("--data", required=True, help="images (SAMD)")
    p.add_argument("--out", required=True, help="latent features (SAMD container, kind 'features')")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("classify", help="posterior class probabilities by model evidence")
    p.add_argument("--models", required=True, help="comma-separated SAMM files, one per class")
    p.add_argument("--data", required=True, help="images (SAMD)")
    p.add_argument("--priors", help="comma-separated prior probabilities (default uniform)")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("sample", help="draw random images from a model")
    p.add_argument("--model", required=True, help="model (SAMM)")
    p.add_argument("--rows", type=int, default=4, help="grid rows (default 4)")
    p.add_argument("--cols", type=int, default=4, help="grid columns (default 4)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--out", required=True, help="grid path; .pgm/.ppm and .png are written")
    p.add_argument("--modes-out", help="also write a modes grid here")
    p.add_argument("--sd", type=float, default=2.0, help="standard deviations for the modes grid")
    p.add_argument("--no-png", action="store_true", help="skip the PNG copies")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("impute", help="fill missing voxels")
    p.add_argument("--model", required=True, help="model (SAMM)")
    p.add_argument("--data", required=True, help="images with NaN at missing voxels (SAMD)")
    p.add_argument("--out", required=True, help="filled images (SAMD)")
    p.add_argument("--grid-out", help="also write an input/filled comparison grid")
    p.add_argument("--cols", type=int, default=8, help="images in the comparison grid (default 8)")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("xval", help="compare model variants on hidden rectangles")
    p.add_argument("--data", required=True, help="complete images (SAMD)")
    p.add_argument("--variants", default=",".join(VARIANTS),
                   help="comma-separated subset of shape,appearance,shared,split")
    p.add_argument("--fraction", type=float, default=0.25, help="area hidden per image (default 0.25)")
    p.add_argument("--out", help="summary CSV")
    p.add_argument("--grid-out", help="prefix for per-variant modes grids")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    _add_hyper_flags(p, variant=False)
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("serve-worker", help="hold an image shard for distributed training")
    p.add_argument("--data", required=True, help="image shard (SAMD)")
    p.add_argument("--host", default="127.0.0.1", help="listen address (default 127.0.0.1)")
    p.add_argument("--port", type=int, required=True, help="listen port")
    p.add_argument("--connections", type=int, default=1, help="master sessions to serve before exiting")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.set_defaults(func=cmd_serve_worker)

    p = sub.add_parser("train-distributed", help="train against running workers")
    p.add_argument("--workers", required=True, type=_endpoints, help="comma-separated host:port list")
    p.add_argument("--out", required=True, help="output model (SAMM)")
    p.add_argument("--log", help="JSON-lines iteration log (default <out>.jsonl)")
    _add_hyper_flags(p)
    p.set_defaults(func=cmd_train_distributed)
    return parser


def _configure_logging():
    level = os.environ.get("SAM_LOG", "").lower()
    levels = {"debug": logging.DEBUG, "info": logging.INFO}
    if level in levels:
        logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
