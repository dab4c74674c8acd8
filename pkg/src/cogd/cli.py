"""Command-line experiment driver.

Every run writes its artifacts into ``<out>/<YYYYmmdd-HHMMSS>-seed<seed>/``
together with ``config.resolved``, the complete key=value configuration
(defaults filled in) that reproduces the run.
"""

import argparse
import datetime
import logging
import math
import os
import secrets
import sys
from dataclasses import dataclass, field

from . import bilinear, csc, imaging, prune
from .optim import CoGDConfig, OptimizerConfig

logger = logging.getLogger("cogd")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_NUMERIC = 5

EXIT_HELP = """exit codes:
  0  success
  1  unexpected failure
  2  usage error (unknown subcommand or flag)
  3  invalid configuration (unknown key, bad value)
  4  unreadable or missing input file
  5  numerical failure (divergence)"""

WORKLOADS = ("toy", "csc-learn", "csc-reconstruct", "csc-inpaint", "prune-toy", "metrics")

TOY_DEFAULT_LR = {"sgd": 0.001, "momentum": 0.005, "adam": 0.1}


class ConfigError(ValueError):
    pass


class InputError(OSError):
    pass


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_seed(text):
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise ValueError("seed must lie in [0, 2^64)")
    return v


def _opt(parser):
    return lambda text: None if text.strip().lower() in ("", "none") else parser(text)


# key -> (parser, default, help); None defaults are resolved per workload
SCHEMA = {
    "seed": (_parse_seed, None, "64-bit run seed (default: $COGD_SEED or random)"),
    "out": (str, "runs", "parent directory of run directories"),
    "optimizer": (str, "sgd", "sgd | momentum | adam"),
    "lr": (_opt(float), None, "learning rate (toy default depends on the optimizer)"),
    "momentum": (float, 0.9, "momentum coefficient"),
    "iters": (int, 200, "toy iterations"),
    "cogd": (_parse_bool, False, "enable cogradient coordination"),
    "beta_scale": (_opt(float), None, "coordination scale (toy/prune 0.001, csc 0.1)"),
    "alpha_x": (float, 1.0, "toy sparse-variable threshold"),
    "alpha_A": (float, 0.5, "toy dense-variable threshold"),
    "orientation": (str, "x1_sparse", "toy: x1_sparse | x2_sparse"),
    "start_x1": (float, 1.0, "toy start, first coordinate"),
    "start_x2": (float, 1.5, "toy start, second coordinate"),
    "K": (int, 16, "number of filters"),
    "kernel_size": (int, 11, "filter size"),
    "lambda": (float, 0.05, "sparsity weight of the codes"),
    "epochs": (_opt(int), None, "outer epochs (csc default 20, prune default 200)"),
    "rho": (float, 1.0, "ADMM penalty"),
    "admm_iters": (int, 10, "ADMM iterations per subproblem and epoch"),
    "infer_iters": (int, 100, "ADMM iterations when inferring codes for fixed filters"),
    "solver": (str, "cg", "cg | fft (fft only without masks)"),
    "eta": (float, 1.0, "code step size in the csc coordination weight"),
    "images": (str, "", "directory of PGM images (empty: synthetic images)"),
    "n_synthetic": (int, 3, "number of synthetic images when no directory is given"),
    "image_size": (int, 64, "size of synthetic images"),
    "normalize": (_parse_bool, True, "contrast-normalise images before coding"),
    "filters": (str, "", "filter bank file"),
    "keep": (float, 0.25, "fraction of observed pixels for inpainting"),
    "channels": (int, 8, "prune: output channels"),
    "lambda_m": (float, 0.05, "prune: l1 weight on the mask"),
    "prune_rate": (float, 0.5, "prune: fraction a of channels above the filter threshold"),
    "alpha_m": (float, 0.5, "prune: mask threshold"),
    "weight_decay": (float, 1e-3, "prune: l2 weight on the kernels"),
    "prune_tol": (float, 1e-3, "prune: masks below this magnitude count as pruned"),
    "ref": (str, "", "metrics: reference PGM"),
    "test": (str, "", "metrics: test PGM"),
}


@dataclass
class ExperimentConfig:
    """A workload plus its flat key=value parameters."""

    workload: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def seed(self):
        return self.values["seed"]

    @property
    def optimizer(self):
        return OptimizerConfig(self["optimizer"], self["lr"], momentum_coef=self["momentum"])

    @property
    def cogd(self):
        if not self["cogd"]:
            return None
        if self.workload == "toy":
            return CoGDConfig(beta_scale=self["beta_scale"], alpha_x=self["alpha_x"],
                              alpha_A=self["alpha_A"])
        if self.workload == "prune-toy":
            return prune.PruneConfig(lambda_m=self["lambda_m"], prune_rate=self["prune_rate"],
                                     alpha_m=self["alpha_m"], beta_scale=self["beta_scale"])
        return csc.csc_cogd_config(self["beta_scale"])

    def resolved_text(self):
        lines = [f"workload = {self.workload}"]
        for key in SCHEMA:
            v = self.values[key]
            lines.append(f"{key} = {'none' if v is None else _format(v)}")
        return "\n".join(lines) + "\n"


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config_text(text, source="<config>"):
    """Parse key=value lines; ``#`` starts a comment."""
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source} line {n}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "workload":
            if value not in WORKLOADS:
                raise ConfigError(f"{source} line {n}: unknown workload {value!r}")
            values[key] = value
            continue
        if key not in SCHEMA:
            raise ConfigError(f"{source} line {n}: unknown key {key!r}")
        try:
            values[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"{source} line {n}: invalid value {value!r} for {key}: {exc}") from None
    return values


def load_config(path, workload=None, overrides=None, env=None):
    """Build the resolved configuration of a run.

    Precedence, highest first: `overrides` (command-line flags), the file
    at `path`, ``COGD_SEED`` from `env` (seed only), built-in defaults.
    An absent seed is drawn at random and recorded.
    """
    env = os.environ if env is None else env
    file_values = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc.strerror}") from None
        file_values = parse_config_text(text, str(path))
    workload = workload or file_values.pop("workload", None)
    file_values.pop("workload", None)
    if workload not in WORKLOADS:
        raise ConfigError(f"unknown workload {workload!r}")
    values = {k: spec[1] for k, spec in SCHEMA.items()}
    values.update(file_values)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if values["seed"] is None:
        if env.get("COGD_SEED"):
            try:
                values["seed"] = _parse_seed(env["COGD_SEED"])
            except ValueError as exc:
                raise ConfigError(f"COGD_SEED: {exc}") from None
        else:
            values["seed"] = secrets.randbits(64)
    cfg = ExperimentConfig(workload, values)
    _fill_defaults(cfg)
    _validate(cfg)
    return cfg


def _fill_defaults(cfg):
    v = cfg.values
    if v["lr"] is None:
        v["lr"] = TOY_DEFAULT_LR.get(v["optimizer"], 0.001) if cfg.workload == "toy" else 0.01
    if v["beta_scale"] is None:
        v["beta_scale"] = 0.1 if cfg.workload.startswith("csc") else 0.001
    if v["epochs"] is None:
        v["epochs"] = 200 if cfg.workload == "prune-toy" else 20


def _validate(cfg):
    v = cfg.values
    try:
        cfg.optimizer
        if v["cogd"]:
            cfg.cogd
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if v["orientation"] not in bilinear.TOY_ORIENTATIONS:
        raise ConfigError(f"orientation must be one of {bilinear.TOY_ORIENTATIONS}")
    if v["solver"] not in ("cg", "fft"):
        raise ConfigError("solver must be 'cg' or 'fft'")
    if not 0 < v["keep"] <= 1:
        raise ConfigError("keep must lie in (0, 1]")
    for key in ("iters", "K", "kernel_size", "epochs", "admm_iters", "infer_iters",
                "channels", "n_synthetic", "image_size"):
        if v[key] < 1:
            raise ConfigError(f"{key} must be >= 1")
    if v["rho"] <= 0 or v["lambda"] < 0 or v["eta"] <= 0:
        raise ConfigError("rho and eta must be positive, lambda non-negative")
    needs = {"csc-reconstruct": ("filters",), "csc-inpaint": ("filters",),
             "metrics": ("ref", "test")}.get(cfg.workload, ())
    for key in needs:
        if not v[key]:
            raise ConfigError(f"{cfg.workload} requires --{key.replace('_', '-')}")
    for key in needs + ("images",):
        path = v[key]
        if path and not os.path.exists(path):
            raise InputError(f"{key} path does not exist: {path}")


def make_run_dir(cfg, now=None):
    now = now or datetime.datetime.now()
    base = os.path.join(cfg["out"], f"{now:%Y%m%d-%H%M%S}-seed{cfg.seed}")
    path, n = base, 1
    while os.path.exists(path):
        path = f"{base}-{n}"
        n += 1
    os.makedirs(path)
    return path


def _write(run_dir, name, text):
    with open(os.path.join(run_dir, name), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# workloads ------------------------------------------------------------------

def run_toy(cfg, run_dir):
    start = (cfg["start_x1"], cfg["start_x2"])
    kw = dict(start=start, iters=cfg["iters"], orientation=cfg["orientation"])
    base = bilinear.run_toy(cfg.optimizer, None, **kw)
    _write(run_dir, "trace_baseline.csv", base.to_csv())
    print(f"baseline path length {base.path_length!r}")
    if cfg.cogd is not None:
        co = bilinear.run_toy(cfg.optimizer, cfg.cogd, **kw)
        _write(run_dir, "trace_cogd.csv", co.to_csv())
        print(f"cogd path length {co.path_length!r} (detector fired {co.fired_count} times)")
    _write(run_dir, "contour.csv", bilinear.contour_csv(bilinear.contour_grid()))


def load_images(cfg):
    """``(names, images)`` from the image directory or synthetic stand-ins."""
    if cfg["images"]:
        d = cfg["images"]
        names = sorted(f for f in os.listdir(d) if f.lower().endswith(".pgm"))
        if not names:
            raise InputError(f"no .pgm files in {d}")
        images = []
        for n in names:
            try:
                images.append(imaging.load_pgm(os.path.join(d, n)))
            except OSError as exc:
                raise InputError(f"cannot read {n}: {exc.strerror}") from None
        return [os.path.splitext(n)[0] for n in names], images
    s = cfg["image_size"]
    return ([f"synthetic{i}" for i in range(cfg["n_synthetic"])],
            [imaging.synthetic_image(s, s, i) for i in range(cfg["n_synthetic"])])


def _load_bank(cfg):
    try:
        return csc.FilterBank.load(cfg["filters"])
    except OSError as exc:
        raise InputError(f"cannot read filters: {exc.strerror}") from None
    except ValueError as exc:
        raise InputError(f"invalid filter bank {cfg['filters']}: {exc}") from None


def run_csc_learn(cfg, run_dir):
    names, images = load_images(cfg)
    data = [imaging.contrast_normalize(im) if cfg["normalize"] else im for im in images]
    res = csc.learn(data, K=cfg["K"], k=cfg["kernel_size"], lam=cfg["lambda"],
                    outer_epochs=cfg["epochs"], cogd=cfg.cogd, seed=cfg.seed, rho=cfg["rho"],
                    admm_iters=cfg["admm_iters"], eta=cfg["eta"], solver=cfg["solver"])
    res.bank.save(os.path.join(run_dir, "bank.bin"))
    _write(run_dir, "history.csv", csc.history_csv(res.history))
    print(f"final objective {res.history[-1].objective!r}")


def run_csc_reconstruct(cfg, run_dir, inpaint=False):
    bank = _load_bank(cfg)
    names, images = load_images(cfg)
    report = imaging.QualityReport()
    for n, (name, im) in enumerate(zip(names, images)):
        mask = None
        if inpaint:
            mask = imaging.make_subsample_mask(im.height, im.width, cfg["keep"], cfg.seed,
                                               label=f"mask-{n}").mask
            imaging.save_pgm(os.path.join(run_dir, f"mask_{name}.pgm"), mask)
        out = csc.code_image(im, bank, cfg["lambda"], mask, cfg["normalize"],
                             cfg["infer_iters"], cfg["rho"], solver=cfg["solver"])
        prefix = "inpainted" if inpaint else "recon"
        imaging.save_pgm(os.path.join(run_dir, f"{prefix}_{name}.pgm"), out)
        report.add(name, im, out)
    _write(run_dir, "quality.csv", report.to_csv())
    print(f"mean psnr {report.mean_psnr!r} dB, mean ssim {report.mean_ssim!r}")


def run_prune(cfg, run_dir):
    dataset, student, dead = prune.planted_task(channels=cfg["channels"], seed=cfg.seed)
    student.activation = "identity"
    monitor = prune.PruneConfig(lambda_m=cfg["lambda_m"], prune_rate=cfg["prune_rate"],
                                alpha_m=cfg["alpha_m"], beta_scale=cfg["beta_scale"])
    layer, trace = prune.train_toy_pruner(student, dataset, cfg["epochs"], cfg.optimizer,
                                          cfg.cogd, seed=cfg.seed, lambda_m=cfg["lambda_m"],
                                          weight_decay=cfg["weight_decay"], monitor=monitor)
    _write(run_dir, "trajectory.csv", trace.to_csv())
    _write(run_dir, "pruned.txt", prune.pruned_report(layer, cfg["prune_tol"]))
    pruned = prune.pruned_channels(layer, cfg["prune_tol"]).tolist()
    print(f"pruned channels {pruned}; planted dead {dead.tolist()}")


def run_metrics(cfg, run_dir):
    imgs = []
    for key in ("ref", "test"):
        try:
            imgs.append(imaging.load_pgm(cfg[key]))
        except OSError as exc:
            raise InputError(f"cannot read {cfg[key]}: {exc.strerror}") from None
        except imaging.PgmError as exc:
            raise InputError(f"{cfg[key]}: {exc}") from None
    report = imaging.QualityReport()
    report.add(os.path.basename(cfg["test"]), imgs[0], imgs[1])
    text = report.to_csv()
    _write(run_dir, "quality.csv", text)
    p = report.psnr_db[0]
    print(f"psnr {'inf' if math.isinf(p) else repr(p)} ssim {report.ssim[0]!r}")


RUNNERS = {
    "toy": run_toy,
    "csc-learn": run_csc_learn,
    "csc-reconstruct": run_csc_reconstruct,
    "csc-inpaint": lambda cfg, d: run_csc_reconstruct(cfg, d, inpaint=True),
    "prune-toy": run_prune,
    "metrics": run_metrics,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit((EXIT_USAGE, f"{self.prog}: error: {message}"))


def build_parser():
    parser = _Parser(prog="cogd", description="Cogradient descent experiments.",
                     epilog=EXIT_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="workload", required=True, parser_class=_Parser)
    for w in WORKLOADS:
        p = sub.add_parser(w, epilog=EXIT_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
        for key, (_, _, help_text) in SCHEMA.items():
            flag = "--" + key.replace("_", "-")
            if key == "cogd":
                p.add_argument(flag, dest=key, action="store_const", const="true",
                               default=None, help=help_text)
                p.add_argument("--no-cogd", dest=key, action="store_const", const="false",
                               help="disable coordination")
            else:
                p.add_argument(flag, dest=key, default=None, metavar="VALUE", help=help_text)
    return parser


def run(argv=None, env=None):
    """Execute one workload; return the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, tuple):
            print(exc.code[1], file=sys.stderr)
            return exc.code[0]
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        overrides = {}
        for key, (parse, _, _) in SCHEMA.items():
            raw = getattr(args, key)
            if raw is not None:
                try:
                    overrides[key] = parse(raw)
                except ValueError as exc:
                    raise ConfigError(f"--{key.replace('_', '-')}: invalid value {raw!r}: {exc}") from None
        cfg = load_config(args.config, args.workload, overrides, env)
        run_dir = make_run_dir(cfg)
        _write(run_dir, "config.resolved", cfg.resolved_text())
        RUNNERS[cfg.workload](cfg, run_dir)
        print(f"run directory {run_dir}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"cogd: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, imaging.PgmError) as exc:
        print(f"cogd: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FloatingPointError as exc:
        print(f"cogd: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic contract
        print(f"cogd: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main():
    sys.exit(run())
