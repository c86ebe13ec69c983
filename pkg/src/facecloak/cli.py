"""facecloak command line: generate, apply, eval, ablate, inspect (plus toy-corpus and train).

Settings come from a TOML file (``--config`` or the FACECLOAK_CONFIG
environment variable); flags override file values.  Example::

    rng_seed = 0
    dataset_root = "data"
    output_dir = "out"

    [backend]
    kind = "toy"            # or "onnx"
    path = "toy.fctw"

    [target]                # optional evaluation target (transfer setting)
    kind = "onnx"
    path = "arcface.onnx"

    [optimizer]
    eps = "8/255"
    eps_A = "32/255"
    step = "2/255"
    iterations = 10
    n_variants = 8

    [focusing]
    use_sticker = true
    use_highpass = true
    use_attention = true
    z_alpha = 0.05
    mu = 1.0
    sigma = 2.0
    eye = [0.16, 0.10]
    nose = [0.18, 0.22]
    mouth = [0.30, 0.12]

    [synthgen]
    generator = "augment"   # or "http"
    endpoint = "http://localhost:8080/variants"
    timeout = 60.0

    [landmarks]
    adapter = "canonical"   # or "http"
    endpoint = "http://localhost:8081/landmarks"

    [eval]
    probes_per_identity = 5
    verification = true
    target_far = 0.01
    transforms = ["jpeg:30", "gaussian_blur:2"]

Exit codes: 0 success, 2 config error, 3 data error, 4 backend error,
5 partial failure.  Errors are reported on stderr as one JSON object with
``stage``, ``kind`` and ``message``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .backends import Backend, ToyTrainConfig, load_backend, save_toy_weights, train_toy_backend
from .core import CloakMask, config_digest, load_cloak, read_cloak_header, save_cloak
from .errors import (
    BackendError,
    ConfigError,
    DataError,
    DetectionError,
    EvaluationError,
    FaceCloakError,
    GenerationError,
    InvariantError,
    NumericError,
    OptimizationError,
    PersistenceError,
    PoolError,
)
from .evaluation import EVAL_REPORT_SCHEMA, Evaluator, TransformSpec, render_report
from .focusing import AttentionConfig, HighPassConfig, HttpLandmarkAdapter, StickerSpec
from .ingestion import build_split, load_image, save_image, scan_dataset, write_dataset
from .optimizer import AnchorPool, OptimizerConfig, apply_cloak, parse_fraction, protect
from .synthgen import AugmentationGenerator, ExternalGenerator, HttpGeneratorClient

log = logging.getLogger("facecloak")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_BACKEND, EXIT_PARTIAL, EXIT_INTERNAL = 0, 2, 3, 4, 5, 1

SCHEMA: dict[str, dict[str, type | tuple]] = {
    "": {"rng_seed": int, "dataset_root": str, "output_dir": str, "jobs": int},
    "backend": {"kind": str, "path": str},
    "target": {"kind": str, "path": str},
    "optimizer": {"eps": (int, float, str), "eps_A": (int, float, str), "step": (int, float, str),
                  "iterations": int, "n_variants": int},
    "focusing": {"use_sticker": bool, "use_highpass": bool, "use_attention": bool, "z_alpha": (int, float),
                 "mu": (int, float), "sigma": (int, float), "eye": list, "nose": list, "mouth": list},
    "synthgen": {"generator": str, "endpoint": str, "timeout": (int, float)},
    "landmarks": {"adapter": str, "endpoint": str},
    "eval": {"probes_per_identity": int, "verification": bool, "target_far": (int, float), "transforms": list},
}


@dataclass
class RunConfig:
    backend_kind: str = "toy"
    backend_path: str | None = None
    target_kind: str | None = None
    target_path: str | None = None
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    generator: str = "augment"
    generator_endpoint: str | None = None
    generator_timeout: float = 60.0
    landmarks: str = "canonical"
    landmarks_endpoint: str | None = None
    dataset_root: str | None = None
    output_dir: str = "facecloak-out"
    rng_seed: int = 0
    jobs: int = 1
    probes_per_identity: int = 5
    verification: bool = True
    target_far: float = 0.01
    transforms: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.backend_kind not in ("toy", "onnx"):
            raise ConfigError(f"backend.kind must be 'toy' or 'onnx', got {self.backend_kind!r}")
        if self.target_kind not in (None, "toy", "onnx"):
            raise ConfigError(f"target.kind must be 'toy' or 'onnx', got {self.target_kind!r}")
        if (self.target_kind is None) != (self.target_path is None):
            raise ConfigError("target needs both kind and path")
        if self.generator not in ("augment", "http"):
            raise ConfigError(f"synthgen.generator must be 'augment' or 'http', got {self.generator!r}")
        if self.generator == "http" and not self.generator_endpoint:
            raise ConfigError("synthgen.endpoint is required for the http generator")
        if self.landmarks not in ("canonical", "http"):
            raise ConfigError(f"landmarks.adapter must be 'canonical' or 'http', got {self.landmarks!r}")
        if self.landmarks == "http" and not self.landmarks_endpoint:
            raise ConfigError("landmarks.endpoint is required for the http adapter")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if self.probes_per_identity < 1:
            raise ConfigError("eval.probes_per_identity must be >= 1")
        if not 0.0 <= self.target_far <= 1.0:
            raise ConfigError("eval.target_far must lie in [0, 1]")
        self.transform_specs()

    def transform_specs(self) -> list[TransformSpec]:
        out = []
        for t in self.transforms:
            kind, sep, strength = str(t).partition(":")
            if not sep:
                raise ConfigError(f"transform {t!r} must look like kind:strength")
            try:
                out.append(TransformSpec(kind, float(strength), seed=self.rng_seed))
            except ValueError as exc:
                raise ConfigError(f"bad transform strength in {t!r}") from exc
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["optimizer"] = self.optimizer.to_dict()
        return d

    def digest(self) -> str:
        """Digest of everything that shapes produced artifacts (paths, output dir and job count excluded)."""
        d = self.to_dict()
        for k in ("output_dir", "jobs", "backend_path", "target_path", "dataset_root"):
            d.pop(k)
        return config_digest(d)


def read_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc


def _check_schema(raw: dict) -> None:
    for key, value in raw.items():
        if isinstance(value, dict):
            if key not in SCHEMA or key == "":
                raise ConfigError(f"unknown config section [{key}]")
            section, items = key, value
        else:
            section, items = "", {key: value}
        for k, v in items.items():
            if k not in SCHEMA[section]:
                where = f"[{section}] " if section else ""
                raise ConfigError(f"unknown config key {where}{k}")
            expected = SCHEMA[section][k]
            types = expected if isinstance(expected, tuple) else (expected,)
            if isinstance(v, bool) and bool not in types:
                raise ConfigError(f"config key {k} has wrong type")
            if not isinstance(v, types):
                raise ConfigError(f"config key {k} must be {'/'.join(t.__name__ for t in types)}")


def build_run_config(raw: dict, overrides: dict[tuple[str, str], Any] | None = None) -> RunConfig:
    """Merge file values with flag overrides (keyed by (section, key)) and validate everything."""
    _check_schema(raw)
    merged: dict[str, dict] = {s: dict(raw.get(s, {})) for s in SCHEMA if s}
    merged[""] = {k: v for k, v in raw.items() if not isinstance(v, dict)}
    for (section, key), value in (overrides or {}).items():
        if value is not None:
            merged[section][key] = value

    top, opt, foc = merged[""], merged["optimizer"], merged["focusing"]
    syn, lm, ev = merged["synthgen"], merged["landmarks"], merged["eval"]
    rng_seed = int(top.get("rng_seed", 0))
    try:
        defaults = StickerSpec()
        sticker = StickerSpec(
            eye=tuple(float(x) for x in foc.get("eye", defaults.eye)),
            nose=tuple(float(x) for x in foc.get("nose", defaults.nose)),
            mouth=tuple(float(x) for x in foc.get("mouth", defaults.mouth)),
        )
        if any(len(p) != 2 for p in (sticker.eye, sticker.nose, sticker.mouth)):
            raise ConfigError("sticker sizes must be [width_fraction, height_fraction]")
        highpass = HighPassConfig(sigma=float(foc.get("sigma", 2.0)), mu=float(foc.get("mu", 1.0)),
                                  radius=max(6, int(np.ceil(3 * float(foc.get("sigma", 2.0))))))
        optimizer = OptimizerConfig(
            eps=parse_fraction(opt.get("eps", 8 / 255)),
            eps_A=parse_fraction(opt.get("eps_A", 32 / 255)),
            step=parse_fraction(opt.get("step", 2 / 255)),
            iterations=int(opt.get("iterations", 10)),
            n_variants=int(opt.get("n_variants", 8)),
            use_sticker=bool(foc.get("use_sticker", True)),
            use_highpass=bool(foc.get("use_highpass", True)),
            use_attention=bool(foc.get("use_attention", True)),
            attention=AttentionConfig(z_alpha=float(foc.get("z_alpha", 0.05))),
            highpass=highpass,
            sticker=sticker,
            rng_seed=rng_seed,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    backend, target = merged["backend"], merged["target"]
    return RunConfig(
        backend_kind=backend.get("kind", "toy"),
        backend_path=backend.get("path"),
        target_kind=target.get("kind"),
        target_path=target.get("path"),
        optimizer=optimizer,
        generator=syn.get("generator", "augment"),
        generator_endpoint=syn.get("endpoint"),
        generator_timeout=float(syn.get("timeout", 60.0)),
        landmarks=lm.get("adapter", "canonical"),
        landmarks_endpoint=lm.get("endpoint"),
        dataset_root=top.get("dataset_root"),
        output_dir=top.get("output_dir", "facecloak-out"),
        rng_seed=rng_seed,
        jobs=int(top.get("jobs", 1)),
        probes_per_identity=int(ev.get("probes_per_identity", 5)),
        verification=bool(ev.get("verification", True)),
        target_far=float(ev.get("target_far", 0.01)),
        transforms=list(ev.get("transforms", [])),
    )


def overrides_from_args(args) -> dict:
    mapping = {
        "eps": ("optimizer", "eps"), "eps_a": ("optimizer", "eps_A"), "step": ("optimizer", "step"),
        "iterations": ("optimizer", "iterations"), "n_variants": ("optimizer", "n_variants"),
        "seed": ("", "rng_seed"), "dataset": ("", "dataset_root"), "output_dir": ("", "output_dir"),
        "jobs": ("", "jobs"), "backend": ("backend", "path"), "backend_kind": ("backend", "kind"),
        "target": ("target", "path"), "target_kind": ("target", "kind"),
        "generator_endpoint": ("synthgen", "endpoint"), "landmark_endpoint": ("landmarks", "endpoint"),
        "transform": ("eval", "transforms"),
    }
    out = {key: getattr(args, name, None) for name, key in mapping.items()}
    for flag, key in (("no_sticker", "use_sticker"), ("no_highpass", "use_highpass"),
                      ("no_attention", "use_attention")):
        if getattr(args, flag, False):
            out[("focusing", key)] = False
    for path_flag, kind_key in (("backend", ("backend", "kind")), ("target", ("target", "kind"))):
        path = getattr(args, path_flag, None)
        if path and out.get(kind_key) is None:
            out[kind_key] = "onnx" if str(path).lower().endswith(".onnx") else "toy"
    if getattr(args, "generator_endpoint", None):
        out[("synthgen", "generator")] = "http"
    if getattr(args, "landmark_endpoint", None):
        out[("landmarks", "adapter")] = "http"
    if getattr(args, "no_verification", False):
        out[("eval", "verification")] = False
    return out


def resolve_config(args) -> RunConfig:
    path = args.config or os.environ.get("FACECLOAK_CONFIG")
    raw = read_toml(path) if path else {}
    cfg = build_run_config(raw, overrides_from_args(args))
    log.debug("run config digest %s", cfg.digest())
    return cfg


# -- shared plumbing ------------------------------------------------------------------------


def open_backend(cfg: RunConfig) -> Backend:
    if not cfg.backend_path:
        raise ConfigError("no backend path configured ([backend] path or --backend)")
    return load_backend(cfg.backend_kind, cfg.backend_path)


def open_generator(cfg: RunConfig):
    if cfg.generator == "http":
        return ExternalGenerator(HttpGeneratorClient(cfg.generator_endpoint, timeout=cfg.generator_timeout,
                                                     token=os.environ.get("FACECLOAK_GENERATOR_TOKEN")))
    return AugmentationGenerator()


def open_landmarks(cfg: RunConfig):
    return HttpLandmarkAdapter(cfg.landmarks_endpoint) if cfg.landmarks == "http" else None


def open_split(cfg: RunConfig):
    if not cfg.dataset_root:
        raise ConfigError("no dataset configured (dataset_root or --dataset)")
    manifest = scan_dataset(cfg.dataset_root)
    for ex in manifest.exclusions:
        log.warning("excluded %s (%s)", ex["path"], ex["reason"])
    return build_split(manifest, cfg.probes_per_identity)


def anchor_pool(split, backend: Backend, evaluator: Evaluator | None = None) -> AnchorPool:
    if not split.distractors:
        raise PoolError("the dataset has no distractor images to draw anchors from")
    cache = evaluator.cache if evaluator is not None else Evaluator(split, backend).cache
    return AnchorPool([s.label for s in split.distractors], cache.get(split.distractors), source="distractors")


def generate_for_split(split, backend, pool, cfg: RunConfig, opt: OptimizerConfig, config_id: str) -> dict:
    generator, landmarks = open_generator(cfg), open_landmarks(cfg)
    shape = backend.descriptor.input_shape

    def one(label):
        seed = split.seed_sample(label).load(shape)
        return label, protect(seed, backend, pool, opt, generator, landmarks, config_id=config_id)

    if cfg.jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(cfg.jobs) as ex:
            return dict(ex.map(one, split.identities))
    return dict(one(label) for label in split.identities)


def write_text_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# -- commands ---------------------------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    backend = open_backend(cfg)
    seed = load_image(args.seed_image)
    if seed.shape != backend.descriptor.input_shape:
        from .ingestion import resize_and_center

        seed = resize_and_center(seed, backend.descriptor.input_shape[:2])
    split = open_split(cfg)
    pool = anchor_pool(split, backend)
    cloak = protect(seed, backend, pool, cfg.optimizer, open_generator(cfg), open_landmarks(cfg),
                    config_id=cfg.digest())
    out = Path(args.out) if args.out else Path(cfg.output_dir) / f"{Path(args.seed_image).stem}.fclk"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_cloak(cloak, out)
    print(out)
    return EXIT_OK


def cmd_apply(args) -> int:
    cloak = load_cloak(args.cloak)
    out_dir = Path(args.output_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    failures = 0
    written: set[Path] = set()
    for p in args.images:
        try:
            image = load_image(p)
            t0 = time.perf_counter()
            protected = apply_cloak(image, cloak)
            log.info("%s: applied in %.2f ms", p, 1e3 * (time.perf_counter() - t0))
            target = out_dir / f"{Path(p).stem}.cloaked.png"
            if target in written:  # same file name from another folder
                target = out_dir / f"{Path(p).parent.name}-{Path(p).stem}.cloaked.png"
            written.add(target)
            save_image(protected, target)
            print(target)
        except FaceCloakError as exc:
            failures += 1
            report_error(exc, extra={"path": str(p)})
    if failures == 0:
        return EXIT_OK
    return EXIT_PARTIAL if failures < len(args.images) else EXIT_DATA


def load_cloak_dir(path, identities) -> dict[str, CloakMask]:
    cloaks = {}
    for label in identities:
        f = Path(path) / f"{label}.fclk"
        cloaks[label] = load_cloak(f)
    return cloaks


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    backend = open_backend(cfg)
    split = open_split(cfg)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    if args.zero:
        cloaks = {label: None for label in split.identities}
    elif args.cloaks:
        cloaks = load_cloak_dir(args.cloaks, split.identities)
    else:
        pool = anchor_pool(split, backend)
        cloaks = generate_for_split(split, backend, pool, cfg, cfg.optimizer, digest)
        cloak_dir = out_dir / "cloaks"
        cloak_dir.mkdir(exist_ok=True)
        for label, c in cloaks.items():
            save_cloak(c, cloak_dir / f"{label}.fclk")
    target = load_backend(cfg.target_kind, cfg.target_path) if cfg.target_kind else backend
    evaluator = Evaluator(split, target, cfg.target_far)
    verification = cfg.verification
    if verification:
        try:
            evaluator.verification_threshold()
        except EvaluationError as exc:
            log.warning("skipping verification: %s", exc)
            verification = False
    report = evaluator.report(cloaks, None if args.zero else cfg.optimizer, cfg.transform_specs(),
                              verification, config_id=digest)
    try:
        import jsonschema

        jsonschema.validate(report.to_dict(), EVAL_REPORT_SCHEMA)
    except ImportError:
        pass
    write_text_atomic(out_dir / "report.json", report.to_json())
    table = render_report(report)
    write_text_atomic(out_dir / "report.txt", table + "\n")
    print(table)
    return EXIT_OK


ABLATION_AXES = {"eps": "eps", "iterations": "iterations", "n_variants": "n_variants"}


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    if args.axis not in ABLATION_AXES:
        raise ConfigError(f"axis must be one of {sorted(ABLATION_AXES)}")
    if not args.values:
        raise ConfigError("ablate needs at least one value")
    variants = []
    for v in args.values:
        if args.axis == "eps":
            eps = parse_fraction(v)
            # the step may not exceed the base budget, so small-eps rows shrink it
            opt = dataclasses.replace(cfg.optimizer, eps=eps, step=min(cfg.optimizer.step, eps) or cfg.optimizer.step)
            variants.append((eps, opt))
        else:
            try:
                n = int(v)
            except ValueError as exc:
                raise ConfigError(f"{args.axis} values must be integers, got {v!r}") from exc
            variants.append((n, dataclasses.replace(cfg.optimizer, **{args.axis: n})))

    backend = open_backend(cfg)
    split = open_split(cfg)
    evaluator = Evaluator(split, backend)
    pool = anchor_pool(split, backend, evaluator)
    digest = cfg.digest()
    out = Path(args.out) if args.out else Path(cfg.output_dir) / f"ablate_{args.axis}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = []
    for value, opt in variants:
        row_digest = config_digest({"base": digest, "axis": args.axis, "value": value})
        cloaks = generate_for_split(split, backend, pool, cfg, opt, row_digest)
        r = evaluator.report(cloaks, opt, verification=False, config_id=row_digest)
        rows.append((value, r))
        print(f"{args.axis}={value:g} top1={r.top1_psr:.1f} top5={r.top5_psr:.1f} "
              f"ssim={r.ssim_mean:.4f} psnr={r.psnr_mean_db:.2f}")
    tmp = out.with_name(out.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(f"# config_digest={digest} axis={args.axis}\n")
        w = csv.writer(fh)
        w.writerow(["axis_value", "top1", "top5", "ssim", "psnr"])
        for value, r in rows:
            w.writerow([repr(value), f"{r.top1_psr:.4f}", f"{r.top5_psr:.4f}",
                        f"{r.ssim_mean:.6f}", f"{r.psnr_mean_db:.4f}"])
    os.replace(tmp, out)
    print(out)
    return EXIT_OK


def cmd_inspect(args) -> int:
    print(json.dumps(read_cloak_header(args.cloak), indent=2))
    return EXIT_OK


def cmd_toy_corpus(args) -> int:
    from .toyfaces import make_corpus

    if not 1 <= args.users < args.identities:
        raise ConfigError("--users must be at least 1 and leave at least one distractor identity")
    images, labels = make_corpus(args.identities, args.per_identity, args.size, args.seed)
    ids = sorted(set(labels))
    roles = {label: ("probe" if i < args.users else "distractor") for i, label in enumerate(ids)}
    write_dataset(args.out, images, labels, roles)
    print(args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = scan_dataset(args.dataset)
    images, labels = [], []
    for e in manifest.entries:
        images.append(load_image(manifest.root / e.path))
        labels.append(e.label)
    shape = images[0].shape
    if any(im.shape != shape for im in images):
        raise DataError("training images must share one size")
    # group by identity in path order, so each identity's first images form the held-out split
    order = sorted(range(len(labels)), key=lambda i: labels[i])
    arr = np.stack([images[i].data for i in order])
    tcfg = ToyTrainConfig(epochs=args.epochs, seed=args.seed)
    weights = train_toy_backend(arr, [labels[i] for i in order], tcfg)
    save_toy_weights(weights, args.out)
    print(f"{args.out} held-out top-1 {weights.metadata['holdout_top1']:.3f}")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------------


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (BackendError, OptimizationError, NumericError)):
        return EXIT_BACKEND
    if isinstance(exc, (DataError, PersistenceError, DetectionError, GenerationError, PoolError,
                        EvaluationError, InvariantError)):
        return EXIT_DATA
    return EXIT_INTERNAL


def report_error(exc: BaseException, extra: dict | None = None) -> None:
    if isinstance(exc, FaceCloakError):
        payload = exc.to_dict()
    else:
        payload = {"stage": "internal", "kind": type(exc).__name__, "message": str(exc)}
    payload.update(extra or {})
    print(json.dumps(payload), file=sys.stderr)


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file (default: $FACECLOAK_CONFIG)")
    p.add_argument("--backend", help="backend file (toy weights or ONNX graph)")
    p.add_argument("--backend-kind", choices=["toy", "onnx"])
    p.add_argument("--dataset", help="dataset root with probe/ gallery/ distractor/ folders")
    p.add_argument("--output-dir")
    p.add_argument("--eps", help="base budget, e.g. 8/255")
    p.add_argument("--eps-a", help="boosted budget inside focus regions, e.g. 32/255")
    p.add_argument("--step", help="sign-gradient step, e.g. 2/255")
    p.add_argument("--iterations", type=int)
    p.add_argument("--n-variants", type=int)
    p.add_argument("--no-sticker", action="store_true")
    p.add_argument("--no-highpass", action="store_true")
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--seed", type=int, help="rng seed")
    p.add_argument("--jobs", type=int, help="parallel per-identity cloak generation")
    p.add_argument("--generator-endpoint", help="external variant generator URL")
    p.add_argument("--landmark-endpoint", help="external landmark detector URL")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facecloak", description="Identity-specific face cloaking")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="learn a cloak from one seed image")
    _add_run_options(p)
    p.add_argument("seed_image")
    p.add_argument("-o", "--out", help="cloak file path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("apply", help="add a cloak to images")
    p.add_argument("cloak")
    p.add_argument("images", nargs="+")
    p.add_argument("-o", "--output-dir")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("eval", help="measure protection on a dataset")
    _add_run_options(p)
    p.add_argument("--cloaks", help="directory of <identity>.fclk files; generated when omitted")
    p.add_argument("--zero", action="store_true", help="evaluate unprotected probes")
    p.add_argument("--target", help="evaluate against this backend instead of the surrogate")
    p.add_argument("--target-kind", choices=["toy", "onnx"])
    p.add_argument("--transform", action="append", help="robustness transform kind:strength (repeatable)")
    p.add_argument("--no-verification", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one optimizer setting")
    _add_run_options(p)
    p.add_argument("axis", choices=sorted(ABLATION_AXES))
    p.add_argument("values", nargs="+")
    p.add_argument("-o", "--out", help="CSV path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("inspect", help="print a cloak header")
    p.add_argument("cloak")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("toy-corpus", help="write the procedural face corpus as a dataset")
    p.add_argument("out")
    p.add_argument("--identities", type=int, default=40)
    p.add_argument("--per-identity", type=int, default=10)
    p.add_argument("--users", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_toy_corpus)

    p = sub.add_parser("train", help="train the toy backend on a dataset")
    p.add_argument("dataset")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--epochs", type=int, default=ToyTrainConfig.epochs)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except Exception as exc:  # every failure leaves as structured JSON plus an exit code
        report_error(exc)
        if not isinstance(exc, FaceCloakError):
            log.debug("unexpected failure", exc_info=True)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
