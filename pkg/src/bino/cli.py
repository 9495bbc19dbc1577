"""Command-line entry points.

Subcommands: gen-bench, pretrain, export-desc, probe-stereo, probe-mech,
eval-synth.  Reports are JSON with stable keys; every report embeds the
materialized config echo and the seed.  Exit codes: 0 success, 2 config
error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional

# BINO_THREADS caps BLAS/OpenMP workers; must be set before numpy loads.
_threads = os.environ.get("BINO_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import numpy as np  # noqa: E402

from . import distill as D  # noqa: E402
from . import encoder as enc  # noqa: E402
from . import mech  # noqa: E402
from . import stereo  # noqa: E402
from . import synthbench as sb  # noqa: E402
from . import tensor as T  # noqa: E402
from .config import ConfigError, ExperimentConfig, RunManifest, VERSION, write_report  # noqa: E402
from .fusion import ImagePair  # noqa: E402
from .imageio import ImageFormatError, read_image  # noqa: E402
from .kernels import BACKEND  # noqa: E402

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class DataError(RuntimeError):
    pass


def _overrides(pairs: Optional[list[str]]) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_cfg(args: argparse.Namespace, extra: Optional[dict[str, str]] = None
              ) -> ExperimentConfig:
    ov = _overrides(getattr(args, "set", None))
    if extra:
        for k, v in extra.items():
            ov.setdefault(k, v)
    return ExperimentConfig.load(getattr(args, "config", None), ov)


def _load_backbone(path: str, which: str) -> tuple[enc.EncoderConfig, dict]:
    """Encoder config + params from an encoder or trainer checkpoint."""
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    try:
        header, blobs = enc.load_checkpoint(path)
    except (OSError, enc.CheckpointError) as e:
        raise DataError(str(e)) from e
    kind = header.get("kind")
    if kind == "encoder":
        cfg = enc.EncoderConfig.from_dict(dict(header["config"]))
        return cfg, enc.blobs_to_params(blobs, requires_grad=False)
    if kind == "distill":
        cfg = enc.EncoderConfig.from_dict(dict(header["config"]))
        prefix = which + "."
        params = {k[len(prefix):]: T.Tensor(v, requires_grad=False)
                  for k, v in blobs.items()
                  if k.startswith(prefix) and not k[len(prefix):].startswith("head.")}
        if not params:
            raise DataError(f"{path}: no {which!r} parameters in trainer checkpoint")
        return cfg, params
    raise DataError(f"{path}: unknown checkpoint kind {kind!r}")


def _load_bench(path: str) -> tuple[sb.BenchConfig, list[sb.BenchSample]]:
    if not os.path.isdir(path):
        raise DataError(f"dataset directory not found: {path}")
    try:
        return sb.load_dataset(path)
    except (OSError, KeyError, ValueError, ImageFormatError) as e:
        raise DataError(f"cannot load dataset {path!r}: {e}") from e


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_bench(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    if args.count is not None:
        cfg.values["bench.count"] = args.count
    if args.preset is not None:
        cfg.values["bench.preset"] = args.preset
    if args.seed is not None:
        cfg.values["seed"] = args.seed
    bench = cfg.bench_config()
    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest(command="gen-bench", config=cfg.echo(), seed=cfg.seed,
                           path=os.path.join(args.out, "run_manifest.json"))
    manifest.begin()
    samples = sb.generate(bench, cfg["bench.count"])
    sb.write_dataset(args.out, bench, samples)
    for s in samples:
        for suffix in ("_L.ppm", "_R.ppm", "_gt.csv"):
            manifest.add_output(os.path.join(args.out, f"{s.index:05d}{suffix}"))
    manifest.add_output(os.path.join(args.out, "manifest.json"))
    manifest.finalize()
    return EXIT_OK


def _crop_pair(pair: ImagePair, width: int, p_w: int,
               rng: np.random.Generator) -> ImagePair:
    """Random patch-aligned horizontal crop of both views."""
    w = pair.left.shape[2]
    if width >= w:
        return pair
    c0 = int(rng.integers(0, (w - width) // p_w + 1)) * p_w
    return ImagePair(left=np.ascontiguousarray(pair.left[:, :, c0:c0 + width]),
                     right=np.ascontiguousarray(pair.right[:, :, c0:c0 + width]))


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    bench_cfg, samples = _load_bench(args.data)
    if not samples:
        raise DataError(f"empty dataset: {args.data}")

    os.makedirs(args.out, exist_ok=True)
    manifest = RunManifest(command="pretrain", config=cfg.echo(), seed=cfg.seed,
                           path=os.path.join(args.out, "run_manifest.json"))
    manifest.begin()

    dcfg = cfg.distill_config()
    crop_w = cfg["distill.crop_width"] or bench_cfg.width
    if args.resume:
        enc_cfg, dcfg, state, rng, _hdr = D.load_train_checkpoint(args.resume)
    else:
        enc_cfg = cfg.encoder_config()
        g = enc_cfg.geometry
        if g.height != bench_cfg.height:
            raise ConfigError(f"encoder.height={g.height} mismatches dataset height "
                              f"{bench_cfg.height}")
        if g.width != min(crop_w, bench_cfg.width):
            raise ConfigError(f"encoder.width={g.width} mismatches training crop width "
                              f"{min(crop_w, bench_cfg.width)}")
        rng = np.random.default_rng(cfg.seed)
        state = D.init_state(enc_cfg, dcfg, rng)

    log_path = os.path.join(args.out, "train_log.csv")
    log_mode = "a" if args.resume and os.path.exists(log_path) else "w"
    last_good = args.resume
    status = "done"
    code = EXIT_OK
    with open(log_path, log_mode) as log:
        if log_mode == "w":
            log.write("step,loss,mask_ratio,ema_momentum\n")
        try:
            while state.step < dcfg.steps:
                batch_idx = rng.integers(0, len(samples), size=dcfg.batch)
                batch = [_crop_pair(samples[int(i)].pair, crop_w, bench_cfg.p_w, rng)
                         for i in batch_idx]
                loss, info = D.train_step(state, batch, enc_cfg, dcfg, rng)
                if state.step % cfg["distill.log_every"] == 0 or state.step == dcfg.steps:
                    log.write(f"{state.step},{loss:.6f},{info['mask_ratio']:.4f},"
                              f"{info['ema_momentum']:.6f}\n")
                    log.flush()
                if state.step % cfg["distill.ckpt_every"] == 0 or state.step == dcfg.steps:
                    path = os.path.join(args.out, f"ckpt_{state.step:06d}.bin")
                    D.save_train_checkpoint(path, enc_cfg, dcfg, state, rng)
                    manifest.add_output(path)
                    last_good = path
        except T.NonFiniteError as e:
            print(f"numerical abort: {e}; last good checkpoint: {last_good}",
                  file=sys.stderr)
            status = "numerical-abort"
            code = EXIT_NUMERIC

    if code == EXIT_OK:
        final = os.path.join(args.out, "ckpt_final.bin")
        D.save_train_checkpoint(final, enc_cfg, dcfg, state, rng)
        manifest.add_output(final)
    manifest.add_output(log_path)
    manifest.finalize(status)
    return code


def cmd_export_desc(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    enc_cfg, params = _load_backbone(args.ckpt, args.which)
    try:
        image = read_image(args.image)
    except (OSError, ImageFormatError) as e:
        raise DataError(str(e)) from e
    manifest = RunManifest(command="export-desc", config=cfg.echo(), seed=cfg.seed,
                           path=args.out + ".manifest.json")
    manifest.begin()
    try:
        dmap = stereo.export_descriptors(enc_cfg, params, image, source=args.image)
    except ValueError as e:
        raise DataError(str(e)) from e
    enc.save_checkpoint(args.out, {"kind": "descriptors", "config": enc_cfg.to_dict(),
                                   "source": os.path.basename(args.image),
                                   "normalized": True},
                        {"desc": dmap.desc})
    manifest.add_output(args.out)
    manifest.finalize()
    return EXIT_OK


def _aggregate(dicts: list[dict[str, float]]) -> dict[str, float]:
    keys = sorted({k for d in dicts for k in d})
    return {k: float(np.mean([d[k] for d in dicts if k in d])) for k in keys}


def cmd_probe_stereo(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    for flag, key in (("dmax", "probe.dmax"), ("p1", "probe.p1"), ("p2", "probe.p2"),
                      ("lr_tol", "probe.lr_tol"), ("max_samples", "probe.max_samples")):
        v = getattr(args, flag)
        if v is not None:
            cfg.values[key] = v
    enc_cfg, params = _load_backbone(args.ckpt, args.which)
    _bench_cfg, samples = _load_bench(args.data)
    samples = samples[:cfg["probe.max_samples"]]
    if not samples:
        raise DataError("dataset has no samples")

    manifest = RunManifest(command="probe-stereo", config=cfg.echo(), seed=cfg.seed,
                           path=args.out + ".manifest.json")
    manifest.begin()
    per_pair = []
    desc_pairs = []
    for s in samples:
        try:
            res = stereo.probe_pair(enc_cfg, params, s.pair, d_max=cfg["probe.dmax"],
                                    p1=cfg["probe.p1"], p2=cfg["probe.p2"],
                                    lr_tol=cfg["probe.lr_tol"],
                                    refine_window=cfg["probe.refine_window"])
        except ValueError as e:
            raise DataError(f"sample {s.index}: {e}") from e
        per_pair.append({"index": s.index, **res.get("metrics", {"lr_keep": res["lr_keep"]})})
        desc_pairs.append((stereo.export_descriptors(enc_cfg, params, s.pair.left),
                           stereo.export_descriptors(enc_cfg, params, s.pair.right)))

    report = {"command": "probe-stereo", "config": cfg.echo(), "seed": cfg.seed,
              "backend": BACKEND, "version": VERSION,
              "pairs": per_pair,
              "aggregate": _aggregate([{k: v for k, v in d.items() if k != "index"}
                                       for d in per_pair])}
    if len(desc_pairs) >= 2:
        rng = np.random.default_rng(cfg.seed)
        subset = min(cfg["probe.hard_subset"], len(desc_pairs) - 1)
        report["retrieval"] = stereo.retrieval_eval(desc_pairs, subset, rng)
    write_report(args.out, report)
    manifest.add_output(args.out)
    manifest.finalize()
    return EXIT_OK


def cmd_probe_mech(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    if args.temp is not None:
        cfg.values["probe.temp"] = args.temp
    if args.counterfactual is not None:
        cfg.values["probe.counterfactual"] = args.counterfactual
    if args.max_samples is not None:
        cfg.values["probe.max_samples"] = args.max_samples
    kind = cfg["probe.counterfactual"]
    if kind is not None and kind not in mech.COUNTERFACTUALS:
        raise ConfigError(f"unknown counterfactual {kind!r}; "
                          f"choose from {', '.join(mech.COUNTERFACTUALS)}")
    enc_cfg, params = _load_backbone(args.ckpt, args.which)
    bench_cfg, samples = _load_bench(args.data)
    samples = samples[:cfg["probe.max_samples"]]
    if not samples:
        raise DataError("dataset has no samples")
    enc_cfg = stereo.config_for_image(enc_cfg, bench_cfg.height, bench_cfg.width)

    manifest = RunManifest(command="probe-mech", config=cfg.echo(), seed=cfg.seed,
                           path=args.out + ".manifest.json")
    manifest.begin()
    try:
        layers = mech.layerwise_sweep(enc_cfg, params, samples,
                                      temperature=cfg["probe.temp"],
                                      counterfactual_kind=kind, seed=cfg.seed)
    except ValueError as e:
        raise DataError(str(e)) from e
    report = {"command": "probe-mech", "config": cfg.echo(), "seed": cfg.seed,
              "version": VERSION, "counterfactual": kind, "layers": layers}
    write_report(args.out, report)
    manifest.add_output(args.out)
    manifest.finalize()
    return EXIT_OK


def cmd_eval_synth(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    for flag, key in (("dmax", "probe.dmax"), ("p1", "probe.p1"), ("p2", "probe.p2"),
                      ("max_samples", "probe.max_samples")):
        v = getattr(args, flag)
        if v is not None:
            cfg.values[key] = v
    enc_cfg, params = _load_backbone(args.ckpt, args.which)
    bench_cfg, samples = _load_bench(args.data)
    samples = samples[:cfg["probe.max_samples"]]
    if not samples:
        raise DataError("dataset has no samples")

    manifest = RunManifest(command="eval-synth", config=cfg.echo(), seed=cfg.seed,
                           path=args.out + ".manifest.json")
    manifest.begin()
    nn_scores, wta_scores, sgm_scores = [], [], []
    for s in samples:
        try:
            d_l = stereo.export_descriptors(enc_cfg, params, s.pair.left)
            d_r = stereo.export_descriptors(enc_cfg, params, s.pair.right)
            nn = stereo.nn_row_match(d_l, d_r)
            vol = stereo.build_cost_volume(d_l, d_r, cfg["probe.dmax"], direction="left")
            wta_d = stereo.wta(vol.cost).astype(np.float64)
            _agg, sgm_d = stereo.sgm(vol.cost, cfg["probe.p1"], cfg["probe.p2"])
            nn_scores.append(sb.score_matching(nn, s, bench_cfg.p_w))
            wta_scores.append(sb.score_matching(wta_d, s, bench_cfg.p_w))
            sgm_scores.append(sb.score_matching(sgm_d.astype(np.float64), s, bench_cfg.p_w))
        except ValueError as e:
            raise DataError(f"sample {s.index}: {e}") from e
    report = {"command": "eval-synth", "config": cfg.echo(), "seed": cfg.seed,
              "backend": BACKEND, "version": VERSION, "count": len(samples),
              "nn": _aggregate(nn_scores), "wta": _aggregate(wta_scores),
              "sgm": _aggregate(sgm_scores)}
    write_report(args.out, report)
    manifest.add_output(args.out)
    manifest.finalize()
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser, ckpt: bool = True) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    if ckpt:
        p.add_argument("--ckpt", required=True, help="encoder or trainer checkpoint")
        p.add_argument("--which", choices=("student", "teacher"), default="teacher",
                       help="backbone to read from a trainer checkpoint")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bino",
                                 description="binocular stereo encoder lab")
    ap.add_argument("--version", action="version", version=VERSION)
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-bench", help="generate a synthetic dual-view dataset")
    _add_common(p, ckpt=False)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int)
    p.add_argument("--preset", choices=sb.PRESETS)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gen_bench)

    p = sub.add_parser("pretrain", help="one-view-masked token distillation")
    _add_common(p, ckpt=False)
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", help="trainer checkpoint to resume from")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("export-desc", help="export frozen descriptors for one image")
    _add_common(p)
    p.add_argument("--image", required=True, help="PPM/PGM input image")
    p.add_argument("--out", required=True, help="output descriptor file")
    p.set_defaults(fn=cmd_export_desc)

    p = sub.add_parser("probe-stereo", help="frozen no-linkage stereo probe")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--dmax", type=int)
    p.add_argument("--p1", type=float)
    p.add_argument("--p2", type=float)
    p.add_argument("--lr-tol", dest="lr_tol", type=float)
    p.add_argument("--max-samples", dest="max_samples", type=int)
    p.add_argument("--out", required=True, help="JSON report path")
    p.set_defaults(fn=cmd_probe_stereo)

    p = sub.add_parser("probe-mech", help="epipolar token-geometry analyzer")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--temp", type=float)
    p.add_argument("--counterfactual", choices=mech.COUNTERFACTUALS)
    p.add_argument("--max-samples", dest="max_samples", type=int)
    p.add_argument("--out", required=True, help="JSON report path")
    p.set_defaults(fn=cmd_probe_mech)

    p = sub.add_parser("eval-synth", help="export -> cost -> WTA/SGM -> score")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--dmax", type=int)
    p.add_argument("--p1", type=float)
    p.add_argument("--p2", type=float)
    p.add_argument("--max-samples", dest="max_samples", type=int)
    p.add_argument("--out", required=True, help="JSON report path")
    p.set_defaults(fn=cmd_eval_synth)
    return ap


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, enc.CheckpointError, ImageFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except T.NonFiniteError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
