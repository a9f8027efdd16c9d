"""Command-line surface: data generation, training, evaluation, audits.

Exit codes: 0 on success, 2 for invalid input or malformed files, 3 when a
numerical certification fails.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import bound_audit, data, model, trainer, verify
from .errors import DataFormatError, InvalidInputError, NumericalError


def _parse_genspec_text(text: str) -> data.GenSpec:
    fields = {"num_classes": int, "num_domains": int,
              "per_class_per_domain": int, "image_size": int, "seed": int}
    kwargs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidInputError(f"spec line {lineno}: expected key=value")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise InvalidInputError(f"spec line {lineno}: unknown key {key!r}")
        try:
            kwargs[key] = fields[key](val)
        except ValueError as exc:
            raise InvalidInputError(f"spec line {lineno}: {exc}") from exc
    return data.GenSpec(**kwargs)


def _load_config(path) -> trainer.TrainConfig:
    if path is None:
        return trainer.TrainConfig()
    return trainer.load_config(path)


def _cmd_gen_data(args) -> int:
    if args.spec is None:
        spec = data.GenSpec()
    else:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = _parse_genspec_text(fh.read())
    ds = data.generate(spec)
    data.save(ds, args.out)
    print(f"wrote {len(ds)} samples ({ds.num_classes} classes, "
          f"{ds.num_domains} domains) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    ds = data.load(args.data)
    split = data.lodo_split(ds, args.target_domain)
    cfg = _load_config(args.config)
    params, log = trainer.train(split, cfg)
    model.save_checkpoint(params, args.out)
    if args.log:
        log.write(args.log)
    last = log.rows[-1]
    print(f"epochs={len(log.rows)} source_acc={last[-2]:.4f} target_acc={last[-1]:.4f}")
    print(f"checkpoint written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    params = model.load_checkpoint(args.ckpt)
    ds = data.load(args.data)
    if args.domain is not None:
        if not 0 <= args.domain < ds.num_domains:
            raise InvalidInputError(
                f"domain {args.domain} out of range [0, {ds.num_domains})")
        rows = np.flatnonzero(ds.domain_ids == args.domain)
        if rows.size == 0:
            raise InvalidInputError(f"domain {args.domain} has no samples")
        ds = data.DomainDataset(ds.images[rows].copy(), ds.labels[rows].copy(),
                                np.zeros(rows.size, dtype=np.int32),
                                ds.num_classes, 1)
    acc = trainer.evaluate(params, ds)
    print(f"accuracy={acc:.4f} over {len(ds)} samples")
    return 0


def _cmd_gradcheck(args) -> int:
    reports = verify.run_gradient_battery(args.seed)
    for r in reports:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max rel err {r.max_rel_err:.3e} "
              f"(tol {r.tol:g}, {r.instances} instances)")
    verify.require_all_pass(reports)
    return 0


def _cmd_mc_oracle(args) -> int:
    records = verify.jensen_sweep(args.instances, args.samples, args.seed,
                                  lam=args.lam)
    holds = sum(r.holds for r in records)
    worst = min(r.closed_form - (r.mc_estimate - 3.0 * r.std_error)
                for r in records)
    print(f"{holds}/{len(records)} instances satisfy closed form >= "
          f"MC - 3se (worst slack {worst:.3e})")
    if holds != len(records):
        raise NumericalError("closed-form bound fell below the MC estimate")
    return 0


def _cmd_audit_bound(args) -> int:
    params = model.load_checkpoint(args.ckpt)
    ds = data.load(args.data)
    trace = model.forward(params, data.flatten_images(ds.images))
    summary = bound_audit.audit_dataset(trace.features, params.dml_w)
    print(f"fraction_satisfied={summary.fraction_satisfied!r} "
          f"mean_slack={summary.mean_slack:.6e} residual={summary.residual:.6e}")
    if args.out:
        reports = bound_audit.audit_rows(trace.features, params.dml_w)
        with open(args.out, "w", encoding="ascii") as fh:
            fh.write("i,j,feat_dist_sq,logit_dist_sq,lower,upper,satisfied\n")
            for r in reports:
                fh.write(f"{r.pair[0]},{r.pair[1]},{r.feat_dist_sq!r},"
                         f"{r.logit_dist_sq!r},{r.lower!r},{r.upper!r},"
                         f"{int(r.satisfied)}\n")
        print(f"per-pair report written to {args.out}")
    if summary.fraction_satisfied != 1.0:
        raise NumericalError("distance sandwich violated on this checkpoint")
    return 0


def _cmd_ablate(args) -> int:
    ds = data.load(args.data)
    split = data.lodo_split(ds, args.target_domain)
    cfg = _load_config(args.config)
    rows = trainer.ablation_grid(split, cfg)
    print(f"{'variant':<14} {'target_acc':>10} {'source_acc':>10}")
    for row in rows:
        print(f"{row.name:<14} {row.target_acc:>10.4f} {row.source_acc:>10.4f}")
    return 0


def _cmd_sweep_alpha(args) -> int:
    ds = data.load(args.data)
    split = data.lodo_split(ds, args.target_domain)
    cfg = _load_config(args.config)
    alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    rows = trainer.sensitivity_sweep(split, cfg, alphas)
    print("alpha,target_acc")
    for alpha, acc in rows:
        print(f"{alpha!r},{acc!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semdg",
        description="Implicit semantic augmentation for metric learning "
                    "across domains, with built-in numerical oracles.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic multi-domain benchmark")
    p.add_argument("--spec", help="key=value spec file (defaults when omitted)")
    p.add_argument("--out", required=True, help="output dataset container")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train on all domains but one")
    p.add_argument("--data", required=True)
    p.add_argument("--target-domain", type=int, required=True)
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="metrics CSV path")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", type=int, help="restrict to one domain id")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("mc-oracle", help="Monte-Carlo check of the loss bound")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="fix the augmentation strength (default: random per instance)")
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--instances", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_mc_oracle)

    p = sub.add_parser("audit-bound", help="distance sandwich audit on a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="per-pair CSV report path")
    p.set_defaults(fn=_cmd_audit_bound)

    p = sub.add_parser("ablate", help="train the five studied variants")
    p.add_argument("--data", required=True)
    p.add_argument("--target-domain", type=int, required=True)
    p.add_argument("--config")
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("sweep-alpha", help="metric-loss weight sensitivity")
    p.add_argument("--data", required=True)
    p.add_argument("--target-domain", type=int, required=True)
    p.add_argument("--config")
    p.add_argument("--alphas", default="0,0.5,1,2")
    p.set_defaults(fn=_cmd_sweep_alpha)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (InvalidInputError, DataFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
