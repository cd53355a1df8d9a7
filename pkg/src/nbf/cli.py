"""Command-line interface: ``nbf train | certify | export-contours | validate``.

Exit codes: 0 success (all conditions certified), 2 bad input or config,
3 non-finite training loss, 4 a barrier condition is violated, 5 inconclusive.
Machine-readable results go to stdout; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from nbf import jsonio
from nbf.certifier import CERTIFIED, VIOLATED, certify
from nbf.config import ConfigError, RunConfig, load
from nbf.network import Network, forward_batch
from nbf.partition import grid_cells
from nbf.relaxation import MODES, Hyperrectangle, crown_batch, linear_to_interval_batch
from nbf.trainer import METRIC_FIELDS, NonFiniteLoss, sample_set, train
from nbf.validator import mc_psafe

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NONFINITE = 3
EXIT_VIOLATED = 4
EXIT_INCONCLUSIVE = 5


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"nbf: {msg}", file=sys.stderr)


def _threads(n: int | None):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be at least 1")
    import torch
    from threadpoolctl import threadpool_limits
    torch.set_num_threads(n)
    return threadpool_limits(limits=n)


def _load_net(path: str, cfg: RunConfig) -> Network:
    try:
        net = Network.load(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load network {path}: {exc}") from exc
    dim = cfg.dynamics().state_dim
    if net.input_dim != dim or net.output_dim != 1:
        raise UsageError(f"network maps {net.input_dim} -> {net.output_dim}; "
                         f"system {cfg.system.name!r} needs {dim} -> 1")
    return net


def _emit(doc: dict, path: Path | None = None) -> None:
    text = jsonio.dumps(doc)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")
    sys.stdout.write(text + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load(args.config)
    dyn = cfg.dynamics()
    tcfg = cfg.train_config(seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    every = cfg.training.checkpoint_every
    rows = []

    def on_epoch(row, net):
        rows.append(row)
        print(f"epoch {row.epoch}: loss={row.loss:.6g} violation={row.violation:.6g} "
              f"gamma_m={row.gamma_m:.6g} beta_m={row.beta_m:.6g} kappa={row.kappa:.6g}",
              file=sys.stderr)
        if every and (row.epoch + 1) % every == 0:
            net.save(out / f"checkpoint_{row.epoch + 1:04d}.json")

    net, history = train(dyn, tcfg, on_epoch=on_epoch)
    net.save(out / "net.json")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in history:
            w.writerow([r.epoch, *[jsonio.fmt_float(getattr(r, f)) for f in METRIC_FIELDS[1:]]])
    _emit({"net": str(out / "net.json"), "metrics": str(out / "metrics.csv"),
           "epochs": len(history), "final": {f: getattr(history[-1], f) for f in METRIC_FIELDS}})
    return EXIT_OK


def cmd_certify(args) -> int:
    cfg = load(args.config)
    if args.mode is not None and args.mode not in MODES:
        raise UsageError(f"--mode must be one of {MODES}")
    if args.t_gap is not None and not args.t_gap > 0:
        raise UsageError("--t-gap must be positive")
    net = _load_net(args.net, cfg)
    dyn = cfg.dynamics()
    ccfg = cfg.certify_config(t_gap=args.t_gap, mode=args.mode)
    report = certify(net, dyn, cfg.system.horizon, ccfg)
    doc = report.as_dict()
    doc["system"] = cfg.system.name
    out = Path(args.out) if args.out else Path(args.net).with_name("report.json")
    _emit(doc, out)
    if report.overall == VIOLATED:
        return EXIT_VIOLATED
    if report.overall != CERTIFIED:
        return EXIT_INCONCLUSIVE
    return EXIT_OK


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        w, h = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--grid expects WxH, got {text!r}") from None
    if w < 1 or h < 1:
        raise UsageError("--grid dimensions must be positive")
    return w, h


def _parse_slice(text: str | None, X: Hyperrectangle) -> dict[int, float]:
    if text is None:
        return {}
    fixed = {}
    for part in text.split(","):
        try:
            d, v = part.split("=")
            fixed[int(d)] = float(v)
        except ValueError:
            raise UsageError(f"--slice expects dim=value[,dim=value], got {text!r}") from None
    for d, v in fixed.items():
        if not 0 <= d < X.dim:
            raise UsageError(f"--slice dimension {d} outside 0..{X.dim - 1}")
        if not X.lower[d] <= v <= X.upper[d]:
            raise UsageError(f"--slice value {v} outside the state space along dimension {d}")
    return fixed


def contour_rows(net: Network, X: Hyperrectangle, grid: tuple[int, int], fixed: dict[int, float],
                 mode: str = "crown") -> np.ndarray:
    """Rows (x1, x2, B(center), lo, hi) for a W x H grid over the free dimensions."""
    free = [d for d in range(X.dim) if d not in fixed]
    if len(free) != 2:
        raise UsageError(f"need exactly two free dimensions, got {len(free)}; use --slice")
    plane = Hyperrectangle(X.lower[free], X.upper[free])
    # x1 varies fastest
    plo, phi = grid_cells(plane, [grid[1], grid[0]])
    plo, phi = plo[:, ::-1], phi[:, ::-1]
    lo = np.empty((plo.shape[0], X.dim))
    hi = np.empty_like(lo)
    lo[:, free], hi[:, free] = plo, phi
    for d, v in fixed.items():
        lo[:, d] = hi[:, d] = v
    centers = (lo + hi) / 2.0
    b = forward_batch(net, centers)[:, 0]
    rel = crown_batch(net, lo, hi, mode)
    lower, upper = linear_to_interval_batch(*rel, lo, hi)
    return np.column_stack([centers[:, free[0]], centers[:, free[1]], b, lower[:, 0], upper[:, 0]])


def cmd_export_contours(args) -> int:
    cfg = load(args.config)
    net = _load_net(args.net, cfg)
    X = cfg.dynamics().state_space
    grid = _parse_grid(args.grid)
    fixed = _parse_slice(args.slice, X)
    if X.dim - len(fixed) != 2:
        raise UsageError(f"a {X.dim}-D system needs --slice fixing {X.dim - 2} dimension(s)")
    rows = contour_rows(net, X, grid, fixed, args.mode or cfg.certification.mode)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "B", "lo", "hi"])
        for r in rows:
            w.writerow([jsonio.fmt_float(v) for v in r])
    _emit({"csv": str(out), "rows": int(rows.shape[0])})
    return EXIT_OK


def cmd_validate(args) -> int:
    if args.n_traj < 1:
        raise UsageError("--n-traj must be at least 1")
    if args.n_starts < 1:
        raise UsageError("--n-starts must be at least 1")
    cfg = load(args.config)
    _load_net(args.net, cfg)
    dyn = cfg.dynamics()
    H = cfg.system.horizon

    def starts(rng, k):
        return sample_set(dyn.initial_set, dyn.state_space, k, rng)

    res = mc_psafe(dyn, starts, H, args.n_traj, args.seed, n_starts=args.n_starts)
    doc = {"system": cfg.system.name, "H": H, "seed": args.seed, **res.as_dict()}
    if args.certificate:
        try:
            cert = jsonio.loads(Path(args.certificate).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read certificate {args.certificate}: {exc}") from exc
        p = cert.get("p_safe_lower")
        if isinstance(p, (int, float)):
            worst = res.worst
            doc["certificate"] = {
                "p_safe_lower": float(p),
                "consistent": bool(res.estimate >= p - 3.0 * res.se),
                "worst_start_consistent": bool(worst.estimate >= p - 3.0 * worst.se),
            }
        else:
            doc["certificate"] = {"p_safe_lower": p, "consistent": None}
    _emit(doc, Path(args.out) if args.out else None)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nbf", description="Train and certify neural stochastic barrier functions.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, net: bool = True):
        sp.add_argument("--config", required=True, help="TOML run configuration")
        if net:
            sp.add_argument("--net", required=True, help="network JSON")
        sp.add_argument("--threads", type=int, default=None, help="cap on worker threads")

    t = sub.add_parser("train", help="train a barrier network")
    common(t, net=False)
    t.add_argument("--out", required=True, help="output directory (net.json, metrics.csv)")
    t.add_argument("--seed", type=int, default=None, help="overrides training.seed")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("certify", help="verify the barrier conditions and bound P_safe")
    common(c)
    c.add_argument("--out", default=None, help="report path (default: report.json next to the network)")
    c.add_argument("--t-gap", dest="t_gap", type=float, default=None)
    c.add_argument("--mode", choices=MODES, default=None)
    c.set_defaults(func=cmd_certify)

    e = sub.add_parser("export-contours", help="barrier values and certified bounds on a grid")
    common(e)
    e.add_argument("--grid", default="320x320", help="WxH cells (default 320x320)")
    e.add_argument("--slice", default=None, help="dim=value fixing extra dimensions of 3-D systems")
    e.add_argument("--out", required=True, help="CSV path")
    e.add_argument("--mode", choices=MODES, default=None)
    e.set_defaults(func=cmd_export_contours)

    v = sub.add_parser("validate", help="Monte-Carlo estimate of P_safe")
    common(v)
    v.add_argument("--n-traj", dest="n_traj", type=int, default=100_000)
    v.add_argument("--n-starts", dest="n_starts", type=int, default=100)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--certificate", default=None, help="report JSON to compare against")
    v.add_argument("--out", default=None, help="also write the JSON here")
    v.set_defaults(func=cmd_validate)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    try:
        with _threads(args.threads):
            return args.func(args)
    except (ConfigError, UsageError) as exc:
        _err(str(exc))
        return EXIT_USAGE
    except NonFiniteLoss as exc:
        _err(str(exc))
        return EXIT_NONFINITE


if __name__ == "__main__":
    sys.exit(main())
