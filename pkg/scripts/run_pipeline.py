from __future__ import annotations

import argparse
import sys
from pathlib import Path

from hvac_nmpc.cli import main as cli_main

MODELS = ("linear", "mlp", "lstm")


def _run(argv: list[str]) -> int:
    print("$ hvac_nmpc " + " ".join(argv))
    return cli_main(argv)


def main() -> int:
    p = argparse.ArgumentParser(description="Generate data, train every surrogate, run MPC and print the report.")
    p.add_argument("--config", default="configs/single_zone.json")
    p.add_argument("--mpc-config", default="configs/mpc.json")
    p.add_argument("--out", default="runs/pipeline")
    p.add_argument("--lags", default="1,5,5")
    p.add_argument("--days", type=float, default=2.0)
    p.add_argument("--scale", choices=["desk", "paper"], default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--model", action="append", default=[], help="Restrict to these model kinds")
    args = p.parse_args()

    models = args.model or list(MODELS)
    unknown = [m for m in models if m not in MODELS]
    if unknown:
        print(f"ERROR: Unknown model kind(s): {', '.join(unknown)}", file=sys.stderr)
        return 2

    root = Path(args.out)
    data = root / "data"
    ckpts = root / "checkpoints"
    results = root / "results"
    common = ["--seed", str(args.seed), "--scale", args.scale]

    code = _run(["generate", "--config", args.config, "--out", str(data), "--workers", str(args.workers), *common])
    if code:
        return code

    paths = []
    for kind in models:
        path = ckpts / f"{kind}.json"
        code = _run(["train", "--data", str(data), "--model", kind, "--lags", args.lags, "--out", str(path), *common])
        if code:
            return code
        paths.append(path)

    mpc_argv = ["mpc", "--sweep", "--days", str(args.days), "--out", str(results), "--seed", str(args.seed)]
    mpc_argv += ["--config", args.config, "--mpc-config", args.mpc_config, "--workers", str(args.workers)]
    for path in paths:
        mpc_argv += ["--ckpt", str(path)]
    code = _run(mpc_argv)
    if code:
        return code

    return _run(["report", "--results", str(results)])


if __name__ == "__main__":
    raise SystemExit(main())
