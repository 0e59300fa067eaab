"""Launchable simulators: ``python -m stless_sims <sim-name> [params]``."""
from __future__ import annotations

import argparse

from . import echo, unicycle
from .protocol import serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="stless_sims")
    sub = parser.add_subparsers(dest="sim", required=True)

    p_echo = sub.add_parser("echo", help="identity simulator y = reshape(w)")
    p_echo.add_argument("--steps", type=int, default=1)
    p_echo.add_argument("--channels", type=int, default=2)

    p_uni = sub.add_parser("unicycle", help="unicycle with turn-rate noise")
    p_uni.add_argument("--steps", type=int, default=20)
    p_uni.add_argument("--dt", type=float, default=0.1)
    p_uni.add_argument("--speed", type=float, default=1.0)
    p_uni.add_argument("--omega", type=float, default=0.5)
    p_uni.add_argument("--x0", type=float, default=0.0)
    p_uni.add_argument("--y0", type=float, default=0.0)
    p_uni.add_argument("--psi0", type=float, default=0.0)
    p_uni.add_argument("--obstacle", type=float, nargs=2, default=(1.0, 1.0))
    p_uni.add_argument("--goal", type=float, nargs=2, default=(2.0, 0.0))

    args = parser.parse_args(argv)
    if args.sim == "echo":
        serve(
            echo.manifest(args.steps, args.channels),
            lambda w: echo.run(w, args.steps, args.channels),
        )
    else:
        params = unicycle.UnicycleParams(
            steps=args.steps, dt=args.dt, speed=args.speed, omega=args.omega,
            x0=args.x0, y0=args.y0, psi0=args.psi0,
            obstacle=tuple(args.obstacle), goal=tuple(args.goal),
        )
        serve(unicycle.manifest(params), lambda w: unicycle.trajectory(w, params))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
