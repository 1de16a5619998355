"""Command line entry point."""

from __future__ import annotations

import argparse
import os
import sys

from .errors import AppLoadError, ForwardError
from .server import load_application, make_http_server


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="forwardlite",
        description="Serve a declarative web application directory.")
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="compile an app directory and serve it")
    serve.add_argument("app_dir", help="directory with app.json, pages/, actions/")
    serve.add_argument("--port", type=int, default=8080)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--config", default=None,
                       help="config file to use instead of <app-dir>/app.json")

    check = sub.add_parser("check", help="compile an app directory and exit")
    check.add_argument("app_dir")
    check.add_argument("--config", default=None)

    args = parser.parse_args(argv)
    try:
        app = load_application(args.app_dir, args.config)
    except (AppLoadError, ForwardError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1

    if args.command == "check":
        print(f"ok: {len(app.pages)} page(s), "
              f"{len(app.actions.urls())} action(s)")
        return 0

    port = int(os.environ.get("FW_PORT", args.port))
    httpd = make_http_server(app, port, args.host)
    print(f"serving {args.app_dir} on http://{args.host}:{port}")
    try:
        httpd.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        httpd.server_close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
