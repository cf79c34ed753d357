"""Serve a model file over the external-classifier line protocol.

    python -m dualsmooth.serve MODEL.json            # stdin/stdout
    python -m dualsmooth.serve MODEL.json --port 0   # TCP, prints the port
"""

from __future__ import annotations

import argparse
import socketserver
import sys

import numpy as np

from .classifiers import load_model


def serve_stream(model, rfile, wfile) -> None:
    hello = rfile.readline().split()
    if len(hello) != 3 or hello[0] != "HELLO":
        wfile.write("ERROR expected HELLO d K\n")
        wfile.flush()
        return
    d, k = int(hello[1]), int(hello[2])
    if d != model.dim or k != model.num_classes:
        wfile.write(f"ERROR model has d={model.dim} K={model.num_classes}\n")
        wfile.flush()
        return
    wfile.write("READY\n")
    wfile.flush()
    while True:
        line = rfile.readline()
        if not line:
            return
        parts = line.split()
        if not parts:
            continue
        if parts[0] != "CLASSIFY" or len(parts) != 2:
            wfile.write("ERROR unknown command\n")
            wfile.flush()
            return
        n = int(parts[1])
        rows = [rfile.readline().split() for _ in range(n)]
        x = np.array(rows, dtype=float).reshape(n, d)
        labels = model.classify_batch(x)
        wfile.write("".join(f"{int(v)}\n" for v in labels))
        wfile.flush()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("model")
    parser.add_argument("--port", type=int, default=None)
    parser.add_argument("--host", default="127.0.0.1")
    args = parser.parse_args(argv)
    model = load_model(args.model)
    if args.port is None:
        serve_stream(model, sys.stdin, sys.stdout)
        return 0

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            wfile = self.connection.makefile("w", encoding="utf-8", newline="\n")
            rfile = self.connection.makefile("r", encoding="utf-8", newline="\n")
            serve_stream(model, rfile, wfile)

    class Server(socketserver.ThreadingMixIn, socketserver.TCPServer):
        daemon_threads = True
        allow_reuse_address = True

    with Server((args.host, args.port), Handler) as server:
        print(server.server_address[1], flush=True)
        server.serve_forever()
    return 0


if __name__ == "__main__":
    sys.exit(main())
