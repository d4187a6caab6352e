"""Guest-runtime side of the kernel wire protocol.

One JSON record per line on stdin, exactly one JSON response per line on
stdout. Guest output is captured and embedded in responses; file descriptor 1
is redirected to stderr so nothing else reaches the protocol stream.
"""

import builtins
import contextlib
import io
import json
import linecache
import os
import signal
import sys
import time
import traceback

VERSION = os.environ.get("KERNEL_SHIM_VERSION_OVERRIDE", "1")
MAX_FRAMES = 20
OUTPUT_CAP = 1 << 20
TRUNCATED = "\n[output truncated]"
OPS = ("hello", "exec", "introspect_attrs", "introspect_names", "reset", "shutdown")


class DeadlineExceeded(Exception):
    pass


def _on_alarm(signum, frame):
    raise DeadlineExceeded("cell exceeded its deadline")


class Shim:
    def __init__(self, out):
        self.out = out
        self.cell = 0
        self.namespace = {}
        self.reset()

    def reset(self):
        self.namespace.clear()
        self.namespace.update({"__name__": "__main__", "__builtins__": builtins})

    def send(self, record):
        self.out.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")) + "\n")
        self.out.flush()

    @staticmethod
    def cap(text):
        if len(text) > OUTPUT_CAP:
            return text[:OUTPUT_CAP] + TRUNCATED
        return text

    @staticmethod
    def frames(tb):
        entries = [
            f for f in traceback.extract_tb(tb) if f.filename != __file__
        ][-MAX_FRAMES:]
        return [
            {"file": f.filename, "line": f.lineno or 0, "name": f.name, "text": (f.line or "")}
            for f in entries
        ]

    def error_record(self, exc):
        if isinstance(exc, SyntaxError):
            frames = [{
                "file": exc.filename or "",
                "line": exc.lineno or 0,
                "name": "<module>",
                "text": (exc.text or "").strip(),
            }]
            return {"etype": type(exc).__name__, "evalue": exc.msg or "", "frames": frames}
        return {
            "etype": type(exc).__name__,
            "evalue": str(exc),
            "frames": self.frames(exc.__traceback__),
        }

    def guarded(self, fn, deadline_ms=None):
        """Runs fn with guest streams captured; returns (value, exc, out, err)."""
        out, err = io.StringIO(), io.StringIO()
        value, exc = None, None
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            try:
                if deadline_ms:
                    signal.setitimer(signal.ITIMER_REAL, deadline_ms / 1000.0)
                try:
                    value = fn()
                finally:
                    signal.setitimer(signal.ITIMER_REAL, 0)
            except BaseException as e:  # guest code may raise anything, SystemExit included
                exc = e
        return value, exc, self.cap(out.getvalue()), self.cap(err.getvalue())

    def handle(self, req):
        rid, op = req.get("id"), req.get("op")
        start = time.monotonic()

        def done(record):
            record["duration_ms"] = int((time.monotonic() - start) * 1000)
            self.send(record)

        if op == "hello":
            return done({"id": rid, "status": "ok", "version": VERSION})
        if op == "shutdown":
            return done({"id": rid, "status": "ok"})
        if op == "reset":
            self.reset()
            return done({"id": rid, "status": "ok"})
        if op == "introspect_names":
            names = sorted(k for k in self.namespace if not k.startswith("__"))
            return done({"id": rid, "status": "ok", "names": names})
        if op == "introspect_attrs":
            expr = req.get("expr") or ""
            value, exc, out, err = self.guarded(lambda: dir(eval(expr, self.namespace)))
            if exc is not None:
                return done({"id": rid, "status": "error", "traceback": self.error_record(exc)})
            return done({"id": rid, "status": "ok", "names": sorted(value)})
        if op == "exec":
            self.cell += 1
            filename = "<cell-%d>" % self.cell
            code = req.get("code") or ""
            lines = code.splitlines(True)
            linecache.cache[filename] = (len(code), None, lines, filename)

            def run():
                exec(compile(code, filename, "exec"), self.namespace)

            _, exc, out, err = self.guarded(run, req.get("deadline_ms"))
            record = {"id": rid, "status": "ok" if exc is None else "error", "stdout": out, "stderr": err}
            if exc is not None:
                record["traceback"] = self.error_record(exc)
            return done(record)
        return done({
            "id": rid,
            "status": "error",
            "traceback": {"etype": "ProtocolError", "evalue": "unknown op %r" % (op,), "frames": []},
        })


def main():
    proto_fd = os.dup(1)
    os.dup2(2, 1)
    out = io.TextIOWrapper(os.fdopen(proto_fd, "wb"), encoding="utf-8", newline="\n")
    sys.stdout = sys.stderr
    signal.signal(signal.SIGALRM, _on_alarm)
    shim = Shim(out)
    for line in io.TextIOWrapper(sys.stdin.buffer, encoding="utf-8"):
        if not line.strip():
            continue
        try:
            req = json.loads(line)
            if not isinstance(req, dict) or req.get("op") not in OPS:
                raise ValueError("expected an object with a known op")
        except ValueError as e:
            shim.send({
                "id": None,
                "status": "error",
                "traceback": {"etype": "ProtocolError", "evalue": str(e), "frames": []},
                "duration_ms": 0,
            })
            continue
        shim.handle(req)
        if req.get("op") == "shutdown":
            break


if __name__ == "__main__":
    main()
