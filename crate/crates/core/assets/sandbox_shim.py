"""In-interpreter side of the sandbox protocol.

stdin:  {"code": "...", "result_variables": ["a", "b"]}
stdout: {"status": "...", "values": {...}, "stderr": "..."}

Exactly one JSON document is written to the real stdout. User code runs with
its own stdout/stderr redirected to a buffer and a restricted set of
builtins; imports outside the permitted set raise ImportError.
"""

import builtins
import io
import json
import math
import sys
import traceback

STDERR_LIMIT = 2048
INT_LIMIT = 2 ** 63

DENIED_MODULES = {
    "os", "sys", "subprocess", "socket", "shutil", "pathlib", "io", "importlib",
    "ctypes", "cffi", "multiprocessing", "threading", "_thread", "signal", "urllib",
    "http", "ftplib", "smtplib", "poplib", "imaplib", "telnetlib", "ssl", "asyncio",
    "select", "selectors", "pty", "fcntl", "resource", "posix", "nt", "tempfile",
    "glob", "fnmatch", "pickle", "marshal", "shelve", "sqlite3", "dbm", "webbrowser",
    "code", "codeop", "runpy", "builtins", "gc", "inspect", "mmap", "zipfile",
    "tarfile", "gzip", "bz2", "lzma", "requests", "platform", "sysconfig", "site",
}

REMOVED_BUILTINS = ("open", "exec", "eval", "compile", "input", "breakpoint", "help", "exit", "quit")

_real_import = builtins.__import__


def _guarded_import(name, globals=None, locals=None, fromlist=(), level=0):
    top = name.split(".")[0]
    if level == 0 and top in DENIED_MODULES:
        raise ImportError("import of '%s' is not permitted in the sandbox" % name)
    return _real_import(name, globals, locals, fromlist, level)


def _restricted_builtins():
    allowed = dict(builtins.__dict__)
    for name in REMOVED_BUILTINS:
        allowed.pop(name, None)
    allowed["__import__"] = _guarded_import
    return allowed


def _encode(value):
    if isinstance(value, bool):
        return value
    if isinstance(value, int):
        if -INT_LIMIT <= value < INT_LIMIT:
            return value
        return {"repr": repr(value)}
    if isinstance(value, float):
        if math.isfinite(value):
            return value
        return {"repr": repr(value)}
    if isinstance(value, str):
        return value
    try:
        return {"repr": repr(value)}
    except Exception as exc:  # noqa: BLE001
        return {"repr": "<unrepresentable %s>" % type(exc).__name__}


def _excerpt(text):
    data = text.encode("utf-8", "replace")
    if len(data) <= STDERR_LIMIT:
        return text
    return data[-STDERR_LIMIT:].decode("utf-8", "ignore")


def run(request):
    code = request.get("code", "")
    names = request.get("result_variables", [])
    captured = io.StringIO()

    try:
        compiled = compile(code, "<artifact>", "exec")
    except (SyntaxError, ValueError) as exc:
        detail = "".join(traceback.format_exception_only(type(exc), exc))
        return {"status": "compile_error", "values": {}, "stderr": _excerpt(detail)}

    namespace = {"__builtins__": _restricted_builtins(), "__name__": "__artifact__", "math": math}
    real_out, real_err = sys.stdout, sys.stderr
    sys.stdout = sys.stderr = captured
    failure = None
    try:
        exec(compiled, namespace)
    except BaseException as exc:  # noqa: BLE001 - user code may raise anything
        failure = "".join(traceback.format_exception_only(type(exc), exc))
    finally:
        sys.stdout, sys.stderr = real_out, real_err

    output = captured.getvalue()
    if failure is not None:
        return {"status": "runtime_error", "values": {}, "stderr": _excerpt(output + failure)}

    missing = [n for n in names if n not in namespace]
    if missing:
        note = "result variable(s) never assigned: %s\n" % ", ".join(missing)
        return {"status": "missing_variable", "values": {}, "stderr": _excerpt(output + note)}

    values = {n: _encode(namespace[n]) for n in names}
    return {"status": "ok", "values": values, "stderr": _excerpt(output)}


def main():
    real_out = sys.stdout
    try:
        request = json.loads(sys.stdin.read())
        response = run(request)
    except BaseException as exc:  # noqa: BLE001
        response = {"status": "runtime_error", "values": {}, "stderr": "shim failure: %r" % (exc,)}
    try:
        text = json.dumps(response, allow_nan=False)
    except (TypeError, ValueError) as exc:
        text = json.dumps({"status": "runtime_error", "values": {}, "stderr": "unencodable result: %r" % (exc,)})
    real_out.write(text)
    real_out.write("\n")
    real_out.flush()


if __name__ == "__main__":
    main()
