#!/usr/bin/env python3
"""Generate the golden store values used by the test suite.

Everything here is computed from first principles with hashlib and
string assembly; the script deliberately does not import gexpkit, so
the frozen files pin the path formula independently of the package
implementation.  Run from the repository root:

    python scripts/make_goldens.py

Outputs:
    tests/golden/paths.json          expected store paths
    tests/golden/golden-example.drv  expected derivation file bytes
    tests/fixtures/modules/...       module fixture tree (3-file import chain)
"""

import hashlib
import json
import pathlib

PREFIX = "./store"
SYSTEM = "x86_64-linux"

ALPHABET = "0123456789abcdfghijklmnpqrsvwxyz"


def base32(data: bytes) -> str:
    # 5-bit groups taken from the highest bit offset downward.
    out_len = (len(data) * 8 + 4) // 5
    chars = []
    for i in range(out_len - 1, -1, -1):
        bit = i * 5
        byte = bit // 8
        off = bit % 8
        val = data[byte] >> off
        if byte + 1 < len(data):
            val |= data[byte + 1] << (8 - off)
        chars.append(ALPHABET[val & 0x1F])
    return "".join(chars)


def store_path(kind: str, payload: bytes, name: str, path_name: str = None) -> str:
    content_hex = hashlib.sha256(payload).hexdigest()
    fingerprint = f"{kind}:sha256:{content_hex}:{name}"
    truncated = hashlib.sha256(fingerprint.encode("utf-8")).digest()[:20]
    return f"{PREFIX}/{base32(truncated)}-{path_name if path_name is not None else name}"


def quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def derivation_text(name, system, target, builder, input_drvs, input_sources,
                    outputs, env) -> str:
    parts = [
        "(derivation",
        f" (name {quote(name)})",
        f" (system {quote(system)})",
        " (target #f)" if target is None else f" (target {quote(target)})",
        f" (builder {quote(builder)})",
    ]
    drvs = "".join(
        " (" + " ".join([quote(path)] + [quote(o) for o in sorted(outs)]) + ")"
        for path, outs in sorted(input_drvs)
    )
    parts.append(f" (input-drvs{drvs})")
    parts.append("".join([" (input-sources"] +
                         [" " + quote(p) for p in sorted(input_sources)] + [")"]))
    parts.append("".join([" (outputs"] +
                         [f" ({quote(k)} {quote(v)})" for k, v in sorted(outputs.items())] +
                         [")"]))
    parts.append("".join([" (env"] +
                         [f" ({quote(k)} {quote(v)})" for k, v in sorted(env.items())] +
                         [")"]))
    return "".join(parts) + ")"


MODULE_FILES = {
    "demo/util/a.scm": '(define-module (demo util a) #:use-module (demo util b))\n'
                       '(define (a-label) (string-append "a+" (b-label)))\n',
    "demo/util/b.scm": '(define-module (demo util b) #:use-module (demo util c))\n'
                       '(define (b-label) (string-append "b+" (c-label)))\n',
    "demo/util/c.scm": '(define-module (demo util c))\n'
                       '(define (c-label) "c")\n',
}


def main():
    root = pathlib.Path(__file__).resolve().parent.parent
    golden_dir = root / "tests" / "golden"
    golden_dir.mkdir(parents=True, exist_ok=True)

    paths = {}

    paths["greeting"] = store_path("source", b"hello\n", "greeting")

    # End-to-end fixture: one interned source, one derivation copying it.
    source_content = b"mock-png:GuixSD\n"
    src = store_path("source", source_content, "image.png")
    paths["source"] = src

    builder_text = (
        f'(begin (mkdir (getenv "out")) '
        f'(copy-file {quote(src)} (string-append (getenv "out") "/image.png")))'
    )
    builder = store_path("source", builder_text.encode("utf-8"), "golden-example-builder")
    paths["builder"] = builder

    blank = derivation_text("golden-example", SYSTEM, None, builder, [], [src],
                            {"out": ""}, {"out": ""})
    out_fp = (f'output:out:sha256:'
              f'{hashlib.sha256(blank.encode("utf-8")).hexdigest()}:golden-example')
    out_hash = base32(hashlib.sha256(out_fp.encode("utf-8")).digest()[:20])
    out_path = f"{PREFIX}/{out_hash}-golden-example"
    paths["output"] = out_path

    final = derivation_text("golden-example", SYSTEM, None, builder, [], [src],
                            {"out": out_path}, {"out": out_path})
    paths["drv"] = store_path("text", final.encode("utf-8"), "golden-example.drv")
    (golden_dir / "golden-example.drv").write_bytes(final.encode("utf-8"))

    # Module import chain fixture and its interned closure directory.
    fixtures = root / "tests" / "fixtures" / "modules"
    blob = b""
    for relpath in sorted(MODULE_FILES):
        text = MODULE_FILES[relpath]
        target = fixtures / relpath
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text, encoding="utf-8")
        blob += relpath.encode("utf-8") + b"\n" + text.encode("utf-8")
    paths["modules"] = store_path("source", blob, "modules")

    (golden_dir / "paths.json").write_text(json.dumps(paths, indent=2) + "\n",
                                           encoding="utf-8")
    for key, value in paths.items():
        print(f"{key}: {value}")


if __name__ == "__main__":
    main()
