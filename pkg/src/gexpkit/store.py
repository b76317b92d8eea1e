"""Content-addressed store: interning, derivations, output paths.

Every store item lives at ``<prefix>/<hash32>-<name>`` where hash32 is
32 base32 characters encoding the first 20 bytes of a SHA-256 over a
fingerprint string.  The prefix is deliberately excluded from all
fingerprints so a store can be relocated (or recreated elsewhere) and
keep the same hashes; with the default relative prefix this also makes
derivation files byte-identical across machines.

Fingerprints, one per item kind::

    source:sha256:<hex of content>:<name>            plain files, directories
    text:sha256:<hex of drv text>:<name>.drv         derivation files
    output:<out>:sha256:<hex of blanked text>:<name> output paths

where "blanked text" is the canonical derivation text with every
output path field emptied (outputs map values and their env copies).
"""

from __future__ import annotations

import hashlib
import os
import re
import shutil
import tempfile
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

from .gexp import Gexp, gexp_inputs, gexp_modules, gexp_outputs, gexp_to_sexp
from .lowerable import LoweringError, lower_object, make_resolver
from .modules import intern_module_closure, source_module_closure
from .sexp import (Boolean, Sexp, SList, String, Symbol, print_canonical,
                   slist)

DEFAULT_SYSTEM = "x86_64-linux"

NIX32_ALPHABET = "0123456789abcdfghijklmnpqrsvwxyz"

_NAME_RE = re.compile(r"[A-Za-z0-9+._=-]+\Z")
_SYSTEM_RE = re.compile(r"[A-Za-z0-9_]+(-[A-Za-z0-9_]+)+\Z")


class StoreError(Exception):
    pass


def base32_hash(data: bytes) -> str:
    """Base32 over the custom alphabet, five-bit groups read from the
    highest offset down (20 bytes encode to exactly 32 characters)."""
    out_len = (len(data) * 8 + 4) // 5
    chars = []
    for i in range(out_len - 1, -1, -1):
        bit = i * 5
        byte = bit // 8
        off = bit % 8
        value = data[byte] >> off
        if byte + 1 < len(data):
            value |= data[byte + 1] << (8 - off)
        chars.append(NIX32_ALPHABET[value & 0x1F])
    return "".join(chars)


def validate_store_name(name: str) -> str:
    if not _NAME_RE.fullmatch(name or ""):
        raise StoreError(f"invalid store name: {name!r}")
    return name


def validate_system(tag: str) -> str:
    if not _SYSTEM_RE.fullmatch(tag or ""):
        raise StoreError(f"invalid system tag: {tag!r}")
    return tag


@dataclass(frozen=True)
class StorePath:
    prefix: str
    hash32: str
    name: str

    def __post_init__(self):
        if not self.prefix or self.prefix.endswith("/"):
            raise StoreError(f"invalid store prefix: {self.prefix!r}")
        if len(self.hash32) != 32 or any(c not in NIX32_ALPHABET for c in self.hash32):
            raise StoreError(f"invalid store hash: {self.hash32!r}")
        validate_store_name(self.name)

    def __str__(self):
        return f"{self.prefix}/{self.hash32}-{self.name}"

    @property
    def fs(self) -> Path:
        """Filesystem location; relative prefixes resolve against the
        current working directory, by design."""
        return Path(str(self))


def parse_store_path(text: str) -> StorePath:
    prefix, _, base = text.rpartition("/")
    if prefix and len(base) > 33 and base[32] == "-":
        try:
            return StorePath(prefix, base[:32], base[33:])
        except StoreError:
            pass
    raise StoreError(f"not a store path: {text!r}")


def _fingerprint_hash(kind: str, content_hex: str, name: str) -> str:
    fingerprint = f"{kind}:sha256:{content_hex}:{name}"
    return base32_hash(hashlib.sha256(fingerprint.encode("utf-8")).digest()[:20])


def _make_tree_read_only(path: str) -> None:
    for dirpath, dirnames, filenames in os.walk(path, topdown=False):
        for fname in filenames:
            os.chmod(os.path.join(dirpath, fname), 0o444)
        os.chmod(dirpath, 0o555)
    if os.path.isfile(path):
        os.chmod(path, 0o444)


def rmtree_rw(path: str) -> None:
    """Remove a tree that may have been made read-only."""
    if os.path.isfile(path) or os.path.islink(path):
        os.remove(path)
        return
    for dirpath, dirnames, filenames in os.walk(path):
        os.chmod(dirpath, 0o755)
        for fname in filenames:
            try:
                os.chmod(os.path.join(dirpath, fname), 0o644)
            except OSError:
                pass
    shutil.rmtree(path, ignore_errors=True)


class Store:
    """A store rooted at *prefix* (kept verbatim for path rendering).

    Writers stage new items in a temp location and rename them into
    place, so interning is atomic and idempotent: re-interning existing
    content is a no-op (the ``writes`` counter only moves on actual
    materialization).
    """

    def __init__(self, prefix="./store"):
        self.prefix = str(prefix).rstrip("/") or "/"
        Path(self.prefix).mkdir(parents=True, exist_ok=True)
        self.writes = 0
        self.lower_cache: dict = {}
        self.module_path: tuple = ()
        self._tlock = threading.Lock()

    @contextmanager
    def _locked(self):
        # In-process lock plus an advisory file lock for other writers.
        import fcntl

        with self._tlock:
            with open(os.path.join(self.prefix, ".lock"), "w") as fh:
                fcntl.flock(fh, fcntl.LOCK_EX)
                try:
                    yield
                finally:
                    fcntl.flock(fh, fcntl.LOCK_UN)

    def object_path(self, hash32: str, name: str) -> StorePath:
        return StorePath(self.prefix, hash32, name)

    def contains(self, path: StorePath) -> bool:
        return path.prefix == self.prefix and path.fs.exists()

    def read_bytes(self, path: StorePath) -> bytes:
        return path.fs.read_bytes()

    def intern_file(self, data: bytes, name: str) -> StorePath:
        return self._intern_bytes("source", data, name)

    def _intern_bytes(self, kind: str, data: bytes, name: str) -> StorePath:
        validate_store_name(name)
        content_hex = hashlib.sha256(data).hexdigest()
        path = self.object_path(_fingerprint_hash(kind, content_hex, name), name)
        if path.fs.exists():
            return path
        with self._locked():
            if path.fs.exists():
                return path
            fd, tmp = tempfile.mkstemp(dir=self.prefix, prefix=".tmp-")
            try:
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                os.chmod(tmp, 0o444)
                os.rename(tmp, path.fs)
            except BaseException:
                if os.path.exists(tmp):
                    os.chmod(tmp, 0o644)
                    os.remove(tmp)
                raise
            self.writes += 1
        return path

    def intern_dir(self, entries: Mapping[str, bytes], name: str) -> StorePath:
        """Intern a directory, content-addressed over the sorted
        concatenation of relative path + file content."""
        validate_store_name(name)
        blob = b""
        for relpath in sorted(entries):
            if relpath.startswith("/") or ".." in relpath.split("/"):
                raise StoreError(f"bad relative path in directory item: {relpath!r}")
            blob += relpath.encode("utf-8") + b"\n" + entries[relpath]
        content_hex = hashlib.sha256(blob).hexdigest()
        path = self.object_path(_fingerprint_hash("source", content_hex, name), name)
        if path.fs.exists():
            return path
        with self._locked():
            if path.fs.exists():
                return path
            tmp = tempfile.mkdtemp(dir=self.prefix, prefix=".tmp-")
            try:
                for relpath in sorted(entries):
                    dest = Path(tmp) / relpath
                    dest.parent.mkdir(parents=True, exist_ok=True)
                    dest.write_bytes(entries[relpath])
                _make_tree_read_only(tmp)
                os.rename(tmp, path.fs)
            except BaseException:
                rmtree_rw(tmp)
                if not path.fs.exists():
                    raise
            self.writes += 1
        return path


@dataclass(frozen=True)
class Derivation:
    """A build recipe.  All fields take part in hashing; env carries the
    output paths (and MODULE_PATH when modules are imported) so builder
    programs reach their outputs through getenv."""

    name: str
    system: str
    target: Optional[str]
    builder: StorePath
    input_drvs: tuple = ()      # ((drv path, (output names...)), ...)
    input_sources: tuple = ()   # (store paths...)
    outputs: Mapping[str, object] = field(default_factory=dict)
    env: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        validate_store_name(self.name)
        validate_system(self.system)
        if self.target is not None:
            validate_system(self.target)
        if not self.outputs:
            raise StoreError("derivation needs at least one output")


def derivation_to_sexp(d: Derivation) -> Sexp:
    def s(value) -> String:
        return String(str(value))

    drvs = tuple(
        SList((s(path),) + tuple(s(n) for n in sorted(names)))
        for path, names in sorted(d.input_drvs, key=lambda e: str(e[0])))
    sources = tuple(s(p) for p in sorted(d.input_sources, key=str))
    outs = tuple(slist(s(k), s(v)) for k, v in sorted(d.outputs.items()))
    env = tuple(slist(s(k), s(v)) for k, v in sorted(d.env.items()))
    return slist(
        Symbol("derivation"),
        slist(Symbol("name"), s(d.name)),
        slist(Symbol("system"), s(d.system)),
        slist(Symbol("target"),
              Boolean(False) if d.target is None else s(d.target)),
        slist(Symbol("builder"), s(d.builder)),
        SList((Symbol("input-drvs"),) + drvs),
        SList((Symbol("input-sources"),) + sources),
        SList((Symbol("outputs"),) + outs),
        SList((Symbol("env"),) + env),
    )


def derivation_text(d: Derivation) -> str:
    """Canonical serialization; the exact bytes stored in .drv files."""
    return print_canonical(derivation_to_sexp(d))


def derivation_from_sexp(value: Sexp) -> Derivation:
    def fail():
        raise StoreError(f"not a derivation: {print_canonical(value)[:120]}")

    if not (isinstance(value, SList) and value.items
            and value.items[0] == Symbol("derivation")):
        fail()
    fields = {}
    for item in value.items[1:]:
        if not (isinstance(item, SList) and item.items
                and isinstance(item.items[0], Symbol)):
            fail()
        fields[item.items[0].name] = item.items[1:]

    def one_string(key):
        entry = fields.get(key)
        if entry is None or len(entry) != 1 or not isinstance(entry[0], String):
            fail()
        return entry[0].value

    name = one_string("name")
    system = one_string("system")
    target_field = fields.get("target")
    if target_field is None or len(target_field) != 1:
        fail()
    if target_field[0] == Boolean(False):
        target = None
    elif isinstance(target_field[0], String):
        target = target_field[0].value
    else:
        fail()
    builder = parse_store_path(one_string("builder"))

    input_drvs = []
    for entry in fields.get("input-drvs", ()):
        if not (isinstance(entry, SList) and len(entry) >= 2
                and all(isinstance(i, String) for i in entry.items)):
            fail()
        input_drvs.append((parse_store_path(entry.items[0].value),
                           tuple(i.value for i in entry.items[1:])))
    sources = []
    for entry in fields.get("input-sources", ()):
        if not isinstance(entry, String):
            fail()
        sources.append(parse_store_path(entry.value))

    def pairs(key):
        out = {}
        for entry in fields.get(key, ()):
            if not (isinstance(entry, SList) and len(entry) == 2
                    and isinstance(entry.items[0], String)
                    and isinstance(entry.items[1], String)):
                fail()
            out[entry.items[0].value] = entry.items[1].value
        return out

    if "outputs" not in fields or "env" not in fields:
        fail()
    outputs = {k: parse_store_path(v) for k, v in pairs("outputs").items()}
    return Derivation(name=name, system=system, target=target, builder=builder,
                      input_drvs=tuple(input_drvs), input_sources=tuple(sources),
                      outputs=outputs, env=pairs("env"))


def output_path(d: Derivation, out_name: str) -> StorePath:
    """Deterministic output path: hash of the derivation text with all
    output path fields blanked, so the result does not depend on itself."""
    if out_name not in d.outputs:
        raise StoreError(f"derivation {d.name} has no output '{out_name}'")
    blanked = replace(
        d,
        outputs={k: "" for k in d.outputs},
        env={k: ("" if k in d.outputs else v) for k, v in d.env.items()})
    text = derivation_text(blanked)
    content_hex = hashlib.sha256(text.encode("utf-8")).hexdigest()
    hash32 = base32_hash(hashlib.sha256(
        f"output:{out_name}:sha256:{content_hex}:{d.name}".encode("utf-8")
    ).digest()[:20])
    path_name = d.name if out_name == "out" else f"{d.name}-{out_name}"
    return StorePath(d.builder.prefix, hash32, path_name)


_REFERENCE_RE_CACHE: dict[str, re.Pattern] = {}


def find_store_references(text: str, prefix: str) -> list[str]:
    """Store paths (under *prefix*) mentioned in *text*, in order."""
    pattern = _REFERENCE_RE_CACHE.get(prefix)
    if pattern is None:
        pattern = re.compile(
            re.escape(prefix) + r"/[" + NIX32_ALPHABET + r"]{32}-[A-Za-z0-9+._=-]+")
        _REFERENCE_RE_CACHE[prefix] = pattern
    return pattern.findall(text)


def write_derivation(store: Store, d: Derivation) -> StorePath:
    """Serialize *d* into the store.

    All referenced paths (builder, sources, input derivation files)
    must already exist, and every store path mentioned by the builder
    text must be accounted for by the input lists or the outputs.
    """
    for path in (d.builder, *d.input_sources, *(p for p, _ in d.input_drvs)):
        if not isinstance(path, StorePath) or not store.contains(path):
            raise StoreError(f"dangling reference in {d.name}: {path}")
    for out, path in d.outputs.items():
        if not isinstance(path, StorePath):
            raise StoreError(f"unfilled output '{out}' in {d.name}")

    allowed = {str(p) for p in d.input_sources}
    allowed.update(str(p) for p in d.outputs.values())
    for drv_path, names in d.input_drvs:
        dep = read_derivation(store, drv_path)
        for out in names:
            if out not in dep.outputs:
                raise StoreError(
                    f"{d.name} wants output '{out}' of {dep.name}, which has none")
            allowed.add(str(dep.outputs[out]))
    builder_text = store.read_bytes(d.builder).decode("utf-8")
    for ref in find_store_references(builder_text, store.prefix):
        if ref not in allowed:
            raise StoreError(f"builder of {d.name} references unlisted path {ref}")

    return store._intern_bytes("text", derivation_text(d).encode("utf-8"),
                               f"{d.name}.drv")


def read_derivation(store: Store, path) -> Derivation:
    if isinstance(path, str):
        path = parse_store_path(path)
    if not store.contains(path):
        raise StoreError(f"no such derivation: {path}")
    from .sexp import read

    return derivation_from_sexp(read(store.read_bytes(path).decode("utf-8")))


def gexp_to_derivation(store: Store, name: str, g: Gexp,
                       system: str = DEFAULT_SYSTEM,
                       target: Optional[str] = None,
                       module_path: Optional[Sequence] = None) -> Derivation:
    """Lower *g* into a derivation named *name*.

    Embedded objects lower under (system, target) honoring native
    flags, the residual program is interned as ``<name>-builder``, each
    referenced output gets an env entry mapping its name to its output
    path, and the imported-module closure (if any) is interned with its
    store path in env MODULE_PATH.  The derivation file is written
    before returning.
    """
    validate_store_name(name)
    validate_system(system)
    if target is not None:
        validate_system(target)
    if module_path is None:
        module_path = store.module_path

    drv_inputs: dict[str, tuple[StorePath, set]] = {}
    source_inputs: dict[str, StorePath] = {}
    for ref in gexp_inputs(g):
        effective_target = None if ref.native else target
        lowered = lower_object(ref.payload.obj, store, system, effective_target)
        if isinstance(lowered, Derivation):
            drv_path = write_derivation(store, lowered)
            entry = drv_inputs.setdefault(str(drv_path), (drv_path, set()))
            entry[1].add("out")
        elif isinstance(lowered, StorePath):
            source_inputs.setdefault(str(lowered), lowered)
        else:
            raise LoweringError(
                f"compiler returned {type(lowered).__name__}, "
                f"expected a store path or derivation")

    residual = gexp_to_sexp(g, system, target, make_resolver(store))
    builder = store.intern_file(print_canonical(residual).encode("utf-8"),
                                f"{name}-builder")

    env: dict[str, str] = {}
    module_names = gexp_modules(g)
    if module_names:
        closure = intern_module_closure(
            store, source_module_closure(module_names, module_path))
        source_inputs.setdefault(str(closure), closure)
        env["MODULE_PATH"] = str(closure)

    out_names = tuple(gexp_outputs(g)) or ("out",)
    draft = Derivation(
        name=name, system=system, target=target, builder=builder,
        input_drvs=tuple((p, tuple(sorted(ns))) for p, ns in drv_inputs.values()),
        input_sources=tuple(source_inputs.values()),
        outputs={n: "" for n in out_names},
        env={**env, **{n: "" for n in out_names}})
    out_paths = {n: output_path(draft, n) for n in out_names}
    env.update({n: str(p) for n, p in out_paths.items()})
    final = replace(draft, outputs=out_paths, env=env)
    write_derivation(store, final)
    return final
