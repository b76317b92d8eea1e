import pytest

from gexpkit import (ModuleError, ModuleFile, ModuleName, Store,
                     intern_module_closure, read, source_module_closure)
from gexpkit.modules import coerce_module_names, parse_module_source


class TestModuleName:
    def test_relpath_and_str(self):
        name = ModuleName(("demo", "util", "a"))
        assert name.relpath == "demo/util/a.scm"
        assert str(name) == "(demo util a)"

    def test_from_sexp(self):
        assert ModuleName.from_sexp(read("(demo util a)")) == \
            ModuleName(("demo", "util", "a"))
        with pytest.raises(ModuleError):
            ModuleName.from_sexp(read('(demo "util")'))

    def test_coerce_accepts_mixed_shapes(self):
        file = ModuleFile(ModuleName(("m",)), (read("(define-module (m))"),), ())
        names = coerce_module_names(
            [ModuleName(("a",)), file, read("(b c)"), [read("(d e)")]])
        assert [str(n) for n in names] == ["(a)", "(m)", "(b c)", "(d e)"]


class TestParsing:
    def test_header_and_imports(self):
        text = ('(define-module (x y) #:use-module (p q) #:use-module (r))\n'
                '(define (f) 1)\n')
        module = parse_module_source(text, ModuleName(("x", "y")))
        assert [str(i) for i in module.imports] == ["(p q)", "(r)"]
        assert len(module.source) == 2

    def test_header_name_must_match(self):
        with pytest.raises(ModuleError, match="does not match"):
            parse_module_source("(define-module (other))\n",
                                ModuleName(("x",)))

    def test_missing_header(self):
        with pytest.raises(ModuleError, match="define-module"):
            parse_module_source("(define (f) 1)\n", ModuleName(("x",)))


class TestClosure:
    def test_chain_order_depth_first(self, module_dir):
        files = source_module_closure([read("(demo util a)")], [module_dir])
        assert [str(f.name) for f in files] == [
            "(demo util a)", "(demo util b)", "(demo util c)"]

    def test_leaf_is_single_entry(self, module_dir):
        files = source_module_closure([read("(demo util c)")], [module_dir])
        assert [str(f.name) for f in files] == ["(demo util c)"]

    def test_shared_import_appears_once(self, module_dir):
        files = source_module_closure(
            [read("(demo util b)"), read("(demo util a)")], [module_dir])
        assert [str(f.name) for f in files] == [
            "(demo util b)", "(demo util c)", "(demo util a)"]

    def test_missing_module_names_module_and_path(self, module_dir):
        with pytest.raises(ModuleError) as info:
            source_module_closure([read("(demo util zz)")], [module_dir])
        assert "(demo util zz)" in str(info.value)
        assert module_dir in str(info.value)

    def test_cycle_detected(self, tmp_path):
        root = tmp_path / "mods"
        (root / "p").mkdir(parents=True)
        (root / "p" / "a.scm").write_text(
            "(define-module (p a) #:use-module (p b))\n(define (fa) 1)\n")
        (root / "p" / "b.scm").write_text(
            "(define-module (p b) #:use-module (p a))\n(define (fb) 2)\n")
        with pytest.raises(ModuleError, match="cyclic"):
            source_module_closure([read("(p a)")], [str(root)])


class TestInterning:
    def test_golden_closure_path(self, store, module_dir, golden_paths):
        files = source_module_closure([read("(demo util a)")], [module_dir])
        path = intern_module_closure(store, files)
        assert str(path) == golden_paths["modules"]

    def test_interned_tree_contents(self, store, module_dir):
        files = source_module_closure([read("(demo util a)")], [module_dir])
        path = intern_module_closure(store, files)
        entries = sorted(p.relative_to(path.fs).as_posix()
                         for p in path.fs.rglob("*.scm"))
        assert entries == ["demo/util/a.scm", "demo/util/b.scm",
                           "demo/util/c.scm"]

    def test_intern_is_idempotent(self, store, module_dir):
        files = source_module_closure([read("(demo util a)")], [module_dir])
        first = intern_module_closure(store, files)
        before = store.writes
        second = intern_module_closure(store, files)
        assert first == second
        assert store.writes == before
