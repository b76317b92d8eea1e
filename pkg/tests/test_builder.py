import os
import threading
from pathlib import Path

import pytest

from gexpkit import (BuildError, EvalEnv, Package, Store, build,
                     gexp_to_derivation, mini_eval, plan, read, read_all,
                     stage, write_derivation)


def ev(text, **kwargs):
    return mini_eval(read_all(text), EvalEnv(**kwargs) if kwargs else None)


class TestMiniEval:
    def test_arithmetic(self):
        assert ev("(+ 1 2 3)") == 6
        assert ev("(- 10 1 2)") == 7
        assert ev("(- 5)") == -5
        assert ev("(* 2 3 4)") == 24
        assert ev("(= 2 2 2)") is True
        assert ev("(= 2 3)") is False

    def test_strings(self):
        assert ev('(string-append "a" "b" "c")') == "abc"
        with pytest.raises(BuildError, match="string-append"):
            ev('(string-append "a" 1)')

    def test_lists(self):
        assert ev("(list 1 2)") == [1, 2]
        assert ev("(cons 0 (list 1))") == [0, 1]
        assert ev("(car (list 7 8))") == 7
        assert ev("(cdr (list 7 8))") == [8]
        assert ev("(null? (list))") is True
        assert ev("(null? (list 1))") is False
        with pytest.raises(BuildError):
            ev("(car (list))")

    def test_equality_keeps_booleans_and_ints_apart(self):
        assert ev("(equal? 1 1)") is True
        assert ev("(equal? 1 #t)") is False
        assert ev("(equal? (list 1 (list 2)) (list 1 (list 2)))") is True
        assert ev('(equal? "1" 1)') is False

    def test_quote(self):
        assert ev("'(1 2 (3))") == [1, 2, [3]]
        assert ev("(car '(a b))") == read("a")

    def test_only_false_is_falsy(self):
        assert ev("(if 0 1 2)") == 1
        assert ev('(if "" 1 2)') == 1
        assert ev("(if (list) 1 2)") == 1
        assert ev("(if #f 1 2)") == 2

    def test_binding_forms(self):
        assert ev("(let ((x 1) (y 2)) (+ x y))") == 3
        assert ev("(let* ((x 1) (y (+ x 1))) y)") == 2
        assert ev("""
            (letrec ((even? (lambda (n) (if (= n 0) #t (odd? (- n 1)))))
                     (odd? (lambda (n) (if (= n 0) #f (even? (- n 1))))))
              (even? 10))""") is True
        assert ev("(let loop ((i 0) (acc 0))"
                  " (if (= i 5) acc (loop (+ i 1) (+ acc i))))") == 10

    def test_define_and_lambda(self):
        assert ev("(define (inc n) (+ n 1)) (inc 41)") == 42
        assert ev("(define f (lambda (a b) (* a b))) (f 6 7)") == 42
        with pytest.raises(BuildError, match="arguments"):
            ev("((lambda (a) a) 1 2)")

    def test_letrec_use_before_init(self):
        with pytest.raises(BuildError, match="before initialization"):
            ev("(letrec ((a b) (b 1)) a)")

    def test_unbound_variable(self):
        with pytest.raises(BuildError, match="unbound variable: ghost"):
            ev("(+ ghost 1)")

    def test_error_builtin(self):
        with pytest.raises(BuildError, match="error: boom 3"):
            ev('(error "boom" (+ 1 2))')

    def test_getenv_reads_only_the_supplied_variables(self):
        os.environ["GEXPKIT_LEAK_PROBE"] = "visible"
        try:
            assert ev('(getenv "GEXPKIT_LEAK_PROBE")') is False
            assert ev('(getenv "X")', variables={"X": "1"}) == "1"
        finally:
            del os.environ["GEXPKIT_LEAK_PROBE"]

    def test_step_budget(self):
        with pytest.raises(BuildError, match="step budget"):
            ev("(let loop ((i 0)) (loop (+ i 1)))", step_budget=500)

    def test_deep_recursion_reported(self):
        with pytest.raises(BuildError, match="recursion|step budget"):
            ev("(define (down n) (if (= n 0) 0 (down (- n 1))))"
               " (down 100000)")

    def test_system_star_gated(self):
        with pytest.raises(BuildError, match="disabled"):
            ev('(system* "true")')

    def test_file_ops_resolve_against_base_dir(self, tmp_path):
        env = EvalEnv(base_dir=str(tmp_path))
        mini_eval(read_all('(write-file "f" "content")'), env)
        assert (tmp_path / "f").read_text() == "content"
        assert mini_eval(read('(read-file "f")'), env) == "content"
        assert mini_eval(read('(file-exists? "f")'), env) is True
        assert mini_eval(read('(file-exists? "g")'), env) is False

    def test_use_modules_chain(self, module_dir):
        value = mini_eval(
            read_all("(use-modules (demo util a)) (a-label)"),
            EvalEnv(module_path=(module_dir,)))
        assert value == "a+b+c"

    def test_use_modules_missing(self):
        with pytest.raises(BuildError, match="module not found"):
            ev("(use-modules (no such module))")


def simple_derivation(store, name, body=None):
    g = stage(read(body or f"""
        (begin
          (mkdir #$output)
          (write-file (string-append #$output "/tag") "{name}"))"""))
    return gexp_to_derivation(store, name, g)


def package_using(store, name, dep_pkg):
    g = stage(read("""
        (begin
          (mkdir #$output)
          (write-file (string-append #$output "/uses")
                      (read-file (string-append #$dep "/tag"))))"""),
              {"dep": dep_pkg})
    return gexp_to_derivation(store, name, g)


class TestPlan:
    def test_unbuilt_leaf(self, store):
        d = simple_derivation(store, "leaf")
        assert plan(store, d) == [write_derivation(store, d)]

    def test_built_leaf_planned_empty(self, store):
        d = simple_derivation(store, "leaf")
        build(store, d)
        assert plan(store, d) == []

    def test_dependencies_come_first(self, store):
        dep = Package("dep", "1", stage(read("""
            (begin (mkdir #$output)
                   (write-file (string-append #$output "/tag") "dep"))""")))
        d = package_using(store, "top", dep)
        order = [str(p) for p in plan(store, d)]
        assert len(order) == 2
        assert "dep-1.drv" in order[0]
        assert "top.drv" in order[1]

    def test_cycle_reported_as_corruption(self, store):
        a = simple_derivation(store, "aa")
        dep = Package("bb", "1", stage(read("""
            (begin (mkdir #$output)
                   (write-file (string-append #$output "/tag") "bb"))""")))
        top = package_using(store, "cc", dep)
        top_path = write_derivation(store, top)
        dep_path = top.input_drvs[0][0]
        # forge a cyclic edge: rewrite the dependency to require the top
        text = dep_path.fs.read_text()
        forged = text.replace(
            "(input-drvs)", f'(input-drvs ("{top_path}" "out"))')
        os.chmod(dep_path.fs, 0o644)
        dep_path.fs.write_text(forged)
        with pytest.raises(BuildError, match="cycle"):
            plan(store, top)


class TestBuild:
    def test_outputs_and_log(self, store):
        d = simple_derivation(store, "leaf")
        log = []
        outputs = build(store, d, log=log)
        assert (Path(str(outputs["out"])) / "tag").read_text() == "leaf"
        assert log == [("build", str(write_derivation(store, d)))]

    def test_second_build_is_cached(self, store):
        d = simple_derivation(store, "leaf")
        build(store, d)
        log = []
        build(store, d, log=log)
        assert log == [("cached", str(write_derivation(store, d)))]

    def test_dependency_chain_builds_and_caches(self, store):
        dep = Package("dep", "1", stage(read("""
            (begin (mkdir #$output)
                   (write-file (string-append #$output "/tag") "dep-tag"))""")))
        d = package_using(store, "top", dep)
        log = []
        outputs = build(store, d, log=log)
        assert [a for a, _ in log] == ["build", "build"]
        assert (Path(str(outputs["out"])) / "uses").read_text() == "dep-tag"
        log2 = []
        build(store, d, log=log2)
        assert [a for a, _ in log2] == ["cached", "cached"]

    def test_outputs_are_read_only(self, store):
        d = simple_derivation(store, "leaf")
        outputs = build(store, d)
        mode = os.stat(str(outputs["out"])).st_mode
        assert not mode & 0o222

    def test_missing_output_detected(self, store):
        d = simple_derivation(store, "lazy", body="(list 1 2)")
        with pytest.raises(BuildError, match="did not produce output"):
            build(store, d)

    def test_builder_failure_names_derivation(self, store):
        d = simple_derivation(store, "boom", body='(error "nope")')
        with pytest.raises(BuildError) as info:
            build(store, d)
        assert info.value.derivation == str(write_derivation(store, d))

    def test_failed_build_leaves_no_output(self, store):
        d = simple_derivation(store, "boom", body='(error "nope")')
        with pytest.raises(BuildError):
            build(store, d)
        assert not Path(str(d.outputs["out"])).exists()
        assert plan(store, d) == [write_derivation(store, d)]

    def test_builder_sees_system_and_tmpdir(self, store):
        d = simple_derivation(store, "probe", body="""
            (begin
              (mkdir #$output)
              (write-file (string-append #$output "/sys") (getenv "SYSTEM"))
              (write-file (string-append (getenv "TMPDIR") "/scratch") "x")
              (write-file (string-append #$output "/t")
                          (if (getenv "TARGET") (getenv "TARGET") "native")))""")
        outputs = build(store, d)
        out = Path(str(outputs["out"]))
        assert (out / "sys").read_text() == "x86_64-linux"
        assert (out / "t").read_text() == "native"

    def test_concurrent_independent_builds(self, store):
        first = simple_derivation(store, "one")
        second = simple_derivation(store, "two")
        errors = []

        def run(d):
            try:
                build(store, d)
            except Exception as exc:
                errors.append(exc)

        threads = [threading.Thread(target=run, args=(d,))
                   for d in (first, second)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert (Path(str(first.outputs["out"])) / "tag").read_text() == "one"
        assert (Path(str(second.outputs["out"])) / "tag").read_text() == "two"


class TestReproducibility:
    def test_two_stores_agree_byte_for_byte(self, tmp_path, monkeypatch):
        results = []
        for workdir in ("left", "right"):
            monkeypatch.chdir(tmp_path)
            (tmp_path / workdir).mkdir()
            monkeypatch.chdir(tmp_path / workdir)
            store = Store("./store")
            d = simple_derivation(store, "repro")
            outputs = build(store, d)
            out = Path(str(outputs["out"]))
            results.append((str(write_derivation(store, d)),
                            str(outputs["out"]),
                            sorted((p.name, p.read_bytes())
                                   for p in out.rglob("*") if p.is_file())))
        assert results[0] == results[1]
