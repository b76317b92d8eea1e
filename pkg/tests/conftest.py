import json
from pathlib import Path

import pytest

from gexpkit import Store

GOLDEN_DIR = Path(__file__).parent / "golden"
FIXTURE_DIR = Path(__file__).parent / "fixtures"

IMAGE_BYTES = b"mock-png:GuixSD\n"
CONVERT_TEXT = "convert-6.9\n"
JPG_BYTES = b"convert-6.9\n-quality=75%:mock-png:GuixSD\n"

# A mock package manager scenario: a "compiler" package whose output is
# a data file, and a deployment whose builder applies it to an image.
DEPLOY_IMAGE = """\
; resize an image with a mock converter
(define-package imagemagick
  (package
    (name "imagemagick")
    (version "6.9")
    (build #~(begin
               (mkdir #$output)
               (mkdir (string-append #$output "/bin"))
               (write-file (string-append #$output "/bin/convert")
                           "convert-6.9\\n")))))

(define image (local-file "image.png"))

#~(begin
    (mkdir #$output)
    (write-file (string-append #$output "/image.jpg")
                (string-append
                  (read-file (string-append #$imagemagick "/bin/convert"))
                  "-quality=75%:"
                  (read-file #$image))))
"""


@pytest.fixture
def golden_paths():
    return json.loads((GOLDEN_DIR / "paths.json").read_text())


@pytest.fixture
def golden_drv_text():
    return (GOLDEN_DIR / "golden-example.drv").read_text()


@pytest.fixture
def module_dir():
    return str(FIXTURE_DIR / "modules")


@pytest.fixture
def scratch(tmp_path, monkeypatch):
    """Run from a scratch directory so the default relative ./store
    prefix lands somewhere disposable."""
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def store(scratch):
    return Store("./store")


def write_image_deployment(directory: Path, deploy_text: str = DEPLOY_IMAGE,
                           image_bytes: bytes = IMAGE_BYTES) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "image.png").write_bytes(image_bytes)
    deploy = directory / "deploy.scm"
    deploy.write_text(deploy_text)
    return deploy


@pytest.fixture
def image_deployment(scratch):
    return write_image_deployment(scratch)
