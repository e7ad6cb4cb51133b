"""Builds the `herd` extension module by delegating to cargo.

The Rust crate lives in crates/py and produces a cdylib; this shim
compiles it in release mode and drops it where setuptools expects the
extension, so `pip install -e . --no-build-isolation` works without any
Rust-specific build backend.
"""

import shutil
import subprocess
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class CargoBuild(build_ext):
    def build_extension(self, ext):
        root = Path(__file__).parent.resolve()
        subprocess.run(
            [
                "cargo",
                "build",
                "--release",
                "-p",
                "herd-py",
                "--features",
                "extension-module",
            ],
            cwd=root,
            check=True,
        )
        built = root / "target" / "release" / "libherd.so"
        out = Path(self.get_ext_fullpath(ext.name))
        out.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(built, out)


setup(
    ext_modules=[Extension("herd", sources=[])],
    cmdclass={"build_ext": CargoBuild},
)
