"""Python `setup.py` for `vprtk` package. Adapted from https://github.com/rochacbruno/python-project-template/blob/main/setup.py."""
import os
from setuptools import setup, find_packages
from vprtk import __version__

loc = os.path.abspath(os.path.dirname(__file__))


def get_requirements():
    """Reads requirements.txt and returns the packages."""
    with open(os.path.join(loc, "requirements.txt")) as f:
        requirements = f.read().splitlines()
    return [r for r in requirements if r and not r.startswith("git+")]


requirements = get_requirements()
setup(
    version=__version__,
    description="Two-stage visual place recognition with a parameter-efficiently adapted ViT backbone.",
    name="vprtk",
    entry_points={
        "console_scripts": [
            "vprtk=scripts.run_vpr:main",
        ],
    },
    long_description=open(os.path.join(loc, "README.md")).read(),
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "examples", "examples.*"]),
    install_requires=requirements,
    scripts=["./scripts/run_vpr.py"],
)
