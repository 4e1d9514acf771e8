"""
Setup script for the RepAct toolkit
Installs the repact package and its command line tool.
"""

from setuptools import setup, find_packages

setup(
    name="repact",
    version="0.1.0",
    description="Re-parameterizable adaptive activation functions with a small numpy training stack",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.22",
    ],
    extras_require={
        "test": ["pytest"],
    },
    entry_points={
        "console_scripts": [
            "repact=repact.main:main",
        ]
    },
)
