from setuptools import find_packages, setup

with open("README.md", "r", encoding="UTF-8") as f:
    long_description = f.read()

setup(
    name="hyperlab",
    version="0.1.0",
    description="Desk-scale lab for diagonal-scaling and low-rank fine-tuning adapters",
    long_description=long_description,
    long_description_content_type="text/markdown",
    classifiers=[
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    packages=find_packages(exclude=["tests"]),
    install_requires=["numpy>=1.24", "matplotlib>=3.7"],
    extras_require={"test": ["pytest>=7"]},
    entry_points={"console_scripts": ["hyperlab=hyperlab.main:main"]},
    python_requires=">=3.10",
)
