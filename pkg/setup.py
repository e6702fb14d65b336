from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="voxfuse",
    version="0.1.0",
    author="voxfuse developers",
    description="Multi-depth unprojection and gated modality-aware voxel fusion of LiDAR and camera data",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests"]),
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.8",
        "tomli>=2.0; python_version < '3.11'",
    ],
    extras_require={
        "dev": ["pytest>=7.0.0", "pytest-cov>=4.0", "hypothesis>=6.0"],
    },
    entry_points={
        "console_scripts": [
            "voxfuse=src.cli:main",
        ],
    },
)
