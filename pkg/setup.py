from setuptools import find_packages, setup

with open("README.md", "r") as readme:
    long_description = readme.read()

setup(
    name="temporal_lattice",
    version="0.3.0",
    description="Recurrent permutohedral lattice networks for semantic segmentation of point cloud sequences.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests"]),
    include_package_data=True,
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
    ],
    keywords=[
        "point-cloud",
        "lidar",
        "semantic-segmentation",
        "permutohedral-lattice",
        "recurrent",
        "semantickitti",
        "python",
    ],
    python_requires=">=3.9",
    install_requires=[
        "numpy >= 1.24",
        "loguru >= 0.7.3",
        "pydantic >= 2.0",  # Configs, manifests and reports
        "click >= 8.0",  # For the CLI
        "tqdm >= 4.66",  # Progress bars for training and inference
    ],
    extras_require={
        "dev": [
            "beartype >= 0.20.2",  # Optional runtime type checking
            "pytest >= 8.3.4",
            "build >= 1.2.2.post1",
            "twine >= 6.1.0",
            "bumpver >= 2024.1130",
        ],
    },
    entry_points={
        "console_scripts": [
            "temporal-lattice=temporal_lattice.__main__:cli",
        ],
    },
)
