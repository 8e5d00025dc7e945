import glob

from setuptools import setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="parablock",
    version="0.1.0",
    description="Parallel-block transformer training recipe at desk scale: data pipeline, staged curriculum, VLM extension",
    long_description=long_description,
    long_description_content_type="text/markdown",
    py_modules=[
        "app", "checkpointing", "config", "conversation_trees", "corpus_filters", "model_core",
        "optim_schedule", "run_reports", "sequence_packing", "substring_dedup", "synthetic_data",
        "tensor_core", "tokenizer", "trainer", "vlm_extension",
    ],
    data_files=[("rules", sorted(glob.glob("rules/*.json"))),
                ("plans", sorted(glob.glob("plans/*.json")))],
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
    python_requires=">=3.9",
    install_requires=requirements,
    extras_require={"dev": ["pytest>=7.0"]},
    entry_points={
        "console_scripts": [
            "parablock=app:main",
        ],
    },
)
