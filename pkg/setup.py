from setuptools import setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.strip() for line in fh if line.strip() and not line.startswith("#")]

setup(
    name="face-landmark-toolkit",
    version="1.1.0",
    author="Face Landmark Toolkit Team",
    author_email="dev@example.com",
    description="人脸关键点定位工具：五点对齐、热图编解码、上采样头规划与评估",
    long_description=long_description,
    long_description_content_type="text/markdown",
    py_modules=[
        "face_geometry",
        "heatmap_codec",
        "tensor_ops",
        "head_planner",
        "landmark_augmentation",
        "landmark_evaluation",
        "landmark_pipeline",
        "landmark_cli",
        "landmark_io",
        "landmark_errors",
        "log_utils",
        "pipeline_config",
        "demo_data_generator",
        "run",
    ],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
    ],
    python_requires=">=3.9",
    install_requires=requirements,
    extras_require={
        "torch": ["torch==2.0.1"],
    },
    entry_points={
        "console_scripts": [
            "landmark-toolkit=landmark_cli:main",
        ],
    },
)
