from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="sigcam-lab",
    version="0.1.0",
    author="SigCAM Lab Team",
    description="Dual-branch sigmoid class activation mapping lab",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests", "examples", "examples.*"]),
    py_modules=["run_cli"],
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.8",
    install_requires=[
        'pyyaml>=6.0',
        'pandas>=2.0.0',
        'numpy>=1.24.0',
        'scikit-learn>=1.3.0',
        'scikit-image>=0.21.0'
    ],
    entry_points={
        'console_scripts': [
            'sigcam-cli=run_cli:main'
        ],
    },
)
