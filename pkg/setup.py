"""
trajaug
Offline trajectory augmentation with transformer world-model ensembles and uncertainty-corrected rewards.
"""
import sys
from setuptools import setup, find_packages

short_description = __doc__.split("\n")

# from https://github.com/pytest-dev/pytest-runner#conditional-requirement
needs_pytest = {'pytest', 'test', 'ptr'}.intersection(sys.argv)
pytest_runner = ['pytest-runner'] if needs_pytest else []

try:
    with open("README.md", "r") as handle:
        long_description = handle.read()
except IOError:
    long_description = "\n".join(short_description[2:])


setup(
    name='trajaug',
    description=short_description[0],
    long_description=long_description,
    long_description_content_type="text/markdown",
    version='0.1.0',
    license='MIT',

    packages=find_packages(),
    package_data={'trajaug': ['sample_data/*.yml', 'sample_data/experiments/*.json']},
    include_package_data=True,

    # Allows `setup.py test` to work correctly with pytest
    setup_requires=[] + pytest_runner,
    install_requires=['numpy', 'scipy', 'pandas', 'pyyaml'],
    entry_points={'console_scripts': ['trajaug=trajaug.cli:main']},
    python_requires=">=3.7",
    zip_safe=False,
)
