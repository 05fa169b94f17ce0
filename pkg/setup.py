from setuptools import setup, find_packages
import pathlib

here = pathlib.Path(__file__).parent.resolve()

long_description = (here / 'README.md').read_text(encoding='utf-8')
VERSION = (here / 'RELEASE-VERSION.txt').read_text(encoding='utf-8')[:-1]

if not VERSION:
    raise ValueError("Unable to read the version from RELEASE-VERSION.txt")

setup(
    name='pyfedattn',
    python_requires='>=3.9, <4',
    packages=find_packages(exclude=['tests', 'tests.*', 'examples', 'examples.*']),
    version=VERSION,
    license='APACHE 2.0',
    description='Deterministic simulator of federated attention against the centralized forward',
    long_description=long_description,
    long_description_content_type='text/markdown',
    install_requires=[
        'aws-lambda-powertools',
        'pydantic>=1.10,<2',
        'typing_extensions',
        'numpy'
    ],
    entry_points={
        'console_scripts': ['pyfedattn=pyfedattn.cli:main'],
    },
    keywords=['Federated', 'Attention', 'Transformer', 'Simulation'],
    classifiers=[
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        "Programming Language :: Python :: 3",
        'License :: OSI Approved :: Apache Software License',
        "Operating System :: OS Independent",
    ],
)
