""" The gcsim package setup.
Based on setuptools
"""

from setuptools import setup

with open('README.md', encoding='utf-8') as f:
    long_description = f.read()

setup(
    name='gcsim',
    version='2026.10.17',
    description='Group key management schemes (LKH, complete subtree) with PRF key evolution, and an attack harness',
    long_description=long_description,
    long_description_content_type='text/markdown',
    author='gcsim developers',
    license='MIT',
    keywords='group key management LKH broadcast encryption key evolution',
    packages=['gcsim'],
    python_requires='>=3.7',
    install_requires=[
        'numpy',
        'pandas',
        'anytree',
        'cryptography'],
    extras_require={'test': ['pytest']},
    entry_points={'console_scripts': ['gcsim=gcsim.cli:main']},
    package_data={'gcsim': ['data/*.scn']},
    include_package_data=True
)
