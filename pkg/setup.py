from setuptools import find_packages, setup

setup(
    name='src',
    packages=find_packages(exclude=['tests']),
    version='0.1.0',
    description='Loss-based sensitivity regularization and loss-bounded magnitude pruning',
    author='saiboxx',
    license='MIT',
    install_requires=['numpy', 'torch', 'tensorboard', 'tqdm', 'pyyaml'],
    entry_points={
        'console_scripts': ['lobster=src.lobster.cli:main'],
    },
)
