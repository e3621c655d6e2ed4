from setuptools import setup, find_packages

setup(
    name='drotree',
    version='0.1',
    packages=find_packages(exclude=['examples', 'examples.*']),
    package_data={'drotree': ['testing_data/*.json']},
    description='Multistage distributionally robust optimization with total-variation ambiguity and scenario effectiveness',
    long_description=open('README.md').read(),
    long_description_content_type='text/markdown',
    install_requires=[
        'numpy',
        'networkx',
        'lark',
        'pandas >= 1.5',
        'absl-py'
    ],
    extras_require={
        'test': ['hypothesis'],
    },
    tests_require=['hypothesis'],
    entry_points={
        'console_scripts': ['drotree=drotree.main:main'],
    },
)
