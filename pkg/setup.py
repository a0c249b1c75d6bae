from setuptools import setup, find_packages
import ditparallel

setup(
    name='pyditparallel',
    version=ditparallel.__version__,
    description='Cost models, pipeline schedules and simulated execution of parallel Diffusion Transformer inference',
    install_requires=[
        'numpy>=1.22',
        'PyYAML>=5.4',
    ],
    packages=find_packages(exclude=['examples', 'examples.*']),
    package_data={
        'ditparallel': ['configs/*.yaml'],
    },
    entry_points={
        'console_scripts': [
            'ditparallel=ditparallel.cli:main',
        ],
    },
    test_suite='ditparallel.test',
    python_requires='>=3.9',
    license='Python',
    long_description=open('README.rst').read(),
    classifiers=[
        'Development Status :: 4 - Beta',
        'Intended Audience :: Developers',
        'Intended Audience :: Science/Research',
        'Operating System :: OS Independent',
        'Programming Language :: Python',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Programming Language :: Python :: 3.12',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'Topic :: Software Development :: Libraries',
        'Topic :: Software Development :: Libraries :: Python Modules',
        'Topic :: System :: Distributed Computing',
    ],
    keywords=['diffusion', 'DiT', 'transformer', 'inference', 'pipeline parallelism', 'sequence parallelism',
              'PipeFusion', 'DistriFusion', 'Ulysses', 'ring attention'],
)
