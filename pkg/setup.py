from setuptools import setup, find_packages

setup(
    name='craniopy',
    version='0.1.0',
    description='Cross-modal landmark-graph matching for skull-to-face and sketch-to-face retrieval',
    packages=find_packages(exclude=['examples', 'examples.*']),
    install_requires=[
        'rich',
        'voluptuous',
        'numpy',
        'torch',
        'Pillow',
        'scikit-learn',
    ],
    extras_require={
        'test': ['pytest'],
    },
    entry_points={
        'console_scripts': [
            'craniopy=craniopy.__main__:run',
        ],
    },
    classifiers=[
        'Programming Language :: Python :: 3',
        'License :: OSI Approved :: MIT License',
        'Operating System :: OS Independent',
    ],
    python_requires='>=3.10',
)
