#!/usr/bin/env python

import io
from setuptools import find_packages, setup

setup(
    name='affectlib',
    version='1.0',
    packages=find_packages(exclude=['tests']),
    package_data={'affectlib': ['data/face_topology.txt']},
    python_requires='>=3.8',
    install_requires=[
        'matplotlib',
        'numpy',
        'opencv-python-headless',
        'pandas',
        'PyYAML',
        'scipy>=1.8',
        'torch',
        'torch_geometric',
        'torchvision',
        'tqdm',
    ],
    extras_require={
        # The real face backends; without them only --backend stub works.
        'faces': ['facenet-pytorch', 'face_recognition', 'mediapipe'],
    },
    scripts=['affect.py'],
    description='Emotion recognition from face crops and facial landmarks',
    long_description='\n' + io.open('README.md', encoding='utf-8').read(),
)
