from setuptools import setup

setup(
    name='pevsched',
    version='1',
    description='Offline optimal and online PEV charging schedules',
    packages=['pevsched'],
    install_requires=[
        'numpy',
        'networkx',
        'pandas',
        'pytest',
        'sphinx',
        'sphinx_rtd_theme'],
    entry_points={
        'console_scripts': ['pevsched=pevsched.cli:run']},
    zip_safe=False)
