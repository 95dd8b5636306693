from mope.workbench.cli import run

run()
