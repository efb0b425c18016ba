"""Pipeline subcommands and the on-disk artifact formats they share.

Import-light on purpose: `main` pins BLAS thread pools before numpy loads,
so this package module must not pull numpy in first.
"""
