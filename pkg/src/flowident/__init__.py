"""flowident: identifiable latent sequence models on a desk-scale budget.

Subpackages:

- ``autodiff``    reverse-mode tape over float64 numpy arrays
- ``process``     seeded ground-truth sequence simulator + assumption audits
- ``transition``  noise-history conditioned monotone flow / content mapper
- ``networks``    invertible decoder, free decoder, discriminators
- ``training``    exact-likelihood and adversarial backends
- ``evaluation``  matched-correlation and blockwise regression metrics
- ``config``      JSON run configuration schema
- ``runio``       binary dataset / checkpoint formats, run manifests
- ``cli``         command-line entry points (simulate / audit / train / ...)
"""

__version__ = "0.1.0"
