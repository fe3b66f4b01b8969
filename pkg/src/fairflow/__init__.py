"""FairFlow: desk-scale debiasing via perturbation branches and undecided learning."""

__version__ = "0.1.0"
