"""Normal-vs-abnormal chest radiograph screening with a numpy autodiff network,
patient-grouped cross-validation and precision-first threshold selection."""

__version__ = "0.1.0"
