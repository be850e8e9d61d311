from .cost import CostReport, count_params_macs

__all__ = ["CostReport", "count_params_macs"]
