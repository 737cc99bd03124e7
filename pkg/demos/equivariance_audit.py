"""Audit every model variant for shift equivariance with circular padding.

With circular padding all convolutions commute exactly with circular shifts, so
any node that breaks equivariance does so because of its design rather than
because of border effects. The two GAP-carrying variants are the ones that
should light up.

    python demos/equivariance_audit.py
"""
import numpy as np

from pylonloc.equivariance import AuditConfig, audit_model
from pylonloc.models import VARIANTS, PylonConfig, build_variant


def main():
    cfg = AuditConfig(n_trials=4)
    print(f"{'variant':20s} {'heatmap err':>12s}  flagged nodes")
    for kind in VARIANTS:
        model = build_variant(kind, pylon_cfg=PylonConfig(decoder_channels=32, norm_groups=8),
                              pad_mode="circular", dtype=np.float64)
        rep = audit_model(model, cfg)
        flagged = ", ".join(rep.flagged()) or "-"
        print(f"{kind:20s} {rep.row('heatmap').equivariance_max:12.2e}  {flagged}")


if __name__ == "__main__":
    main()
