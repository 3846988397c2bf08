"""Print parameter counts of the default configs and the width-doubling ratio."""
from dataclasses import replace

from s4se.config import s4nd_default, tf_default, time_default
from s4se.nn import build_model, count_params

for name, cfg in [("s4nd_unet", s4nd_default()), ("time_s4_unet", time_default()),
                  ("tf_s4_unet", tf_default())]:
    print(f"{name:14s} {count_params(build_model(cfg)):>12,d}")

base = s4nd_default()
n1 = count_params(build_model(base))
n2 = count_params(build_model(replace(base, base_channels=2 * base.base_channels)))
print(f"s4nd_unet width x2: {n2:,d} ({n2 / n1:.2f}x)")
print(base.to_dict())
