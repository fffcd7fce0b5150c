"""
Additional start delay and shed amount on the Case 2 line network.

A delay between discovery and the first shedding iteration lets frequency
fall further.  Short delays are absorbed by the generator ramp, long ones
push frequency to the safety threshold, after which the relay disconnects
the full outstanding deficit at once.

    python3 demos/delay_study.py [deficit_kW]
"""

import sys

from microshed.config import bundled_scenario
from microshed.engine import run_scenario

deficit = float(sys.argv[1]) if len(sys.argv) > 1 else 150.0
base = bundled_scenario("case2").replace(**{"fault.deficit": deficit})

print(f"case2, deficit {deficit:.0f} kW\n")
print(f"{'t_ad [ms]':>10}{'shed [kW]':>11}{'f_min [Hz]':>12}{'safety':>8}{'iters':>7}")
for t_ad in (0.0, 0.1, 0.2, 0.4, 0.6, 0.8):
    s = run_scenario(base.replace(**{"dlss.t_ad": t_ad})).summary
    print(f"{t_ad * 1e3:>10.0f}{s['shed_total']:>11.0f}{s['f_min']:>12.3f}"
          f"{'yes' if s['safety_fired'] else 'no':>8}{s['dlss_iterations']:>7}")
