"""Per-unit bases.

AC time signals are normalized by *peak* bases, so a balanced fundamental of
230 V-RMS reads ``v(t) = cos(w0 t)`` and has double-sided coefficient
``X_1 = 0.5`` (single-sided magnitude 1.0 p.u.).  AC impedances use the
per-phase convention ``Z_b = V_b**2 / (P_b / 3)``.  Three-phase power in
p.u. is ``p(t) = (2/3) * sum_p v_p(t) i_p(t)``.

DC signals use ``V_b_dc`` and ``I_b_dc = P_b / V_b_dc`` directly; DC power is
``p(t) = v(t) i(t)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class Bases:
    P_b: float = 50e3
    V_b_ac: float = 230.0
    V_b_dc: float = 900.0
    f0: float = 50.0

    @property
    def z_ac(self) -> float:
        return self.V_b_ac ** 2 / (self.P_b / 3.0)

    @property
    def v_ac_peak(self) -> float:
        return math.sqrt(2.0) * self.V_b_ac

    @property
    def i_ac_peak(self) -> float:
        return math.sqrt(2.0) * (self.P_b / 3.0) / self.V_b_ac

    @property
    def z_dc(self) -> float:
        return self.V_b_dc ** 2 / self.P_b

    @property
    def i_dc(self) -> float:
        return self.P_b / self.V_b_dc

    def z(self, kind: str) -> float:
        return self.z_ac if kind == "AC" else self.z_dc

    def signal_base(self, kind: str, quantity: str) -> float:
        """Scale from p.u. to SI (peak for AC) for ``quantity`` in {'V', 'I'}."""
        if kind == "AC":
            return self.v_ac_peak if quantity == "V" else self.i_ac_peak
        return self.V_b_dc if quantity == "V" else self.i_dc
