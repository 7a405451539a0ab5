"""Frozen table of physical constants (CODATA 2018, SI units)."""

from dataclasses import dataclass, replace
import math


@dataclass(frozen=True)
class Constants:
    G: float = 6.67430e-11          # m^3 kg^-1 s^-2
    c: float = 299_792_458.0        # m/s
    hbar: float = 1.054571817e-34   # J s

    @property
    def planck_length(self) -> float:
        return math.sqrt(self.hbar * self.G / self.c**3)

    @property
    def planck_mass(self) -> float:
        return math.sqrt(self.hbar * self.c / self.G)

    def with_overrides(self, **kwargs) -> "Constants":
        return replace(self, **kwargs)

    def as_dict(self) -> dict:
        return {
            "G": self.G,
            "c": self.c,
            "hbar": self.hbar,
            "planck_length": self.planck_length,
            "planck_mass": self.planck_mass,
        }


CODATA = Constants()
G = CODATA.G
C_LIGHT = CODATA.c
HBAR = CODATA.hbar
PLANCK_LENGTH = CODATA.planck_length
PLANCK_MASS = CODATA.planck_mass
