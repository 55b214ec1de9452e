"""Simulation toolkit for motionally averaged room-temperature
atomic-ensemble quantum memories.

Modules
-------
``motion``
    Monte Carlo atomic trajectories in a microcell (wall models,
    optional coating trap time, deterministic per-atom seeding).
``correlations``
    Light-atom coupling correlation functions along trajectories and
    exponential decay-rate fits.
``write``
    Heralded write stage: closed-form and semianalytic efficiencies,
    Faddeeva-based line shapes, optical depth, classical-photon budget.
``spectrum``
    Finite-window scattered-light power spectra and photon counting.
``readout``
    Cavity-assisted retrieval: averaged couplings, efficiency with
    motional corrections, incoherent-background probability, and the
    finesse / cavity-detuning optimizer.
``repeater``
    Rate and fidelity algebra for entanglement distribution chains.
``config`` / ``cli``
    Shared configuration format and the command-line front end.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
