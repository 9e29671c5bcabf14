"""Named errors raised by certification and solving pipelines."""


class NpmpcError(Exception):
    """Base class for package-specific failures."""


class NotOneStepFeasible(NpmpcError):
    """A (state, control) pair violates the one-step feasibility definition."""


class Assumption3Violated(NpmpcError):
    """A conservative problem instance is infeasible where feasibility was assumed."""


class GammaLfConditionFailed(NpmpcError):
    """The regularization rule requires gamma * L_f < 1."""


class EtaTooSmall(NpmpcError):
    """Gap translation requires eta > L * eps."""


class BetaEtaEpsIncompatible(NpmpcError):
    """The sampling radius formula requires beta * (eta - L*eps) > L*eps."""
