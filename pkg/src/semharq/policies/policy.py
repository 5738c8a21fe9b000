def policy_registry(cls):
    """
    A decorator function to register retransmission policies.
    Registers the class under its ``kind`` attribute.
    """
    policy_registry.items[cls.kind] = cls
    return cls


# Initialize the registry to store policies
policy_registry.items = {}


@policy_registry
class Policy:
    r"""
    Base class for all retransmission decision rules.

    A policy looks at the record of the initial round and returns 1 to send a
    NAK and trigger the retransmission round, 0 to accept the reconstruction.

    Parameters
    ----------
    **kwargs : dict
        Arbitrary keyword arguments that will be assigned as attributes to the policy.

    Attributes
    ----------
    kind : str
        Registry key, also used as the ``policy`` column of result tables.
    """

    kind = "base"

    def __init__(self, **kwargs):
        r"""Initialize the policy with given parameters."""
        self.__dict__.update(kwargs)

    def __repr__(self):
        return f"{self.__class__.__name__}({self.label!r})"

    @property
    def label(self):
        """Name of the policy in result tables."""
        return getattr(self, "name", None) or self.kind

    def decide(self, record, rng):
        r"""
        Decide on the retransmission of one sample.

        This method should be implemented by child classes.

        Parameters
        ----------
        record : semharq.harq.protocol.TransmissionRecord
            Record of the initial round.
        rng : numpy.random.Generator
            Stream reserved for the decision.

        Returns
        -------
        int
            0 to accept, 1 to retransmit.
        """
        raise NotImplementedError(f"Policy '{self.kind}' does not implement decide().")


def make_policy(kind, **kwargs):
    """
    Instantiate a registered policy.

    Raises
    ------
    KeyError
        If ``kind`` is not registered.
    """
    policy_class = policy_registry.items.get(kind)
    if policy_class is None or policy_class is Policy:
        raise KeyError(f"Policy kind '{kind}' is not registered. Available: {available_policies()}.")
    return policy_class(**kwargs)


def available_policies():
    return sorted(k for k in policy_registry.items if k != Policy.kind)
