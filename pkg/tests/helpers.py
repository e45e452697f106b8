from fractions import Fraction

from tesspay.core import Amount, keygen


def manifest(rng, agent_id="shopper", **kw):
    from tesspay.identity import AgentManifest

    fields = dict(
        agent_id=agent_id,
        domain_name=f"{agent_id}.agents.test",
        owner_pk=keygen(rng).public_key,
        capabilities=["shopping"],
        endpoint_ref=f"sim://{agent_id}",
        declared_cost=Amount(300),
        declared_success_rate=Fraction(9, 10),
        system_prompt="buy what is in the cart",
        tool_config=["checkout"],
        version="1.0",
    )
    fields.update(kw)
    return AgentManifest(**fields)


def raw_scenario(name="ecommerce", behavior=None, **overrides):
    """Shipped scenario as a plain dict, optionally with every agent set to ``behavior``."""
    import json

    from tesspay.gateway import scenario_path

    raw = json.loads(scenario_path(name).read_text())
    if behavior is not None:
        for a in raw["agents"]:
            a["behavior"] = behavior
    raw.update(overrides)
    return raw


def config(name="ecommerce", behavior=None, **overrides):
    from tesspay.gateway import parse_config

    return parse_config(raw_scenario(name, behavior, **overrides))
