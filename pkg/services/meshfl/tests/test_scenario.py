import pytest
import yaml

from meshfl.config import TOPOLOGIES_DIR
from meshfl.errors import ConfigError
from meshfl.routing import PolicyKind
from meshfl.scenario import config_from_dict, deep_merge, list_presets, load_config, load_preset

SHIPPED = [
    "fig12_distributions",
    "fig13_scalability",
    "fig7_convergence",
    "fig8_stragglers",
    "hop_placement",
    "mobilenet",
]


def test_shipped_presets_are_listed():
    assert list_presets() == SHIPPED


@pytest.mark.parametrize("name", SHIPPED)
def test_every_preset_variant_and_protocol_validates(name):
    preset = load_preset(name)
    assert preset.description
    for variant in preset.variant_names:
        for protocol in preset.protocols:
            cfg = preset.config(variant, protocol)
            assert cfg.name == f"{name}-{variant}"
            assert cfg.protocol == protocol
            topo = cfg.build_topology()
            assert topo.router_of(cfg.fl.server) == cfg.fl.server_router
            assert len(cfg.fl.placements()) == cfg.fl.worker_count


def test_distribution_variants_place_nine_workers():
    preset = load_preset("fig12_distributions")
    counts = {}
    for variant in ("d333", "d252", "d243"):
        fl = preset.config(variant).fl
        counts[variant] = [count for _, count in fl.workers]
    assert counts == {"d333": [3, 3, 3], "d252": [2, 5, 2], "d243": [2, 4, 3]}
    assert not preset.config("d252").background
    assert len(preset.config("d252_congested").background) == 2


def test_scalability_sweep_grows_from_nine_to_fourteen_workers():
    preset = load_preset("fig13_scalability")
    sizes = [preset.config(f"w{k}").fl.worker_count for k in range(9, 15)]
    assert sizes == list(range(9, 15))
    plain, heavy = preset.config("w9").background, preset.config("w9_congested").background
    assert len(plain) == len(heavy) == 2
    assert heavy[0].rate_pps > plain[0].rate_pps


def test_straggler_preset_switches_rho_and_fraction():
    preset = load_preset("fig8_stragglers")
    plain, regularized = preset.config("rho0_s90"), preset.config("rho_s90")
    assert plain.fl.rho == 0.0 and regularized.fl.rho > 0
    assert plain.fl.stragglers.fraction == regularized.fl.stragglers.fraction == 0.9
    assert plain.data.partition == "dirichlet"


def test_mobilenet_preset_sends_seven_megabyte_updates():
    preset = load_preset("mobilenet")
    assert preset.protocols == ("baseline", "rl-softmax")
    for variant, workers in (("w6", 6), ("w9", 9)):
        cfg = preset.config(variant, "rl-softmax")
        assert cfg.fl.worker_count == workers
        assert cfg.fl.payload_bytes == 7_000_000 and cfg.fl.max_rounds == 70
        assert cfg.data.partition == "dirichlet" and cfg.data.dirichlet_beta == 0.5
        assert cfg.routing.hop_prior_ms == 1800


def test_reconstructed_topology_is_labelled():
    text = (TOPOLOGIES_DIR / "mesh10.yaml").read_text()
    assert "RECONSTRUCTED" in text
    assert len(yaml.safe_load(text)["routers"]) == 10


def test_workers_get_sequential_ids(tiny_config):
    assert tiny_config.fl.placements() == [("W1", "R4"), ("W2", "R4"), ("W3", "R2")]
    topo = tiny_config.build_topology()
    assert topo.router_of("W3") == "R2" and topo.router_of("SERVER") == "R1"


def test_routing_section_builds_policy(tiny_raw):
    tiny_raw["routing"].update(protocol="rl-softmax", tau=0.5)
    cfg = config_from_dict(tiny_raw)
    policy = cfg.routing.policy(cfg.seeds.rl)
    assert policy.kind is PolicyKind.SOFTMAX and policy.tau == 0.5 and policy.rng_seed == 7
    assert cfg.routing.is_rl


@pytest.mark.parametrize(
    "patch",
    [
        {"bogus": 1},
        {"fl": {"workers": {"R4": 1}, "learning_rate": 0.1}},
        {"routing": {"protocol": "ospf"}},
        {"routing": {"alpha": 0.0}},
        {"routing": {"hop_prior_ms": 0}},
        {"fl": {"workers": {"R9": 1}}},
        {"fl": {"workers": {"R4": 0}}},
        {"fl": {"model": "resnet"}},
        {"seeds": {"sim": -1}},
        {"data": {"partition": "shards"}},
        {"topology": {"hosts": {"W1": "R2"}}},
        {"background": [{"src": "nowhere", "dst": "SERVER", "rate_pps": 1}]},
        {"fl": {"stragglers": {"fraction": 2.0}}},
    ],
)
def test_invalid_scenarios_raise_config_errors(tiny_raw, patch):
    with pytest.raises(ConfigError):
        config_from_dict(deep_merge(tiny_raw, patch))


def test_fingerprint_ignores_routing_and_name(tiny_config):
    other = tiny_config.with_protocol("rl-softmax")
    assert other.fingerprint() == tiny_config.fingerprint()
    assert tiny_config.with_seed(99).fingerprint() != tiny_config.fingerprint()


def test_with_seed_overrides_every_seed(tiny_config):
    seeds = tiny_config.with_seed(42).seeds
    assert (seeds.sim, seeds.rl, seeds.data, seeds.model_init) == (42, 42, 42, 42)


def test_unknown_variant_and_preset(tmp_path):
    with pytest.raises(ConfigError):
        load_preset("fig7_convergence").config("nope")
    with pytest.raises(ConfigError):
        load_preset("fig99")


def test_load_config_from_file(tmp_path, tiny_raw):
    tiny_raw.pop("name")
    path = tmp_path / "square.yaml"
    path.write_text(yaml.safe_dump(tiny_raw))
    cfg = load_config(path)
    assert cfg.name == "square"
    assert cfg.fl.worker_count == 3


def test_topology_preset_reference(tiny_raw):
    raw = {**tiny_raw, "topology_preset": "mesh10", "topology": {}}
    raw["fl"] = {**tiny_raw["fl"], "workers": {"R9": 2}}
    cfg = config_from_dict(raw)
    assert len(cfg.build_topology().routers) == 10


def test_malformed_yaml(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("fl: [unclosed")
    with pytest.raises(ConfigError):
        load_config(path)


def test_deep_merge_keeps_untouched_keys():
    merged = deep_merge({"a": {"b": 1, "c": 2}, "d": [1]}, {"a": {"c": 3}, "d": [2]})
    assert merged == {"a": {"b": 1, "c": 3}, "d": [2]}
