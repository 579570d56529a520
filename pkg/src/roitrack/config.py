"""Flat ``key=value`` configuration files.

Keys are prefixed by the component they configure (``net.``, ``pretrain.``,
``tracker.``, ``synth.``, ``suite.``). Blank lines and ``#`` comments are
ignored. A ``<prefix>.preset`` key (``full`` or ``toy``) selects a base
configuration before the other keys of that prefix are applied.
:func:`default_config_text` lists every key with its default.
"""
from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .backbone import BackboneConfig, Variant
from .errors import ConfigError
from .eval_harness.synthetic import SyntheticSpec
from .network import NetworkConfig
from .pretrain import PretrainConfig
from .roi_extract import PoolingMode
from .tracker import TrackerConfig

NET_KEYS = {
    "variant": "dense or original backbone",
    "pooling": "roipool, roialign or adaptive",
    "roi_out": "RoI grid side before the 3x3/2 max pool",
    "sampling_ratio": "interpolation samples per output cell and axis",
    "fc_width": "width of fc4 and fc5",
    "dropout": "dropout rate on fc4/fc5 outputs during pretraining",
    "margin": "crop context in network-input pixels (empty = node-0 offset)",
    "channels": "conv1,conv2,conv3 output channels",
    "input_side": "target side after rescaling, in pixels",
    "use_lrn": "local response normalisation after conv1 and conv2",
    "init_gain": "scale of the random conv initialisation",
    "dtype": "backbone arithmetic type",
}
_SKIP = {"pos_proposal", "neg_proposal"}


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if not k:
            raise ConfigError(f"line {n}: empty key")
        out[k] = v.strip()
    return out


def read_config(path) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_text(p.read_text())


def _convert(value: str, default, key: str):
    try:
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            parts = [p for p in value.replace(" ", "").split(",") if p]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
        if default is None:
            if value == "":
                return None
            return float(value) if any(c in value for c in ".e") else int(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


def _section(cfg: dict[str, str], prefix: str) -> dict[str, str]:
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def _apply(obj_cls, base, values: dict[str, str], prefix: str, extra=()):
    known = {f.name: f for f in fields(obj_cls) if f.name not in _SKIP}
    kw = {}
    for k, v in values.items():
        if k == "preset" or k in extra:
            continue
        if k not in known:
            raise ConfigError(f"unknown key {prefix}.{k}")
        kw[k] = _convert(v, getattr(base, k), f"{prefix}.{k}")
    return kw


def network_config(cfg: dict[str, str]) -> NetworkConfig:
    sec = _section(cfg, "net")
    preset = _preset(sec, "net")
    base = NetworkConfig.full() if preset == "full" else NetworkConfig.toy()
    bkw, nkw = {}, {}
    for k, v in sec.items():
        if k == "preset":
            continue
        if k not in NET_KEYS:
            raise ConfigError(f"unknown key net.{k}")
        if k == "variant":
            try:
                bkw[k] = Variant(v)
            except ValueError:
                raise ConfigError(f"net.variant: unknown variant {v!r}") from None
        elif k == "pooling":
            try:
                nkw[k] = PoolingMode(v)
            except ValueError:
                raise ConfigError(f"net.pooling: unknown mode {v!r}") from None
        elif k == "roi_out":
            side = _convert(v, 7, "net.roi_out")
            nkw[k] = (side, side)
        elif k in ("channels", "input_side", "use_lrn", "init_gain", "dtype"):
            bkw[k] = _convert(v, getattr(base.backbone, k), f"net.{k}")
        else:
            nkw[k] = _convert(v, getattr(base, k), f"net.{k}")
    backbone = BackboneConfig(**{**{f.name: getattr(base.backbone, f.name) for f in fields(BackboneConfig)}, **bkw})
    return NetworkConfig(**{**{f.name: getattr(base, f.name) for f in fields(NetworkConfig)},
                            "backbone": backbone, **nkw})


def _preset(sec: dict[str, str], prefix: str) -> str:
    preset = sec.get("preset", "full")
    if preset not in ("full", "toy"):
        raise ConfigError(f"{prefix}.preset must be full or toy, got {preset!r}")
    return preset


def pretrain_config(cfg: dict[str, str]) -> PretrainConfig:
    sec = _section(cfg, "pretrain")
    preset = _preset(sec, "pretrain")
    base = PretrainConfig() if preset == "full" else PretrainConfig.toy()
    kw = _apply(PretrainConfig, base, sec, "pretrain")
    return base.with_(**kw)


def tracker_config(cfg: dict[str, str]) -> TrackerConfig:
    sec = _section(cfg, "tracker")
    preset = _preset(sec, "tracker")
    base = TrackerConfig() if preset == "full" else TrackerConfig.toy()
    kw = _apply(TrackerConfig, base, sec, "tracker")
    return base.with_(**kw)


def synthetic_spec(cfg: dict[str, str]) -> SyntheticSpec:
    sec = _section(cfg, "synth") or dict(cfg)
    base = SyntheticSpec()
    kw = _apply(SyntheticSpec, base, sec, "synth", extra=("seed", "name", "start", "target_colour"))
    for k in ("start", "target_colour"):
        if sec.get(k):
            kw[k] = _convert(sec[k], (0.0,), f"synth.{k}")
    try:
        return SyntheticSpec(**{**{f.name: getattr(base, f.name) for f in fields(SyntheticSpec)}, **kw})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _lines(prefix: str, obj, docs: dict | None = None) -> list[str]:
    out = []
    for f in fields(obj):
        if f.name in _SKIP:
            continue
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = ""
        elif hasattr(v, "value"):
            v = v.value
        note = f"  # {docs[f.name]}" if docs and f.name in docs else ""
        out.append(f"{prefix}.{f.name}={v}{note}")
    return out


def default_config_text() -> str:
    """Every key with its default value."""
    net = NetworkConfig.full()
    lines = ["# network", "net.preset=full  # full or toy"]
    lines.append(f"net.variant={net.backbone.variant.value}  # {NET_KEYS['variant']}")
    lines.append(f"net.pooling={net.pooling.value}  # {NET_KEYS['pooling']}")
    lines.append(f"net.roi_out={net.roi_out[0]}  # {NET_KEYS['roi_out']}")
    for k in ("sampling_ratio", "fc_width", "dropout"):
        lines.append(f"net.{k}={getattr(net, k)}  # {NET_KEYS[k]}")
    lines.append(f"net.margin=  # {NET_KEYS['margin']}")
    lines.append(f"net.channels={','.join(map(str, net.backbone.channels))}  # {NET_KEYS['channels']}")
    for k in ("input_side", "use_lrn", "init_gain", "dtype"):
        lines.append(f"net.{k}={getattr(net.backbone, k)}  # {NET_KEYS[k]}")
    lines += ["", "# offline pretraining", "pretrain.preset=full  # full or toy"]
    lines += _lines("pretrain", PretrainConfig())
    lines += ["", "# online tracking", "tracker.preset=full  # full or toy"]
    lines += _lines("tracker", TrackerConfig())
    return "\n".join(lines) + "\n"


def synth_default_text() -> str:
    return "\n".join(_lines("synth", SyntheticSpec())) + "\n"
