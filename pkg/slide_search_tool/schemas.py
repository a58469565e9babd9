from typing import Any

from schema import And, Optional, Schema, Use

TRUE_STRINGS = ("y", "yes", "t", "true", "on", "1")
FALSE_STRINGS = ("n", "no", "f", "false", "off", "0")


def to_bool(value: Any) -> bool:
    if isinstance(value, bool):
        return value
    lowered = str(value).strip().lower()
    if lowered in TRUE_STRINGS:
        return True
    if lowered in FALSE_STRINGS:
        return False
    raise ValueError(f"invalid truth value {value!r}")


NON_EMPTY_STRING = And(str, len)

TRAIN_CONFIG_SCHEMA = Schema(
    {
        Optional("batch_size"): And(
            Use(int), lambda n: n >= 2, error="batch_size must be an integer >= 2"
        ),
        Optional("lr"): And(Use(float), lambda x: x >= 0, error="lr must be >= 0"),
        Optional("weight_decay"): And(
            Use(float), lambda x: x >= 0, error="weight_decay must be >= 0"
        ),
        Optional("epochs"): And(Use(int), lambda n: n >= 1, error="epochs must be >= 1"),
        Optional("alpha"): And(Use(float), lambda x: x >= 0, error="alpha must be >= 0"),
        Optional("seed"): And(
            Use(int), lambda n: 0 <= n < 2**64, error="seed must be an unsigned 64-bit integer"
        ),
        Optional("m"): And(Use(int), lambda n: n >= 1, error="m must be >= 1"),
        Optional("hidden_dim"): And(Use(int), lambda n: n >= 1, error="hidden_dim must be >= 1"),
        Optional("normalize_mosaics_for_ld"): Use(to_bool),
        Optional("abs_diversity"): Use(to_bool),
        Optional("use_projection"): Use(to_bool),
        Optional("val_fraction"): And(
            Use(float), lambda x: 0 <= x < 1, error="val_fraction must be in [0, 1)"
        ),
    }
)

MANIFEST_ROW_SCHEMA = Schema(
    {
        "slide_id": NON_EMPTY_STRING,
        "label": str,
        "report": str,
        "path": NON_EMPTY_STRING,
    }
)

RANKING_ROW_SCHEMA = Schema(
    {
        "query_id": NON_EMPTY_STRING,
        "query_label": NON_EMPTY_STRING,
        "rank": And(Use(int), lambda n: n >= 1),
        "candidate_label": NON_EMPTY_STRING,
    },
    ignore_extra_keys=True,
)
