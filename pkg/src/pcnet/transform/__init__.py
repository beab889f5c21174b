"""Input- and output-based transformations of trained networks."""
from pcnet.transform.apply import (
    TransformResult,
    apply_plan,
    collect_samples,
    effective_dims,
    planned_param_count,
    touched_layers,
    validate_plan,
)
from pcnet.transform.ops import (
    OutputSelection,
    input_transform_conv,
    input_transform_dense,
    output_transform,
    select_outputs,
    select_shared_outputs,
)
from pcnet.transform.plan import CONV4_PCN, DimConfig, LayerPlan, TransformPlan, load_plan, uniform_plan
from pcnet.transform.spaces import ChannelSpace, Consumer, channel_spaces

__all__ = [
    "CONV4_PCN", "ChannelSpace", "Consumer", "DimConfig", "LayerPlan", "OutputSelection", "TransformPlan",
    "TransformResult", "apply_plan", "channel_spaces", "collect_samples", "effective_dims",
    "input_transform_conv", "input_transform_dense", "load_plan", "output_transform",
    "planned_param_count", "select_outputs", "select_shared_outputs", "touched_layers", "uniform_plan", "validate_plan",
]
