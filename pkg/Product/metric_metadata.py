# Acceptance gates checked against evaluation reports
GATE_METADATA = {
    "G1_cluster_separation": {
        "name": "Variation Cluster Separation",
        "kind": "disentanglement",
        "metric": "cluster.ratio",
        "comparison": "lt",
        "threshold": 0.2,
        "description": "Latent variations grouped by executed action form tight, well separated clusters.",
        "user_explanation_template": "Within/between ratio W/B is {value} (needs < {threshold}) over {n_clusters} clusters.",
    },

    "G2_redundant_merge": {
        "name": "Redundant Action Merge",
        "kind": "disentanglement",
        "metric": "cluster.redundant_distance_fraction",
        "comparison": "lt",
        "threshold": 0.2,
        "description": "Two actions with the same effect land on the same factor.",
        "user_explanation_template": "Centroid distance between up and up2 is {value} of B (needs < {threshold}).",
    },

    "G3_latent_grid": {
        "name": "Latent Grid Structure",
        "kind": "representation",
        "metric": "latent_grid.min_r2",
        "comparison": "gt",
        "threshold": 0.9,
        "description": "An affine map from agent coordinates explains every latent coordinate.",
        "user_explanation_template": "Smallest affine R^2 from (x, y) to a latent is {value} (needs > {threshold}).",
    },

    "G4_feature_recovery": {
        "name": "Ground-Truth Feature Recovery",
        "kind": "representation",
        "metric": "feature_recovery.min_best_spearman",
        "comparison": "gt",
        "threshold": 0.9,
        "description": "Every ground-truth coordinate is tracked almost monotonically by some latent.",
        "user_explanation_template": "Weakest feature reaches |Spearman| {value} (needs > {threshold}).",
    },

    "G5_bound_validity": {
        "name": "Variational Bound Validity",
        "kind": "information",
        "metric": "bound_gap.holds",
        "comparison": "true",
        "threshold": True,
        "description": "The sampled selectivity bound does not exceed the exact conditional MI by more than 3 SE.",
        "user_explanation_template": "Estimate {estimate} vs exact {oracle} (SE {se}).",
    },

    "G6_plan_success": {
        "name": "Short-Horizon Planning",
        "kind": "planning",
        "metric": "planning.success_rate",
        "comparison": "ge",
        "threshold": 1.0,
        "description": "Decomposed plans reach the goal for all start/goal pairs within a few moves.",
        "user_explanation_template": "{value} of {pairs} start/goal pairs reached (needs {threshold}).",
    },
}


def get_gate_explanation(gate_id: str, context: dict = None) -> str:
    """
    Get human-readable explanation for a gate

    Args:
        gate_id: Gate identifier (e.g., "G1_cluster_separation")
        context: Optional dict with values to fill template

    Returns:
        Human-readable explanation string
    """
    if gate_id not in GATE_METADATA:
        return f"Unknown gate: {gate_id}"

    metadata = GATE_METADATA[gate_id]

    if context and "user_explanation_template" in metadata:
        try:
            return metadata["user_explanation_template"].format(threshold=metadata["threshold"], **context)
        except KeyError:
            return metadata["description"]

    return metadata["description"]


def get_gates_by_kind(kind: str) -> dict:
    return {
        gid: metadata
        for gid, metadata in GATE_METADATA.items()
        if metadata["kind"] == kind
    }


def _lookup(metrics: dict, dotted: str):
    value = metrics
    for part in dotted.split("."):
        if not isinstance(value, dict) or part not in value:
            return None
        value = value[part]
    return value


def _passes(value, comparison: str, threshold) -> bool:
    if comparison == "true":
        return bool(value)
    if comparison == "lt":
        return value < threshold
    if comparison == "gt":
        return value > threshold
    if comparison == "ge":
        return value >= threshold
    raise ValueError(f"unknown comparison '{comparison}'")


def evaluate_gates(metrics: dict) -> list:
    """
    Check every gate whose metric is present in `metrics`

    Args:
        metrics: nested report, e.g. {"cluster": {"ratio": 0.1, ...}, ...}

    Returns:
        List of {gate, name, value, threshold, passed, explanation}; gates
        whose metric is missing (or None) are skipped
    """
    results = []
    for gate_id, metadata in GATE_METADATA.items():
        value = _lookup(metrics, metadata["metric"])
        if value is None or value == "inf" and metadata["comparison"] != "lt":
            continue
        numeric = float("inf") if value == "inf" else value
        section = _lookup(metrics, metadata["metric"].split(".")[0]) or {}
        context = {k: v for k, v in section.items() if not isinstance(v, (dict, list))}
        context["value"] = value
        results.append({
            "gate": gate_id,
            "name": metadata["name"],
            "value": value,
            "threshold": metadata["threshold"],
            "passed": _passes(numeric, metadata["comparison"], metadata["threshold"]),
            "explanation": get_gate_explanation(gate_id, context),
        })
    return results
