from .metrics import aggregate_report
from .segmentation import predict


def evaluate_model(model, cases, classes=None, tolerance_mm=None, class_names=None, predictions=None):
    """Predict each labelled volume and aggregate DSC/NSD over ``classes``.

    ``predictions`` optionally collects ``{case_id: PredictionMap}``.
    """
    classes = classes or list(range(1, model.cfg.num_classes))
    rows = []
    for v in cases:
        pm = predict(v, model)
        if predictions is not None:
            predictions[v.id] = pm
        rows.append((pm.labels, v.labels, v.spacing, v.id))
    return aggregate_report(rows, classes, tolerance_mm, class_names=class_names)
