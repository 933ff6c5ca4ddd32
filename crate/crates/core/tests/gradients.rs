use scgen_core::gradcheck::{op_names, run_suite, TOLERANCE};

#[test]
fn every_operation_passes_twenty_instances() {
    let reports = run_suite(0x5eed, 20, None).unwrap();
    assert_eq!(reports.len(), op_names().len());
    for r in &reports {
        assert_eq!(r.instances, 20, "{}", r.op);
        assert!(r.checked > 0, "{} checked nothing", r.op);
        assert!(r.max_rel_error <= TOLERANCE, "{} error {:e}", r.op, r.max_rel_error);
    }
}

#[test]
fn suite_covers_required_operations() {
    let names = op_names();
    for op in [
        "conv2d",
        "resize_bilinear",
        "resize_nearest",
        "leaky_relu",
        "tanh",
        "batch_moments",
        "semantic_gate",
        "scc_forward",
        "scn_forward",
        "scresblock",
        "hinge_d",
        "hinge_g",
        "perceptual_loss",
        "feature_matching_loss",
        "total_generator_loss",
        "generator_end_to_end",
    ] {
        assert!(names.iter().any(|n| n.starts_with(op)), "missing {op}");
    }
}

#[test]
fn filter_selects_one_operation() {
    let reports = run_suite(3, 2, Some("hinge_g")).unwrap();
    assert_eq!(reports.len(), 1);
    assert_eq!(reports[0].op, "hinge_g");
}
