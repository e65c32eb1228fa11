mod common;

use common::{gradient_cases, max_fd_error, FD_REL_TOL};

#[test]
fn every_op_matches_central_differences() {
    for case in gradient_cases() {
        let err = max_fd_error(case.build.as_ref(), &case.inputs);
        assert!(err < FD_REL_TOL, "{}: max relative error {err:e}", case.name);
    }
}

#[test]
fn softmax_gradient_survives_large_logits() {
    let inputs = vec![factor_core::numerics::Tensor::new(vec![1, 3], vec![1000.0, 1000.5, 999.0]).unwrap()];
    let err = max_fd_error(&|g, v| g.softmax(v[0], 1), &inputs);
    assert!(err < FD_REL_TOL, "{err:e}");
}
