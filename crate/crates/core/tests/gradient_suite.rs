use hsarnn::harness::gradsuite::{run_grad_suite, GRAD_TOLERANCE};
use hsarnn::numkernel::{grad_check_fn, OpCode, Tensor};

#[test]
fn full_suite_passes_and_covers_every_opcode() {
    let report = run_grad_suite().unwrap();
    for case in &report.cases {
        assert!(case.passed, "{} max rel error {:e}", case.name, case.max_rel_error);
        assert!(case.checked > 0, "{} checked nothing", case.name);
    }
    for op in OpCode::ALL {
        assert!(report.cases.iter().any(|c| c.name == op.name()), "missing {}", op.name());
    }
    for block in ["conv_encoder", "spatial_softmax", "lstm_3_steps", "image_decoder", "st_loss"] {
        assert!(report.cases.iter().any(|c| c.name == block), "missing {block}");
    }
    assert_eq!(report.cases.iter().filter(|c| c.name.starts_with("sequence_loss_t5_")).count(), 4);
    assert!(report.worst() < GRAD_TOLERANCE);
}

// x * detach(x) has true derivative 2x but the tape reports x.
#[test]
fn checker_rejects_a_wrong_gradient() {
    let x = Tensor::new(&[4], vec![0.3, -1.2, 0.8, 2.0]).unwrap();
    let report = grad_check_fn(&[x], None, |g, v| {
        let d = g.detach(v[0]);
        let y = g.mul(v[0], d)?;
        g.sum(y)
    })
    .unwrap();
    assert!(report.max_rel_error > 0.49, "{report:?}");
}

#[test]
fn checker_accepts_a_kinked_function_away_from_the_kink() {
    let x = Tensor::new(&[3], vec![0.5, -0.7, 1e-6]).unwrap();
    let report = grad_check_fn(&[x], None, |g, v| {
        let r = g.relu(v[0])?;
        let s = g.mul(r, v[0])?;
        g.sum(s)
    })
    .unwrap();
    assert!(report.max_rel_error < GRAD_TOLERANCE, "{report:?}");
}
