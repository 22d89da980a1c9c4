mod support;

use support::gradcases::gradcheck_cases;

#[test]
fn every_primitive_and_the_loss_pass_gradcheck() {
    for (name, err) in gradcheck_cases() {
        println!("{name}: {err:.2e}");
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}
