#[path = "support/gradients.rs"]
mod gradients;

use gradients::TOL;
use mosaic_kd::losses::AdvMode;

fn check(name: &str, e: f64) {
    assert!(e < TOL, "{name}: relative error {e}");
}

#[test]
fn align_entropy_parameter_gradient() {
    check("align entropy", gradients::align_entropy());
}

#[test]
fn balance_parameter_gradient() {
    check("balance", gradients::balance());
}

#[test]
fn disc_loss_parameter_gradient() {
    check("disc loss", gradients::disc_loss());
}

#[test]
fn gen_adv_input_gradient_both_modes() {
    check("nonsaturating", gradients::gen_adv(AdvMode::Nonsaturating));
    check("minimax", gradients::gen_adv(AdvMode::Minimax));
}

#[test]
fn kd_gradient_through_teacher_and_student() {
    check("kd", gradients::kd());
}

#[test]
fn student_total_parameter_gradient() {
    check("student total", gradients::student_total());
}

#[test]
fn generator_total_parameter_gradient() {
    check("generator total", gradients::generator_total());
}
