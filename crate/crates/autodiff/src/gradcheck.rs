//! Central finite-difference oracle for gradient checks.
//!
//! The oracle evaluates the forward pass only; it never touches the backward
//! code it is checking. All arithmetic is 64-bit. Checks compare the analytic
//! gradient against `(f(x + h) - f(x - h)) / 2h` per element and report the
//! worst error relative to the largest gradient component.

use crate::{Tape, TapeError, Tensor, Var};

/// Builder of the scalar function under test: given a tape and leaf vars for
/// each input tensor, constructs the graph and returns the scalar output.
pub type BuildFn<'a> = &'a dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TapeError>;

fn eval(build: BuildFn, inputs: &[Tensor<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("forward build failed");
    tape.scalar(out)
}

/// Central finite differences of `build` with respect to every input element.
pub fn finite_difference(build: BuildFn, inputs: &[Tensor<f64>], h: f64) -> Vec<Tensor<f64>> {
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[i].dims());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            grad.data_mut()[j] = (eval(build, &plus) - eval(build, &minus)) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// Distance of the built graph to the nearest kink (relu zero, huber joint,
/// clamp bound, min2 crossing); see [`Tape::kink_distance`].
pub fn kink_distance(build: BuildFn, inputs: &[Tensor<f64>], ignore_min2: bool) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    build(&mut tape, &vars).expect("forward build failed");
    tape.kink_distance(ignore_min2)
}

/// Compares analytic gradients to finite differences. Returns the worst
/// error relative to the largest gradient component, or a description of the
/// worst offender on failure.
pub fn compare_to_fd(
    build: BuildFn,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<f64, String> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("forward build failed");
    let grads = tape.gradients(out).expect("backward failed");
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get_or_zeros(*v, t.dims()))
        .collect();
    let fd = finite_difference(build, inputs, h);

    let mut scale = 1e-8f64;
    for (a, n) in analytic.iter().zip(&fd) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            scale = scale.max(x.abs()).max(y.abs());
        }
    }
    let mut worst = 0.0f64;
    let mut worst_desc = String::new();
    for (i, (a, n)) in analytic.iter().zip(&fd).enumerate() {
        for (j, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            let rel = (x - y).abs() / scale;
            if rel > worst {
                worst = rel;
                worst_desc = format!(
                    "input {i} element {j}: analytic {x:.9e} vs fd {y:.9e} (scale {scale:.3e})"
                );
            }
        }
    }
    if worst <= tol {
        Ok(worst)
    } else {
        Err(format!("rel err {worst:.3e} > {tol:.1e} at {worst_desc}"))
    }
}
