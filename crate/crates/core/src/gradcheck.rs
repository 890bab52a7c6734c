//! Central finite differences against reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::rf::{sample_projections, Mechanism, RfSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub type LossFn = Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>>;

/// A scalar function of some tensors, used to exercise one or more tape ops.
pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor>,
    pub f: LossFn,
}

/// Largest `|fd - analytic| / max(|fd|, 1)` over every input entry, with step `h`.
pub fn max_gradient_error<F>(inputs: &[Tensor], f: F, h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let g = grads.wrt(vars[i]);
        for j in 0..x.numel() {
            let eval = |delta: f64| {
                let t = Tape::untraced();
                let vs: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, v)| {
                        let mut v = v.clone();
                        if k == i {
                            v.data_mut()[j] += delta;
                        }
                        t.constant(v)
                    })
                    .collect();
                f(&t, &vs).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - g.data()[j]).abs() / fd.abs().max(1.0);
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
    }
    Ok(worst)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn case(
    name: &str,
    inputs: Vec<Tensor>,
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t> + 'static,
) -> Case {
    Case {
        name: name.to_string(),
        inputs,
        f: Box::new(f),
    }
}

/// Compositions that between them use every differentiable tape op.
/// Inputs keep away from the kinks of `relu`, `abs` and `sign`.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let away = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        Tensor::from_fn(shape, |_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
    };
    let pos = rand_t(&mut rng, &[3, 4], 0.2, 1.5);
    let b = away(&mut rng, &[3, 4]);
    let row = rand_t(&mut rng, &[1, 4], 0.5, 1.0);
    let col = rand_t(&mut rng, &[3, 1], 0.5, 1.0);
    let mat = rand_t(&mut rng, &[4, 2], -1.0, 1.0);
    let c = rand_t(&mut rng, &[3, 2], -1.0, 1.0);
    let logits = rand_t(&mut rng, &[5, 3], -2.0, 2.0);
    let target = rand_t(&mut rng, &[5, 3], -1.0, 1.0);
    let ra = rand_t(&mut rng, &[2, 3], -1.0, 1.0);
    let rb = rand_t(&mut rng, &[2, 4], -1.0, 1.0);
    let rq = rand_t(&mut rng, &[2, 3], -1.0, 1.0);
    let grp = rand_t(&mut rng, &[7, 3], -1.0, 1.0);
    let mem = rand_t(&mut rng, &[2, 6], -1.0, 1.0);
    let db = rand_t(&mut rng, &[2, 2], -1.0, 1.0);
    let z = rand_t(&mut rng, &[3, 4], -0.8, 0.8);

    let mut cases = vec![
        case("exp-log-tanh", vec![pos.clone(), b.clone()], |_, v| {
            v[0].log().add(v[1].tanh()).unwrap().exp().sum()
        }),
        case(
            "mul-div-sub-neg-add_scalar",
            vec![pos.clone(), b.clone()],
            |_, v| {
                v[1].mul(v[0])
                    .unwrap()
                    .div(v[0].add_scalar(1.0))
                    .unwrap()
                    .sub(v[1].neg())
                    .unwrap()
                    .sum()
            },
        ),
        case(
            "sigmoid-sqrt-square-mean",
            vec![pos.clone(), b.clone()],
            |_, v| v[0].sqrt().mul(v[1].sigmoid()).unwrap().square().mean(),
        ),
        case("relu-abs-scale-sign", vec![b.clone()], |_, v| {
            v[0].relu()
                .add(v[0].abs().scale(0.3))
                .unwrap()
                .add(v[0].sign().mul(v[0]).unwrap())
                .unwrap()
                .sum()
        }),
        case("broadcast-row-col", vec![b.clone(), row, col], |_, v| {
            v[0].add(v[1])
                .unwrap()
                .div(v[2])
                .unwrap()
                .mul(v[1])
                .unwrap()
                .square()
                .sum()
        }),
        case("matmul-transpose", vec![b.clone(), mat], |_, v| {
            v[0].matmul(v[1])
                .unwrap()
                .transpose()
                .unwrap()
                .square()
                .sum()
        }),
        case("concat-slice-sum_axis", vec![b.clone(), c], |t, v| {
            let cat = t.concat(&[v[0], v[1]], 1).unwrap();
            cat.slice(1, 2, 3)
                .unwrap()
                .square()
                .sum_axis(1)
                .unwrap()
                .exp()
                .sum()
        }),
        case("concat-rows-reshape", vec![b.clone(), pos], |t, v| {
            let cat = t.concat(&[v[0], v[1].scale(2.0)], 0).unwrap();
            cat.reshape(&[4, 6])
                .unwrap()
                .sum_axis(0)
                .unwrap()
                .square()
                .sum()
        }),
        case("softmax-cross-entropy", vec![logits.clone()], |_, v| {
            v[0].softmax_cross_entropy(&[0, 2, 1, 1, 0]).unwrap()
        }),
        case("mse", vec![logits, target], |_, v| v[0].mse(v[1]).unwrap()),
        case("outer-vecmat-rows", vec![ra.clone(), rb, rq], |_, v| {
            let m = v[0].outer_rows(v[1]).unwrap();
            v[2].vecmat_rows(m).unwrap().tanh().sum()
        }),
        case("group-sum-gather-rows", vec![grp], |_, v| {
            let g = v[0].group_sum_rows(3).unwrap();
            g.gather_rows(&[2, 0, 0, 1]).unwrap().tanh().sum()
        }),
        case("decay-outer-add", vec![mem, ra, db], |_, v| {
            v[0].decay_outer_add(&[0.7, 0.2], v[1], v[2])
                .unwrap()
                .tanh()
                .sum()
        }),
    ];
    for m in Mechanism::ALL {
        let proj = sample_projections(&RfSpec::new(m, 8, 4, seed)).expect("valid spec");
        cases.push(case(
            &format!("features-{}", m.name()),
            vec![z.clone()],
            move |_, v| proj.phi_var(v[0], 0.4).unwrap().sum(),
        ));
    }
    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrong_gradient_is_detected() {
        let x = Tensor::vector(vec![0.3, -0.2]);
        // sign has zero gradient, so this compares 0 against the slope of x |x|
        let err = max_gradient_error(
            &[x],
            |_, v| v[0].sign().mul(v[0].square()).unwrap().sum(),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6);
        let x = Tensor::vector(vec![0.3]);
        let err = max_gradient_error(
            &[x],
            |t, v| {
                t.constant(v[0].value().as_ref().clone())
                    .square()
                    .sum()
                    .add(v[0].scale(0.0))
                    .unwrap()
            },
            1e-6,
        )
        .unwrap();
        assert!(err > 0.1);
    }
}
