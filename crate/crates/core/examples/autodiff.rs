//! Reverse-mode gradients of a small two-layer network, checked against
//! central finite differences, followed by the full op sweep.
//!
//! cargo run --release --example autodiff

use mnemosyne::gradcheck::{max_gradient_error, op_cases};
use mnemosyne::{Tape, Tensor};

fn main() -> mnemosyne::Result<()> {
    let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let w1 = Tensor::from_fn(&[3, 5], |i| 0.1 * i as f64 - 0.7);
    let w2 = Tensor::from_fn(&[5, 2], |i| (i as f64).cos() * 0.4);
    let labels = [0, 1, 1, 0];

    let tape = Tape::new();
    let (vx, v1, v2) = (
        tape.constant(x.clone()),
        tape.param(w1.clone()),
        tape.param(w2.clone()),
    );
    let loss = vx
        .matmul(v1)?
        .tanh()
        .matmul(v2)?
        .softmax_cross_entropy(&labels)?;
    let grads = tape.backward(loss)?;
    println!("loss {:.6}", loss.item());
    println!("dL/dw2 {:?}", grads.wrt(v2).data());

    let err = max_gradient_error(
        &[w1, w2],
        |t, v| {
            let x = t.constant(x.clone());
            x.matmul(v[0])
                .unwrap()
                .tanh()
                .matmul(v[1])
                .unwrap()
                .softmax_cross_entropy(&labels)
                .unwrap()
        },
        1e-6,
    )?;
    println!("network: worst relative error vs finite differences {err:.2e}");

    for c in op_cases(0) {
        println!(
            "{:>28}: {:.2e}",
            c.name,
            max_gradient_error(&c.inputs, &c.f, 1e-6)?
        );
    }
    Ok(())
}
