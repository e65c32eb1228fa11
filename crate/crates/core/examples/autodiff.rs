//! Reverse-mode gradients through a small graph, checked against a central
//! finite difference.

use factor_core::numerics::{Graph, Tensor};

/// sum(gelu(x w)^2), optionally returning d/dw.
fn run(x: &Tensor, w: &Tensor, grad: bool) -> (f64, Option<Vec<f64>>) {
    let mut g = Graph::standalone();
    let xv = g.input(x.clone());
    let wv = g.variable(w.clone());
    let h = g.matmul(xv, wv).unwrap();
    let h = g.gelu(h);
    let h = g.mul(h, h).unwrap();
    let loss = g.sum(h);
    let dw = grad.then(|| g.backward(loss).unwrap().var(wv).unwrap().to_vec());
    (g.value(loss).item(), dw)
}

fn main() -> factor_core::Result<()> {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.5], vec![0.9, 0.1, -0.4]])?;
    let w = Tensor::from_rows(&[vec![0.2, -0.1], vec![0.7, 0.4], vec![-0.3, 0.8]])?;
    let (loss, dw) = run(&x, &w, true);
    let dw = dw.expect("requested");
    println!("loss = {loss:.6}");
    let eps = 1e-5;
    for i in 0..w.len() {
        let (mut plus, mut minus) = (w.clone(), w.clone());
        plus.data_mut()[i] += eps;
        minus.data_mut()[i] -= eps;
        let fd = (run(&x, &plus, false).0 - run(&x, &minus, false).0) / (2.0 * eps);
        println!("dL/dw[{i}]  analytic {:+.8}  numeric {:+.8}", dw[i], fd);
    }
    Ok(())
}
