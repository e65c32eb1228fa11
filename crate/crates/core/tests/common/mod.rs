#![allow(dead_code)]

use factor_core::numerics::{Graph, Tensor, Var};
use factor_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-9;

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Builds the function under test on a fresh graph. The returned node may
/// have any shape; it is reduced to a scalar by a fixed random projection.
pub type Builder<'a> = dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var> + 'a;

fn projected(build: &Builder<'_>, inputs: &[Tensor], proj: &mut Option<Tensor>) -> (f64, Graph<'static>, Vec<Var>, Var) {
    let mut g = Graph::standalone();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).expect("builder failed");
    let shape = g.value(out).shape().to_vec();
    let weights = proj
        .get_or_insert_with(|| random_tensor(&mut rng(0xfeed), &shape, 1.0).reshape(shape.clone()).unwrap())
        .clone();
    let w = g.input(weights);
    let y = g.mul(out, w).unwrap();
    let loss = g.sum(y);
    let v = g.value(loss).item();
    (v, g, vars, loss)
}

/// Central finite differences against reverse-mode gradients for every
/// input entry. Returns the maximum relative error, where entries whose
/// absolute discrepancy is below `FD_ABS_FLOOR` count as exact.
pub fn max_fd_error(build: &Builder<'_>, inputs: &[Tensor]) -> f64 {
    let mut proj = None;
    let (_, g, vars, loss) = projected(build, inputs, &mut proj);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .var(vars[i])
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let fp = projected(build, &plus, &mut proj).0;
            let fm = projected(build, &minus, &mut proj).0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            let diff = (analytic[j] - numeric).abs();
            if diff < FD_ABS_FLOOR {
                continue;
            }
            let rel = diff / analytic[j].abs().max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    worst
}

pub struct GradCase {
    pub name: &'static str,
    pub build: Box<Builder<'static>>,
    pub inputs: Vec<Tensor>,
}

/// One case per differentiable operation, with random double-precision inputs.
pub fn gradient_cases() -> Vec<GradCase> {
    use factor_core::numerics::AttentionGroup;
    let mut r = rng(42);
    let mut cases = Vec::new();
    let mut case = |name, build: Box<Builder<'static>>, inputs| {
        cases.push(GradCase { name, build, inputs });
    };
    case(
        "matmul 5x7 * 7x3",
        Box::new(|g, v| g.matmul(v[0], v[1])),
        vec![random_tensor(&mut r, &[5, 7], 1.0), random_tensor(&mut r, &[7, 3], 1.0)],
    );
    case(
        "add",
        Box::new(|g, v| g.add(v[0], v[1])),
        vec![random_tensor(&mut r, &[3, 4], 1.0), random_tensor(&mut r, &[3, 4], 1.0)],
    );
    case(
        "add_row",
        Box::new(|g, v| g.add_row(v[0], v[1])),
        vec![random_tensor(&mut r, &[3, 4], 1.0), random_tensor(&mut r, &[4], 1.0)],
    );
    case(
        "mul",
        Box::new(|g, v| g.mul(v[0], v[1])),
        vec![random_tensor(&mut r, &[2, 5], 1.0), random_tensor(&mut r, &[2, 5], 1.0)],
    );
    case(
        "scale",
        Box::new(|g, v| Ok(g.scale(v[0], -2.5))),
        vec![random_tensor(&mut r, &[2, 3], 1.0)],
    );
    case(
        "gelu",
        Box::new(|g, v| Ok(g.gelu(v[0]))),
        vec![random_tensor(&mut r, &[4, 5], 3.0)],
    );
    case(
        "softmax 4x6 last axis",
        Box::new(|g, v| g.softmax(v[0], 1)),
        vec![random_tensor(&mut r, &[4, 6], 2.0)],
    );
    case(
        "softmax 4x6 first axis",
        Box::new(|g, v| g.softmax(v[0], 0)),
        vec![random_tensor(&mut r, &[4, 6], 2.0)],
    );
    case(
        "layer_norm",
        Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        vec![
            random_tensor(&mut r, &[3, 5], 2.0),
            random_tensor(&mut r, &[5], 1.0),
            random_tensor(&mut r, &[5], 1.0),
        ],
    );
    case(
        "embedding_lookup",
        Box::new(|g, v| g.embedding(v[0], &[3, 0, 3, 1])),
        vec![random_tensor(&mut r, &[4, 3], 1.0)],
    );
    case(
        "masked_cross_entropy",
        Box::new(|g, v| g.masked_cross_entropy(v[0], &[1, 0, 3, 2, 2], &[true, false, true, true, false])),
        vec![random_tensor(&mut r, &[5, 4], 2.0)],
    );
    case(
        "attention 2 heads",
        Box::new(|g, v| g.attention(v[0], v[1], v[2], 2, None)),
        vec![
            random_tensor(&mut r, &[3, 4], 1.0),
            random_tensor(&mut r, &[5, 4], 1.0),
            random_tensor(&mut r, &[5, 4], 1.0),
        ],
    );
    case(
        "attention grouped",
        Box::new(|g, v| {
            let groups = [
                AttentionGroup { queries: 0..2, keys: 0..3 },
                AttentionGroup { queries: 2..4, keys: 3..5 },
            ];
            g.attention(v[0], v[1], v[2], 2, Some(&groups))
        }),
        vec![
            random_tensor(&mut r, &[4, 4], 1.0),
            random_tensor(&mut r, &[5, 4], 1.0),
            random_tensor(&mut r, &[5, 4], 1.0),
        ],
    );
    case(
        "self-attention aliased inputs",
        Box::new(|g, v| g.attention(v[0], v[0], v[0], 1, None)),
        vec![random_tensor(&mut r, &[3, 2], 1.0)],
    );
    case(
        "concat_rows + slice_rows",
        Box::new(|g, v| {
            let c = g.concat_rows(&[v[0], v[1]])?;
            g.slice_rows(c, 1..4)
        }),
        vec![random_tensor(&mut r, &[2, 3], 1.0), random_tensor(&mut r, &[3, 3], 1.0)],
    );
    case(
        "reshape + sum",
        Box::new(|g, v| {
            let x = g.reshape(v[0], &[3, 4])?;
            let y = g.mul(x, x)?;
            Ok(g.sum(y))
        }),
        vec![random_tensor(&mut r, &[2, 6], 1.0)],
    );
    case(
        "linear",
        Box::new(|g, v| g.linear(v[0], v[1], Some(v[2]))),
        vec![
            random_tensor(&mut r, &[3, 4], 1.0),
            random_tensor(&mut r, &[4, 2], 1.0),
            random_tensor(&mut r, &[2], 1.0),
        ],
    );
    cases
}
