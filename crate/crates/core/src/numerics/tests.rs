use super::*;

fn t2(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::standalone();
    let i = g.input(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
    let ii = g.matmul(i, i).unwrap();
    assert_eq!(g.value(ii).data(), &[1.0, 0.0, 0.0, 1.0]);

    let a = g.input(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let b = g.input(t2(&[vec![0.0], vec![1.0]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 1]);
    assert_eq!(g.value(c).data(), &[2.0, 4.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::standalone();
    let a = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(Tensor::zeros(&[2, 3]));
    let msg = g.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn softmax_symmetric_and_stable() {
    let mut g = Graph::standalone();
    let x = g.input(t2(&[vec![0.0, 0.0], vec![1000.0, 1000.0]]));
    let y = g.softmax(x, 1).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    assert!(g.softmax(x, 2).is_err());
}

#[test]
fn layer_norm_cases() {
    let mut g = Graph::standalone();
    let x = g.input(t2(&[vec![7.0, 7.0, 7.0], vec![1.0, 3.0, 2.0]]));
    let gain = g.input(Tensor::new(vec![3], vec![1.0; 3]).unwrap());
    let bias = g.input(Tensor::zeros(&[3]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    assert_eq!(g.value(y).row(0), &[0.0, 0.0, 0.0]);

    let x = g.input(t2(&[vec![1.0, 3.0]]));
    let gain = g.input(Tensor::new(vec![2], vec![1.0; 2]).unwrap());
    let bias = g.input(Tensor::zeros(&[2]));
    let y = g.layer_norm(x, gain, bias).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    let out = g.value(y).data();
    assert!((out[0] + expect).abs() < 1e-15 && (out[1] - expect).abs() < 1e-15);
}

#[test]
fn embedding_rows_and_range_check() {
    let mut g = Graph::standalone();
    let table = g.input(t2(&[
        vec![0.0, 1.0],
        vec![2.0, 3.0],
        vec![4.0, 5.0],
        vec![6.0, 7.0],
    ]));
    let e = g.embedding(table, &[0, 0]).unwrap();
    assert_eq!(g.value(e).row(0), g.value(e).row(1));
    let e = g.embedding(table, &[3]).unwrap();
    assert_eq!(g.value(e).data(), &[6.0, 7.0]);
    match g.embedding(table, &[1, 4]) {
        Err(crate::Error::Index { id: 4, len: 4 }) => {}
        other => panic!("expected index error, got {other:?}"),
    }
}

#[test]
fn cross_entropy_uniform_and_margin() {
    let mut g = Graph::standalone();
    let logits = g.input(Tensor::zeros(&[3, 64]));
    let loss = g
        .masked_cross_entropy(logits, &[5, 7, 9], &[true, true, false])
        .unwrap();
    assert!((g.value(loss).item() - 64f64.ln()).abs() < 1e-12);
    assert!((64f64.ln() - 4.1589).abs() < 1e-4);

    let mut prev = f64::INFINITY;
    for margin in [1.0, 5.0, 10.0, 30.0] {
        let mut row = vec![0.0; 4];
        row[2] = margin;
        let logits = g.input(t2(&[row]));
        let loss = g.masked_cross_entropy(logits, &[2], &[true]).unwrap();
        let v = g.value(loss).item();
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < 1e-12);
}

#[test]
fn cross_entropy_unmasked_rows_get_exactly_zero_gradient() {
    let mut g = Graph::standalone();
    let data: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
    let logits = g.variable(Tensor::new(vec![5, 4], data).unwrap());
    let mask = [false, true, false, true, false];
    let loss = g.masked_cross_entropy(logits, &[0, 1, 2, 3, 0], &mask).unwrap();
    let grads = g.backward(loss).unwrap();
    let gl = grads.var(logits).unwrap();
    for (r, &m) in mask.iter().enumerate() {
        let row = &gl[r * 4..(r + 1) * 4];
        if m {
            assert!(row.iter().any(|v| *v != 0.0));
        } else {
            assert!(row.iter().all(|v| *v == 0.0), "row {r}: {row:?}");
        }
    }
}

#[test]
fn cross_entropy_rejects_empty_mask() {
    let mut g = Graph::standalone();
    let logits = g.input(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        g.masked_cross_entropy(logits, &[0, 1], &[false, false]),
        Err(crate::Error::EmptyMask)
    ));
}

#[test]
fn frozen_params_receive_no_gradient() {
    let mut store = ParamStore::new();
    let frozen = store.insert("w.frozen", Group::Pretrained, Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap());
    let live = store.insert("w.live", Group::Adaptive, Tensor::new(vec![2, 2], vec![0.5; 4]).unwrap());
    let mut g = Graph::new(&store, &[Group::Adaptive]);
    let x = g.input(Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
    let a = g.param(frozen);
    let b = g.param(live);
    let h = g.matmul(x, a).unwrap();
    let y = g.matmul(h, b).unwrap();
    let y = g.mul(y, y).unwrap();
    let loss = g.sum(y);
    let grads = g.backward(loss).unwrap();
    assert!(grads.param(frozen).is_none());
    assert!(grads.param(live).is_some());
}

fn scalar_store(v: f64) -> (ParamStore, ParamId) {
    let mut store = ParamStore::new();
    let id = store.insert("x", Group::Adaptive, Tensor::new(vec![1], vec![v]).unwrap());
    (store, id)
}

#[test]
fn adamw_zero_grad_no_decay_is_identity() {
    let (mut store, id) = scalar_store(1.25);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    })
    .unwrap();
    opt.step(&mut store, &Gradients::default(), &[Group::Adaptive]);
    assert_eq!(store.value(id).item(), 1.25);
}

#[test]
fn adamw_decoupled_decay() {
    let (mut store, id) = scalar_store(2.0);
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.1,
        weight_decay: 0.1,
        ..Default::default()
    })
    .unwrap();
    opt.step(&mut store, &Gradients::default(), &[Group::Adaptive]);
    assert!((store.value(id).item() - 2.0 * 0.99).abs() < 1e-15);
}

#[test]
fn adamw_rejects_nonpositive_lr() {
    for lr in [0.0, -1.0] {
        assert!(matches!(
            AdamW::new(AdamWConfig { lr, ..Default::default() }),
            Err(crate::Error::Config(_))
        ));
    }
}

#[test]
fn adamw_skips_groups_not_listed() {
    let mut store = ParamStore::new();
    let frozen = store.insert("f", Group::Pretrained, Tensor::new(vec![1], vec![3.0]).unwrap());
    let mut opt = AdamW::new(AdamWConfig::default()).unwrap();
    opt.step(&mut store, &Gradients::default(), &[Group::Adaptive]);
    assert_eq!(store.value(frozen).item(), 3.0);
}

#[test]
fn adamw_converges_on_scalar_quadratic() {
    let (mut store, id) = scalar_store(5.0);
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.1,
        weight_decay: 0.0,
        ..Default::default()
    })
    .unwrap();
    for _ in 0..200 {
        let grads = {
            let mut g = Graph::new(&store, &[Group::Adaptive]);
            let x = g.param(id);
            let c = g.input(Tensor::new(vec![1], vec![-1.5]).unwrap());
            let d = g.add(x, c).unwrap();
            let sq = g.mul(d, d).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap()
        };
        opt.step(&mut store, &grads, &[Group::Adaptive]);
    }
    assert!((store.value(id).item() - 1.5).abs() < 0.05, "{}", store.value(id).item());
}
