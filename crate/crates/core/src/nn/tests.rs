use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn conv3d_zero_input_gives_zero_output() {
    let x = Tensor::zeros(&[1, 2, 3, 4, 4]);
    let k = t(&[1, 2, 1, 1, 1], &[0.7, -1.3]);
    let y = conv3d_forward(&x, &k, Some(&Tensor::zeros(&[1])), Conv3dGeometry::same([1, 1, 1], [1, 1, 1])).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv3d_temporal_sliding_sum_with_edge_zeros() {
    let x = t(&[1, 1, 3, 1, 1], &[1.0, 2.0, 3.0]);
    let k = t(&[1, 1, 3, 1, 1], &[1.0, 1.0, 1.0]);
    let y = conv3d_forward(&x, &k, None, Conv3dGeometry::same([3, 1, 1], [1, 1, 1])).unwrap();
    assert_eq!(y.shape(), &[1, 1, 3, 1, 1]);
    assert_eq!(y.data(), &[3.0, 6.0, 5.0]);
}

#[test]
fn conv3d_identity_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let data: Vec<f32> = (0..5 * 6 * 7).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
    let x = t(&[1, 1, 5, 6, 7], &data);
    let mut k = Tensor::zeros(&[1, 1, 3, 3, 3]);
    k.data_mut()[13] = 1.0;
    let y = conv3d_forward(&x, &k, None, Conv3dGeometry::same([3, 3, 3], [1, 1, 1])).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv3d_rejects_channel_mismatch() {
    let x = Tensor::zeros(&[1, 2, 3, 3, 3]);
    let k = Tensor::zeros(&[1, 3, 1, 1, 1]);
    let err = conv3d_forward(&x, &k, None, Conv3dGeometry::same([1, 1, 1], [1, 1, 1])).unwrap_err();
    assert!(matches!(err, Error::Shape { op: "conv3d", .. }), "{err}");
}

#[test]
fn conv3d_output_extent_formula() {
    let x = Tensor::zeros(&[2, 1, 7, 9, 10]);
    let k = Tensor::zeros(&[4, 1, 3, 3, 3]);
    let geom = Conv3dGeometry::new([1, 2, 3], [1, 1, 0]);
    let y = conv3d_forward(&x, &k, None, geom).unwrap();
    // (I + 2p - k) / s + 1
    assert_eq!(y.shape(), &[2, 4, 7, 5, 3]);
}

fn single_cell(store: &mut ParamStore, w_ih: &[f32], w_hh: &[f32], bias: &[f32]) -> Lstm {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lstm = Lstm::new(store, "lstm", 1, 1, 1, false, &mut rng).unwrap();
    let c = &lstm.cells[0];
    store.get_mut(c.w_ih).data_mut().copy_from_slice(w_ih);
    store.get_mut(c.w_hh).data_mut().copy_from_slice(w_hh);
    store.get_mut(c.bias).data_mut().copy_from_slice(bias);
    lstm
}

#[test]
fn lstm_with_zero_parameters_outputs_zero() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lstm = Lstm::new(&mut store, "l", 3, 4, 2, true, &mut rng).unwrap();
    store.scale_all(0.0);
    let mut g = Graph::new(&store);
    let x = g.constant(t(&[5, 3], &[0.5; 15]));
    let (out, fin) = lstm.forward(&mut g, x, None).unwrap();
    assert_eq!(g.shape(out), &[5, 8]);
    assert!(g.value(out).iter().all(|&v| v == 0.0));
    assert_eq!(fin.slots(), 4);
}

#[test]
fn lstm_single_step_matches_hand_evaluated_cell() {
    let mut store = ParamStore::new();
    let lstm = single_cell(&mut store, &[0.5, -0.5, 1.0, 2.0], &[0.0; 4], &[0.0; 4]);
    let mut g = Graph::new(&store);
    let x = g.constant(t(&[1, 1], &[1.0]));
    let h0 = g.constant(t(&[1, 1], &[0.0]));
    let c0 = g.constant(t(&[1, 1], &[0.2]));
    let init = LstmState {
        hidden: vec![h0],
        cell: vec![c0],
    };
    let (out, fin) = lstm.forward(&mut g, x, Some(&init)).unwrap();
    // c = σ(-0.5)·0.2 + σ(0.5)·tanh(1); h = σ(2)·tanh(c)
    assert!((g.value(fin.cell[0])[0] - 0.549_569_5).abs() < 1e-6);
    assert!((g.value(out)[0] - 0.440_572_5).abs() < 1e-6);
}

#[test]
fn bidirectional_length_one_sees_same_frame_both_ways() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let lstm = Lstm::new(&mut store, "bi", 2, 3, 1, true, &mut rng).unwrap();
    let (f, b) = (lstm.cells[0].clone(), lstm.cells[1].clone());
    for (src, dst) in [(f.w_ih, b.w_ih), (f.w_hh, b.w_hh), (f.bias, b.bias)] {
        let v = store.get(src).data().to_vec();
        store.get_mut(dst).data_mut().copy_from_slice(&v);
    }
    let mut g = Graph::new(&store);
    let x = g.constant(t(&[1, 2], &[0.3, -0.8]));
    let (out, _) = lstm.forward(&mut g, x, None).unwrap();
    let v = g.value(out);
    assert_eq!(&v[..3], &v[3..]);
}

#[test]
fn lstm_rejects_empty_sequence_and_bad_dims() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lstm = Lstm::new(&mut store, "l", 3, 2, 1, false, &mut rng).unwrap();
    let mut g = Graph::new(&store);
    assert!(lstm_over_rows(&mut g, &lstm, &[], None).is_err());
    let x = g.constant(Tensor::zeros(&[2, 4]));
    assert!(lstm.forward(&mut g, x, None).is_err());
}

#[test]
fn sum_gradient_is_all_ones() {
    let mut g = Graph::detached();
    let x = g.input(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).with_requires_grad(true));
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), &[1.0; 6]);
}

#[test]
fn mse_of_linear_map_matches_finite_differences() {
    let mut store = ParamStore::new();
    let w = store.insert("w", t(&[2, 2], &[0.3, -0.7, 1.1, 0.4]).with_requires_grad(true)).unwrap();
    let loss_fn = |g: &mut Graph| {
        let x = g.constant(t(&[1, 2], &[0.9, -1.2]));
        let y = g.constant(t(&[1, 2], &[0.25, 0.5]));
        let wv = g.param(w);
        let p = g.linear(x, wv, None)?;
        g.mse(p, y)
    };
    let analytic = {
        let mut g = Graph::new(&store);
        let l = loss_fn(&mut g).unwrap();
        g.backward(l).unwrap().param(w).unwrap().to_vec()
    };
    let h = 1e-3f32;
    for i in 0..4 {
        let orig = store.get(w).data()[i];
        let eval = |v: f32, store: &mut ParamStore| {
            store.get_mut(w).data_mut()[i] = v;
            let mut g = Graph::new(store);
            let l = loss_fn(&mut g).unwrap();
            g.scalar(l) as f64
        };
        let num = (eval(orig + h, &mut store) - eval(orig - h, &mut store)) / (2.0 * h as f64);
        store.get_mut(w).data_mut()[i] = orig;
        let a = analytic[i] as f64;
        assert!((a - num).abs() / a.abs().max(1e-6) < 1e-4 * 10.0, "entry {i}: {a} vs {num}");
    }
}

#[test]
fn parameter_off_the_loss_path_gets_zero_gradient() {
    let mut store = ParamStore::new();
    let used = store.insert("used", t(&[2], &[1.0, 2.0]).with_requires_grad(true)).unwrap();
    let unused = store.insert("unused", t(&[2], &[3.0, 4.0]).with_requires_grad(true)).unwrap();
    let grads = {
        let mut g = Graph::new(&store);
        let a = g.param(used);
        let _b = g.param(unused);
        let l = g.sum(a);
        g.backward(l).unwrap()
    };
    grads.accumulate_into(&mut store, 1.0).unwrap();
    assert_eq!(store.get(unused).grad().unwrap(), &[0.0, 0.0]);
    assert_eq!(store.get(used).grad().unwrap(), &[1.0, 1.0]);
}

#[test]
fn backward_requires_a_scalar() {
    let mut g = Graph::detached();
    let x = g.input(Tensor::zeros(&[3]).with_requires_grad(true));
    assert!(matches!(g.backward(x), Err(Error::Shape { op: "backward", .. })));
}

#[test]
fn backward_reports_the_op_that_produced_nan() {
    let mut g = Graph::detached();
    let x = g.input(t(&[2], &[0.0, 1.0]).with_requires_grad(true));
    let y = g.input(t(&[2], &[f32::INFINITY, 1.0]));
    let z = g.mul(x, y).unwrap();
    let l = g.sum(z);
    match g.backward(l) {
        Err(Error::NonFinite { op }) => assert_eq!(op, "leaf"),
        other => panic!("expected NonFinite, got {:?}", other.map(|_| ())),
    }
    let mut g = Graph::detached();
    let x = g.input(t(&[1], &[f32::MAX]).with_requires_grad(true));
    let y = g.scale(x, 10.0);
    let l = g.sum(y);
    assert!(matches!(g.backward(l), Err(Error::NonFinite { op: "scale" })));
}

#[test]
fn softmax_examples() {
    assert!(softmax(&[2.0; 4]).iter().all(|&p| (p - 0.25).abs() < 1e-7));
    let a = softmax(&[0.3, -1.0, 2.0]);
    let b = softmax(&[100.3, 99.0, 102.0]);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-6);
    }
    let p = softmax(&[0.0, 3.0f32.ln()]);
    assert!((p[0] - 0.25).abs() < 1e-7 && (p[1] - 0.75).abs() < 1e-7);
    let big = softmax(&[1000.0, -1000.0, 0.0]);
    assert!(big.iter().all(|v| v.is_finite()));
    assert!((big.iter().sum::<f32>() - 1.0).abs() < 1e-6);
}

#[test]
fn forward_is_bit_deterministic_under_seed() {
    let run = || {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let lstm = Lstm::new(&mut store, "l", 4, 5, 2, true, &mut rng).unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(t(&[3, 4], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2]));
        let (y, _) = lstm.forward(&mut g, x, None).unwrap();
        g.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    Lstm::new(&mut store, "enc", 3, 4, 2, true, &mut rng).unwrap();
    Linear::new(&mut store, "héad", 8, 2, true, &mut rng).unwrap();
    let mut a = Vec::new();
    checkpoint::write_checkpoint(&store, &mut a).unwrap();
    let back = checkpoint::read_checkpoint(&a[..]).unwrap();
    let mut b = Vec::new();
    checkpoint::write_checkpoint(&back, &mut b).unwrap();
    assert_eq!(a, b);
    assert_eq!(back.fingerprint(|_| true), store.fingerprint(|_| true));
}
