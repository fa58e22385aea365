mod common;

use common::{check_op, rand_tensor};
use panseg::{Graph, Result, Tensor, Var};
use proptest::prelude::*;

const TOL: f64 = 1e-3;

fn weights(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    // fixed random projection to make the loss sensitive to every output element
    let n = g.value(x).numel();
    let w = rand_tensor(g.shape(x), seed, 1.0, 0.1);
    debug_assert_eq!(w.numel(), n);
    g.constant(w)
}

fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let w = weights(g, x, seed);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_grad_matches_fd() {
    let a = rand_tensor(&[3, 4], 1, 1.0, 0.0);
    let b = rand_tensor(&[4, 2], 2, 1.0, 0.0);
    let err = check_op(
        &|g, v| {
            let c = g.matmul(v[0], v[1])?;
            weighted_sum(g, c, 3)
        },
        &[a, b],
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn matmul_sum_grad_wrt_a_is_ones_for_identity_b() {
    // Frozen from the finite-difference oracle: d/dA sum(A·I) = ones.
    let expected = [1.0, 1.0, 1.0, 1.0];
    let a = Tensor::<f64>::new(&[2, 2], vec![1.0; 4]).unwrap();
    let b = Tensor::<f64>::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let f = |ts: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let (a, b) = (g.constant(ts[0].clone()), g.constant(ts[1].clone()));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.data(s)[0]
    };
    let fd = common::numeric_grad(&f, &[a.clone(), b.clone()], 0, 1e-3);
    for (x, e) in fd.iter().zip(expected) {
        assert!((x - e).abs() < 1e-9);
    }
    let mut g = Graph::new();
    let av = g.leaf(a.with_requires_grad(true));
    let bv = g.constant(b);
    let c = g.matmul(av, bv).unwrap();
    let s = g.sum(c);
    g.backward(s).unwrap();
    assert_eq!(g.grad(av).unwrap(), &expected);
}

#[test]
fn elementwise_grads_match_fd() {
    let a = rand_tensor(&[2, 3, 4], 10, 2.0, 0.05);
    let b = rand_tensor(&[2, 3, 4], 11, 2.0, 0.5);
    let cases: Vec<(&str, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>)> = vec![
        ("add", Box::new(|g, v| { let y = g.add(v[0], v[1])?; weighted_sum(g, y, 1) })),
        ("sub", Box::new(|g, v| { let y = g.sub(v[0], v[1])?; weighted_sum(g, y, 1) })),
        ("mul", Box::new(|g, v| { let y = g.mul(v[0], v[1])?; weighted_sum(g, y, 1) })),
        ("div", Box::new(|g, v| { let y = g.div(v[0], v[1])?; weighted_sum(g, y, 1) })),
        ("relu", Box::new(|g, v| { let y = g.relu(v[0]); let y = g.add(y, v[1])?; weighted_sum(g, y, 2) })),
        ("gelu", Box::new(|g, v| { let y = g.gelu(v[0]); let y = g.mul(y, v[1])?; weighted_sum(g, y, 3) })),
        ("scale", Box::new(|g, v| { let y = g.scale(v[0], -2.5); let y = g.add(y, v[1])?; weighted_sum(g, y, 4) })),
        ("softmax0", Box::new(|g, v| { let y = g.softmax(v[0], 0)?; let y = g.mul(y, v[1])?; weighted_sum(g, y, 5) })),
        ("softmax1", Box::new(|g, v| { let y = g.softmax(v[0], 1)?; let y = g.mul(y, v[1])?; weighted_sum(g, y, 6) })),
        ("softmax2", Box::new(|g, v| { let y = g.softmax(v[0], 2)?; let y = g.mul(y, v[1])?; weighted_sum(g, y, 7) })),
        ("log_softmax", Box::new(|g, v| { let y = g.log_softmax(v[0], 1)?; let y = g.mul(y, v[1])?; weighted_sum(g, y, 8) })),
        ("layernorm", Box::new(|g, v| { let y = g.layernorm(v[0])?; let y = g.mul(y, v[1])?; weighted_sum(g, y, 9) })),
        ("sum_axis", Box::new(|g, v| { let y = g.mul(v[0], v[1])?; let y = g.sum_axis(y, 1)?; weighted_sum(g, y, 10) })),
        ("mean_axis", Box::new(|g, v| { let y = g.mul(v[0], v[1])?; let y = g.mean_axis(y, 2)?; weighted_sum(g, y, 11) })),
        ("concat", Box::new(|g, v| { let y = g.concat(&[v[0], v[1]], 1)?; weighted_sum(g, y, 12) })),
        ("narrow", Box::new(|g, v| { let y = g.mul(v[0], v[1])?; let y = g.narrow(y, 2, 1, 2)?; weighted_sum(g, y, 13) })),
        ("reshape", Box::new(|g, v| { let y = g.reshape(v[0], &[6, 4])?; let y = g.transpose(y)?; let y = g.reshape(y, &[2, 3, 4])?; let y = g.mul(y, v[1])?; weighted_sum(g, y, 14) })),
        ("scale_rows", Box::new(|g, v| { let s = g.narrow(v[1], 1, 0, 1)?; let s = g.narrow(s, 2, 0, 1)?; let s = g.reshape(s, &[2])?; let y = g.scale_rows(v[0], s)?; weighted_sum(g, y, 15) })),
    ];
    for (name, build) in &cases {
        let err = check_op(build.as_ref(), &[a.clone(), b.clone()]);
        assert!(err < TOL, "{name}: {err}");
    }
}

#[test]
fn add_bias_and_gather_grads_match_fd() {
    let x = rand_tensor(&[5, 3], 20, 1.0, 0.0);
    let b = rand_tensor(&[3], 21, 1.0, 0.0);
    let err = check_op(&|g, v| { let y = g.add_bias(v[0], v[1])?; let y = g.gelu(y); weighted_sum(g, y, 22) }, &[x, b]);
    assert!(err < TOL, "{err}");
    let table = rand_tensor(&[6, 4], 23, 1.0, 0.0);
    let err = check_op(&|g, v| { let y = g.gather_rows(v[0], &[1, 3, 1, 5])?; let y = g.gelu(y); weighted_sum(g, y, 24) }, &[table]);
    assert!(err < TOL, "{err}");
}

#[test]
fn mask_fill_softmax_grads_match_fd() {
    let x = rand_tensor(&[3, 4], 30, 2.0, 0.0);
    let keep = vec![true, false, true, false, true, true, true, true, false, false, true, false];
    let err = check_op(
        &|g, v| {
            let m = g.mask_fill(v[0], keep.clone(), f64::NEG_INFINITY)?;
            let y = g.softmax(m, 1)?;
            weighted_sum(g, y, 31)
        },
        &[x],
    );
    assert!(err < TOL, "{err}");
}

#[test]
fn conv3d_grads_match_fd() {
    for &(k, s, p) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
        let x = rand_tensor(&[2, 4, 4, 4], 40, 1.0, 0.0);
        let w = rand_tensor(&[3, 2, k, k, k], 41, 0.5, 0.0);
        let b = rand_tensor(&[3], 42, 0.5, 0.0);
        let err = check_op(
            &|g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), s, p)?;
                weighted_sum(g, y, 43)
            },
            &[x, w, b],
        );
        assert!(err < TOL, "k={k} s={s}: {err}");
    }
}

#[test]
fn upsample_grad_matches_fd_and_sums_replicas() {
    let x = rand_tensor(&[2, 2, 3, 2], 50, 1.0, 0.0);
    let err = check_op(&|g, v| { let y = g.upsample_nearest3d(v[0])?; weighted_sum(g, y, 51) }, &[x.clone()]);
    assert!(err < TOL, "{err}");
    let mut g = Graph::new();
    let v = g.leaf(x.with_requires_grad(true));
    let y = g.upsample_nearest3d(v).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!(g.grad(v).unwrap().iter().all(|d| *d == 8.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 1..24), rows in 1usize..4) {
        let n = vals.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| vals.iter().map(move |v| v * (r as f64 + 1.0))).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[rows, n], data).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for r in 0..rows {
            let s: f64 = g.data(y)[r * n..(r + 1) * n].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(g.data(y)[r * n..(r + 1) * n].iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn f32_softmax_sums_to_one(vals in proptest::collection::vec(-80.0f32..80.0, 1..16)) {
        let n = vals.len();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(&[n], vals).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let s: f64 = g.data(y).iter().map(|v| f64::from(*v)).sum();
        prop_assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn random_small_matmul_grads(m in 1usize..4, n in 1usize..4, p in 1usize..4, seed in 0u64..1000) {
        let a = rand_tensor(&[m, n], seed, 1.0, 0.0);
        let b = rand_tensor(&[n, p], seed + 1, 1.0, 0.0);
        let err = check_op(&|g, v| { let c = g.matmul(v[0], v[1])?; weighted_sum(g, c, seed + 2) }, &[a, b]);
        prop_assert!(err < TOL);
    }
}
