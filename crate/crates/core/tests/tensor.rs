use dapnet_core::tensor::{gradcheck, Graph, Tensor, Var};
use dapnet_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `sum(y * w)` with a fixed pseudo-random `w`, so every output element matters.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> dapnet_core::Result<Var> {
    let w = Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng(seed ^ 0xABCD));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut g = Graph::new();
    let i2 = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let ia = g.matmul(i2, a).unwrap();
    assert_eq!(g.data(ia), &[1.0, 2.0, 3.0, 4.0]);
    let ab = g.matmul(a, b).unwrap();
    assert_eq!(g.data(ab), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([4, 5]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn matmul_sum_grad_is_ones_times_b_transposed() {
    let mut r = rng(1);
    let a = Tensor::randn([3, 4], 1.0, &mut r).with_requires_grad();
    let b = Tensor::randn([4, 2], 1.0, &mut r);
    let mut g = Graph::new();
    let av = g.leaf(a);
    let bv = g.constant(b.clone());
    let c = g.matmul(av, bv).unwrap();
    let s = g.sum(c).unwrap();
    g.backward(s).unwrap();
    // ones[3,2] @ b^T: every row equals the row sums of b.
    let row_sums: Vec<f64> = b.data().chunks(2).map(|r| r[0] + r[1]).collect();
    let expected: Vec<f64> = (0..3).flat_map(|_| row_sums.clone()).collect();
    let err = gradcheck::relative_error(g.grad(av).unwrap(), &expected);
    assert!(err < 1e-12);

    let fd = gradcheck::check(&[Tensor::randn([3, 4], 1.0, &mut r), b], 1e-5, |g, v| {
        let c = g.matmul(v[0], v[1])?;
        g.sum(c)
    })
    .unwrap();
    assert!(fd.iter().all(|e| *e < 1e-5), "{fd:?}");
}

#[test]
fn batched_matmul_gradients() {
    let mut r = rng(2);
    for (sa, sb) in [
        (vec![2, 3, 4], vec![4, 5]),
        (vec![2, 3, 4], vec![2, 4, 5]),
        (vec![3, 4], vec![2, 4, 5]),
    ] {
        let inputs = [
            Tensor::randn(sa.clone(), 1.0, &mut r),
            Tensor::randn(sb.clone(), 1.0, &mut r),
        ];
        let errs = gradcheck::check(&inputs, 1e-5, |g, v| {
            let c = g.matmul(v[0], v[1])?;
            weighted_sum(g, c, 3)
        })
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-6), "{sa:?} x {sb:?}: {errs:?}");
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3, 2], &[0.0, 0.0, 2.0, 1.0, 1000.0, 0.0]));
    let y = g.softmax(x).unwrap();
    let d = g.data(y);
    assert_eq!(&d[..2], &[0.5, 0.5]);
    assert!((d[2] - 0.7311).abs() < 5e-5 && (d[3] - 0.2689).abs() < 5e-5);
    assert_eq!(&d[4..], &[1.0, 0.0]);
    assert!(d.iter().all(|v| v.is_finite()));
}

#[test]
fn softmax_rejects_scalar() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(1.0));
    assert!(matches!(g.softmax(x), Err(Error::Dimension { .. })));
}

#[test]
fn conv2d_identity_and_box_kernel() {
    let mut r = rng(3);
    let x = Tensor::randn([1, 1, 4, 5], 1.0, &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let k = g.constant(Tensor::ones([1, 1, 1, 1]));
    let y = g.conv2d_same(xv, k).unwrap();
    assert_eq!(g.value(y).data(), x.data());

    for (hot_r, hot_c) in [(2, 2), (0, 0), (4, 1)] {
        let mut onehot = Tensor::zeros([1, 1, 5, 5]);
        onehot.data_mut()[hot_r * 5 + hot_c] = 1.0;
        let mut g = Graph::new();
        let xv = g.constant(onehot);
        let k = g.constant(Tensor::ones([1, 1, 3, 3]));
        let y = g.conv2d_same(xv, k).unwrap();
        // direct summation oracle
        for i in 0..5usize {
            for j in 0..5usize {
                let expect = if i.abs_diff(hot_r) <= 1 && j.abs_diff(hot_c) <= 1 {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(g.data(y)[i * 5 + j], expect, "hot ({hot_r},{hot_c}) at ({i},{j})");
            }
        }
    }
}

#[test]
fn conv2d_gradient_check() {
    let mut r = rng(4);
    let inputs = [
        Tensor::randn([2, 1, 4, 4], 1.0, &mut r),
        Tensor::randn([3, 1, 3, 3], 1.0, &mut r),
    ];
    let errs = gradcheck::check(&inputs, 1e-5, |g, v| {
        let y = g.conv2d_same(v[0], v[1])?;
        weighted_sum(g, y, 5)
    })
    .unwrap();
    assert!(errs.iter().all(|e| *e < 1e-4), "{errs:?}");
}

#[test]
fn conv_even_kernel_is_config_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([1, 1, 4, 4]));
    let k = g.constant(Tensor::zeros([1, 1, 2, 3]));
    assert!(matches!(g.conv2d_same(x, k), Err(Error::Config(_))));
    let x = g.constant(Tensor::zeros([1, 1, 4]));
    let k = g.constant(Tensor::zeros([1, 1, 4]));
    assert!(matches!(g.conv1d_same(x, k), Err(Error::Config(_))));
}

#[test]
fn conv1d_examples_and_gradient() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 4], &[0.0, 1.0, 0.0, 0.0]));
    let k1 = g.constant(t(&[1, 1, 1], &[1.0]));
    let y = g.conv1d_same(x, k1).unwrap();
    assert_eq!(g.data(y), &[0.0, 1.0, 0.0, 0.0]);
    let k3 = g.constant(t(&[1, 1, 3], &[1.0, 1.0, 1.0]));
    let y = g.conv1d_same(x, k3).unwrap();
    assert_eq!(g.data(y), &[1.0, 1.0, 1.0, 0.0]);

    let mut r = rng(5);
    let inputs = [
        Tensor::randn([2, 3, 7], 1.0, &mut r),
        Tensor::randn([4, 3, 5], 1.0, &mut r),
    ];
    let errs = gradcheck::check(&inputs, 1e-5, |g, v| {
        let y = g.conv1d_same(v[0], v[1])?;
        weighted_sum(g, y, 6)
    })
    .unwrap();
    assert!(errs.iter().all(|e| *e < 1e-4), "{errs:?}");
}

#[test]
fn mean_over_axis_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]).with_requires_grad());
    let m = g.mean_axis(x, 1).unwrap();
    assert_eq!(g.data(m), &[2.0, 6.0]);
    let s = g.sum(m).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.5; 4]);

    let c = g.constant(Tensor::full([3, 4], 2.5));
    let m = g.mean_axis(c, 0).unwrap();
    assert_eq!(g.data(m), &[2.5; 4]);
    assert!(matches!(g.mean_axis(c, 2), Err(Error::Dimension { .. })));
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad());
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_usage_errors() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones([3]).with_requires_grad());
    let y = g.scale(x, 2.0).unwrap();
    assert!(matches!(g.backward(y), Err(Error::Usage(_))));
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(Error::Usage(_))));
    g.reset_grads();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0; 3]);
}

#[test]
fn fan_out_accumulates() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full([2], 0.3).with_requires_grad());
    let y = g.add(x, x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
}

#[test]
fn unused_leaf_gets_zero_grad() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones([2]).with_requires_grad());
    let unused = g.leaf(Tensor::ones([3]).with_requires_grad());
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &[0.0; 3]);
}

#[test]
fn debug_numerics_surfaces_nan() {
    let mut g = Graph::new().with_debug_numerics(true);
    let x = g.constant(t(&[2], &[-1.0, 1.0]));
    assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
    let mut g = Graph::new();
    let x = g.constant(t(&[2], &[-1.0, 1.0]));
    let y = g.log(x).unwrap();
    assert!(g.data(y)[0].is_nan());
}

#[test]
fn randomized_chain_of_ten_ops() {
    for seed in 0..5u64 {
        let mut r = rng(100 + seed);
        let inputs = [
            Tensor::randn([2, 3, 4], 0.5, &mut r),
            Tensor::randn([4, 4], 0.5, &mut r),
            Tensor::randn([4], 0.5, &mut r),
        ];
        let errs = gradcheck::check(&inputs, 1e-5, |g, v| {
            let a = g.matmul(v[0], v[1])?; // 1
            let b = g.add(a, v[2])?; // 2
            let c = g.gelu(b)?; // 3
            let d = g.layer_norm(c)?; // 4
            let e = g.mul(d, v[2])?; // 5
            let f = g.transpose(e)?; // 6
            let h = g.softmax(f)?; // 7
            let i = g.mean_axis(h, 1)?; // 8
            let j = g.exp(i)?; // 9
            weighted_sum(g, j, seed) // 10
        })
        .unwrap();
        assert!(errs.iter().all(|e| *e < 1e-3), "seed {seed}: {errs:?}");
    }
}

#[test]
fn masked_softmax_zeroes_masked_entries() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[1, 3], &[2.0, 1.0, 0.5]).with_requires_grad());
    let y = g.masked_softmax(x, &[true, true, false]).unwrap();
    let d = g.data(y).to_vec();
    assert!((d[0] - 0.7311).abs() < 5e-5 && (d[1] - 0.2689).abs() < 5e-5);
    assert_eq!(d[2], 0.0);
    let w = g.constant(t(&[1, 3], &[1.0, -2.0, 5.0]));
    let p = g.mul(y, w).unwrap();
    let s = g.sum(p).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap()[2], 0.0);
    assert!(g.masked_softmax(x, &[false, false, false]).is_err());
}

#[test]
fn row_routing_ops_round_trip() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).with_requires_grad());
    let sel = g.index_select(x, &[2, 0]).unwrap();
    assert_eq!(g.data(sel), &[5.0, 6.0, 1.0, 2.0]);
    let back = g.scatter_rows(sel, &[2, 0], 3).unwrap();
    assert_eq!(g.data(back), &[1.0, 2.0, 0.0, 0.0, 5.0, 6.0]);
    let w = g.constant(t(&[3], &[1.0, 10.0, 100.0]));
    let scaled = g.scale_rows(back, w).unwrap();
    assert_eq!(g.data(scaled), &[1.0, 2.0, 0.0, 0.0, 500.0, 600.0]);
    let s = g.sum(scaled).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0, 100.0, 100.0]);
}

fn softmax_rows(x: &[f64], n: usize) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.constant(Tensor::new([x.len() / n, n], x.to_vec()).unwrap());
    let y = g.softmax(v).unwrap();
    g.data(y).to_vec()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one_and_commute_with_permutation(
        row in prop::collection::vec(-50.0f64..50.0, 1..12),
        rot in 0usize..12,
    ) {
        let n = row.len();
        let y = softmax_rows(&row, n);
        let total: f64 = y.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(y.iter().all(|v| *v >= 0.0));
        let k = rot % n;
        let mut rotated = row.clone();
        rotated.rotate_left(k);
        let mut expect = y.clone();
        expect.rotate_left(k);
        let got = softmax_rows(&rotated, n);
        for (a, b) in got.iter().zip(&expect) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn same_convolutions_preserve_extent(
        h in 1usize..7, w in 1usize..7, kh in 0usize..3, kw in 0usize..3, ks in 0usize..4,
    ) {
        let (kh, kw, ks) = (2 * kh + 1, 2 * kw + 1, 2 * ks + 1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([2, 3, h, w]));
        let k = g.constant(Tensor::ones([4, 3, kh, kw]));
        let y = g.conv2d_same(x, k).unwrap();
        prop_assert_eq!(g.shape(y), &[2, 4, h, w]);
        let x = g.constant(Tensor::ones([2, 3, w]));
        let k = g.constant(Tensor::ones([5, 3, ks]));
        let y = g.conv1d_same(x, k).unwrap();
        prop_assert_eq!(g.shape(y), &[2, 5, w]);
    }
}
