mod common;

use common::*;
use dapnet_core::config::ExpertKind;
use dapnet_core::experts::{CorrelationExpert, Embedding, Expert, HybridExpert, PeriodicityExpert};
use dapnet_core::tensor::{gradcheck, Graph, ParamStore, Tensor};
use dapnet_core::Error;

#[test]
fn embedding_with_identity_projection_is_identity() {
    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, "embed", 4, 4, &mut rng(0));
    let w = store.get_mut(emb.projection.weight).data_mut();
    w.fill(0.0);
    for i in 0..4 {
        w[i * 4 + i] = 1.0;
    }
    let x = Tensor::randn([2, 5, 4], 1.0, &mut rng(1));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = emb.forward(&mut g, &store, xv).unwrap();
    assert_eq!(g.data(y), x.data());
}

#[test]
fn embedding_of_zeros_is_bias_everywhere() {
    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, "embed", 3, 5, &mut rng(0));
    let bias = emb.projection.bias.unwrap();
    store
        .get_mut(bias)
        .data_mut()
        .copy_from_slice(&[1.0, -2.0, 0.5, 3.0, 0.0]);
    let mut g = Graph::new();
    let xv = g.constant(Tensor::zeros([2, 4, 3]));
    let y = emb.forward(&mut g, &store, xv).unwrap();
    for row in g.value(y).rows() {
        assert_eq!(row, &[1.0, -2.0, 0.5, 3.0, 0.0]);
    }
}

#[test]
fn embedding_rejects_wrong_channel_count() {
    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, "embed", 3, 5, &mut rng(0));
    let mut g = Graph::new();
    let xv = g.constant(Tensor::zeros([2, 4, 2]));
    assert!(matches!(emb.forward(&mut g, &store, xv), Err(Error::Dimension { .. })));
}

#[test]
fn embedding_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let emb = Embedding::new(&mut store, "embed", 3, 5, &mut rng(2));
    let x = Tensor::randn([2, 4, 3], 1.0, &mut rng(3));
    let errs = gradcheck::check(std::slice::from_ref(&x), 1e-5, |g, v| {
        let y = emb.forward(g, &store, v[0])?;
        weighted_sum(g, y, 4)
    })
    .unwrap();
    assert!(errs[0] < 1e-4, "{errs:?}");
    let err = param_gradcheck(&store, emb.projection.weight, 1e-5, |g, s| {
        let xv = g.constant(x.clone());
        let y = emb.forward(g, s, xv)?;
        weighted_sum(g, y, 4)
    });
    assert!(err < 1e-4, "{err}");
}

fn periodicity(store: &mut ParamStore, k: usize) -> PeriodicityExpert {
    let cfg = dapnet_core::config::ModelConfig {
        d_model: 16,
        period_k: k,
        ..tiny_config()
    };
    PeriodicityExpert::new(&cfg, store, "p", &mut rng(5))
}

#[test]
fn periodicity_preserves_shape() {
    let mut store = ParamStore::new();
    let e = periodicity(&mut store, 2);
    let mut g = Graph::new();
    let h = g.constant(Tensor::randn([2, 64, 16], 1.0, &mut rng(6)));
    let y = e.forward(&mut g, &store, h).unwrap();
    assert_eq!(g.shape(y), &[2, 64, 16]);
}

#[test]
fn periodicity_with_zero_kernels_is_identity() {
    let mut store = ParamStore::new();
    let e = periodicity(&mut store, 3);
    e.zero_update_path(&mut store);
    let h = Tensor::randn([2, 64, 16], 1.0, &mut rng(7));
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let y = e.forward(&mut g, &store, hv).unwrap();
    assert_eq!(g.data(y), h.data());
}

#[test]
fn periodicity_fusion_weights_are_a_softmax_over_amplitudes() {
    let mut store = ParamStore::new();
    let e = periodicity(&mut store, 3);
    let h = Tensor::randn([4, 64, 16], 1.0, &mut rng(8));
    for set in e.sample_periods(&h).unwrap() {
        let w = set.weights();
        assert_eq!(w.len(), set.len());
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        // Independent softmax.
        let z: f64 = set.amplitudes.iter().map(|a| a.exp()).sum();
        for (wi, a) in w.iter().zip(&set.amplitudes) {
            assert!((wi - a.exp() / z).abs() < 1e-9);
        }
    }
}

#[test]
fn periodicity_output_does_not_depend_on_batch_mates() {
    let mut store = ParamStore::new();
    let e = periodicity(&mut store, 2);
    let a = periodic_batch(1, 64, 16, 1);
    let b = Tensor::randn([1, 64, 16], 1.0, &mut rng(9));
    let both = Tensor::new([2, 64, 16], [a.data(), b.data()].concat()).unwrap();
    let run = |x: &Tensor| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = e.forward(&mut g, &store, xv).unwrap();
        g.data(y).to_vec()
    };
    let alone = run(&a);
    let joint = run(&both);
    assert!(max_abs_diff(&alone, &joint[..alone.len()]) < 1e-12);
}

#[test]
fn periodicity_gradients_match_finite_differences() {
    let cfg = tiny_config();
    let mut store = ParamStore::new();
    let e = PeriodicityExpert::new(&cfg, &mut store, "p", &mut rng(10));
    let h = periodic_batch(2, cfg.t, cfg.d_model, 11);
    let errs = gradcheck::check(std::slice::from_ref(&h), 1e-5, |g, v| {
        let y = e.forward(g, &store, v[0])?;
        weighted_sum(g, y, 12)
    })
    .unwrap();
    assert!(errs[0] < 1e-4, "{errs:?}");
    for id in e.params() {
        let err = param_gradcheck(&store, id, 1e-5, |g, s| {
            let hv = g.constant(h.clone());
            let y = e.forward(g, s, hv)?;
            weighted_sum(g, y, 12)
        });
        assert!(err < 1e-4, "{} {err}", store.name(id));
    }
}

fn correlation(store: &mut ParamStore, t: usize, d: usize) -> CorrelationExpert {
    let cfg = dapnet_core::config::ModelConfig {
        t,
        d_model: d,
        ..tiny_config()
    };
    CorrelationExpert::new(&cfg, store, "c", &mut rng(13))
}

#[test]
fn adjacency_rows_are_distributions() {
    let mut store = ParamStore::new();
    let e = correlation(&mut store, 16, 8);
    let mut g = Graph::new();
    let h = g.constant(Tensor::randn([3, 8, 16], 1.0, &mut rng(14)));
    let a = e.dynamic_adjacency(&mut g, &store, h).unwrap();
    assert_eq!(g.shape(a), &[3, 8, 8]);
    for row in g.value(a).rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(row.iter().all(|&v| v > 0.0));
    }
}

#[test]
fn identical_channels_give_uniform_adjacency() {
    let mut store = ParamStore::new();
    let e = correlation(&mut store, 16, 8);
    let sig = Tensor::randn([16], 1.0, &mut rng(15));
    let data: Vec<f64> = (0..8).flat_map(|_| sig.data().to_vec()).collect();
    let mut g = Graph::new();
    let h = g.constant(Tensor::new([1, 8, 16], data).unwrap());
    let a = e.dynamic_adjacency(&mut g, &store, h).unwrap();
    assert!(g.data(a).iter().all(|&v| (v - 1.0 / 8.0).abs() < 1e-12));
}

#[test]
fn adjacency_is_sample_specific() {
    let mut store = ParamStore::new();
    let e = correlation(&mut store, 16, 8);
    let mut g = Graph::new();
    let h = g.constant(Tensor::randn([2, 8, 16], 1.0, &mut rng(16)));
    let a = e.dynamic_adjacency(&mut g, &store, h).unwrap();
    let (first, second) = g.data(a).split_at(64);
    assert!(max_abs_diff(first, second) > 1e-6);
}

#[test]
fn adjacency_ignores_row_constant_logit_shifts() {
    // Shifting every key by the same vector adds a per-row constant to Q·Kᵀ.
    let mut store = ParamStore::new();
    let e = correlation(&mut store, 16, 8);
    let h = Tensor::randn([2, 8, 16], 1.0, &mut rng(17));
    let run = |s: &ParamStore| {
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let a = e.dynamic_adjacency(&mut g, s, hv).unwrap();
        g.data(a).to_vec()
    };
    let before = run(&store);
    let mut shifted = store.clone();
    let bias = e.w_k.bias.unwrap();
    shifted
        .get_mut(bias)
        .data_mut()
        .iter_mut()
        .enumerate()
        .for_each(|(i, b)| *b += 0.3 * i as f64 - 1.0);
    assert!(max_abs_diff(&before, &run(&shifted)) < 1e-12);
}

#[test]
fn correlation_zero_value_projection_is_identity() {
    let mut store = ParamStore::new();
    let e = correlation(&mut store, 16, 8);
    e.zero_update_path(&mut store);
    let h = Tensor::randn([2, 16, 8], 1.0, &mut rng(18));
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let (y, _) = e.forward(&mut g, &store, hv).unwrap();
    assert_eq!(g.shape(y), &[2, 16, 8]);
    assert!(max_abs_diff(g.data(y), h.data()) < 1e-12);
}

#[test]
fn correlation_rejects_other_window_lengths() {
    let mut store = ParamStore::new();
    let e = correlation(&mut store, 16, 8);
    let mut g = Graph::new();
    let hv = g.constant(Tensor::zeros([1, 20, 8]));
    assert!(matches!(e.forward(&mut g, &store, hv), Err(Error::Dimension { .. })));
}

#[test]
fn correlation_projections_receive_gradients() {
    let mut store = ParamStore::new();
    let e = correlation(&mut store, 16, 8);
    let h = Tensor::randn([2, 16, 8], 1.0, &mut rng(19));
    let mut g = Graph::new();
    let hv = g.constant(h);
    let (y, _) = e.forward(&mut g, &store, hv).unwrap();
    let s = weighted_sum(&mut g, y, 20).unwrap();
    g.backward(s).unwrap();
    let grads: std::collections::HashMap<_, _> = g.param_grads().collect();
    for lin in [&e.w_q, &e.w_k, &e.w_v] {
        let gr = grads[&lin.weight].expect("gradient present");
        assert!(gr.iter().any(|v| v.abs() > 0.0));
    }
}

fn hybrid(store: &mut ParamStore) -> HybridExpert {
    HybridExpert::new(&tiny_config(), store, "h", &mut rng(21))
}

#[test]
fn hybrid_shape_and_identity_when_fusion_is_zero() {
    let mut store = ParamStore::new();
    let e = hybrid(&mut store);
    let h = Tensor::randn([3, 16, 8], 1.0, &mut rng(22));
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let (y, _) = e.forward(&mut g, &store, hv).unwrap();
    assert_eq!(g.shape(y), &[3, 16, 8]);
    assert!(max_abs_diff(g.data(y), h.data()) > 1e-6);

    e.zero_update_path(&mut store);
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let (y, _) = e.forward(&mut g, &store, hv).unwrap();
    assert_eq!(g.data(y), h.data());
}

#[test]
fn hybrid_attention_rows_sum_to_one() {
    let mut store = ParamStore::new();
    let e = hybrid(&mut store);
    let mut g = Graph::new();
    let hv = g.constant(Tensor::randn([2, 16, 8], 1.0, &mut rng(23)));
    let (_, attn) = e.forward(&mut g, &store, hv).unwrap();
    assert_eq!(g.shape(attn), &[2, 2, 16, 16]);
    for row in g.value(attn).rows() {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn hybrid_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let e = hybrid(&mut store);
    let h = Tensor::randn([2, 16, 8], 1.0, &mut rng(24));
    let errs = gradcheck::check(&[h], 1e-5, |g, v| {
        let (y, _) = e.forward(g, &store, v[0])?;
        weighted_sum(g, y, 25)
    })
    .unwrap();
    assert!(errs[0] < 1e-4, "{errs:?}");
}

#[test]
fn every_expert_parameter_gets_a_gradient_at_init() {
    let cfg = tiny_config();
    for kind in ExpertKind::ALL {
        let mut store = ParamStore::new();
        let e = Expert::new(kind, &cfg, &mut store, "e", &mut rng(26));
        let mut g = Graph::new();
        let hv = g.constant(periodic_batch(2, cfg.t, cfg.d_model, 27));
        let y = e.forward(&mut g, &store, hv).unwrap();
        let s = weighted_sum(&mut g, y, 28).unwrap();
        g.backward(s).unwrap();
        let grads: std::collections::HashMap<_, _> = g.param_grads().collect();
        for id in e.params() {
            let gr = grads
                .get(&id)
                .copied()
                .flatten()
                .unwrap_or_else(|| panic!("{} missing", store.name(id)));
            assert!(
                gr.iter().any(|v| v.abs() > 0.0),
                "{:?}: {} has zero gradient",
                kind,
                store.name(id)
            );
        }
        assert_eq!(e.kind(), kind);
    }
}

#[test]
fn every_expert_is_identity_with_zeroed_update() {
    let cfg = tiny_config();
    let h = Tensor::randn([2, cfg.t, cfg.d_model], 1.0, &mut rng(29));
    for kind in ExpertKind::ALL {
        let mut store = ParamStore::new();
        let e = Expert::new(kind, &cfg, &mut store, "e", &mut rng(30));
        e.zero_update_path(&mut store);
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let y = e.forward(&mut g, &store, hv).unwrap();
        assert!(max_abs_diff(g.data(y), h.data()) < 1e-12, "{kind:?}");
    }
}
