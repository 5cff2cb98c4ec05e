#![allow(dead_code)]

use dapnet_core::config::ModelConfig;
use dapnet_core::tensor::{gradcheck, Graph, ParamId, ParamStore, Tensor, Var};
use dapnet_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A model small enough for finite differences.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        t: 16,
        c: 3,
        n_classes: 3,
        d_model: 8,
        period_width: 4,
        corr_dk: 6,
        hybrid_branch_width: 4,
        hybrid_heads: 2,
        ..Default::default()
    }
}

/// `sum(y * w)` for a fixed random `w`.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng(seed ^ 0x5EED));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

/// Relative error between the backward gradient of parameter `id` and central
/// differences taken by perturbing the store directly.
pub fn param_gradcheck<F>(store: &ParamStore, id: ParamId, h: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store).unwrap();
    g.backward(out).unwrap();
    let analytic = g
        .param_grads()
        .find(|(p, _)| *p == id)
        .and_then(|(_, gr)| gr.map(<[f64]>::to_vec))
        .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);

    let eval = |s: &ParamStore| {
        let mut g = Graph::new();
        let out = f(&mut g, s).unwrap();
        g.data(out)[0]
    };
    let mut work = store.clone();
    let mut numeric = vec![0.0; analytic.len()];
    for (j, slot) in numeric.iter_mut().enumerate() {
        let x0 = store.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = x0 + h;
        let up = eval(&work);
        work.get_mut(id).data_mut()[j] = x0 - h;
        let down = eval(&work);
        work.get_mut(id).data_mut()[j] = x0;
        *slot = (up - down) / (2.0 * h);
    }
    gradcheck::relative_error(&analytic, &numeric)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `[B, T, d]` batch of per-channel sines plus noise.
pub fn periodic_batch(b: usize, t: usize, d: usize, seed: u64) -> Tensor {
    use rand::Rng;
    let mut r = rng(seed);
    let mut data = Vec::with_capacity(b * t * d);
    for _ in 0..b {
        let phase: f64 = r.random_range(0.0..std::f64::consts::TAU);
        for step in 0..t {
            for c in 0..d {
                let f = 2.0 + (c % 3) as f64;
                let v = (std::f64::consts::TAU * f * step as f64 / t as f64 + phase + c as f64).sin();
                data.push(v + 0.1 * r.random_range(-1.0..1.0));
            }
        }
    }
    Tensor::new([b, t, d], data).unwrap()
}
