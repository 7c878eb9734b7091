//! The graph-built MLP against a plain loop implementation.

use metamirror::autodiff::{Graph, Tensor};
use metamirror::model::{forward, init_params, loss, Head, MlpSpec};
use metamirror::tasks::{pool_task, Pool, TaskFamilyConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn straight_line_forward(sizes: &[usize], params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut offset = 0;
    let layers = sizes.len() - 1;
    for l in 0..layers {
        let (fan_in, out) = (sizes[l], sizes[l + 1]);
        let mut next = vec![0.0; out];
        for (o, slot) in next.iter_mut().enumerate() {
            let row = &params[offset + o * (fan_in + 1)..offset + (o + 1) * (fan_in + 1)];
            let mut acc = row[fan_in];
            for i in 0..fan_in {
                acc += row[i] * h[i];
            }
            *slot = if l + 1 < layers { acc.max(0.0) } else { acc };
        }
        offset += out * (fan_in + 1);
        h = next;
    }
    h
}

#[test]
fn forward_matches_plain_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for sizes in [vec![1, 40, 40, 1], vec![3, 7, 5], vec![2, 1]] {
        let spec = MlpSpec::new(sizes.clone(), Head::Regression).unwrap();
        let mut params = init_params(&spec, &mut rng).into_tensor();
        for v in params.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let n = 9;
        let inputs = Tensor::matrix(
            n,
            sizes[0],
            (0..n * sizes[0])
                .map(|_| rng.random_range(-3.0..3.0))
                .collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let p = g.leaf(params.clone());
        let out = forward(&spec, p, &inputs, &mut g).unwrap();
        let got = g.value(out).data();
        let cols = *sizes.last().unwrap();
        for r in 0..n {
            let expected = straight_line_forward(
                &sizes,
                params.data(),
                &inputs.data()[r * sizes[0]..(r + 1) * sizes[0]],
            );
            for (c, e) in expected.iter().enumerate() {
                assert!((got[r * cols + c] - e).abs() <= 1e-12, "{sizes:?} row {r}");
            }
        }
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let config = TaskFamilyConfig::blobs(3, 2, 2, 0.5, 4);
    let task = pool_task(&config, Pool::MetaTrain, 0).unwrap();
    let spec = MlpSpec::new(vec![2, 6, 3], Head::Classification).unwrap();
    let params = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(5)).into_tensor();
    let value = |p: &Tensor| {
        let mut g = Graph::new();
        let v = g.leaf(p.clone());
        let l = loss(&spec, v, &task.train, &mut g).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let v = g.leaf(params.clone());
    let l = loss(&spec, v, &task.train, &mut g).unwrap();
    let grad = g.grad(l, &[v], false).unwrap()[0];
    let analytic = g.value(grad).data().to_vec();
    let h = 1e-6;
    for (j, a) in analytic.iter().enumerate() {
        let mut plus = params.clone();
        plus.data_mut()[j] += h;
        let mut minus = params.clone();
        minus.data_mut()[j] -= h;
        let numeric = (value(&plus) - value(&minus)) / (2.0 * h);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        assert!(rel <= 1e-6, "param {j}: {a} vs {numeric}");
    }
}
