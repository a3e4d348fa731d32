//! Finite-difference oracle and a random-graph harness for checking
//! `backward` against an independent derivative route.

use rand::Rng;

use crate::error::{Error, Result};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;

/// Central-difference gradient of a scalar function at `x`.
///
/// Lives apart from the graph machinery on purpose: it only evaluates `f`,
/// so it stays an independent oracle for whatever `f` does internally.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                op: "finite_diff_grad",
            });
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Largest elementwise relative error between two same-shape tensors,
/// with the denominator floored at 1 so near-zero entries compare absolutely.
pub fn max_rel_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / 1f64.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}

/// A randomly built scalar-rooted graph plus the input it was sampled with.
pub struct RandomScalarGraph {
    pub graph: Graph,
    pub input: NodeId,
    pub input_value: Tensor,
}

enum Margin {
    /// ReLU input elements must sit clear of the kink at zero.
    ReluKink(NodeId),
    /// L2-norm input must sit clear of the non-differentiable origin.
    NormOrigin(NodeId),
}

/// Sample a random scalar-rooted graph over the full op set with depth at
/// most `max_depth` and dimensions at most `max_dim`.
///
/// Graphs whose sampled values land too close to a ReLU kink or a zero-norm
/// point are rejected and resampled, so central differences stay valid at
/// the returned input.
pub fn random_scalar_graph<R: Rng>(
    rng: &mut R,
    max_depth: usize,
    max_dim: usize,
) -> RandomScalarGraph {
    loop {
        if let Some(found) = try_build(rng, max_depth, max_dim) {
            return found;
        }
    }
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_raw(shape, data)
}

fn try_build<R: Rng>(rng: &mut R, max_depth: usize, max_dim: usize) -> Option<RandomScalarGraph> {
    let m = rng.random_range(1..=max_dim);
    let n = rng.random_range(1..=max_dim);
    let input_value = rand_tensor(rng, vec![m, n], -2.0, 2.0);

    let mut graph = Graph::new();
    let input = graph.input("x", &[m, n]);
    let mut cur = input;
    let mut shape = (m, n);
    let mut margins: Vec<Margin> = Vec::new();

    let depth = rng.random_range(1..=max_depth);
    for _ in 0..depth {
        match rng.random_range(0..8) {
            0 => {
                let cols = rng.random_range(1..=max_dim);
                let w = graph.constant(rand_tensor(rng, vec![shape.1, cols], -1.5, 1.5));
                cur = graph.matmul(cur, w).expect("shapes compatible");
                shape.1 = cols;
            }
            1 => {
                let c = graph.constant(rand_tensor(rng, vec![shape.0, shape.1], -1.5, 1.5));
                cur = graph.add(cur, c).expect("same shape");
            }
            2 => {
                let bias = graph.constant(rand_tensor(rng, vec![1, shape.1], -1.5, 1.5));
                cur = graph.add(cur, bias).expect("bias row");
            }
            3 => {
                let c = graph.constant(rand_tensor(rng, vec![shape.0, shape.1], -1.5, 1.5));
                cur = graph.mul(cur, c).expect("same shape");
            }
            4 => {
                margins.push(Margin::ReluKink(cur));
                cur = graph.relu(cur);
            }
            5 => {
                cur = graph.tanh(cur);
            }
            6 => {
                cur = graph.softmax(cur).expect("2-D");
                if rng.random_bool(0.5) {
                    cur = graph.log(cur);
                }
            }
            _ => {
                let axis = rng.random_range(0..2);
                cur = graph.mean_axis(cur, axis).expect("2-D");
                if axis == 0 {
                    shape.0 = 1;
                } else {
                    shape.1 = 1;
                }
            }
        }
    }

    if rng.random_bool(0.5) {
        graph.sum(cur);
    } else {
        margins.push(Margin::NormOrigin(cur));
        graph.l2_norm(cur);
    }

    let mut bound = std::collections::HashMap::new();
    bound.insert("x".to_string(), input_value.clone());
    graph.forward(&bound).ok()?;

    for margin in &margins {
        match margin {
            Margin::ReluKink(id) => {
                let v = graph.value(*id).expect("forward ran");
                if v.data().iter().any(|x| x.abs() < 1e-3) {
                    return None;
                }
            }
            Margin::NormOrigin(id) => {
                let v = graph.value(*id).expect("forward ran");
                if v.l2_norm() < 5e-2 {
                    return None;
                }
            }
        }
    }

    Some(RandomScalarGraph {
        graph,
        input,
        input_value,
    })
}

/// Analytic-vs-finite-difference check of one random graph; returns the
/// largest relative error over the input gradient.
pub fn check_random_graph(sample: &RandomScalarGraph, h: f64) -> Result<f64> {
    let mut graph = sample.graph.clone();
    let mut bound = std::collections::HashMap::new();
    bound.insert("x".to_string(), sample.input_value.clone());
    graph.forward(&bound)?;
    let analytic = graph
        .backward(&[sample.input])?
        .remove(&sample.input)
        .expect("requested");

    let mut probe_graph = sample.graph.clone();
    let numeric = finite_diff_grad(
        |x| {
            let mut b = std::collections::HashMap::new();
            b.insert("x".to_string(), x.clone());
            Ok(probe_graph.forward(&b)?.data()[0])
        },
        &sample.input_value,
        h,
    )?;

    Ok(max_rel_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(
            |x| Ok(x.data()[0] * x.data()[0]),
            &Tensor::scalar(3.0),
            1e-4,
        )
        .unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(|_| Ok(4.25), &Tensor::row(vec![1.0, 2.0, 3.0]), 1e-4).unwrap();
        assert!(g.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_finite_evaluation_errors() {
        let r = finite_diff_grad(|x| Ok(1.0 / (x.data()[0] - 3.0)), &Tensor::scalar(3.0), 0.0);
        assert!(r.is_err());
    }

    #[test]
    fn softmax_cross_entropy_matches_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let logits = rand_tensor(&mut rng, vec![1, 4], -2.0, 2.0);
            let label = rng.random_range(0..4usize);
            let mut onehot = vec![0.0; 4];
            onehot[label] = -1.0; // negated one-hot folds the minus into the product

            let build = |g: &mut Graph| -> NodeId {
                let x = g.input("x", &[1, 4]);
                let s = g.softmax(x).unwrap();
                let l = g.log(s);
                let oh = g.constant(Tensor::row(onehot.clone()));
                let prod = g.mul(l, oh).unwrap();
                g.sum(prod);
                x
            };

            let mut g = Graph::new();
            let x = build(&mut g);
            let mut bound = HashMap::new();
            bound.insert("x".to_string(), logits.clone());
            g.forward(&bound).unwrap();
            let analytic = g.backward(&[x]).unwrap().remove(&x).unwrap();

            let numeric = finite_diff_grad(
                |t| {
                    let mut g2 = Graph::new();
                    build(&mut g2);
                    let mut b = HashMap::new();
                    b.insert("x".to_string(), t.clone());
                    Ok(g2.forward(&b)?.data()[0])
                },
                &logits,
                1e-4,
            )
            .unwrap();

            assert!(max_rel_error(&analytic, &numeric) < 1e-4);
        }
    }

    #[test]
    fn two_layer_net_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(&mut rng, vec![1, 5], -1.0, 1.0);
        let w1 = rand_tensor(&mut rng, vec![5, 6], -1.0, 1.0);
        let b1 = rand_tensor(&mut rng, vec![1, 6], -0.5, 0.5);
        let w2 = rand_tensor(&mut rng, vec![6, 3], -1.0, 1.0);

        let build = |g: &mut Graph| -> NodeId {
            let x = g.input("x", &[1, 5]);
            let w1c = g.constant(w1.clone());
            let b1c = g.constant(b1.clone());
            let w2c = g.constant(w2.clone());
            let h = g.matmul(x, w1c).unwrap();
            let h = g.add(h, b1c).unwrap();
            let h = g.tanh(h);
            let o = g.matmul(h, w2c).unwrap();
            let s = g.softmax(o).unwrap();
            let l = g.log(s);
            g.sum(l);
            x
        };

        let mut g = Graph::new();
        let x = build(&mut g);
        let mut bound = HashMap::new();
        bound.insert("x".to_string(), x0.clone());
        g.forward(&bound).unwrap();
        let analytic = g.backward(&[x]).unwrap().remove(&x).unwrap();

        let numeric = finite_diff_grad(
            |t| {
                let mut g2 = Graph::new();
                build(&mut g2);
                let mut b = HashMap::new();
                b.insert("x".to_string(), t.clone());
                Ok(g2.forward(&b)?.data()[0])
            },
            &x0,
            1e-4,
        )
        .unwrap();

        assert!(max_rel_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn random_graphs_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let sample = random_scalar_graph(&mut rng, 4, 8);
            worst = worst.max(check_random_graph(&sample, 1e-4).unwrap());
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }
}
