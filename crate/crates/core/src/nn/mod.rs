//! Minimal dense-network substrate: matrices, layers, backprop and Adam.

mod adam;
mod layer;
mod matrix;

pub use adam::{AdamConfig, AdamState};
pub use layer::{
    backward, forward, forward_cached, params_mut, Activation, DenseLayer, ForwardCache,
    GradientTape, LayerGrad,
};
pub use matrix::Matrix;

/// Builds an MLP `dims[0] -> dims[1] -> ...` with `hidden` on every layer
/// except the last, which uses `last`.
pub fn mlp<R: rand::Rng + ?Sized>(
    dims: &[usize],
    hidden: Activation,
    last: Activation,
    rng: &mut R,
) -> crate::Result<Vec<DenseLayer>> {
    let n = dims.len().saturating_sub(1);
    (0..n)
        .map(|i| {
            let act = if i + 1 == n { last } else { hidden };
            DenseLayer::glorot(dims[i], dims[i + 1], act, rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn layer(rows: Vec<Vec<f64>>, bias: Vec<f64>, act: Activation) -> DenseLayer {
        DenseLayer::new(Matrix::from_rows(&rows).unwrap(), bias, act).unwrap()
    }

    #[test]
    fn identity_layer_passes_input() {
        let l = layer(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0, 0.0],
            Activation::Identity,
        );
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(forward(&[l], &x).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn relu_layer_clips_negative() {
        let l = layer(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0, 0.0],
            Activation::Relu,
        );
        let x = Matrix::from_rows(&[vec![-1.0, 2.0]]).unwrap();
        assert_eq!(forward(&[l], &x).unwrap().as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn two_layer_matches_hand_evaluation() {
        let l0 = layer(
            vec![vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 1.0]],
            vec![0.1, -0.2, 0.3],
            Activation::Relu,
        );
        let l1 = layer(vec![vec![2.0, -1.0, 0.5]], vec![0.25], Activation::Identity);
        let x = Matrix::from_rows(&[vec![0.7, -0.4]]).unwrap();
        let out = forward(&[l0, l1], &x).unwrap();

        // Straight-line evaluation of the same chain.
        let h0 = (1.0 * 0.7 + -2.0 * -0.4 + 0.1f64).max(0.0);
        let h1 = (0.5 * 0.7 + 3.0 * -0.4 - 0.2f64).max(0.0);
        let h2 = (-0.7 - 0.4 + 0.3f64).max(0.0);
        let y = 2.0 * h0 - 1.0 * h1 + 0.5 * h2 + 0.25;
        assert!((out.get(0, 0) - y).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_names_layer() {
        let l0 = layer(vec![vec![1.0, 1.0]], vec![0.0], Activation::Identity);
        let l1 = layer(vec![vec![1.0, 1.0]], vec![0.0], Activation::Identity);
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        match forward(&[l0, l1], &x) {
            Err(Error::Shape { layer: Some(1), .. }) => {}
            other => panic!("expected shape error at layer 1, got {other:?}"),
        }
    }

    #[test]
    fn identity_layer_backward_linear_case() {
        let l = layer(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0.0, 0.0],
            Activation::Identity,
        );
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        let (_, cache) = forward_cached(std::slice::from_ref(&l), &x).unwrap();
        let up = Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap();
        let (tape, dx) = backward(&[l], &cache, &up).unwrap();
        // dW[o][i] = Σ_b x[b][i]; every output row sees the same column sums.
        assert_eq!(tape.layers[0].weights.as_slice(), &[4.0, 1.0, 4.0, 1.0]);
        assert_eq!(tape.layers[0].bias, vec![2.0, 2.0]);
        assert_eq!(dx.as_slice(), &[1.0; 4]);
    }

    #[test]
    fn relu_gate_blocks_gradient() {
        let l = layer(
            vec![vec![1.0], vec![-1.0]],
            vec![0.0, 0.0],
            Activation::Relu,
        );
        let x = Matrix::from_rows(&[vec![2.0]]).unwrap();
        let (_, cache) = forward_cached(std::slice::from_ref(&l), &x).unwrap();
        let up = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let (tape, dx) = backward(&[l], &cache, &up).unwrap();
        assert_eq!(tape.layers[0].weights.row(1), &[0.0]);
        assert_eq!(tape.layers[0].bias[1], 0.0);
        assert_eq!(dx.as_slice(), &[1.0]);
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let l = layer(vec![vec![1.0]], vec![0.0], Activation::Identity);
        let up = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(
            backward(&[l], &ForwardCache::default(), &up),
            Err(Error::Usage(_))
        ));
    }

    /// Loss `Σ c ⊙ forward(x)` for a fixed random direction `c`.
    fn directional(layers: &[DenseLayer], x: &Matrix, c: &Matrix) -> f64 {
        let out = forward(layers, x).unwrap();
        out.as_slice()
            .iter()
            .zip(c.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    }

    fn slot(ls: &mut [DenseLayer], li: usize, which: usize, k: usize) -> &mut f64 {
        if which == 0 {
            &mut ls[li].weights_mut().as_mut_slice()[k]
        } else {
            &mut ls[li].bias_mut()[k]
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn gradients_match_central_differences() {
        let acts = [Activation::Tanh, Activation::Relu, Activation::Identity];
        for seed in 0..12u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hidden = acts[seed as usize % 3];
            let dims = [3, 5, 4, 2];
            let mut layers = mlp(&dims, hidden, Activation::Tanh, &mut rng).unwrap();
            for l in &mut layers {
                for b in l.bias_mut() {
                    *b = rng.gen_range(-0.5..0.5);
                }
            }
            let x = random_matrix(&mut rng, 4, 3);
            let c = random_matrix(&mut rng, 4, 2);

            let (_, cache) = forward_cached(&layers, &x).unwrap();
            let (tape, dx) = backward(&layers, &cache, &c).unwrap();

            let h = 1e-4;
            let mut worst: f64 = 0.0;
            for li in 0..layers.len() {
                for which in 0..2 {
                    let n = if which == 0 {
                        layers[li].weights().as_slice().len()
                    } else {
                        layers[li].bias().len()
                    };
                    for k in 0..n {
                        let orig = *slot(&mut layers, li, which, k);
                        *slot(&mut layers, li, which, k) = orig + h;
                        let fp = directional(&layers, &x, &c);
                        *slot(&mut layers, li, which, k) = orig - h;
                        let fm = directional(&layers, &x, &c);
                        *slot(&mut layers, li, which, k) = orig;
                        let fd = (fp - fm) / (2.0 * h);
                        let an = tape.layers[li].slices()[which][k];
                        worst = worst.max(rel_err(an, fd));
                    }
                }
            }
            for k in 0..x.as_slice().len() {
                let mut xp = x.clone();
                xp.as_mut_slice()[k] += h;
                let mut xm = x.clone();
                xm.as_mut_slice()[k] -= h;
                let fd =
                    (directional(&layers, &xp, &c) - directional(&layers, &xm, &c)) / (2.0 * h);
                worst = worst.max(rel_err(dx.as_slice()[k], fd));
            }
            assert!(worst < 1e-4, "seed {seed}: max relative error {worst}");
        }
    }

    #[test]
    fn same_seed_same_parameters_after_training_steps() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut layers =
                mlp(&[2, 6, 1], Activation::Relu, Activation::Identity, &mut rng).unwrap();
            let sizes: Vec<usize> = layers
                .iter()
                .flat_map(|l| [l.in_dim() * l.out_dim(), l.out_dim()])
                .collect();
            let mut opt = AdamState::new(AdamConfig::default(), sizes);
            let x = random_matrix(&mut rng, 8, 2);
            let c = random_matrix(&mut rng, 8, 1);
            for _ in 0..25 {
                let (_, cache) = forward_cached(&layers, &x).unwrap();
                let (tape, _) = backward(&layers, &cache, &c).unwrap();
                let grads: Vec<Vec<f64>> = tape.slices().iter().map(|s| s.to_vec()).collect();
                let grefs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
                opt.step(&mut params_mut(&mut layers), &grefs).unwrap();
            }
            layers
        };
        let a = run();
        let b = run();
        for (la, lb) in a.iter().zip(&b) {
            let bits = |l: &DenseLayer| {
                l.weights()
                    .as_slice()
                    .iter()
                    .chain(l.bias())
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            };
            assert_eq!(bits(la), bits(lb));
        }
    }

    proptest! {
        #[test]
        fn identity_stack_without_bias_is_linear(
            seed in 0u64..1000,
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layers = mlp(&[3, 4, 2], Activation::Identity, Activation::Identity, &mut rng).unwrap();
            let x = random_matrix(&mut rng, 2, 3);
            let y = random_matrix(&mut rng, 2, 3);
            let combo = x.scale(alpha).add(&y.scale(beta)).unwrap();
            let lhs = forward(&layers, &combo).unwrap();
            let rhs = forward(&layers, &x).unwrap().scale(alpha)
                .add(&forward(&layers, &y).unwrap().scale(beta)).unwrap();
            for (a, b) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn forward_preserves_batch_and_stays_finite(seed in 0u64..1000, batch in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layers = mlp(&[4, 8, 3], Activation::Tanh, Activation::Identity, &mut rng).unwrap();
            let x = random_matrix(&mut rng, batch, 4);
            let out = forward(&layers, &x).unwrap();
            prop_assert_eq!(out.rows(), batch);
            prop_assert_eq!(out.cols(), 3);
            prop_assert!(out.is_finite());
        }
    }
}
