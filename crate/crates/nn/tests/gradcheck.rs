//! Finite-difference checks for every differentiable op.

use lvq_nn::{ConvGeom, Graph, NormStats, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds a scalar loss from input leaves; returns it with the leaf vars.
type Build = dyn Fn(&mut Graph, &[Tensor]) -> (Var, Vec<Var>);

fn check(build: &Build, inputs: Vec<Tensor>, tol: f64) {
    let mut g = Graph::new();
    let (loss, leaves) = build(&mut g, &inputs);
    let grads = g.backward(loss).unwrap();
    let h = 1e-6;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf).expect("leaf gradient").clone();
        for i in 0..inputs[k].numel() {
            let eval = |delta: f64| {
                let mut perturbed = inputs.clone();
                perturbed[k].data_mut()[i] += delta;
                let mut g = Graph::new();
                let (loss, _) = build(&mut g, &perturbed);
                g.value(loss).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(err < tol, "input {k} element {i}: analytic {a} numeric {numeric}");
        }
    }
}

/// Weighted sum of outputs so every output element gets a distinct gradient.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(y).shape().to_vec();
    let target = random(&shape, &mut rng);
    g.mse(y, &target).unwrap()
}

#[test]
fn conv_planar_strided_with_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = vec![
        random(&[2, 3, 1, 7, 6], &mut rng),
        random(&[4, 3, 1, 3, 3], &mut rng),
        random(&[4], &mut rng),
    ];
    check(
        &|g, t| {
            let x = g.input(t[0].clone());
            let w = g.input(t[1].clone());
            let b = g.input(t[2].clone());
            let y = g.conv(x, w, Some(b), ConvGeom::planar(2, 1)).unwrap();
            (probe(g, y, 9), vec![x, w, b])
        },
        inputs,
        1e-6,
    );
}

#[test]
fn conv_volumetric_and_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![
        random(&[2, 2, 4, 5, 5], &mut rng),
        random(&[3, 2, 3, 3, 3], &mut rng),
        random(&[2, 3, 1, 1, 1], &mut rng),
    ];
    check(
        &|g, t| {
            let x = g.input(t[0].clone());
            let w = g.input(t[1].clone());
            let p = g.input(t[2].clone());
            let y = g.conv(x, w, None, ConvGeom::volumetric(1, 1, 1)).unwrap();
            let z = g.conv(y, p, None, ConvGeom::planar(1, 0)).unwrap();
            (probe(g, z, 3), vec![x, w, p])
        },
        inputs,
        1e-6,
    );
}

#[test]
fn norm_batch_and_running() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = vec![
        random(&[3, 2, 2, 3, 3], &mut rng),
        random(&[2], &mut rng),
        random(&[2], &mut rng),
    ];
    for batch in [true, false] {
        check(
            &move |g, t| {
                let x = g.input(t[0].clone());
                let gamma = g.input(t[1].clone());
                let beta = g.input(t[2].clone());
                let stats = if batch {
                    NormStats::Batch
                } else {
                    NormStats::Running { mean: &[0.1, -0.2], var: &[0.5, 2.0] }
                };
                let (y, _) = g.norm(x, gamma, beta, 1e-5, stats).unwrap();
                (probe(g, y, 4), vec![x, gamma, beta])
            },
            inputs.clone(),
            1e-5,
        );
    }
}

#[test]
fn pooling_upsampling_and_reshapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = vec![random(&[2, 3, 2, 6, 4], &mut rng), random(&[5, 3], &mut rng), random(&[5], &mut rng)];
    check(
        &|g, t| {
            let x = g.input(t[0].clone());
            let w = g.input(t[1].clone());
            let b = g.input(t[2].clone());
            let r = g.relu(x);
            let p = g.max_pool2(r).unwrap();
            let u = g.upsample2(p).unwrap();
            let a = g.avg_pool2(x).unwrap();
            let u2 = g.upsample2(a).unwrap();
            let u = g.add(u, u2).unwrap();
            let s = g.add(u, x).unwrap();
            let m = g.spatial_mean(s).unwrap(); // [2, 3, 2]
            let tr = g.swap_last2(m).unwrap(); // [2, 2, 3]
            let flat = g.reshape(tr, &[4, 3]).unwrap();
            let lin = g.linear(flat, w, Some(b)).unwrap(); // [4, 5]
            let part = g.narrow(lin, 1, 3).unwrap();
            (probe(g, part, 5), vec![x, w, b])
        },
        inputs,
        1e-5,
    );
}

#[test]
fn cross_entropy_and_weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let inputs = vec![random(&[2, 3, 1, 2, 2], &mut rng), random(&[4, 2], &mut rng)];
    check(
        &|g, t| {
            let seg = g.input(t[0].clone());
            let phase = g.input(t[1].clone());
            let seg_labels = [0, 1, 2, 2, 1, 0, 0, 2];
            let a = g.softmax_cross_entropy(seg, &seg_labels).unwrap();
            let b = g.softmax_cross_entropy(phase, &[1, 0, 0, 1]).unwrap();
            let c = probe(g, phase, 6);
            (g.weighted_sum(&[(a, 0.1), (b, 0.05), (c, 1.0)]).unwrap(), vec![seg, phase])
        },
        inputs,
        1e-6,
    );
}

#[test]
fn cross_entropy_value_matches_definition() {
    let mut g = Graph::new();
    let logits = g.input(Tensor::new(&[1, 2], vec![0.0, (3.0f64).ln()]).unwrap());
    let loss = g.softmax_cross_entropy(logits, &[1]).unwrap();
    // p = 3 / 4
    assert!((g.value(loss).item() + (0.75f64).ln()).abs() < 1e-12);
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 2, 1, 4, 4]));
    let w = g.input(Tensor::zeros(&[3, 5, 1, 3, 3]));
    assert!(g.conv(x, w, None, ConvGeom::planar(1, 1)).is_err());
    let y = g.input(Tensor::zeros(&[2, 2]));
    assert!(g.add(x, y).is_err());
    assert!(g.softmax_cross_entropy(y, &[0, 5]).is_err());
}
