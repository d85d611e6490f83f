use itowave_nn::gradcheck::{check_params, layer_suite};
use itowave_nn::{backward, Adam, AdamConfig, ParamStore, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn sig(v: &[f64]) -> Var {
    Var::constant(Tensor::new(vec![1, 1, v.len()], v.to_vec()).unwrap())
}

#[test]
fn identity_kernel_is_identity() {
    let x = sig(&[1.0, -2.0, 3.5, 0.25]);
    let w = Var::constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let b = Var::constant(Tensor::zeros(&[1]));
    let y = x.conv1d(&w, Some(&b), 1, 1, 0).unwrap();
    assert_eq!(y.value(), x.value());
    let yt = x.conv_transpose1d(&w, Some(&b), 1, 0).unwrap();
    assert_eq!(yt.value(), x.value());
}

#[test]
fn all_ones_kernel_hand_example() {
    let x = sig(&[1.0, 2.0, 3.0, 4.0, 5.0]);
    let w = Var::constant(Tensor::full(&[1, 1, 3], 1.0));
    let y = x.conv1d(&w, None, 1, 1, 1).unwrap();
    assert_eq!(y.value().data(), &[3.0, 6.0, 9.0, 12.0, 9.0]);
}

#[test]
fn dilated_same_padding_keeps_length() {
    let x = sig(&[0.5; 7]);
    let w = Var::constant(Tensor::full(&[1, 1, 3], 1.0));
    assert_eq!(x.conv1d(&w, None, 1, 2, 2).unwrap().shape(), &[1, 1, 7]);
    for d in [1, 2, 4, 8, 64] {
        let x = sig(&vec![0.1; 300]);
        assert_eq!(x.conv1d(&w, None, 1, d, d).unwrap().shape(), &[1, 1, 300]);
    }
}

#[test]
fn transposed_conv_length() {
    let x = Var::constant(Tensor::zeros(&[1, 2, 10]));
    let w = Var::constant(Tensor::zeros(&[2, 3, 32]));
    assert_eq!(x.conv_transpose1d(&w, None, 16, 0).unwrap().shape(), &[1, 3, 176]);
}

#[test]
fn conv_shape_error_names_shapes() {
    let x = Var::constant(Tensor::zeros(&[1, 2, 10]));
    let w = Var::constant(Tensor::zeros(&[4, 3, 3]));
    let err = x.conv1d(&w, None, 1, 1, 1).unwrap_err().to_string();
    assert!(err.contains("[1, 2, 10]") && err.contains("[4, 3, 3]"), "{err}");
}

/// <conv_t(x), y> = <x, conv(y)> with shared weights and stride.
#[test]
fn transposed_conv_is_adjoint_of_strided_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for &(stride, kernel, padding) in &[(1, 3, 1), (2, 4, 1), (16, 32, 8), (3, 5, 0)] {
        let (c_in, c_out, len) = (3, 2, 9);
        let w = random(&[c_in, c_out, kernel], &mut rng);
        let x = random(&[2, c_in, len], &mut rng);
        let xt = Var::constant(x.clone())
            .conv_transpose1d(&Var::constant(w.clone()), None, stride, padding)
            .unwrap();
        let y = random(xt.shape(), &mut rng);
        let cy = Var::constant(y.clone())
            .conv1d(&Var::constant(w), None, stride, 1, padding)
            .unwrap();
        assert_eq!(cy.shape(), x.shape());
        let lhs = xt.value().dot(&y).unwrap();
        let rhs = x.dot(cy.value()).unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

/// Random projection so that the loss depends on every output coordinate.
fn probe(y: &Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = Var::constant(random(y.shape(), &mut rng));
    Ok(y.mul(&c)?.sum())
}

#[test]
fn gradcheck_every_layer() {
    for seed in [7, 8] {
        for (name, worst) in layer_suite(seed).unwrap() {
            assert!(worst < 1e-3, "{name}: worst relative error {worst}");
        }
    }
}

#[test]
fn backward_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Var::leaf(random(&[1, 2, 8], &mut rng));
    let w = Var::constant(random(&[3, 2, 3], &mut rng));
    let y = x.conv1d(&w, None, 1, 1, 1).unwrap().tanh();
    let l1 = probe(&y, 8).unwrap();
    let l2 = y.mul(&y).unwrap().mean();
    let (a, b) = (0.7, -1.3);
    let combo = l1.scale(a).add(&l2.scale(b)).unwrap();
    let g1 = backward(&l1).unwrap().wrt(&x).unwrap().clone();
    let g2 = backward(&l2).unwrap().wrt(&x).unwrap().clone();
    let gc = backward(&combo).unwrap().wrt(&x).unwrap().clone();
    for ((c, p), q) in gc.data().iter().zip(g1.data()).zip(g2.data()) {
        assert!((c - (a * p + b * q)).abs() < 1e-12);
    }
}

#[test]
fn two_layer_conv_net_random_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut store = ParamStore::new();
    let w1 = store.add("w1", random(&[4, 1, 3], &mut rng)).unwrap();
    let b1 = store.add("b1", random(&[4], &mut rng)).unwrap();
    let w2 = store.add("w2", random(&[1, 4, 3], &mut rng)).unwrap();
    let input = random(&[2, 1, 16], &mut rng);
    let loss = move |s: &ParamStore| -> Result<Var> {
        let h = Var::constant(input.clone())
            .conv1d(&s.bind(w1, true), Some(&s.bind(b1, true)), 1, 2, 2)?
            .tanh();
        let y = h.conv1d(&s.bind(w2, true), None, 1, 1, 1)?;
        Ok(y.mul(&y)?.mean())
    };
    let ids = [w1, b1, w2];
    let coords: Vec<_> = (0..20)
        .map(|_| {
            let id = ids[rng.random_range(0..3)];
            (id, rng.random_range(0..store.get(id).value.len()))
        })
        .collect();
    let samples = check_params(&mut store, loss, &coords, 1e-4).unwrap();
    for s in samples {
        assert!(s.relative_error(1e-6) < 1e-3, "{s:?}");
    }
}

#[test]
fn adam_minimises_quadratic_bowl() {
    let mut store = ParamStore::new();
    let id = store
        .add("p", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())
        .unwrap();
    let mut adam = Adam::new(AdamConfig {
        learning_rate: 1e-2,
        ..Default::default()
    })
    .unwrap();
    let loss_of = |s: &ParamStore| {
        let p = s.bind(id, true);
        p.mul(&p).unwrap().sum().scale(0.5)
    };
    let initial = loss_of(&store).value().data()[0];
    let mut losses = Vec::new();
    for _ in 0..500 {
        let loss = loss_of(&store);
        losses.push(loss.value().data()[0]);
        let g = backward(&loss).unwrap();
        store.zero_grad();
        store.accumulate(&g).unwrap();
        adam.step(&mut store).unwrap();
    }
    let final_loss = loss_of(&store).value().data()[0];
    assert!(final_loss < 1e-4 * initial, "{final_loss} vs {initial}");
    // monotone over the approach phase, before the iterate oscillates around 0
    let warm = &losses[..150];
    assert!(warm.windows(2).all(|w| w[1] <= w[0]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Shifting the input by k interior samples shifts the output by k.
    #[test]
    fn conv_is_translation_equivariant(seed in 0u64..1000, shift in 1usize..6, dilation in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = 40;
        let base = random(&[1, 2, len + shift], &mut rng);
        let w = Var::constant(random(&[3, 2, 3], &mut rng));
        let a = Var::constant(Tensor::new(vec![1, 2, len], (0..2).flat_map(|c| base.data()[c * (len + shift)..c * (len + shift) + len].to_vec()).collect()).unwrap());
        let b = Var::constant(Tensor::new(vec![1, 2, len], (0..2).flat_map(|c| base.data()[c * (len + shift) + shift..(c + 1) * (len + shift)].to_vec()).collect()).unwrap());
        let ya = a.conv1d(&w, None, 1, dilation, dilation).unwrap();
        let yb = b.conv1d(&w, None, 1, dilation, dilation).unwrap();
        let halo = dilation;
        for c in 0..3 {
            for l in halo..len - shift - halo {
                let va = ya.value().data()[c * len + l + shift];
                let vb = yb.value().data()[c * len + l];
                prop_assert!((va - vb).abs() < 1e-12);
            }
        }
    }
}
