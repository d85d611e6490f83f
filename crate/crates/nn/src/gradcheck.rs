//! Central finite-difference checks for analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{backward, Var};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// One compared coordinate.
#[derive(Debug, Clone, Copy)]
pub struct GradSample {
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients
    /// from turning rounding noise into a large ratio.
    pub fn relative_error(&self, floor: f64) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / scale
    }
}

/// Compares `d loss / d param[coord]` from [`backward`] with a central
/// difference of step `h`. `loss_fn` must bind parameters as trainable.
pub fn check_params<F>(
    store: &mut ParamStore,
    loss_fn: F,
    coords: &[(ParamId, usize)],
    h: f64,
) -> Result<Vec<GradSample>>
where
    F: Fn(&ParamStore) -> Result<Var>,
{
    let loss = loss_fn(store)?;
    let grads = backward(&loss)?;
    drop(loss);
    let mut out = Vec::with_capacity(coords.len());
    for &(id, i) in coords {
        let analytic = grads.param(id).map_or(0.0, |g| g.data()[i]);
        let orig = store.get(id).value.data()[i];
        store.get_mut(id).value.data_mut()[i] = orig + h;
        let up = scalar(&loss_fn(store)?);
        store.get_mut(id).value.data_mut()[i] = orig - h;
        let down = scalar(&loss_fn(store)?);
        store.get_mut(id).value.data_mut()[i] = orig;
        out.push(GradSample {
            analytic,
            numeric: (up - down) / (2.0 * h),
        });
    }
    Ok(out)
}

fn scalar(v: &Var) -> f64 {
    v.value().data()[0]
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Loss that depends on every coordinate of `y` through fixed random weights.
fn probe(y: &Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let c = Var::constant(random(y.shape(), rng));
    Ok(y.mul(&c)?.sum())
}

type LayerFn = fn(&ParamStore, &[ParamId], &mut ChaCha8Rng) -> Result<Var>;

fn layer_cases() -> Vec<(&'static str, Vec<Vec<usize>>, LayerFn)> {
    fn conv(s: &ParamStore, id: &[ParamId], stride: usize, dilation: usize, padding: usize) -> Result<Var> {
        s.bind(id[0], true).conv1d(
            &s.bind(id[1], true),
            Some(&s.bind(id[2], true)),
            stride,
            dilation,
            padding,
        )
    }
    let conv_shapes = vec![vec![2, 3, 11], vec![4, 3, 3], vec![4]];
    vec![
        ("conv1d", conv_shapes.clone(), |s, id, r| {
            probe(&conv(s, id, 1, 1, 1)?, r)
        }),
        ("conv1d_dilated", conv_shapes.clone(), |s, id, r| {
            probe(&conv(s, id, 1, 4, 4)?, r)
        }),
        ("conv1d_strided", conv_shapes, |s, id, r| {
            probe(&conv(s, id, 2, 1, 0)?, r)
        }),
        (
            "conv_transpose1d",
            vec![vec![2, 3, 5], vec![3, 2, 4], vec![2]],
            |s, id, r| {
                let y = s
                    .bind(id[0], true)
                    .conv_transpose1d(&s.bind(id[1], true), Some(&s.bind(id[2], true)), 2, 1)?;
                probe(&y, r)
            },
        ),
        ("linear", vec![vec![3, 4], vec![5, 4], vec![5]], |s, id, r| {
            let y = s
                .bind(id[0], true)
                .linear(&s.bind(id[1], true), Some(&s.bind(id[2], true)))?;
            probe(&y, r)
        }),
        ("tanh", vec![vec![2, 3, 4]], |s, id, r| {
            probe(&s.bind(id[0], true).tanh(), r)
        }),
        ("sigmoid", vec![vec![2, 3, 4]], |s, id, r| {
            probe(&s.bind(id[0], true).sigmoid(), r)
        }),
        ("relu", vec![vec![2, 3, 4]], |s, id, r| {
            probe(&s.bind(id[0], true).relu(), r)
        }),
        ("leaky_relu", vec![vec![2, 3, 4]], |s, id, r| {
            probe(&s.bind(id[0], true).leaky_relu(0.4), r)
        }),
        ("abs", vec![vec![2, 3, 4]], |s, id, r| {
            probe(&s.bind(id[0], true).abs(), r)
        }),
        ("arithmetic", vec![vec![2, 5], vec![2, 5]], |s, id, r| {
            let (a, b) = (s.bind(id[0], true), s.bind(id[1], true));
            probe(&a.mul(&b)?.add(&a)?.sub(&b.scale(0.3))?.add_scalar(1.5), r)
        }),
        ("shape_ops", vec![vec![2, 4, 3], vec![2, 4]], |s, id, r| {
            let x = s.bind(id[0], true).add_channel_bias(&s.bind(id[1], true))?;
            let y = x.narrow(1, 1, 2)?.scale_batch(&[0.5, -2.0])?;
            let z = y.reshape(&[4, 3])?.transpose()?;
            probe(&z, r)?.add(&z.mean())
        }),
    ]
}

/// Checks every coordinate of every differentiable layer on small random
/// inputs. Returns the worst relative error per layer.
pub fn layer_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    layer_cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParamStore::new();
            let ids = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| store.add(format!("p{i}"), random(s, &mut rng)))
                .collect::<Result<Vec<_>>>()?;
            let coords: Vec<_> = ids
                .iter()
                .flat_map(|&id| (0..store.get(id).value.len()).map(move |i| (id, i)))
                .collect();
            let probe_seed = rng.random::<u64>();
            let loss = |s: &ParamStore| f(s, &ids, &mut ChaCha8Rng::seed_from_u64(probe_seed));
            let samples = check_params(&mut store, loss, &coords, 1e-4)?;
            let worst = samples.iter().map(|s| s.relative_error(1e-6)).fold(0.0, f64::max);
            Ok((name, worst))
        })
        .collect()
}
