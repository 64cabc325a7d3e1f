//! Finite-difference verification of the tape's backward rules.
//!
//! Every check runs in 64-bit: a scalar function of one or more input
//! tensors is differentiated on the tape and compared against central
//! differences with step [`STEP`].

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::backbone::{Backbone, Stage, IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::stylize::{restyle, StyleMethod, Stylizer, StylizerSpec};
use crate::tensor::{Eager, Ops, Tape, Tensor, Var};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so gradients that are zero
/// up to rounding do not divide by ~0.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares tape gradients of `f` against central differences.
///
/// `max_coords` bounds how many coordinates of each input are perturbed;
/// larger inputs are subsampled with a fixed seed.
pub fn check<F>(name: &str, inputs: &[Tensor<f64>], max_coords: usize, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.get(out).data().iter().sum())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.take(v).expect("input gradient")).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let picks: Vec<usize> = if input.numel() <= max_coords {
            (0..input.numel()).collect()
        } else {
            index::sample(&mut rng, input.numel(), max_coords).into_vec()
        };
        for j in picks {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + STEP;
            let plus = eval(&probe)?;
            probe[i].data_mut()[j] = orig - STEP;
            let minus = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[i].data()[j], numeric));
            coords += 1;
        }
    }
    Ok(CheckReport { name: name.to_string(), max_rel_error: worst, coords, passed: worst < TOLERANCE })
}

/// Random tensor with entries in `±[lo, hi]`, keeping values away from
/// zero so kinks and poles are not straddled by the finite difference.
pub fn random_away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduces `out` to a scalar through a fixed random projection so every
/// output element carries a distinct weight.
pub fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.get(out).shape().to_vec();
    let weights = random_uniform(&shape, -1.0, 1.0, &mut rng);
    let w = tape.constant(weights);
    let prod = tape.mul(&out, &w)?;
    Ok(tape.sum(&prod))
}

/// Gradient checks for every primitive, each on three shapes.
pub fn operator_suite() -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut reports = Vec::new();
    let all = usize::MAX;

    for (i, (xs, ks, stride, pad)) in [
        ([2, 3, 5, 5], [4, 3, 3, 3], 2, 1),
        ([1, 2, 4, 6], [3, 2, 2, 3], 1, 0),
        ([2, 1, 6, 4], [2, 1, 3, 3], 1, 1),
    ]
    .into_iter()
    .enumerate()
    {
        let x = random_uniform(&xs, -1.0, 1.0, &mut rng);
        let k = random_uniform(&ks, -1.0, 1.0, &mut rng);
        let b = random_uniform(&[ks[0]], -1.0, 1.0, &mut rng);
        reports.push(check(&format!("conv2d#{i}"), &[x.clone(), k.clone(), b.clone()], all, |t, v| {
            let y = t.conv2d(&v[0], &v[1], &v[2], stride, pad)?;
            project(t, y, 1)
        })?);
        reports.push(check(&format!("conv2d_relu#{i}"), &[x, k, b], all, |t, v| {
            let y = t.conv2d_relu(&v[0], &v[1], &v[2], stride, pad)?;
            project(t, y, 1)
        })?);
    }

    let shapes4: [&[usize]; 3] = [&[2, 3, 4, 4], &[1, 4, 2, 5], &[3, 2, 3, 1]];
    let shapes2: [&[usize]; 3] = [&[3, 4], &[1, 7], &[5, 2]];

    for (i, s) in shapes4.iter().enumerate() {
        let x = random_away_from_zero(s, 0.05, 1.0, &mut rng);
        reports.push(check(&format!("relu#{i}"), &[x], all, |t, v| {
            let y = t.relu(&v[0]);
            project(t, y, 2)
        })?);
        let x = random_uniform(s, -1.0, 1.0, &mut rng);
        reports.push(check(&format!("global_average_pool#{i}"), &[x], all, |t, v| {
            let y = t.global_avg_pool(&v[0])?;
            project(t, y, 3)
        })?);
        let x = random_uniform(s, -1.0, 1.0, &mut rng);
        reports.push(check(&format!("channel_stats#{i}"), &[x], all, |t, v| {
            let (mu, sigma) = t.channel_stats(&v[0], 1e-6)?;
            let a = project(t, mu, 4)?;
            let b = project(t, sigma, 5)?;
            t.add(&a, &b)
        })?);
        let x = random_uniform(s, -1.0, 1.0, &mut rng);
        let scale = random_uniform(&s[..2], -2.0, 2.0, &mut rng);
        let shift = random_uniform(&s[..2], -1.0, 1.0, &mut rng);
        reports.push(check(&format!("channel_affine#{i}"), &[x, scale, shift], all, |t, v| {
            let y = t.channel_affine(&v[0], &v[1], &v[2])?;
            project(t, y, 14)
        })?);
    }

    for (i, (m, k, n)) in [(3, 4, 2), (1, 5, 3), (4, 1, 4)].into_iter().enumerate() {
        let a = random_uniform(&[m, k], -1.0, 1.0, &mut rng);
        let b = random_uniform(&[k, n], -1.0, 1.0, &mut rng);
        reports.push(check(&format!("matmul#{i}"), &[a, b], all, |t, v| {
            let y = t.matmul(&v[0], &v[1])?;
            project(t, y, 6)
        })?);
        let x = random_uniform(&[m, k], -1.0, 1.0, &mut rng);
        let w = random_uniform(&[n, k], -1.0, 1.0, &mut rng);
        let b = random_uniform(&[n], -1.0, 1.0, &mut rng);
        reports.push(check(&format!("linear#{i}"), &[x, w, b], all, |t, v| {
            let y = t.linear(&v[0], &v[1], &v[2])?;
            project(t, y, 7)
        })?);
    }

    for (i, s) in shapes2.iter().enumerate() {
        let x = random_uniform(s, -1.0, 1.0, &mut rng);
        reports.push(check(&format!("l2_normalize#{i}"), &[x], all, |t, v| {
            let y = t.l2_normalize(&v[0], 1e-12)?;
            project(t, y, 8)
        })?);
        let x = random_uniform(s, -3.0, 3.0, &mut rng);
        reports.push(check(&format!("log_sum_exp#{i}"), &[x], all, |t, v| {
            let y = t.log_sum_exp(&v[0])?;
            project(t, y, 9)
        })?);
        let x = random_uniform(s, -1.0, 1.0, &mut rng);
        let idx: Vec<usize> = (0..s[0]).map(|_| rng.random_range(0..s[1])).collect();
        reports.push(check(&format!("gather_rows#{i}"), &[x], all, |t, v| {
            let y = t.gather_rows(&v[0], &idx)?;
            project(t, y, 10)
        })?);
        let x = random_uniform(s, -1.0, 1.0, &mut rng);
        let (lo, hi) = (s[0] / 3, s[0] - s[0] / 4);
        reports.push(check(&format!("slice_rows#{i}"), &[x], all, |t, v| {
            let y = t.slice_rows(&v[0], lo, hi)?;
            project(t, y, 13)
        })?);
        let x = random_uniform(s, -1.0, 1.0, &mut rng);
        reports.push(check(&format!("reductions#{i}"), &[x], all, |t, v| {
            let a = t.sum(&v[0]);
            let b = t.mean(&v[0]);
            let b = t.scale(&b, 3.0);
            let r = t.reshape(&v[0], &[s[0] * s[1]])?;
            let c = project(t, r, 11)?;
            let ab = t.add(&a, &b)?;
            t.mul(&ab, &c)
        })?);
    }

    let pairs: [(&[usize], &[usize]); 3] = [(&[2, 3, 2, 2], &[2, 3, 1, 1]), (&[4, 3], &[1, 3]), (&[2, 1, 3], &[2, 4, 1])];
    for (i, (sa, sb)) in pairs.iter().enumerate() {
        let a = random_uniform(sa, -1.0, 1.0, &mut rng);
        let b = random_uniform(sb, -1.0, 1.0, &mut rng);
        let c = random_away_from_zero(sb, 0.5, 2.0, &mut rng);
        reports.push(check(&format!("elementwise#{i}"), &[a, b, c], all, |t, v| {
            let s = t.add(&v[0], &v[1])?;
            let d = t.sub(&v[0], &v[1])?;
            let m = t.mul(&s, &d)?;
            let q = t.div(&m, &v[2])?;
            let r = t.div(&v[2], &v[1])?;
            let r = t.mul(&r, &v[2])?;
            let q = t.add(&q, &r)?;
            project(t, q, 12)
        })?);
    }

    Ok(reports)
}

/// Gradient checks through whole networks: a two-layer MLP, the backbone,
/// and the backbone with each stylizer spliced in after stage 1. Sampled
/// styles are drawn once and then frozen so the function is deterministic.
pub fn model_suite(max_coords: usize) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut reports = Vec::new();

    let x = random_uniform(&[4, 6], -1.0, 1.0, &mut rng);
    let w1 = random_uniform(&[5, 6], -1.0, 1.0, &mut rng);
    let b1 = random_uniform(&[5], -0.5, 0.5, &mut rng);
    let w2 = random_uniform(&[3, 5], -1.0, 1.0, &mut rng);
    let b2 = random_uniform(&[3], -0.5, 0.5, &mut rng);
    reports.push(check("mlp", &[x, w1, b1, w2, b2], usize::MAX, |t, v| {
        let h = t.linear(&v[0], &v[1], &v[2])?;
        let h = t.relu(&h);
        let y = t.linear(&h, &v[3], &v[4])?;
        project(t, y, 31)
    })?);

    let net = Backbone::<f64>::new(29);
    let images = random_uniform(&[3, 3, IMAGE_HEIGHT / 2, IMAGE_WIDTH / 2], 0.0, 1.0, &mut rng);
    let params: Vec<Tensor<f64>> = net.parameters().cloned().collect();
    let no_hook = None::<(Stage, fn(&mut Tape<f64>, Var) -> Result<Var>)>;
    reports.push(check("backbone", &params, max_coords, |t, v| {
        let x = t.constant(images.clone());
        let e = Backbone::run(t, &x, v, no_hook)?;
        project(t, e, 37)
    })?);

    let feats = net.features_at(&mut Eager, &images, Stage::AfterStage1)?;
    let (mu, sigma) = Eager.channel_stats(&feats, 1e-6)?;
    for method in StyleMethod::ALL {
        let mut stylizer = Stylizer::new(StylizerSpec { seed: 41, ..StylizerSpec::with_method(method) })?;
        let style = stylizer.draw(&mu, &sigma);
        reports.push(check(&format!("backbone+{}", method.name()), &params, max_coords, |t, v| {
            let x = t.constant(images.clone());
            let hook = |t: &mut Tape<f64>, f: Var| restyle(t, &f, &style, 1e-6);
            let e = Backbone::run(t, &x, v, Some((Stage::AfterStage1, hook)))?;
            project(t, e, 43)
        })?);
    }
    Ok(reports)
}

/// Operator suite followed by the model suite.
pub fn full_suite() -> Result<Vec<CheckReport>> {
    let mut reports = operator_suite()?;
    reports.extend(model_suite(MODEL_COORDS)?);
    Ok(reports)
}

/// Coordinates perturbed per parameter tensor in the model suite.
pub const MODEL_COORDS: usize = 400;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operator_suite_passes() {
        for r in operator_suite().unwrap() {
            assert!(r.passed, "{} max rel error {:e}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn model_suite_passes() {
        for r in model_suite(MODEL_COORDS).unwrap() {
            println!("{} {:e} ({} coords)", r.name, r.max_rel_error, r.coords);
            assert!(r.passed, "{} max rel error {:e}", r.name, r.max_rel_error);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // relu applied to inputs near zero with a coarse-grained checker
        // would pass; a deliberately broken function must not.
        let x = Tensor::new(&[3], vec![0.3, -0.7, 1.1]).unwrap();
        let report = check("broken", &[x], usize::MAX, |t, v| {
            // value depends on x², but only the linear part is taped
            let sq = {
                let val = t.get(v[0]).clone();
                let d: Vec<f64> = val.data().iter().map(|a| a * a).collect();
                t.constant(Tensor::new(&[3], d).unwrap())
            };
            let s = t.add(&v[0], &sq)?;
            Ok(t.sum(&s))
        })
        .unwrap();
        assert!(!report.passed);
    }
}
