//! Analytic gradients of every loss term against central finite differences,
//! in double precision on tiny seeded instances.

use attrmogen_core::nn::device;
use attrmogen_core::rng::stream_rng;
use attrmogen_core::vqvae::losses::{attribute_entropy_from_logits, attribute_entropy_loss, bottleneck_loss, loss_vqvae};
use candle_core::{Tensor, Var};
use candle_nn::ops::softmax;
use rand::Rng;

const CASES: u64 = 50;
const TOLERANCE: f64 = 1e-3;

fn random(rng: &mut rand_chacha::ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Relative L2 error between the autograd gradient of `f` at `x0` and its
/// central-difference estimate.
fn gradient_error(shape: (usize, usize), x0: &[f64], f: &dyn Fn(&Tensor) -> Tensor) -> f64 {
    let var = Var::from_tensor(&Tensor::from_vec(x0.to_vec(), shape, &device()).unwrap()).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let h = 1e-6;
    let eval = |x: Vec<f64>| f(&Tensor::from_vec(x, shape, &device()).unwrap()).to_scalar::<f64>().unwrap();
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..x0.len() {
        let mut p = x0.to_vec();
        p[i] += h;
        let mut m = x0.to_vec();
        m[i] -= h;
        let fd = (eval(p) - eval(m)) / (2.0 * h);
        num += (fd - analytic[i]).powi(2);
        den += fd.powi(2);
    }
    num.sqrt() / den.sqrt().max(1e-12)
}

fn worst_over_cases(mut case: impl FnMut(u64) -> f64) -> f64 {
    (0..CASES).map(&mut case).fold(0.0, f64::max)
}

#[test]
fn reconstruction_gradient() {
    let worst = worst_over_cases(|seed| {
        let mut rng = stream_rng(seed, 100);
        let x = Tensor::from_vec(random(&mut rng, 12), (4, 3), &device()).unwrap();
        let s = Tensor::from_vec(random(&mut rng, 8), (4, 2), &device()).unwrap();
        let xh0 = random(&mut rng, 12);
        gradient_error((4, 3), &xh0, &|xh| loss_vqvae(&x, xh, &s, &s, 0.25).unwrap().rec)
    });
    assert!(worst < TOLERANCE, "worst relative error {worst}");
}

#[test]
fn commitment_and_embedding_gradients() {
    let commit = worst_over_cases(|seed| {
        let mut rng = stream_rng(seed, 101);
        let x = Tensor::from_vec(random(&mut rng, 6), (2, 3), &device()).unwrap();
        let q = Tensor::from_vec(random(&mut rng, 32), (4, 8), &device()).unwrap();
        let s0 = random(&mut rng, 32);
        gradient_error((4, 8), &s0, &|s| loss_vqvae(&x, &x, s, &q, 0.25).unwrap().commit)
    });
    let embed = worst_over_cases(|seed| {
        let mut rng = stream_rng(seed, 102);
        let x = Tensor::from_vec(random(&mut rng, 6), (2, 3), &device()).unwrap();
        let s = Tensor::from_vec(random(&mut rng, 32), (4, 8), &device()).unwrap();
        let q0 = random(&mut rng, 32);
        gradient_error((4, 8), &q0, &|q| loss_vqvae(&x, &x, &s, q, 0.25).unwrap().embed)
    });
    assert!(commit < TOLERANCE, "commit: {commit}");
    assert!(embed < TOLERANCE, "embed: {embed}");
}

#[test]
fn entropy_gradient() {
    let from_logits = worst_over_cases(|seed| {
        let mut rng = stream_rng(seed, 103);
        let z0 = random(&mut rng, 4 * 8);
        gradient_error((4, 8), &z0, &|z| attribute_entropy_from_logits(z).unwrap())
    });
    let from_probs = worst_over_cases(|seed| {
        let mut rng = stream_rng(seed, 104);
        let z0 = random(&mut rng, 4 * 8);
        gradient_error((4, 8), &z0, &|z| attribute_entropy_loss(&softmax(z, 1).unwrap()).unwrap())
    });
    assert!(from_logits < TOLERANCE, "logits: {from_logits}");
    assert!(from_probs < TOLERANCE, "probs: {from_probs}");
}

#[test]
fn bottleneck_gradient_both_arguments() {
    let wrt_s = worst_over_cases(|seed| {
        let mut rng = stream_rng(seed, 105);
        let sm = Tensor::from_vec(random(&mut rng, 32), (4, 8), &device()).unwrap();
        let s0 = random(&mut rng, 32);
        gradient_error((4, 8), &s0, &|s| bottleneck_loss(s, &sm).unwrap())
    });
    let wrt_minus = worst_over_cases(|seed| {
        let mut rng = stream_rng(seed, 106);
        let s = Tensor::from_vec(random(&mut rng, 32), (4, 8), &device()).unwrap();
        let m0 = random(&mut rng, 32);
        gradient_error((4, 8), &m0, &|sm| bottleneck_loss(&s, sm).unwrap())
    });
    assert!(wrt_s < TOLERANCE, "wrt S: {wrt_s}");
    assert!(wrt_minus < TOLERANCE, "wrt S-: {wrt_minus}");
}
