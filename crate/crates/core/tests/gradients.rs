mod common;

use common::{numeric_gradient, random_crf, random_matrix, scaled_error};
use joint_bootstrap::bootstrap::ensemble_loss;
use joint_bootstrap::crf::{log_partition, marginals_vjp, nll_loss_and_grad, sequence_score, token_marginals};
use joint_bootstrap::encoder::{encode, encode_backward, DropoutConfig, EncoderParams};
use joint_bootstrap::linalg::{dot, Matrix};
use joint_bootstrap::model::{JointModel, ProbabilitySource};
use joint_bootstrap::rng::stream;
use rand::Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const CONFIGS: usize = 50;

fn tags(n: usize, c: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..c)).collect()
}

#[test]
fn crf_nll_gradient() {
    let mut rng = stream(21, &[]);
    for case in 0..CONFIGS {
        let n = rng.gen_range(1..=6);
        let c = rng.gen_range(2..=5);
        let p = random_crf(c, 1, 1.5, &mut rng);
        let mut z = random_matrix(n, c, 2.0, &mut rng);
        let y = tags(n, c, &mut rng);
        let (_, g) = nll_loss_and_grad(&z, &y, &p).unwrap();
        let pc = p.clone();
        let num = numeric_gradient(z.as_mut_slice(), H, |zz| {
            let zz = Matrix::from_vec(n, c, zz.to_vec());
            log_partition(&zz, &pc) - sequence_score(&zz, &y, &pc)
        });
        assert!(scaled_error(g.emissions.as_slice(), &num, 1e-8) < TOL, "case {case} emissions");
        let zc = z.clone();
        let mut trans = p.transitions.as_slice().to_vec();
        let num = numeric_gradient(&mut trans, H, |tt| {
            let mut q = p.clone();
            q.transitions = Matrix::from_vec(c, c, tt.to_vec());
            log_partition(&zc, &q) - sequence_score(&zc, &y, &q)
        });
        assert!(scaled_error(g.transitions.as_slice(), &num, 1e-8) < TOL, "case {case} transitions");
        let mut start = p.start.clone();
        let num = numeric_gradient(&mut start, H, |s| {
            let mut q = p.clone();
            q.start = s.to_vec();
            log_partition(&zc, &q) - sequence_score(&zc, &y, &q)
        });
        assert!(scaled_error(&g.start, &num, 1e-8) < TOL, "case {case} start");
        let mut end = p.end.clone();
        let num = numeric_gradient(&mut end, H, |e| {
            let mut q = p.clone();
            q.end = e.to_vec();
            log_partition(&zc, &q) - sequence_score(&zc, &y, &q)
        });
        assert!(scaled_error(&g.end, &num, 1e-8) < TOL, "case {case} end");
    }
}

#[test]
fn marginal_vjp_matches_differences() {
    let mut rng = stream(22, &[]);
    for case in 0..CONFIGS {
        let n = rng.gen_range(1..=6);
        let c = rng.gen_range(2..=5);
        let p = random_crf(c, 1, 1.0, &mut rng);
        let mut z = random_matrix(n, c, 2.0, &mut rng);
        let up = random_matrix(n, c, 1.0, &mut rng);
        let g = marginals_vjp(&z, &p, &up);
        let f = |zz: &Matrix, q: &joint_bootstrap::crf::CrfParams| dot(token_marginals(zz, q).matrix().as_slice(), up.as_slice());
        let num = numeric_gradient(z.as_mut_slice(), H, |zz| f(&Matrix::from_vec(n, c, zz.to_vec()), &p));
        assert!(scaled_error(g.emissions.as_slice(), &num, 1e-8) < TOL, "case {case} emissions");
        let mut trans = p.transitions.as_slice().to_vec();
        let num = numeric_gradient(&mut trans, H, |tt| {
            let mut q = p.clone();
            q.transitions = Matrix::from_vec(c, c, tt.to_vec());
            f(&z, &q)
        });
        assert!(scaled_error(g.transitions.as_slice(), &num, 1e-8) < TOL, "case {case} transitions");
        let mut end = p.end.clone();
        let num = numeric_gradient(&mut end, H, |e| {
            let mut q = p.clone();
            q.end = e.to_vec();
            f(&z, &q)
        });
        assert!(scaled_error(&g.end, &num, 1e-8) < TOL, "case {case} end");
    }
}

fn masked_config(rng: &mut impl Rng, case: usize) -> DropoutConfig {
    if case.is_multiple_of(2) {
        DropoutConfig::deterministic()
    } else {
        DropoutConfig::stochastic(0.3, rng.gen())
    }
}

#[test]
fn encoder_gradient() {
    let mut rng = stream(23, &[]);
    for case in 0..CONFIGS {
        let v = rng.gen_range(2..=5);
        let d = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=5);
        let tokens: Vec<u32> = (0..n).map(|_| rng.gen_range(0..v as u32)).collect();
        let q = rng.gen_range(0..n);
        let mut params = EncoderParams::init(v, d, &mut rng);
        for b in params.mix_bias.iter_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        let masks = masked_config(&mut rng, case).masks(n, d, &[case as u64]);
        let up = random_matrix(n, 2 * d, 1.0, &mut rng);
        let cache = encode(&tokens, q, &params, masks.clone()).unwrap();
        let mut grad = EncoderParams::zeros(v, d);
        encode_backward(&tokens, q, &params, &cache, &up, &mut grad).unwrap();
        for ti in 0..7 {
            let analytic = grad.tensors()[ti].to_vec();
            let mut x = params.tensors()[ti].to_vec();
            let num = numeric_gradient(&mut x, H, |xx| {
                let mut p2 = params.clone();
                p2.tensors_mut()[ti].copy_from_slice(xx);
                dot(encode(&tokens, q, &p2, masks.clone()).unwrap().output.as_slice(), up.as_slice())
            });
            assert!(scaled_error(&analytic, &num, 1e-8) < TOL, "case {case} tensor {ti}");
        }
    }
}

fn random_model(v: usize, c: usize, d: usize, source: ProbabilitySource, rng: &mut impl Rng) -> JointModel {
    let mut m = JointModel::init(v, c, d, rng);
    m.crf.transitions = random_matrix(c, c, 0.5, rng);
    m.crf.start = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    m.crf.end = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
    m.source = source;
    m
}

#[test]
fn full_model_nll_gradient() {
    let mut rng = stream(24, &[]);
    for case in 0..CONFIGS {
        let (v, c, d, n) = (rng.gen_range(2..=4), rng.gen_range(2..=5), rng.gen_range(1..=3), rng.gen_range(1..=5));
        let model = random_model(v, c, d, ProbabilitySource::CrfMarginals, &mut rng);
        let tokens: Vec<u32> = (0..n).map(|_| rng.gen_range(0..v as u32)).collect();
        let q = rng.gen_range(0..n);
        let y = tags(n, c, &mut rng);
        let masks = masked_config(&mut rng, case).masks(n, d, &[7, case as u64]);
        let fwd = model.forward(&tokens, q, masks.clone()).unwrap();
        let (_, g) = nll_loss_and_grad(&fwd.emissions, &y, &model.crf).unwrap();
        let mut grad = model.zeros_like();
        model.backward(&tokens, q, &fwd, &g, &mut grad).unwrap();
        let loss = |m: &JointModel| {
            let f = m.forward(&tokens, q, masks.clone()).unwrap();
            nll_loss_and_grad(&f.emissions, &y, &m.crf).unwrap().0
        };
        for ti in 0..grad.tensors().len() {
            let analytic = grad.tensors()[ti].to_vec();
            let mut x = model.tensors()[ti].to_vec();
            let num = numeric_gradient(&mut x, H, |xx| {
                let mut m2 = model.clone();
                m2.tensors_mut()[ti].copy_from_slice(xx);
                loss(&m2)
            });
            assert!(scaled_error(&analytic, &num, 1e-8) < TOL, "case {case} tensor {ti}");
        }
    }
}

/// `KL(P_f1 || P_f2)` differentiated through both models.
#[test]
fn ensemble_loss_gradient_through_both_models() {
    let mut rng = stream(25, &[]);
    for case in 0..CONFIGS {
        let source = if case % 3 == 2 { ProbabilitySource::TokenSoftmax } else { ProbabilitySource::CrfMarginals };
        let (v, c, d, n) = (rng.gen_range(2..=4), rng.gen_range(2..=4), rng.gen_range(1..=3), rng.gen_range(1..=4));
        let m1 = random_model(v, c, d, source, &mut rng);
        let m2 = random_model(v, c, d, source, &mut rng);
        let tokens: Vec<u32> = (0..n).map(|_| rng.gen_range(0..v as u32)).collect();
        let q = rng.gen_range(0..n);
        let cfg = masked_config(&mut rng, case);
        let (k1, k2) = (cfg.masks(n, d, &[1, case as u64]), cfg.masks(n, d, &[2, case as u64]));
        let kl = |a: &JointModel, b: &JointModel| {
            let (fa, fb) = (a.forward(&tokens, q, k1.clone()).unwrap(), b.forward(&tokens, q, k2.clone()).unwrap());
            ensemble_loss(&a.probabilities(&fa), &b.probabilities(&fb)).unwrap().loss
        };
        let f1 = m1.forward(&tokens, q, k1.clone()).unwrap();
        let f2 = m2.forward(&tokens, q, k2.clone()).unwrap();
        let (p1, p2) = (m1.probabilities(&f1), m2.probabilities(&f2));
        let term = ensemble_loss(&p1, &p2).unwrap();
        let mut g1 = m1.zeros_like();
        let mut g2 = m2.zeros_like();
        m1.backward(&tokens, q, &f1, &m1.probabilities_vjp(&f1, &p1, &term.grad_p), &mut g1).unwrap();
        m2.backward(&tokens, q, &f2, &m2.probabilities_vjp(&f2, &p2, &term.grad_q), &mut g2).unwrap();
        for ti in 0..g1.tensors().len() {
            let mut x = m1.tensors()[ti].to_vec();
            let num = numeric_gradient(&mut x, H, |xx| {
                let mut a = m1.clone();
                a.tensors_mut()[ti].copy_from_slice(xx);
                kl(&a, &m2)
            });
            assert!(scaled_error(g1.tensors()[ti], &num, 1e-8) < TOL, "case {case} f1 tensor {ti}");
            let mut x = m2.tensors()[ti].to_vec();
            let num = numeric_gradient(&mut x, H, |xx| {
                let mut b = m2.clone();
                b.tensors_mut()[ti].copy_from_slice(xx);
                kl(&m1, &b)
            });
            assert!(scaled_error(g2.tensors()[ti], &num, 1e-8) < TOL, "case {case} f2 tensor {ti}");
        }
    }
}
