use joint_bootstrap::encoder::{encode, DropoutConfig, DropoutMasks, EncoderParams};
use joint_bootstrap::linalg::Matrix;

/// Two tokens, d = 2, query at 0. Expected values computed independently
/// with numpy from the same parameters.
#[test]
fn two_token_golden() {
    let mut p = EncoderParams::zeros(2, 2);
    p.embeddings = Matrix::from_rows(&[vec![0.1, -0.2], vec![0.3, 0.4]]);
    p.roles = Matrix::from_rows(&[vec![0.05, 0.0], vec![0.2, -0.1], vec![-0.3, 0.1]]);
    p.mix_center = Matrix::from_rows(&[vec![0.5, -0.4], vec![0.3, 0.2]]);
    p.mix_left = Matrix::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4]]);
    p.mix_right = Matrix::from_rows(&[vec![-0.2, 0.1], vec![0.6, -0.5]]);
    p.mix_bias = vec![0.05, -0.05];
    p.attention = Matrix::from_rows(&[vec![1.0, 0.5], vec![-0.5, 2.0]]);
    let cache = encode(&[1, 0], 0, &p, DropoutMasks::identity(2, 2)).unwrap();
    let expected = [
        [0.20696649972945258, 0.08975778474716016, 0.1556680044035724, -0.02900313223920935],
        [0.09966799462495585, -0.15864850429749888, 0.1556680044035724, -0.02900313223920935],
    ];
    for (t, row) in expected.iter().enumerate() {
        for (k, &e) in row.iter().enumerate() {
            assert!((cache.output.get(t, k) - e).abs() < 1e-12, "u[{t}][{k}]");
        }
    }
    let attn = [0.5219085738806781, 0.4780914261193218];
    for (a, e) in cache.attention().iter().zip(attn) {
        assert!((a - e).abs() < 1e-12);
    }
    let det = encode(&[1, 0], 0, &p, DropoutConfig::deterministic().masks(2, 2, &[9])).unwrap();
    assert_eq!(det.output, cache.output);
}

#[test]
fn dropout_masks_are_unbiased() {
    let rate = 0.3;
    let cfg = DropoutConfig::stochastic(rate, 77);
    let samples = 10_000;
    let (mut sum, mut sum_sq, mut zeros) = (0.0, 0.0, 0usize);
    for s in 0..samples {
        let m = cfg.masks(1, 1, &[s as u64]);
        for v in [m.embed.get(0, 0), m.hidden.get(0, 0)] {
            sum += v;
            sum_sq += v * v;
            zeros += usize::from(v == 0.0);
        }
    }
    let count = (2 * samples) as f64;
    let mean = sum / count;
    // Var of a {0, 1/(1-r)} mask with P(0) = r is r / (1 - r).
    let se = (rate / (1.0 - rate) / count).sqrt();
    assert!((mean - 1.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    let var = sum_sq / count - mean * mean;
    assert!((var - rate / (1.0 - rate)).abs() < 0.05);
    let drop = zeros as f64 / count;
    assert!((drop - rate).abs() < 3.0 * (rate * (1.0 - rate) / count).sqrt());
}

#[test]
fn stochastic_forward_is_replayable() {
    let mut rng = joint_bootstrap::rng::stream(5, &[]);
    let p = EncoderParams::init(6, 4, &mut rng);
    let cfg = DropoutConfig::stochastic(0.5, 3);
    let a = encode(&[1, 2, 3], 1, &p, cfg.masks(3, 4, &[1, 2])).unwrap();
    let b = encode(&[1, 2, 3], 1, &p, cfg.masks(3, 4, &[1, 2])).unwrap();
    let c = encode(&[1, 2, 3], 1, &p, cfg.masks(3, 4, &[1, 3])).unwrap();
    assert_eq!(a.output, b.output);
    assert_ne!(a.output, c.output);
}

#[test]
fn single_token_attends_to_itself() {
    let mut rng = joint_bootstrap::rng::stream(6, &[]);
    let p = EncoderParams::init(4, 3, &mut rng);
    let c = encode(&[2], 0, &p, DropoutMasks::identity(1, 3)).unwrap();
    assert_eq!(c.attention(), &[1.0]);
    let row: Vec<f64> = (0..6).map(|k| c.output.get(0, k)).collect();
    assert_eq!(row[..3], row[3..]);
}

#[test]
fn zero_rate_ignores_the_seed() {
    let mut rng = joint_bootstrap::rng::stream(7, &[]);
    let p = EncoderParams::init(5, 4, &mut rng);
    let a = encode(&[1, 2, 3, 4], 2, &p, DropoutConfig::stochastic(0.0, 1).masks(4, 4, &[0])).unwrap();
    let b = encode(&[1, 2, 3, 4], 2, &p, DropoutConfig::stochastic(0.0, 2).masks(4, 4, &[0])).unwrap();
    assert_eq!(a.output, b.output);
}

/// Mean of 10,000 stochastic forward passes at rate 0.1 against the
/// deterministic output, per coordinate. Fails on the attention context:
/// the bilinear self-score sees the same mask twice and `E[m^2] = 1/(1-r)`.
#[test]
#[ignore = "known bias of the attention context under dropout"]
fn stochastic_mean_approaches_deterministic_output() {
    let mut rng = joint_bootstrap::rng::stream(8, &[]);
    let p = EncoderParams::init(6, 4, &mut rng);
    let tokens = [1, 4, 2, 5];
    let det = encode(&tokens, 1, &p, DropoutMasks::identity(4, 4)).unwrap().output;
    let cfg = DropoutConfig::stochastic(0.1, 99);
    let samples = 10_000;
    let (rows, cols) = (det.rows(), det.cols());
    let mut sum = vec![0.0; rows * cols];
    let mut sum_sq = vec![0.0; rows * cols];
    for s in 0..samples {
        let out = encode(&tokens, 1, &p, cfg.masks(4, 4, &[s as u64])).unwrap().output;
        for (i, &v) in out.as_slice().iter().enumerate() {
            sum[i] += v;
            sum_sq[i] += v * v;
        }
    }
    let n = samples as f64;
    for i in 0..rows * cols {
        let mean = sum[i] / n;
        let se = ((sum_sq[i] / n - mean * mean).max(0.0) / n).sqrt();
        let d = det.as_slice()[i];
        assert!((mean - d).abs() <= 3.0 * se, "coordinate {i}: mean {mean}, deterministic {d}, se {se}");
    }
}
