mod common;

use common::{enumerate, random_crf, random_matrix};
use joint_bootstrap::crf::{log_partition, sequence_score, token_marginals, viterbi_decode, CrfParams};
use joint_bootstrap::linalg::Matrix;
use joint_bootstrap::rng::stream;
use rand::Rng;

#[test]
fn matches_enumeration_on_random_instances() {
    let mut rng = stream(11, &[]);
    for case in 0..200 {
        let n = rng.gen_range(1..=5);
        let c = rng.gen_range(1..=4);
        let scale = [0.5, 3.0, 20.0][case % 3];
        let p = random_crf(c, 1, scale, &mut rng);
        let z = random_matrix(n, c, scale, &mut rng);
        let oracle = enumerate(&z, &p);
        assert!((log_partition(&z, &p) - oracle.log_z).abs() < 1e-8, "case {case}");
        let m = token_marginals(&z, &p);
        for t in 0..n {
            for k in 0..c {
                assert!((m.row(t)[k] - oracle.marginals[t][k]).abs() < 1e-8, "case {case} t {t} k {k}");
            }
        }
        let (path, score) = viterbi_decode(&z, &p);
        assert!((score - oracle.best_score).abs() < 1e-8, "case {case}");
        assert!((sequence_score(&z, &path, &p) - score).abs() < 1e-9);
    }
}

#[test]
fn ties_resolve_to_lowest_tag_ids() {
    let p = CrfParams::zeros(3, 1);
    let z = Matrix::zeros(4, 3);
    assert_eq!(viterbi_decode(&z, &p).0, vec![0, 0, 0, 0]);
    let oracle = enumerate(&z, &p);
    assert_eq!(oracle.best, vec![0, 0, 0, 0]);
}

#[test]
fn long_sequences_stay_finite() {
    let mut rng = stream(12, &[]);
    let p = random_crf(9, 1, 50.0, &mut rng);
    let z = random_matrix(500, 9, 200.0, &mut rng);
    let lz = log_partition(&z, &p);
    assert!(lz.is_finite());
    let m = token_marginals(&z, &p);
    for t in 0..500 {
        assert!((m.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let (_, best) = viterbi_decode(&z, &p);
    assert!(best <= lz + 1e-9);
}
