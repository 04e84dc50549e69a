use std::collections::BTreeSet;

use joint_bootstrap::bootstrap::ensemble_loss;
use joint_bootstrap::corpus::Corpus;
use joint_bootstrap::crf::TokenMarginals;
use joint_bootstrap::datagen::{generate_corpus, inject_noise, GrammarSpec, NoiseSpec};
use joint_bootstrap::tagging::{build_instances, decode_triplets, repair_bio, Tag, TagVocabulary};
use joint_bootstrap::uncertainty::{combined_score, entropy_score, variance_of_samples, winning_score};
use proptest::prelude::*;

fn softmax_rows(logits: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

fn logits(max_n: usize, c: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-6.0..6.0f64, c), 1..=max_n)
}

fn small_vocab() -> TagVocabulary {
    TagVocabulary::new(vec!["A".into(), "B".into()], vec!["r".into()]).unwrap()
}

/// Reference BIO repair: a tag `I-X` survives only directly after `B-X` or `I-X`
/// in the already-repaired prefix.
fn repair_oracle(tags: &[usize], vocab: &TagVocabulary) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for &id in tags {
        let fixed = match vocab.tag(id) {
            Tag::EntityInside(x) => match out.last().map(|&p| vocab.tag(p)) {
                Some(Tag::EntityBegin(y) | Tag::EntityInside(y)) if y == x => Tag::EntityInside(x),
                _ => Tag::EntityBegin(x),
            },
            Tag::RelationInside(x) => match out.last().map(|&p| vocab.tag(p)) {
                Some(Tag::RelationBegin(y) | Tag::RelationInside(y)) if y == x => Tag::RelationInside(x),
                _ => Tag::RelationBegin(x),
            },
            t => t,
        };
        out.push(vocab.id(fixed));
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_file_round_trip(size in 1usize..25, seed in any::<u64>(), rel in 0.0..1.0f64, ent in 0.0..1.0f64) {
        let clean = generate_corpus(&GrammarSpec::standard(), size, seed).unwrap();
        let noisy = inject_noise(&clean, &NoiseSpec { relation_rate: rel, entity_rate: ent, seed: seed ^ 1 }).unwrap();
        for corpus in [clean, noisy.clone(), noisy.without_provenance()] {
            let mut buf = Vec::new();
            corpus.write_to(&mut buf).unwrap();
            let back = Corpus::read_from(buf.as_slice()).unwrap();
            prop_assert_eq!(&back, &corpus);
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            prop_assert_eq!(buf, again);
        }
    }

    #[test]
    fn instances_decode_to_gold_triplets(size in 1usize..15, seed in any::<u64>()) {
        let corpus = generate_corpus(&GrammarSpec::standard(), size, seed).unwrap();
        for (i, s) in corpus.sentences.iter().enumerate() {
            let instances = build_instances(i, s, &corpus.tags, 0).unwrap();
            prop_assert_eq!(instances.len(), s.entities.len());
            let mut decoded = BTreeSet::new();
            for inst in &instances {
                prop_assert_eq!(repair_bio(&inst.tags, &corpus.tags), inst.tags.clone());
                decoded.extend(decode_triplets(&inst.tags, &corpus.tags, inst.query));
            }
            prop_assert_eq!(decoded, s.gold_triplets());
        }
    }

    #[test]
    fn bio_repair_matches_reference(tags in prop::collection::vec(0usize..7, 0..12)) {
        let vocab = small_vocab();
        let repaired = repair_bio(&tags, &vocab);
        prop_assert_eq!(&repaired, &repair_oracle(&tags, &vocab));
        prop_assert_eq!(repair_bio(&repaired, &vocab), repaired.clone());
        for (a, b) in tags.iter().zip(&repaired) {
            if a != b {
                prop_assert!(matches!(vocab.tag(*a), Tag::EntityInside(_) | Tag::RelationInside(_)));
            }
        }
    }

    #[test]
    fn decoded_heads_cover_the_query(tags in prop::collection::vec(0usize..7, 1..10), q in 0usize..10) {
        let vocab = small_vocab();
        let p = q % tags.len();
        for t in decode_triplets(&tags, &vocab, p) {
            prop_assert!(t.head.contains(p));
            prop_assert!(!t.tail.is_empty());
        }
    }

    #[test]
    fn uncertainty_scores_are_bounded(rows in logits(6, 5)) {
        let m = TokenMarginals::from_rows(&softmax_rows(&rows)).unwrap();
        for s in [winning_score(&m), entropy_score(&m), combined_score(&m)] {
            prop_assert!((0.0..=1.0).contains(&s.normalized));
        }
        prop_assert!(combined_score(&m).normalized >= winning_score(&m).normalized);
        prop_assert!(combined_score(&m).normalized >= entropy_score(&m).normalized);
    }

    #[test]
    fn variance_is_bounded(samples in prop::collection::vec(logits(1, 4), 2..6), n in 1usize..4) {
        let k: Vec<TokenMarginals> = samples
            .iter()
            .map(|s| {
                let row = softmax_rows(s).remove(0);
                TokenMarginals::from_rows(&vec![row; n]).unwrap()
            })
            .collect();
        let v = variance_of_samples(&k).unwrap();
        prop_assert!(v.raw >= 0.0);
        prop_assert!((0.0..=1.0).contains(&v.normalized));
    }

    #[test]
    fn kl_is_nonnegative_and_permutation_invariant(a in logits(5, 4), b_seed in logits(5, 4), perm in Just([2usize, 0, 3, 1])) {
        let n = a.len().min(b_seed.len());
        let pa = softmax_rows(&a[..n]);
        let pb = softmax_rows(&b_seed[..n]);
        let p = TokenMarginals::from_rows(&pa).unwrap();
        let q = TokenMarginals::from_rows(&pb).unwrap();
        let kl = ensemble_loss(&p, &q).unwrap().loss;
        prop_assert!(kl >= -1e-12);
        let permute = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> { rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect() };
        let kp = ensemble_loss(&TokenMarginals::from_rows(&permute(&pa)).unwrap(), &TokenMarginals::from_rows(&permute(&pb)).unwrap()).unwrap().loss;
        prop_assert!((kl - kp).abs() < 1e-12 * (1.0 + kl));
        let same = ensemble_loss(&p, &p).unwrap().loss;
        prop_assert!(same.abs() < 1e-12);
    }
}

#[test]
fn uncertainty_anchors() {
    let c = 5;
    let one_hot: Vec<Vec<f64>> = (0..3).map(|t| (0..c).map(|j| f64::from(u8::from(j == t))).collect()).collect();
    let m = TokenMarginals::from_rows(&one_hot).unwrap();
    assert_eq!(winning_score(&m).normalized, 0.0);
    assert_eq!(entropy_score(&m).normalized, 0.0);
    let uniform = TokenMarginals::from_rows(&vec![vec![1.0 / c as f64; c]; 3]).unwrap();
    assert!((winning_score(&uniform).normalized - 1.0).abs() < 1e-12);
    assert!((entropy_score(&uniform).normalized - 1.0).abs() < 1e-12);
    assert!((combined_score(&uniform).normalized - 1.0).abs() < 1e-12);
    let same = variance_of_samples(&[m.clone(), m.clone(), m]).unwrap();
    assert_eq!(same.raw, 0.0);
    // Two samples that disagree completely on one tag pair: variance 0.25 per cell, 2 cells.
    let a = TokenMarginals::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let b = TokenMarginals::from_rows(&[vec![0.0, 1.0]]).unwrap();
    let v = variance_of_samples(&[a, b]).unwrap();
    assert!((v.raw - 0.5).abs() < 1e-15);
    assert_eq!(v.normalized, 1.0);
}
