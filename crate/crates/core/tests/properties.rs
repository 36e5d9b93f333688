use std::collections::BTreeMap;
use std::hash::Hasher;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pemcompose::adapter::{weighted_compose, AdapterCheckpoint, AdapterParams, CompositionMode, Ia3Adapter, LoraAdapter, WeightVector};
use pemcompose::eval::{argmax, score_dichotomy};
use pemcompose::mbti::{Dichotomy, Trait};
use pemcompose::model::{fold_ia3, forward_parts, init_base, merge_lora, ModelConfig};
use pemcompose::sweep::simplex_grid;
use pemcompose::tasks::{label_for, Statement};
use pemcompose::tensor::{fingerprint, Checkpoint, CheckpointKind, CheckpointMetadata, Dtype, TensorRecord};

fn tensor_strategy() -> impl Strategy<Value = (String, Vec<usize>, bool, u64)> {
    (
        "[a-z]{1,6}(\\.[a-z0-9]{1,4}){0,2}",
        prop::collection::vec(1usize..5, 0..4),
        any::<bool>(),
        any::<u64>(),
    )
}

fn record(name: &str, shape: &[usize], f32: bool, seed: u64) -> TensorRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    if f32 {
        let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        TensorRecord::from_f32(name, shape.to_vec(), &v).unwrap()
    } else {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        TensorRecord::from_f64(name, shape.to_vec(), &v).unwrap()
    }
}

fn fnv_oracle(records: &[TensorRecord]) -> String {
    let mut sorted: Vec<&TensorRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.name().to_owned());
    let mut h = fnv::FnvHasher::default();
    for r in sorted {
        h.write(r.name().as_bytes());
        h.write(&[0]);
        let dims: Vec<String> = r.shape().iter().map(|d| d.to_string()).collect();
        h.write(dims.join("x").as_bytes());
        h.write(&[0]);
        h.write(r.bytes());
    }
    format!("{:016x}", h.finish())
}

fn random_adapter(kind: CheckpointKind, seed: u64, fp: &str, label: &str) -> AdapterCheckpoint {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, head) = init_base(&cfg, seed).unwrap();
    let params = match kind {
        CheckpointKind::Lora => AdapterParams::Lora(LoraAdapter::init(&cfg, 2, &mut rng).unwrap()),
        _ => AdapterParams::Ia3(Ia3Adapter::identity(&cfg)),
    };
    let mut a = AdapterCheckpoint {
        base_fingerprint: fp.to_owned(),
        trait_label: label.to_owned(),
        params,
        head,
        extra: BTreeMap::new(),
    };
    for (name, mut t) in a.named_mut() {
        let centre = if name.contains(".l_") { 1.0 } else { 0.0 };
        t.mapv_inplace(|_| centre + rng.gen_range(-0.5..0.5));
    }
    a
}

fn flat(a: &AdapterCheckpoint) -> Vec<f64> {
    a.named().iter().flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn checkpoint_bytes_round_trip(tensors in prop::collection::btree_map("[a-z.]{1,8}", (prop::collection::vec(1usize..4, 1..3), any::<bool>(), any::<u64>()), 0..6)) {
        let mut c = Checkpoint::new(CheckpointMetadata::new(CheckpointKind::Ia3, "00000000000000ff", "P", 0));
        for (name, (shape, f32, seed)) in &tensors {
            c.insert(record(name, shape, *f32, *seed)).unwrap();
        }
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn fingerprint_ignores_order_and_matches_fnv(specs in prop::collection::vec(tensor_strategy(), 0..6), seed in any::<u64>()) {
        let mut seen = std::collections::HashSet::new();
        let records: Vec<TensorRecord> = specs
            .iter()
            .filter(|(n, ..)| seen.insert(n.clone()))
            .map(|(n, s, f, sd)| record(n, s, *f, *sd))
            .collect();
        let mut shuffled = records.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(fingerprint(&records), fingerprint(&shuffled));
        prop_assert_eq!(fingerprint(&records), fnv_oracle(&records));
    }

    #[test]
    fn argmax_ignores_constant_shift(v in prop::collection::vec(-5i32..5, 7), c in -100i32..100) {
        let logits = ndarray::Array1::from_iter(v.iter().map(|&x| f64::from(x)));
        let shifted = &logits + f64::from(c);
        prop_assert_eq!(argmax(logits.view()), argmax(shifted.view()));
    }

    #[test]
    fn mirror_labels_sum_to_six(a in -2i32..=2, b in -2i32..=2, d in 0usize..4, seed in any::<u64>()) {
        let d = Dichotomy::ALL[d];
        let s = Statement::generate(d, a, b, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(label_for(d.first(), s.polarity()) + label_for(d.second(), s.polarity()), 6);
        prop_assert_eq!(Statement::from_tokens(&s.tokens).unwrap(), s);
    }

    #[test]
    fn raising_a_keyed_answer_never_lowers_the_score(
        items in prop::collection::vec((-2i32..=2, -2i32..=2, 0usize..7), 1..12),
        pick in any::<prop::sample::Index>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<_> = items.into_iter().filter(|(a, b, _)| a + b != 0).collect();
        prop_assume!(!items.is_empty());
        let statements: Vec<Statement> = items.iter().map(|&(a, b, _)| Statement::generate(Dichotomy::SN, a, b, &mut rng)).collect();
        let refs: Vec<&Statement> = statements.iter().collect();
        let mut answers: Vec<usize> = items.iter().map(|&(.., c)| c).collect();
        let before = score_dichotomy(&answers, &refs).unwrap();
        let i = pick.index(answers.len());
        let keyed_up = statements[i].polarity() > 0;
        answers[i] = if keyed_up { (answers[i] + 1).min(6) } else { answers[i].saturating_sub(1) };
        let after = score_dichotomy(&answers, &refs).unwrap();
        prop_assert!(after >= before);
        prop_assert!((0.0..=100.0).contains(&after));
    }

    #[test]
    fn simplex_points_are_exact(n in 1usize..5, m in 1u32..9) {
        let grid = simplex_grid(n, 1.0 / f64::from(m)).unwrap();
        for p in grid.points() {
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&x| x >= 1.0 / f64::from(m) - 1e-12));
        }
        let mut sorted = grid.numerators.clone();
        sorted.sort();
        prop_assert_eq!(sorted, grid.numerators);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn parameter_mode_is_permutation_invariant(seed in any::<u64>(), ia3 in any::<bool>(), perm in Just(vec![0usize, 1, 2]).prop_shuffle()) {
        let kind = if ia3 { CheckpointKind::Ia3 } else { CheckpointKind::Lora };
        let adapters: Vec<_> = (0..3).map(|i| random_adapter(kind, seed.wrapping_add(i), "0123456789abcdef", "E")).collect();
        let w = [0.2, 0.3, 0.5];
        let a = weighted_compose(&adapters, &WeightVector::new(w.to_vec()).unwrap(), CompositionMode::Parameter).unwrap();
        let permuted: Vec<_> = perm.iter().map(|&i| adapters[i].clone()).collect();
        let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
        let b = weighted_compose(&permuted, &WeightVector::new(pw).unwrap(), CompositionMode::Parameter).unwrap();
        for (x, y) in flat(&a).iter().zip(flat(&b)) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_mode_is_linear(seed in any::<u64>(), lam in 0.01f64..0.99) {
        let a = random_adapter(CheckpointKind::Lora, seed, "0123456789abcdef", "T");
        let b = random_adapter(CheckpointKind::Lora, seed ^ 0x55, "0123456789abcdef", "F");
        let c = weighted_compose(&[a.clone(), b.clone()], &WeightVector::new(vec![lam, 1.0 - lam]).unwrap(), CompositionMode::Parameter).unwrap();
        for ((x, y), z) in flat(&a).iter().zip(flat(&b)).zip(flat(&c)) {
            prop_assert!((lam * x + (1.0 - lam) * y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn merged_and_folded_forward_agree(seed in any::<u64>(), tokens in prop::collection::vec(1usize..52, 1..=16)) {
        let cfg = ModelConfig::default();
        let (w, head) = init_base(&cfg, seed).unwrap();
        let fp = w.fingerprint();
        for kind in [CheckpointKind::Lora, CheckpointKind::Ia3] {
            let a = random_adapter(kind, seed ^ 1, &fp, "J");
            let folded = match &a.params {
                AdapterParams::Lora(l) => merge_lora(&w, l).unwrap(),
                AdapterParams::Ia3(i) => fold_ia3(&w, i).unwrap(),
            };
            let x = forward_parts(&w, Some(&a.params), &head, &tokens).unwrap();
            let y = forward_parts(&folded, None, &head, &tokens).unwrap();
            for (p, q) in x.iter().zip(y.iter()) {
                prop_assert!((p - q).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn trait_order_is_stable() {
    let letters: String = Trait::ALL.iter().map(|t| t.letter()).collect();
    assert_eq!(letters, "EISNTFJP");
    assert_eq!(Dtype::F64.width(), 8);
}
