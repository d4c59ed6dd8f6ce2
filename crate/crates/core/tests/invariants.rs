use std::sync::Arc;

use me_mhacl::data::{split_counts, MeSample, Modality, ModalityLayout, SampleTag};
use me_mhacl::loss::contrastive_loss;
use me_mhacl::meiosis::{crossover, SplitPosition};
use me_mhacl::params::Mode;
use me_mhacl::projector::{Projector, ProjectorConfig};
use me_mhacl::tensor::Tensor;
use proptest::prelude::*;

fn sample(data: Vec<f32>, c: usize, m: usize, subject: usize) -> MeSample {
    let layout = Arc::new(ModalityLayout::single(Modality::Gsr, c));
    MeSample::new(data, c, m, 32.0, layout, SampleTag::original(0, subject)).unwrap()
}

fn pair() -> impl Strategy<Value = (usize, usize, Vec<f32>, Vec<f32>, usize)> {
    (1usize..4, 4usize..24).prop_flat_map(|(c, m)| {
        (
            Just(c),
            Just(m),
            prop::collection::vec(-1e3f32..1e3, c * m),
            prop::collection::vec(-1e3f32..1e3, c * m),
            2..m - 1,
        )
    })
}

proptest! {
    #[test]
    fn crossover_swaps_exactly_the_prefix((c, m, a, b, cut) in pair()) {
        let (sa, sb) = (sample(a.clone(), c, m, 0), sample(b.clone(), c, m, 1));
        let split = SplitPosition::new(cut, m).unwrap();
        let (at, bt) = crossover(&sa, &sb, split).unwrap();
        for ch in 0..c {
            for t in 0..m {
                let i = ch * m + t;
                let (want_a, want_b) = if t < cut { (b[i], a[i]) } else { (a[i], b[i]) };
                prop_assert_eq!(at.data()[i].to_bits(), want_a.to_bits());
                prop_assert_eq!(bt.data()[i].to_bits(), want_b.to_bits());
            }
        }
        prop_assert_eq!(at.tag.prefix_subject, 1);
        prop_assert_eq!(at.tag.suffix_subject, 0);
        let (aa, bb) = crossover(&at, &bt, split).unwrap();
        prop_assert_eq!(aa.data(), sa.data());
        prop_assert_eq!(bb.data(), sb.data());
    }

    #[test]
    fn loss_ignores_positive_rescaling_of_representations(
        p in 2usize..6,
        h in 2usize..8,
        tau in 0.05f64..1.0,
        scale in 0.01f64..100.0,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..p * h).map(|_| rng.random::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..p * h).map(|_| rng.random::<f64>() - 0.5).collect();
        let l = |s: f64| {
            let ta = Tensor::new(vec![p, h], a.iter().map(|x| x * s).collect()).unwrap();
            let tb = Tensor::new(vec![p, h], b.clone()).unwrap();
            contrastive_loss(&ta, &tb, tau).unwrap().total
        };
        let (l1, l2) = (l(1.0), l(scale));
        prop_assert!((l1 - l2).abs() < 1e-9, "{} vs {}", l1, l2);
        prop_assert!(l1 > 0.0);
    }

    #[test]
    fn split_counts_partition_the_clips(v in 3usize..5000) {
        let s = split_counts(v, (0.7, 0.15, 0.15)).unwrap();
        prop_assert_eq!(s.train + s.test + s.val, v);
        prop_assert!(s.train as f64 <= 0.7 * v as f64 + 1e-6);
        prop_assert!(s.test as f64 <= 0.15 * v as f64 + 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn group_representation_ignores_member_order(q in 1usize..6, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = 32;
        let proj = Projector::<f64>::new(ProjectorConfig::new(d, 0.125), seed).unwrap();
        let rows: Vec<Vec<f64>> = (0..q).map(|_| (0..d).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let base = proj.group_project(&Tensor::new(vec![q, d], rows.concat()).unwrap(), Mode::Eval).unwrap();
        let mut perm: Vec<usize> = (0..q).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<f64> = perm.iter().flat_map(|&i| rows[i].clone()).collect();
        let out = proj.group_project(&Tensor::new(vec![q, d], shuffled).unwrap(), Mode::Eval).unwrap();
        for (x, y) in base.iter().zip(&out) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}
