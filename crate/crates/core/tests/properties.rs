use proptest::prelude::*;

use qdcfg_core::distill::kl_categorical;
use qdcfg_core::diversity::{reward_from_embeddings, EmbedConfig, EmbeddingModel, reward_pair};
use qdcfg_core::hash::Digest;
use qdcfg_core::merge::{lerp, uniform_merge};
use qdcfg_core::seqmodel::{LayoutBuilder, ParamVector};
use qdcfg_core::Token;

fn pv(values: Vec<f64>) -> ParamVector {
    let mut b = LayoutBuilder::new();
    b.add("w", &[values.len()]);
    ParamVector::new(values, b.finish(), Digest::of(b"shared")).unwrap()
}

fn normalised(xs: Vec<f64>) -> Vec<f64> {
    let s: f64 = xs.iter().sum();
    xs.into_iter().map(|x| x / s).collect()
}

proptest! {
    #[test]
    fn lerp_is_exact_affine(
        pair in (1usize..16).prop_flat_map(|n| (
            prop::collection::vec(-10.0f64..10.0, n),
            prop::collection::vec(-10.0f64..10.0, n),
        )),
        lambda in 0.0f64..=1.0,
    ) {
        let (a, b) = (pv(pair.0), pv(pair.1));
        let x = lerp(&a, &b, lambda).unwrap();
        let y = lerp(&b, &a, lambda).unwrap();
        for i in 0..a.len() {
            prop_assert!((x.values[i] + y.values[i] - a.values[i] - b.values[i]).abs() <= 1e-12);
        }
        prop_assert_eq!(lerp(&a, &b, 0.0).unwrap(), a.clone());
        prop_assert_eq!(lerp(&a, &b, 1.0).unwrap(), b);
    }

    #[test]
    fn uniform_merge_ignores_input_order(
        models in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 2..6),
        rotate in 0usize..6,
    ) {
        let ms: Vec<ParamVector> = models.into_iter().map(pv).collect();
        let mut shuffled = ms.clone();
        let k = rotate % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let a = uniform_merge(&ms).unwrap();
        prop_assert_eq!(&a.values, &uniform_merge(&shuffled).unwrap().values);
        for i in 0..6 {
            let mean = ms.iter().map(|m| m.values[i]).sum::<f64>() / ms.len() as f64;
            prop_assert!((a.values[i] - mean).abs() <= 1e-12);
        }
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_self(
        pq in (2usize..8).prop_flat_map(|n| (
            prop::collection::vec(0.01f64..1.0, n),
            prop::collection::vec(0.01f64..1.0, n),
        )),
    ) {
        let (p, q) = (normalised(pq.0), normalised(pq.1));
        prop_assert!(kl_categorical(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(kl_categorical(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn reward_pair_identities(
        a in prop::collection::vec(0u32..6, 1..10),
        b in prop::collection::vec(0u32..6, 1..10),
    ) {
        let e = EmbeddingModel::new(&EmbedConfig {
            vocab: 6,
            token_dim: 4,
            hidden: 8,
            embed_dim: 6,
            max_len: 10,
            init_seed: 3,
        })
        .unwrap();
        let (a, b): (Vec<Token>, Vec<Token>) = (a, b);
        prop_assert_eq!(reward_pair(&e, &a, &a).unwrap(), 0.0);
        let (ab, ba) = (reward_pair(&e, &a, &b).unwrap(), reward_pair(&e, &b, &a).unwrap());
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=2.0).contains(&ab));
        let ea = e.embed(&a).unwrap();
        prop_assert_eq!(reward_from_embeddings(&ea, &ea).unwrap(), 0.0);
    }
}
