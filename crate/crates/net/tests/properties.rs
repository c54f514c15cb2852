use lanpose_core::instruction::{Grammar, MAX_TOKENS};
use lanpose_core::scene::{sample_scene, GenConfig};
use lanpose_net::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use lanpose_net::data::TokenBatch;
use lanpose_net::graph::Graph;
use lanpose_net::model::{Bound, FusionVariant, ModelConfig, Network};
use lanpose_net::optim::{Adam, AdamState};
use lanpose_net::params::{Init, ParamSet};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn variant() -> impl Strategy<Value = FusionVariant> {
    prop::sample::select(FusionVariant::ALL.to_vec())
}

fn small(variant: FusionVariant) -> ModelConfig {
    ModelConfig { map_size: 16, fc_width: 16, variant, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn first_adam_step_moves_by_the_warmed_rate(
        grads in prop::collection::vec(-1e3f64..1e3, 1..40),
        lr in 1e-5f64..1e-1,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params = ParamSet::new();
        params.add("w", &[grads.len()], Init::Const(0.5), &mut rng);
        let adam = Adam::default();
        let mut state = AdamState::new(&params);
        adam.step(&mut params, &[Some(&grads)], &mut state, lr);
        let eff = adam.warmed(lr, 0);
        for (p, g) in params.data(0).iter().zip(&grads) {
            let expect = 0.5 - eff * g / (g.abs() + adam.eps);
            prop_assert!((p - expect).abs() <= 1e-6 * (1.0 + expect.abs()), "{p} vs {expect}");
        }
    }

    #[test]
    fn checkpoints_round_trip(v in variant(), seed in 0u64..1000, stage in 1u8..3, epoch in 0usize..30, step in 0u64..5000) {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::new(small(v), seed).unwrap();
        let mut adam = AdamState::new(&net.params);
        adam.step = step;
        let ck = Checkpoint::new(net, stage, epoch, Some(adam));
        let path = dir.path().join("c.ckpt");
        save_checkpoint(&path, &ck).unwrap();
        prop_assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn attention_rows_are_distributions_for_any_instruction(seeds in prop::collection::vec(0u64..100_000, 1..5)) {
        let grammar = Grammar::builtin();
        let texts: Vec<String> = seeds
            .iter()
            .map(|&s| grammar.generate(&sample_scene(&GenConfig::default(), s).unwrap(), s).unwrap().text)
            .collect();
        let tokens = TokenBatch::from_texts(grammar, &texts);
        let net = Network::new(small(FusionVariant::CrossAttention), 4).unwrap();
        let mut g = Graph::new();
        let b = Bound::new(&net.params, &mut g, false).unwrap();
        let text = net.text_encode(&mut g, &b, &tokens).unwrap();
        let (n, np, d) = (texts.len(), net.cfg.n_patches, net.cfg.d_model);
        let patches = g.input(&[n, np, d], (0..n * np * d).map(|i| ((i * 53) % 97) as f64 / 48.0 - 1.0).collect()).unwrap();
        let (_, attn) = net.cross_attention(&mut g, &b, patches, text, &tokens.mask).unwrap();
        for (i, row) in g.value(attn).chunks(MAX_TOKENS).enumerate() {
            let bi = i / np;
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (j, &w) in row.iter().enumerate() {
                prop_assert!(w >= 0.0);
                if !tokens.mask[bi * MAX_TOKENS + j] {
                    prop_assert_eq!(w, 0.0);
                }
            }
        }
    }
}
