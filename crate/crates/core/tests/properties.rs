use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weft_core::decode::{decode, evaluate, DecodeConfig, Remasking};
use weft_core::diffusion::{RateSpec, BETA_FLOOR};
use weft_core::losses::{dream_loss, sft_loss, simple_weighted_loss, weft_loss, LogitsView, Normalization};
use weft_core::model::{Denoiser, DenoiserConfig, MaskPredictor};
use weft_core::rates::{entropy, geo_pmf};
use weft_core::schedule::{sample_mask_plan, T_MIN};
use weft_core::tasks::{generate_split, Split, TaskSpec, Vocab};
use weft_core::Result;

/// Logits drawn from a generator keyed by the full input sequence.
struct Hashed {
    vocab: usize,
    salt: u64,
}

impl MaskPredictor for Hashed {
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn mask_token_id(&self) -> u32 {
        self.vocab as u32 - 1
    }
    fn predict(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let key = tokens.iter().fold(self.salt, |h, &t| h.wrapping_mul(0x100_0000_01b3).wrapping_add(t as u64 + 1));
        let mut r = ChaCha8Rng::seed_from_u64(key);
        Ok((0..tokens.len() * self.vocab).map(|_| r.random_range(-3.0..3.0)).collect())
    }
}

fn decode_cfg() -> impl Strategy<Value = DecodeConfig> {
    (1usize..=4, 1usize..=4, 0usize..=2).prop_map(|(blocks, spb, kexp)| {
        let k = 1 << kexp;
        let block_length = spb * k;
        DecodeConfig { gen_length: blocks * block_length, block_length, n_steps: blocks * spb, remasking: Remasking::LowConfidence, seed: 0 }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decode_finalizes_k_per_step_and_never_remasks(cfg in decode_cfg(), salt in any::<u64>(), plen in 1usize..5) {
        let m = Hashed { vocab: 7, salt };
        let prompt: Vec<u32> = (0..plen as u32).map(|i| i % 6).collect();
        let tr = decode(&m, &prompt, &cfg).unwrap();
        let k = cfg.tokens_per_step();
        prop_assert_eq!(tr.finalized.len(), cfg.n_steps);
        let mut seen = vec![false; cfg.gen_length];
        for (s, step) in tr.finalized.iter().enumerate() {
            prop_assert_eq!(step.len(), k);
            let block = s / cfg.steps_per_block();
            for &p in step {
                prop_assert!(!seen[p]);
                prop_assert_eq!(p / cfg.block_length, block);
                seen[p] = true;
            }
        }
        prop_assert!(seen.iter().all(|&x| x));
        prop_assert!(tr.answer.iter().all(|&t| t != m.mask_token_id()));
        prop_assert_eq!(tr.answer.len(), cfg.gen_length);
    }

    #[test]
    fn losses_nonnegative_with_bounded_weights(
        logits in proptest::collection::vec(-8.0f64..8.0, 6 * 5),
        raw in proptest::collection::vec(0.0f64..6.0, 4),
        t in 0.001f64..0.999,
        seed in any::<u64>(),
    ) {
        let labels = [0u32, 1, 2, 3, 4, 0];
        let view = LogitsView::new(&logits, 5).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let rates = RateSpec::from_mean(raw, BETA_FLOOR);
        prop_assume!(rates.is_ok());
        let plan = sample_mask_plan(t, &rates.unwrap(), 2, 6, &mut r).unwrap();
        let b = weft_loss(view, &labels, &plan, Normalization::MaskedCount).unwrap();
        prop_assert!(b.loss >= 0.0 && b.loss.is_finite());
        prop_assert!(b.weights.iter().all(|&w| w.is_finite() && w >= 0.0 && w <= 1.0 / T_MIN + 1e-9));
        let uni = sample_mask_plan(t, &RateSpec::uniform(4), 2, 6, &mut r).unwrap();
        for l in [
            sft_loss(view, &labels, &uni, Normalization::MaskedCount).unwrap().loss,
            dream_loss(view, &labels, &uni, 0.3, Normalization::AnswerLength).unwrap().loss,
            simple_weighted_loss(view, &labels, &uni, &[0.0, 0.0, 1.0, 2.0, 0.5, 3.0], Normalization::MaskedCount).unwrap().loss,
        ] {
            prop_assert!(l >= 0.0 && l.is_finite());
        }
    }

    #[test]
    fn uniform_weft_is_sft_bitwise(logits in proptest::collection::vec(-8.0f64..8.0, 7 * 4), t in 0.001f64..0.999, seed in any::<u64>()) {
        let labels = [3u32, 2, 1, 0, 1, 2, 3];
        let view = LogitsView::new(&logits, 4).unwrap();
        let a = sample_mask_plan(t, &RateSpec::uniform(5), 2, 7, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = sample_mask_plan(t, &RateSpec::uniform(5), 2, 7, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let s = sft_loss(view, &labels, &a, Normalization::MaskedCount).unwrap();
        let w = weft_loss(view, &labels, &b, Normalization::MaskedCount).unwrap();
        prop_assert_eq!(s.loss.to_bits(), w.loss.to_bits());
        prop_assert_eq!(s, w);
    }

    #[test]
    fn sqrt_entropy_preserves_order(a in proptest::collection::vec(-5.0f64..5.0, 4), b in proptest::collection::vec(-5.0f64..5.0, 4)) {
        let (ha, hb) = (entropy(&a).unwrap(), entropy(&b).unwrap());
        if ha >= hb {
            prop_assert!(ha.sqrt() >= hb.sqrt());
        }
    }

    #[test]
    fn generated_instances_verify_and_round_trip(seed in any::<u64>(), which in 0usize..3) {
        let spec = [TaskSpec::Modadd { modulus: 10 }, TaskSpec::Sudoku4 { min_givens: 8, max_givens: 11 }, TaskSpec::Countdown][which];
        let data = generate_split(&spec, seed, Split::Train, 3).unwrap();
        prop_assert_eq!(&data, &generate_split(&spec, seed, Split::Train, 3).unwrap());
        for inst in &data {
            prop_assert!(inst.verify(&inst.answer_ids));
            prop_assert_eq!(inst.answer_ids.len(), spec.answer_len());
            let text = Vocab.decode(&inst.tokens()).unwrap();
            prop_assert_eq!(Vocab.encode(&text).unwrap(), inst.tokens());
        }
    }
}

#[test]
fn geometric_pmf_sums_to_one() {
    let s: f64 = (0..=200).map(|k| geo_pmf(0.3, k)).sum();
    assert!((s - 1.0).abs() <= 1e-15, "{s}");
}

#[test]
fn decode_independent_of_batch_composition() {
    let m = Hashed { vocab: Vocab.size(), salt: 4 };
    let data = generate_split(&TaskSpec::Modadd { modulus: 10 }, 1, Split::Eval, 30).unwrap();
    let cfg = DecodeConfig::new(2, None).unwrap();
    let together = evaluate(&m, &data, &cfg, None).unwrap();
    let alone: usize = data.iter().map(|d| evaluate(&m, std::slice::from_ref(d), &cfg, None).unwrap().per_task["modadd"].correct).sum();
    assert_eq!(together.per_task["modadd"].correct, alone);
    let mut rev = data.clone();
    rev.reverse();
    assert_eq!(evaluate(&m, &rev, &cfg, None).unwrap().per_task, together.per_task);
}

#[test]
fn perfect_stub_scores_one() {
    struct Oracle(std::collections::HashMap<Vec<u32>, Vec<u32>>);
    impl MaskPredictor for Oracle {
        fn vocab_size(&self) -> usize {
            Vocab.size()
        }
        fn mask_token_id(&self) -> u32 {
            Vocab.mask_id()
        }
        fn predict(&self, tokens: &[u32]) -> Result<Vec<f64>> {
            let v = Vocab.size();
            let (prompt, answer) = self.0.iter().find(|(p, _)| tokens.starts_with(p)).expect("known prompt");
            let mut out = vec![0.0; tokens.len() * v];
            for (k, &a) in answer.iter().enumerate() {
                out[(prompt.len() + k) * v + a as usize] = 5.0;
            }
            Ok(out)
        }
    }
    let data = generate_split(&TaskSpec::Sudoku4 { min_givens: 8, max_givens: 11 }, 2, Split::Eval, 20).unwrap();
    let m = Oracle(data.iter().map(|d| (d.prompt_ids.clone(), d.answer_ids.clone())).collect());
    let r = evaluate(&m, &data, &DecodeConfig::new(16, Some(8)).unwrap(), None).unwrap();
    assert_eq!(r.accuracy(), 1.0);
}

/// Uniformly random digit at the first answer slot, padding after it.
struct RandomDigit(std::cell::RefCell<ChaCha8Rng>);

impl MaskPredictor for RandomDigit {
    fn vocab_size(&self) -> usize {
        Vocab.size()
    }
    fn mask_token_id(&self) -> u32 {
        Vocab.mask_id()
    }
    fn predict(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let v = Vocab.size();
        let mut out = vec![-30.0; tokens.len() * v];
        let mut r = self.0.borrow_mut();
        for p in 0..tokens.len() {
            if p + 1 == tokens.len() {
                out[p * v + Vocab.pad_id() as usize] = 0.0;
            } else {
                for d in 0..10 {
                    out[p * v + d] = r.random::<f64>();
                }
            }
        }
        Ok(out)
    }
}

#[test]
fn random_stub_on_modadd_scores_one_in_ten() {
    let data = generate_split(&TaskSpec::Modadd { modulus: 10 }, 3, Split::Eval, 1000).unwrap();
    let cfg = DecodeConfig::new(2, None).unwrap();
    let run = || evaluate(&RandomDigit(ChaCha8Rng::seed_from_u64(8).into()), &data, &cfg, None).unwrap().accuracy();
    let acc = run();
    let band = 4.0 * (0.1f64 * 0.9 / 1000.0).sqrt();
    assert!((acc - 0.1).abs() <= band, "accuracy {acc}");
    assert_eq!(acc, run());
}

#[test]
fn forward_is_permutation_equivariant_and_counts_params() {
    let c = DenoiserConfig { d_model: 16, n_heads: 2, ffn_hidden: 32, max_seq_len: 16, ..DenoiserConfig::desk(Vocab.size(), Vocab.mask_id(), Vocab.pad_id()) };
    let m = Denoiser::<f64>::new(c).unwrap();
    let batch = vec![vec![1, 2, 3, 19], vec![4, 5, 19, 19, 6], vec![7]];
    let out = m.forward_batch(&batch).unwrap();
    let rev: Vec<Vec<u32>> = batch.iter().rev().cloned().collect();
    let out_rev = m.forward_batch(&rev).unwrap();
    for (i, o) in out.iter().enumerate() {
        assert_eq!(o, &out_rev[batch.len() - 1 - i]);
        assert_eq!(o, &m.forward(&batch[i]).unwrap());
    }
    let (d, f, v, l) = (c.d_model, c.ffn_hidden, c.vocab_size, c.n_layers);
    let per_layer = 4 * d * d + 2 * d * f + 2 * d;
    assert_eq!(m.params.param_count(), v * d + l * per_layer + d + d * v);
    assert_eq!(m.params.param_count(), c.param_count());
}
