//! Property tests over randomly generated worlds.

use proptest::prelude::*;
use questioner::belief::{batch_posterior_with, Belief, History};
use questioner::engine::{FixedScenes, Game, Transcript};
use questioner::experts::{ige_select_with, information_gain_row, tpe_select_with};
use questioner::oracle::{AnswerDist, Likelihoods};
use questioner::policy::{sample_index, softmax};
use questioner::qbank::{audit_bank, sample_bank, BankParams};
use questioner::rng::derive;
use questioner::scene::{generate_corpus, generate_scene};
use questioner::{Answer, OracleModel, OracleWiring, SceneConfig};

fn scene_config(m: usize) -> SceneConfig {
    SceneConfig {
        min_objects: m,
        max_objects: m,
        ..SceneConfig::default()
    }
}

/// A likelihood row entry with strictly positive components.
fn dist() -> impl Strategy<Value = AnswerDist> {
    (0.01f64..1.0, 0.01f64..1.0, 0.01f64..1.0).prop_map(|(a, b, c)| {
        let s = a + b + c;
        [a / s, b / s, c / s]
    })
}

/// `(objects, likelihood table [q][c])`.
fn table(max_m: usize, max_q: usize) -> impl Strategy<Value = (usize, Vec<Vec<AnswerDist>>)> {
    (2..=max_m, 1..=max_q).prop_flat_map(|(m, q)| {
        (
            Just(m),
            proptest::collection::vec(proptest::collection::vec(dist(), m), q),
        )
    })
}

fn answer() -> impl Strategy<Value = Answer> {
    prop_oneof![Just(Answer::Yes), Just(Answer::No), Just(Answer::Na)]
}

fn belief_of(weights: &[f64]) -> Belief {
    Belief::from_log_weights(weights.iter().map(|w| w.ln()).collect(), 0).unwrap()
}

/// `sum_c sum_a p(c) p(a|c) ln(p(a|c) / p(a))`, written independently of the crate.
fn brute_gain(probs: &[f64], row: &[AnswerDist]) -> f64 {
    let mut pa = [0.0; 3];
    for (p, l) in probs.iter().zip(row) {
        for a in 0..3 {
            pa[a] += p * l[a];
        }
    }
    let mut total = 0.0;
    for (p, l) in probs.iter().zip(row) {
        for a in 0..3 {
            if p * l[a] > 0.0 {
                total += p * l[a] * (l[a] / pa[a]).ln();
            }
        }
    }
    total
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn iterative_updates_equal_batch_posterior(
        (m, rows) in table(6, 20),
        picks in proptest::collection::vec((any::<prop::sample::Index>(), answer()), 0..=10),
        seed in 0u64..1000,
    ) {
        let scene = generate_scene(&scene_config(m), seed).unwrap();
        let lik = Likelihoods::from_rows(rows.clone());
        let mut history = History::new();
        let mut b = Belief::uniform(m, scene.scene_id);
        for (idx, a) in &picks {
            let q = idx.index(rows.len());
            history.push(q, *a);
            b = b.update_with(&lik, q, *a).unwrap();
        }
        let batch = batch_posterior_with(&scene, &lik, &history).unwrap();
        for (x, y) in b.probs().iter().zip(batch.probs()) {
            prop_assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
        let total: f64 = b.probs().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn constant_likelihood_is_exact_no_op(
        weights in proptest::collection::vec(0.01f64..1.0, 2..8),
        d in dist(),
        a in answer(),
    ) {
        let b = belief_of(&weights);
        let row = vec![d; weights.len()];
        let next = b.update_with_row(&row, a).unwrap();
        prop_assert_eq!(b.probs(), next.probs());
    }

    #[test]
    fn information_gain_matches_brute_force_and_bounds(
        (m, rows) in table(6, 20),
        weights in proptest::collection::vec(0.01f64..1.0, 6),
    ) {
        let b = belief_of(&weights[..m]);
        let probs = b.probs();
        let h = b.entropy();
        for row in &rows {
            let ig = information_gain_row(&probs, row);
            prop_assert!((ig - brute_gain(&probs, row)).abs() < 1e-9);
            prop_assert!(ig >= 0.0);
            prop_assert!(ig <= h.min(3f64.ln()) + 1e-12);
        }
    }

    #[test]
    fn information_gain_ignores_weight_scale(
        (m, rows) in table(6, 10),
        weights in proptest::collection::vec(0.01f64..1.0, 6),
        scale in 0.001f64..1000.0,
    ) {
        let a = belief_of(&weights[..m]);
        let scaled: Vec<f64> = weights[..m].iter().map(|w| w * scale).collect();
        let b = belief_of(&scaled);
        for row in &rows {
            let x = information_gain_row(&a.probs(), row);
            let y = information_gain_row(&b.probs(), row);
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ige_selects_an_exhaustive_argmax(
        (m, rows) in table(6, 20),
        weights in proptest::collection::vec(0.01f64..1.0, 6),
    ) {
        let b = belief_of(&weights[..m]);
        let probs = b.probs();
        let lik = Likelihoods::from_rows(rows.clone());
        let chosen = ige_select_with(&b, &lik);
        let gains: Vec<f64> = rows.iter().map(|r| brute_gain(&probs, r)).collect();
        let best = gains.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(gains[chosen] >= best - 1e-9);
        // no earlier question is strictly tied-best
        for g in &gains[..chosen] {
            prop_assert!(*g < best - 1e-12 || (g - gains[chosen]).abs() < 1e-9);
        }
    }

    #[test]
    fn tpe_maximizes_target_posterior(
        (m, rows) in table(6, 20),
        weights in proptest::collection::vec(0.01f64..1.0, 6),
        target in 0usize..6,
    ) {
        let target = target % m;
        let b = belief_of(&weights[..m]);
        let lik = Likelihoods::from_rows(rows.clone());
        let chosen = tpe_select_with(&b, &lik, &lik, target);
        let post = |q: usize| {
            let a = questioner::oracle::most_likely(&rows[q][target]);
            b.update_with_row(&rows[q], a).unwrap().prob(target)
        };
        let best = (0..rows.len()).map(post).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(post(chosen) >= best - 1e-9);
    }

    #[test]
    fn softmax_is_a_distribution_and_respects_masks(
        logits in proptest::collection::vec(-30.0f64..30.0, 1..40),
        mask_bits in proptest::collection::vec(any::<bool>(), 40),
        u in 0.0f64..1.0,
    ) {
        let n = logits.len();
        let mut mask = mask_bits[..n].to_vec();
        mask[0] = true;
        let p = softmax(&logits, Some(&mask));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (pi, keep) in p.iter().zip(&mask) {
            prop_assert!(*pi >= 0.0);
            if !keep {
                prop_assert_eq!(*pi, 0.0);
            }
        }
        prop_assert!(mask[sample_index(&p, u)]);
    }

    #[test]
    fn derived_seeds_are_deterministic_and_tag_sensitive(seed in any::<u64>(), a in any::<u64>(), b in any::<u64>()) {
        prop_assert_eq!(derive(seed, &[a, b]), derive(seed, &[a, b]));
        if a != b {
            prop_assert_ne!(derive(seed, &[a]), derive(seed, &[b]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn generated_scenes_are_valid(m in 2usize..12, seed in any::<u64>()) {
        let s = generate_scene(&scene_config(m), seed).unwrap();
        prop_assert_eq!(s.len(), m);
        s.validate().unwrap();
        for (i, o) in s.objects.iter().enumerate() {
            prop_assert_eq!(o.id, i);
            prop_assert!((0.0..=1.0).contains(&o.x) && (0.0..=1.0).contains(&o.y));
        }
        prop_assert_eq!(s.clone(), generate_scene(&scene_config(m), seed).unwrap());
    }

    #[test]
    fn sampled_banks_pass_the_audit(seed in 0u64..10_000, cap in 0.8f64..0.99) {
        let corpus = generate_corpus(&SceneConfig::default(), 40, seed).unwrap();
        let params = BankParams { target_size: 30, agreement_cap: cap, min_count: 3 };
        let bank = sample_bank(&corpus, &params, seed).unwrap().bank;
        let audit = audit_bank(&bank, &corpus, cap, 3);
        prop_assert!(audit.passed(), "{:?}", audit);
        prop_assert!(audit.max_agreement <= cap);
    }

    #[test]
    fn played_transcripts_replay(seed in any::<u64>(), noise in 0.0f64..0.3, horizon in 1usize..8) {
        let cfg = SceneConfig::default();
        let corpus = generate_corpus(&cfg, 20, 5).unwrap();
        let bank = sample_bank(&corpus, &BankParams::default(), 5).unwrap().bank;
        let env = OracleModel::true_oracle(noise).unwrap();
        let wiring = OracleWiring { environment: &env, questioner: &env };
        let scenes = FixedScenes(corpus);
        let game = Game::sample(&scenes, seed, &bank, wiring, None).unwrap();
        let r = questioner::engine::play(&game, &questioner::Questioner::Ige, horizon, seed, false).unwrap();
        prop_assert_eq!(r.success, r.guess == game.target);
        prop_assert_eq!(r.trajectory.turns.len(), horizon);
        let t = Transcript::new(&game, "IGE", horizon, &r.trajectory.turns, r.guess);
        let back: Transcript = serde_json::from_str(&serde_json::to_string(&t).unwrap()).unwrap();
        prop_assert_eq!(&back, &t);
        back.replay(&bank, &env).unwrap();
    }
}
