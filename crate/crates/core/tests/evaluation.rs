//! Batch evaluation on the default world.

use questioner::engine::{evaluate, EvalSpec, FixedScenes, QuestionerSpec};
use questioner::oracle::calibrate_ind;
use questioner::qbank::{sample_bank, BankParams};
use questioner::scene::generate_corpus;
use questioner::{OracleModel, OracleWiring, Questioner, SceneConfig};

struct World {
    heldout: FixedScenes,
    bank: questioner::QuestionBank,
    truth: OracleModel,
    ind: OracleModel,
}

fn world() -> World {
    let cfg = SceneConfig::default();
    let corpus = generate_corpus(&cfg, 600, 1).unwrap();
    let heldout = generate_corpus(&cfg, 300, 2).unwrap();
    let bank = sample_bank(&corpus, &BankParams::default(), 3).unwrap().bank;
    let truth = OracleModel::true_oracle(0.1).unwrap();
    let cal = calibrate_ind(&truth, &corpus, &heldout, &bank, 20_000, 0.21, 4).unwrap();
    assert!((cal.heldout_error - 0.21).abs() < 0.01, "{}", cal.heldout_error);
    World {
        heldout: FixedScenes(heldout),
        bank,
        truth,
        ind: cal.model,
    }
}

fn ige(w: &World, model: &OracleModel, spec: &EvalSpec) -> Vec<f64> {
    let wiring = OracleWiring {
        environment: &w.truth,
        questioner: model,
    };
    evaluate(&QuestionerSpec::Fixed(Questioner::Ige), wiring, &w.bank, &w.heldout, spec)
        .unwrap()
        .rows
        .iter()
        .map(|r| r.accuracy)
        .collect()
}

#[test]
fn ige_accuracy_rises_with_horizon_and_degrades_under_ind() {
    let w = world();
    let spec = EvalSpec {
        horizons: (0..=10).collect(),
        n_games: 1500,
        seed: 10,
        transcripts: false,
    };
    let t = ige(&w, &w.truth, &spec);
    let i = ige(&w, &w.ind, &spec);
    let n = spec.n_games as f64;
    for h in 1..t.len() {
        let ci = 1.96 * (t[h] * (1.0 - t[h]) / n).sqrt();
        assert!(t[h] + ci >= t[h - 1], "trueA T={h}: {} after {}", t[h], t[h - 1]);
    }
    assert!(t[10] > 0.95, "{:?}", t);
    for h in 5..=10 {
        assert!(t[h] >= i[h], "T={h}: trueA {} indA {}", t[h], i[h]);
    }
    // no question asked: the guess is object 0 of a uniform prior
    assert!((t[0] - 1.0 / 8.0).abs() < 0.03, "{}", t[0]);
}

#[test]
fn evaluation_is_deterministic_and_transcripts_replay() {
    let w = world();
    let spec = EvalSpec {
        horizons: vec![3, 6],
        n_games: 50,
        seed: 3,
        transcripts: true,
    };
    let wiring = OracleWiring {
        environment: &w.truth,
        questioner: &w.ind,
    };
    let run = || {
        evaluate(&QuestionerSpec::Fixed(Questioner::Ige), wiring, &w.bank, &w.heldout, &spec)
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.transcripts, b.transcripts);
    assert_eq!(a.transcripts.len(), 50);
    for t in &a.transcripts {
        t.replay(&w.bank, &w.ind).unwrap();
    }
}
