//! The play loop against a scripted human who answers truthfully about a chosen object.

use questioner::qbank::{evaluate_in_scene, Predicate, QuestionBank};
use questioner::scene::{Object, Scene, Size};
use questioner::{Answer, OracleModel, Questioner};
use questioner_cli::play::{run_session, Human, Session};

struct Scripted<'a> {
    scene: &'a Scene,
    bank: &'a QuestionBank,
    target: usize,
    asked: usize,
    said: Vec<String>,
}

impl Human for Scripted<'_> {
    fn say(&mut self, text: &str) -> anyhow::Result<()> {
        self.said.push(text.to_string());
        Ok(())
    }

    fn ask(&mut self, prompt: &str) -> anyhow::Result<Option<String>> {
        if prompt.starts_with("Which object") {
            return Ok(Some(self.target.to_string()));
        }
        self.asked += 1;
        // recover the question from its surface string, then answer it honestly
        let q = self
            .bank
            .iter()
            .find(|q| prompt.contains(&q.surface()))
            .expect("prompt names a bank question");
        Ok(Some(evaluate_in_scene(&q.predicate, self.scene, self.target).as_str().to_string()))
    }
}

fn scene() -> Scene {
    let cats = ["person", "dog", "car", "cat", "cup", "chair", "bottle", "umbrella"];
    Scene {
        scene_id: 0,
        rng_seed: 0,
        objects: (0..8)
            .map(|i| Object {
                id: i,
                category: cats[i].into(),
                color: None,
                x: 0.05 + 0.1 * i as f64,
                y: 0.5,
                size: Size::Medium,
            })
            .collect(),
    }
}

/// Every left-of threshold between neighbours, plus questions that split off one object.
fn complete_bank() -> QuestionBank {
    let mut preds: Vec<Predicate> = (1..8).map(|k| Predicate::XLessThan(k as f64 / 10.0)).collect();
    preds.push(Predicate::CategoryEquals("dog".into()));
    preds.push(Predicate::OrdinalLeftmost);
    QuestionBank::from_predicates(preds).unwrap()
}

#[test]
fn honest_human_is_identified_within_log2_rounds() {
    let scene = scene();
    let bank = complete_bank();
    let model = OracleModel::true_oracle(0.0).unwrap();
    let rounds = (scene.objects.len() as f64).log2().ceil() as usize;
    assert_eq!(rounds, 3);
    for target in 0..scene.objects.len() {
        let q = Questioner::Ige;
        let session = Session {
            scene: &scene,
            bank: &bank,
            model: &model,
            questioner: &q,
            horizon: rounds,
            seed: 1,
            label: "IGE".into(),
            wiring: Some("trueA".into()),
        };
        let mut human = Scripted {
            scene: &scene,
            bank: &bank,
            target,
            asked: 0,
            said: Vec::new(),
        };
        let t = run_session(&session, &mut human).unwrap().expect("complete session");
        assert_eq!(human.asked, rounds);
        assert_eq!(t.guess, target, "target {target}: {:?}", t.turns);
        assert!(t.success);
        assert!(human.said.iter().any(|s| s.contains("Got it")));
        t.replay(&bank, &model).unwrap();
    }
}

#[test]
fn na_answer_is_accepted_and_recorded() {
    let scene = scene();
    let bank = complete_bank();
    let model = OracleModel::true_oracle(0.1).unwrap();

    struct SaysNa(usize);
    impl Human for SaysNa {
        fn say(&mut self, _: &str) -> anyhow::Result<()> {
            Ok(())
        }
        fn ask(&mut self, prompt: &str) -> anyhow::Result<Option<String>> {
            self.0 += 1;
            Ok(Some(if prompt.starts_with("Which") { "0" } else { "na" }.to_string()))
        }
    }

    let q = Questioner::Ige;
    let session = Session {
        scene: &scene,
        bank: &bank,
        model: &model,
        questioner: &q,
        horizon: 2,
        seed: 1,
        label: "IGE".into(),
        wiring: None,
    };
    let t = run_session(&session, &mut SaysNa(0)).unwrap().unwrap();
    assert!(t.turns.iter().all(|turn| turn.answer == Answer::Na));
    t.replay(&bank, &model).unwrap();
}

#[test]
fn tpe_cannot_play_a_human() {
    let scene = scene();
    let bank = complete_bank();
    let model = OracleModel::true_oracle(0.0).unwrap();
    let q = Questioner::Tpe;
    let session = Session {
        scene: &scene,
        bank: &bank,
        model: &model,
        questioner: &q,
        horizon: 2,
        seed: 1,
        label: "TPE".into(),
        wiring: None,
    };
    let mut human = Scripted {
        scene: &scene,
        bank: &bank,
        target: 0,
        asked: 0,
        said: Vec::new(),
    };
    let err = run_session(&session, &mut human).unwrap_err();
    assert_eq!(questioner_cli::exit_code(&err), 2);
}
