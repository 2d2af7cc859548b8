//! Interactive play: the agent asks, a human answers.

use std::io::{self, BufRead, Write};
use std::path::Path;

use anyhow::Context;
use questioner::engine::{choose_question, Game, Transcript};
use questioner::rng::{self, tag};
use questioner::{
    Answer, Belief, FeatureSchema, History, OracleModel, OracleWiring, Questioner, QuestionBank,
    Scene,
};

use crate::artifacts::{read_json, write_json, Layout};
use crate::config::{QuestionerName, RunConfig};
use crate::pipeline::{feature_schema, load_checkpoint, load_world, policy_horizon};
use crate::usage;

/// The person on the other side. `ask` returns `None` at end of input.
pub trait Human {
    fn say(&mut self, text: &str) -> anyhow::Result<()>;
    fn ask(&mut self, prompt: &str) -> anyhow::Result<Option<String>>;
}

/// A human reading prompts on `output` and typing lines on `input`.
pub struct Terminal<R, W> {
    input: R,
    output: W,
    /// Echo each answer, for input that is not typed at the terminal.
    echo: bool,
}

impl<R: BufRead, W: Write> Terminal<R, W> {
    pub fn new(input: R, output: W, echo: bool) -> Self {
        Self { input, output, echo }
    }
}

impl<R: BufRead, W: Write> Human for Terminal<R, W> {
    fn say(&mut self, text: &str) -> anyhow::Result<()> {
        writeln!(self.output, "{text}")?;
        Ok(())
    }

    fn ask(&mut self, prompt: &str) -> anyhow::Result<Option<String>> {
        write!(self.output, "{prompt} ")?;
        self.output.flush()?;
        let mut line = String::new();
        if self.input.read_line(&mut line)? == 0 {
            writeln!(self.output)?;
            return Ok(None);
        }
        if self.echo {
            writeln!(self.output, "{}", line.trim_end())?;
        }
        Ok(Some(line.trim().to_string()))
    }
}

pub fn object_table(scene: &Scene) -> String {
    let mut out = format!(
        "{:>3}  {:<10} {:<8} {:<7} {:>5} {:>5}\n",
        "id", "category", "color", "size", "x", "y"
    );
    for o in &scene.objects {
        out.push_str(&format!(
            "{:>3}  {:<10} {:<8} {:<7} {:>5.2} {:>5.2}\n",
            o.id,
            o.category,
            o.color.as_deref().unwrap_or("-"),
            o.size.name(),
            o.x,
            o.y
        ));
    }
    out
}

pub struct Session<'a> {
    pub scene: &'a Scene,
    pub bank: &'a QuestionBank,
    /// The questioner's oracle model, used for its belief and guess.
    pub model: &'a OracleModel,
    pub questioner: &'a Questioner<'a>,
    pub horizon: usize,
    pub seed: u64,
    pub label: String,
    pub wiring: Option<String>,
}

fn read_answer(human: &mut dyn Human, prompt: &str) -> anyhow::Result<Option<Answer>> {
    loop {
        let Some(line) = human.ask(prompt)? else {
            return Ok(None);
        };
        match Answer::parse(&line) {
            Some(a) => return Ok(Some(a)),
            None => human.say("please answer y, n or na")?,
        }
    }
}

fn read_object(human: &mut dyn Human, n: usize) -> anyhow::Result<Option<usize>> {
    loop {
        let Some(line) = human.ask(&format!("Which object were you thinking of? [0-{}]", n - 1))?
        else {
            return Ok(None);
        };
        match line.parse::<usize>() {
            Ok(id) if id < n => return Ok(Some(id)),
            _ => human.say(&format!("please enter an object id between 0 and {}", n - 1))?,
        }
    }
}

/// Run one game against `human`. Returns `None` if the input ended early.
pub fn run_session(s: &Session<'_>, human: &mut dyn Human) -> anyhow::Result<Option<Transcript>> {
    if matches!(s.questioner, Questioner::Tpe | Questioner::Experts(_)) {
        return Err(usage("this questioner needs the hidden target and cannot play a human"));
    }
    let schema: Option<&FeatureSchema> = match s.questioner {
        Questioner::Policy { schema, .. } => Some(schema),
        _ => None,
    };
    // the target is unknown until the end; the game's environment slot is unused
    let wiring = OracleWiring {
        environment: s.model,
        questioner: s.model,
    };
    let game = Game::new(s.scene.clone(), 0, s.bank, wiring, schema);
    human.say(&format!(
        "Think of one of these objects. I will ask {} question(s).\n",
        s.horizon
    ))?;
    human.say(&object_table(s.scene))?;

    let mut choices = rng::stream(s.seed, &[tag::POLICY]);
    let mut history = History::new();
    let mut belief = Belief::uniform(s.scene.len(), s.scene.scene_id);
    for t in 1..=s.horizon {
        let qid = choose_question(&game, s.questioner, t, &history, &belief, &mut choices)?;
        let prompt = format!("Q{t}: {} [y/n/na]", s.bank.questions()[qid].surface());
        let Some(a) = read_answer(human, &prompt)? else {
            return Ok(None);
        };
        history.push(qid, a);
        belief = belief.update_with(&game.model, qid, a).unwrap_or_else(|e| {
            log::warn!("{e}; resetting the belief to the prior");
            Belief::uniform(s.scene.len(), s.scene.scene_id)
        });
    }
    let (guess, _) = game.guess(&history);
    let g = &s.scene.objects[guess];
    human.say(&format!("My guess: object {guess} ({} at x={:.2}).", g.category, g.x))?;
    let Some(target) = read_object(human, s.scene.len())? else {
        return Ok(None);
    };
    let success = guess == target;
    human.say(if success { "Got it!" } else { "Missed." })?;
    let mut tr = Transcript::new(&game, &s.label, s.horizon, &history, guess);
    tr.target = target;
    tr.success = success;
    tr.wiring = s.wiring.clone();
    Ok(Some(tr))
}

/// The `play` command.
pub fn run(cfg: &RunConfig, answers_file: Option<&Path>) -> anyhow::Result<()> {
    let world = load_world(cfg)?;
    let p = &cfg.play;
    let scene: Scene = match &p.scene_file {
        Some(path) => {
            let s: Scene = read_json(path)?;
            s.validate()
                .map_err(|e| usage(format!("scene file {}: {e}", path.display())))?;
            s
        }
        None => world.corpus.get(p.scene_index).cloned().ok_or_else(|| {
            usage(format!(
                "scene_index {} is outside the corpus of {} scenes",
                p.scene_index,
                world.corpus.len()
            ))
        })?,
    };
    let schema = feature_schema(cfg, &world.bank);
    let checkpoint = match p.questioner {
        QuestionerName::Ours => {
            if p.horizon > cfg.train.max_horizon {
                return Err(usage(format!(
                    "play horizon {} exceeds the trained maximum {}",
                    p.horizon, cfg.train.max_horizon
                )));
            }
            let layout = Layout::new(&cfg.out_dir);
            let path = layout.rl_checkpoint(p.wiring, policy_horizon(cfg, p.horizon));
            if !path.exists() {
                return Err(questioner::Error::Sequencing(format!(
                    "no trained policy at {}; run `train` first",
                    path.display()
                ))
                .into());
            }
            Some(load_checkpoint(&path, &schema)?)
        }
        _ => None,
    };
    let questioner = match (p.questioner, &checkpoint) {
        (QuestionerName::Ige, _) => Questioner::Ige,
        (QuestionerName::Random, _) => Questioner::Random,
        (QuestionerName::Tpe, _) => {
            return Err(usage("TPE needs the hidden target and cannot play a human"))
        }
        (QuestionerName::Ours, Some(ck)) => Questioner::Policy {
            params: &ck.params,
            schema: &ck.schema,
            decode: cfg.eval.decode,
            mask_asked: false,
        },
        (QuestionerName::Ours, None) => unreachable!("checkpoint loaded above"),
    };
    let session = Session {
        scene: &scene,
        bank: &world.bank,
        model: world.oracle(p.wiring),
        questioner: &questioner,
        horizon: p.horizon,
        seed: crate::stage_seed(cfg.seed, "play"),
        label: p.questioner.label().to_string(),
        wiring: Some(p.wiring.name().to_string()),
    };
    let stdout = io::stdout();
    let result = match answers_file {
        Some(path) => {
            let f = std::fs::File::open(path)
                .with_context(|| format!("opening answers file {}", path.display()))?;
            run_session(&session, &mut Terminal::new(io::BufReader::new(f), stdout.lock(), true))?
        }
        None => run_session(&session, &mut Terminal::new(io::stdin().lock(), stdout.lock(), false))?,
    };
    match result {
        Some(tr) => {
            let path = Layout::new(&cfg.out_dir).play_session();
            write_json(&path, &tr)?;
            println!("transcript saved to {}", path.display());
        }
        None => eprintln!("input ended; session aborted, nothing saved"),
    }
    Ok(())
}
