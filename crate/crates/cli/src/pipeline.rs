//! The build, train and eval commands.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::BufReader;
use std::path::Path;

use anyhow::{bail, Context};
use questioner::engine::{evaluate, EvalSpec, FixedScenes, QuestionerSpec};
use questioner::learn::{dagger_train, reinforce_train};
use questioner::oracle::{calibrate_ind, fit_approximate, heldout_answer_error, FitSpec};
use questioner::policy::evidence_weight_for;
use questioner::qbank::{audit_bank, sample_bank, BankAudit};
use questioner::scene::{generate_corpus, read_corpus, write_corpus};
use questioner::{
    Checkpoint, FeatureSchema, OracleKind, OracleModel, OracleWiring, PolicyParams, Questioner,
    QuestionBank, Scene,
};
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    read_json, read_jsonl, sha256_file, sha256_hex, write_atomic, write_json, write_jsonl, Layout,
    Manifest, MANIFEST_FORMAT_VERSION, RECORD_FORMAT_VERSION,
};
use crate::config::{QuestionerName, RunConfig};
use crate::{stage_seed, usage};

/// Everything `build` produces, loaded back into memory.
pub struct World {
    pub corpus: Vec<Scene>,
    pub heldout: Vec<Scene>,
    pub bank: QuestionBank,
    pub true_a: OracleModel,
    pub dep_a: OracleModel,
    pub ind_a: OracleModel,
}

impl World {
    pub fn oracle(&self, kind: OracleKind) -> &OracleModel {
        match kind {
            OracleKind::TrueA => &self.true_a,
            OracleKind::DepA => &self.dep_a,
            OracleKind::IndA => &self.ind_a,
        }
    }
}

pub fn config_hash(cfg: &RunConfig) -> String {
    #[derive(Serialize)]
    struct Key<'a> {
        seed: u64,
        scene: &'a questioner::SceneConfig,
        corpus: &'a crate::config::CorpusConfig,
        bank: &'a questioner::qbank::BankParams,
        oracle: &'a crate::config::OracleConfig,
    }
    let key = Key {
        seed: cfg.seed,
        scene: &cfg.scene,
        corpus: &cfg.corpus,
        bank: &cfg.bank,
        oracle: &cfg.oracle,
    };
    sha256_hex(&serde_json::to_vec(&key).expect("config serializes"))
}

fn manifest_matches(layout: &Layout, hash: &str) -> bool {
    let Ok(m) = read_json::<Manifest>(&layout.manifest()) else {
        return false;
    };
    m.format_version == MANIFEST_FORMAT_VERSION
        && m.config_hash == hash
        && m.files.iter().all(|(name, h)| {
            sha256_file(&layout.build_dir().join(name)).is_ok_and(|got| &got == h)
        })
}

fn corpus_bytes(scenes: &[Scene]) -> anyhow::Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_corpus(&mut buf, scenes)?;
    Ok(buf)
}

/// Generate corpora, sample the bank and fit the oracles. A second run with the same
/// configuration finds a matching manifest and does nothing.
pub fn build(cfg: &RunConfig, force: bool) -> anyhow::Result<String> {
    let layout = Layout::new(&cfg.out_dir);
    let hash = config_hash(cfg);
    if !force && manifest_matches(&layout, &hash) {
        return Ok(format!("build up to date ({})", layout.build_dir().display()));
    }
    let dir = layout.build_dir();
    if dir.exists() && fs::read_dir(&dir)?.next().is_some() {
        if !force {
            bail!(
                "{} holds output from a different or incomplete build; pass --force to overwrite",
                dir.display()
            );
        }
        fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
    }

    let corpus = generate_corpus(&cfg.scene, cfg.corpus.train_scenes, stage_seed(cfg.seed, "corpus"))?;
    let heldout = generate_corpus(
        &cfg.scene,
        cfg.corpus.heldout_scenes,
        stage_seed(cfg.seed, "heldout"),
    )?;
    let selection = sample_bank(&corpus, &cfg.bank, stage_seed(cfg.seed, "bank"))?;
    let bank = selection.bank;
    log::info!("bank: {} questions from a pool of {}", bank.size(), selection.pool_size);

    let true_a = OracleModel::true_oracle(cfg.oracle.noise)?;
    let dep_a = fit_approximate(
        &FitSpec::dep(cfg.oracle.dep_budget),
        &true_a,
        &corpus,
        &bank,
        stage_seed(cfg.seed, "depA"),
    )?;
    let cal = calibrate_ind(
        &true_a,
        &corpus,
        &heldout,
        &bank,
        cfg.oracle.ind_budget,
        cfg.oracle.ind_target_error,
        stage_seed(cfg.seed, "indA"),
    )?;
    let dep_err = heldout_answer_error(&dep_a, &true_a, &heldout, &bank);
    log::info!(
        "indA: label noise {:.4}, held-out error {:.4}; depA held-out error {dep_err:.4}",
        cal.label_noise,
        cal.heldout_error
    );

    let mut files = BTreeMap::new();
    let mut put = |path: &Path, bytes: Vec<u8>| -> anyhow::Result<()> {
        write_atomic(path, &bytes)?;
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        files.insert(name, sha256_hex(&bytes));
        Ok(())
    };
    put(&layout.corpus(), corpus_bytes(&corpus)?)?;
    put(&layout.heldout(), corpus_bytes(&heldout)?)?;
    put(&layout.bank(), bank.to_json()?.into_bytes())?;
    put(&layout.oracle(OracleKind::TrueA), true_a.to_json()?.into_bytes())?;
    put(&layout.oracle(OracleKind::DepA), dep_a.to_json()?.into_bytes())?;
    put(&layout.oracle(OracleKind::IndA), cal.model.to_json()?.into_bytes())?;
    let manifest = Manifest {
        format_version: MANIFEST_FORMAT_VERSION,
        config_hash: hash,
        files,
        bank_size: bank.size(),
        pool_size: selection.pool_size,
        bank_infeasible: selection.infeasible,
        ind_label_noise: cal.label_noise,
        ind_heldout_error: cal.heldout_error,
        dep_heldout_error: dep_err,
    };
    // the manifest goes last: its presence marks a complete build
    write_json(&layout.manifest(), &manifest)?;
    Ok(format!(
        "built {} + {} scenes, {} questions; indA held-out error {:.4} (label noise {:.4})",
        corpus.len(),
        heldout.len(),
        bank.size(),
        cal.heldout_error,
        cal.label_noise
    ))
}

fn read_scenes(path: &Path) -> anyhow::Result<Vec<Scene>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_corpus(BufReader::new(f))?)
}

fn read_oracle(path: &Path) -> anyhow::Result<OracleModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    OracleModel::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Load the build output, checking it belongs to this configuration.
pub fn load_world(cfg: &RunConfig) -> anyhow::Result<World> {
    let layout = Layout::new(&cfg.out_dir);
    if !layout.manifest().exists() {
        return Err(questioner::Error::Sequencing(format!(
            "no build output under {}; run `build` first",
            cfg.out_dir.display()
        ))
        .into());
    }
    if !manifest_matches(&layout, &config_hash(cfg)) {
        bail!(
            "build output under {} does not match this configuration; rerun `build --force`",
            cfg.out_dir.display()
        );
    }
    let bank_text = fs::read_to_string(layout.bank())?;
    Ok(World {
        corpus: read_scenes(&layout.corpus())?,
        heldout: read_scenes(&layout.heldout())?,
        bank: QuestionBank::from_json(&bank_text)?,
        true_a: read_oracle(&layout.oracle(OracleKind::TrueA))?,
        dep_a: read_oracle(&layout.oracle(OracleKind::DepA))?,
        ind_a: read_oracle(&layout.oracle(OracleKind::IndA))?,
    })
}

pub fn feature_schema(cfg: &RunConfig, bank: &QuestionBank) -> FeatureSchema {
    let mut schema = FeatureSchema::new(&cfg.scene, bank, cfg.train.max_horizon);
    // a zero-noise weight is infinite; cap the evidence at 1% noise
    schema.evidence_weight = evidence_weight_for(cfg.oracle.noise.max(0.01));
    schema
}

/// Which training stages to run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageSet {
    pub il: bool,
    pub rl: BTreeSet<usize>,
}

impl StageSet {
    pub fn all(cfg: &RunConfig) -> Self {
        Self {
            il: true,
            rl: (cfg.train.base_horizon..=cfg.train.max_horizon).collect(),
        }
    }

    /// Tokens: `il`, `rl` (every horizon), `rlN`, `rlN-M`.
    pub fn parse(tokens: Option<&[String]>, cfg: &RunConfig) -> anyhow::Result<Self> {
        let Some(tokens) = tokens else {
            return Ok(Self::all(cfg));
        };
        let (lo, hi) = (cfg.train.base_horizon, cfg.train.max_horizon);
        let mut set = Self {
            il: false,
            rl: BTreeSet::new(),
        };
        for tok in tokens {
            let tok = tok.trim();
            if tok == "il" {
                set.il = true;
                continue;
            }
            if tok == "rl" {
                set.rl.extend(lo..=hi);
                continue;
            }
            let range = tok
                .strip_prefix("rl")
                .ok_or_else(|| usage(format!("unknown stage {tok:?}")))?;
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| usage(format!("bad horizon in stage {tok:?}")))
            };
            let (a, b) = match range.split_once('-') {
                Some((a, b)) => (parse(a)?, parse(b)?),
                None => {
                    let h = parse(range)?;
                    (h, h)
                }
            };
            if a > b || a < lo || b > hi {
                return Err(usage(format!(
                    "stage {tok:?} is outside the RL horizons {lo}..={hi}"
                )));
            }
            set.rl.extend(a..=b);
        }
        Ok(set)
    }
}

pub fn load_checkpoint(path: &Path, schema: &FeatureSchema) -> anyhow::Result<Checkpoint> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ck = Checkpoint::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
    if ck.schema != *schema {
        bail!(
            "{} was trained with a different feature schema; retrain with --force",
            path.display()
        );
    }
    Ok(ck)
}

fn sequencing(msg: String) -> anyhow::Error {
    questioner::Error::Sequencing(msg).into()
}

/// Run the selected stages in order. Stages whose checkpoint exists are skipped unless
/// `force`; each RL stage starts from its predecessor's checkpoint on disk.
pub fn train(cfg: &RunConfig, stages: &StageSet, force: bool) -> anyhow::Result<()> {
    let layout = Layout::new(&cfg.out_dir);
    let world = load_world(cfg)?;
    let schema = feature_schema(cfg, &world.bank);
    let scenes = FixedScenes(world.corpus.clone());
    let base = cfg.train.base_horizon;

    if stages.il {
        let path = layout.il_checkpoint();
        if path.exists() && !force {
            log::info!("IL checkpoint exists; skipping");
        } else {
            let init = PolicyParams::build(&schema, &cfg.policy, stage_seed(cfg.seed, "init"))?;
            let out = dagger_train(
                &cfg.il_config(),
                &cfg.train.experts.schedule(base),
                &world.true_a,
                &world.bank,
                &scenes,
                &schema,
                init,
            )?;
            for m in &out.metrics {
                log::info!(
                    "IL iteration {}: beta {:.3} data {} agreement {:.3} loss {:.4}",
                    m.iteration,
                    m.beta,
                    m.dataset_size,
                    m.agreement,
                    m.loss
                );
            }
            write_jsonl(&layout.il_metrics(), &out.metrics)?;
            let ck = Checkpoint::new(base, schema.clone(), out.params);
            write_atomic(&path, ck.to_json()?.as_bytes())?;
        }
    }

    for &wiring in &cfg.train.wirings {
        let w = OracleWiring {
            environment: &world.true_a,
            questioner: world.oracle(wiring),
        };
        for &h in &stages.rl {
            let path = layout.rl_checkpoint(wiring, h);
            if path.exists() && !force {
                log::info!("{} T={h} checkpoint exists; skipping", wiring.name());
                continue;
            }
            let prev = if h == base {
                layout.il_checkpoint()
            } else {
                layout.rl_checkpoint(wiring, h - 1)
            };
            if !prev.exists() {
                return Err(sequencing(format!(
                    "RL at T={h} for {} needs {}, which does not exist",
                    wiring.name(),
                    prev.display()
                )));
            }
            let init = load_checkpoint(&prev, &schema)?;
            let out = reinforce_train(
                &cfg.rl_config(wiring, h),
                w,
                &world.bank,
                &scenes,
                &schema,
                init.params,
            )?;
            let tail = out.metrics.len().min(10);
            let recent = out.metrics[out.metrics.len() - tail..]
                .iter()
                .map(|m| m.success_rate)
                .sum::<f64>()
                / tail.max(1) as f64;
            log::info!("RL {} T={h}: recent batch success {recent:.3}", wiring.name());
            write_jsonl(&layout.rl_metrics(wiring, h), &out.metrics)?;
            let ck = Checkpoint::new(h, schema.clone(), out.params);
            write_atomic(&path, ck.to_json()?.as_bytes())?;
        }
    }
    Ok(())
}

/// One cell of the evaluation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub format_version: u32,
    pub questioner: String,
    pub wiring: String,
    pub horizon: usize,
    pub n_games: usize,
    pub successes: usize,
    pub accuracy: f64,
    pub ci95: f64,
}

/// Checkpoint used by the trained policy at `horizon`: horizons below the imitation
/// horizon reuse its policy.
pub fn policy_horizon(cfg: &RunConfig, horizon: usize) -> usize {
    horizon.max(cfg.train.base_horizon)
}

fn load_policies(
    cfg: &RunConfig,
    schema: &FeatureSchema,
    wiring: OracleKind,
    horizons: &[usize],
) -> anyhow::Result<BTreeMap<usize, Checkpoint>> {
    let layout = Layout::new(&cfg.out_dir);
    let mut cks = BTreeMap::new();
    for &h in horizons {
        let ph = policy_horizon(cfg, h);
        if cks.contains_key(&ph) {
            continue;
        }
        let path = layout.rl_checkpoint(wiring, ph);
        if !path.exists() {
            return Err(sequencing(format!(
                "no trained policy for {} at T={ph} ({}); run `train` first",
                wiring.name(),
                path.display()
            )));
        }
        cks.insert(ph, load_checkpoint(&path, schema)?);
    }
    Ok(cks)
}

/// Accuracy for every (wiring, questioner, horizon). All cells share the same game
/// seeds, so questioners face identical scenes, targets and answer draws.
pub fn eval(cfg: &RunConfig) -> anyhow::Result<Vec<GridRecord>> {
    let layout = Layout::new(&cfg.out_dir);
    let world = load_world(cfg)?;
    let schema = feature_schema(cfg, &world.bank);
    let scenes = FixedScenes(world.heldout.clone());
    let e = &cfg.eval;
    let top = *e.horizons.iter().max().expect("validated non-empty");
    let spec = EvalSpec {
        horizons: e.horizons.clone(),
        n_games: e.n_games,
        seed: stage_seed(cfg.seed, "eval"),
        transcripts: e.transcripts > 0,
    };
    let mut grid = Vec::new();
    let mut transcripts = Vec::new();
    for &wiring in &e.wirings {
        let w = OracleWiring {
            environment: &world.true_a,
            questioner: world.oracle(wiring),
        };
        for &qn in &e.questioners {
            let table = match qn {
                QuestionerName::Ige => {
                    evaluate(&QuestionerSpec::Fixed(Questioner::Ige), w, &world.bank, &scenes, &spec)?
                }
                QuestionerName::Tpe => {
                    evaluate(&QuestionerSpec::Fixed(Questioner::Tpe), w, &world.bank, &scenes, &spec)?
                }
                QuestionerName::Random => evaluate(
                    &QuestionerSpec::Fixed(Questioner::Random),
                    w,
                    &world.bank,
                    &scenes,
                    &spec,
                )?,
                QuestionerName::Ours => {
                    let cks = load_policies(cfg, &schema, wiring, &e.horizons)?;
                    let map = e
                        .horizons
                        .iter()
                        .map(|&h| {
                            let ck = &cks[&policy_horizon(cfg, h)];
                            let q = Questioner::Policy {
                                params: &ck.params,
                                schema: &ck.schema,
                                decode: e.decode,
                                mask_asked: false,
                            };
                            (h, q)
                        })
                        .collect();
                    evaluate(&QuestionerSpec::PerHorizon(map), w, &world.bank, &scenes, &spec)?
                }
            };
            for row in &table.rows {
                grid.push(GridRecord {
                    format_version: RECORD_FORMAT_VERSION,
                    questioner: qn.label().to_string(),
                    wiring: wiring.name().to_string(),
                    horizon: row.horizon,
                    n_games: row.n_games,
                    successes: row.successes,
                    accuracy: row.accuracy,
                    ci95: row.ci95,
                });
            }
            transcripts.extend(
                table
                    .transcripts
                    .into_iter()
                    .filter(|t| t.horizon == top)
                    .take(e.transcripts)
                    .map(|mut t| {
                        t.questioner = qn.label().to_string();
                        t.wiring = Some(wiring.name().to_string());
                        t
                    }),
            );
            log::info!("evaluated {} with {}", qn.label(), wiring.name());
        }
    }
    let dir = layout.eval_dir();
    write_jsonl(&dir.join("grid.jsonl"), &grid)?;
    write_atomic(&dir.join("table.txt"), render_table(&grid).as_bytes())?;
    write_jsonl(&dir.join("transcripts.jsonl"), &transcripts)?;
    Ok(grid)
}

/// Aligned text table: one row per horizon, one column per questioner/wiring pair,
/// cells as `accuracy% ± ci95%`.
pub fn render_table(grid: &[GridRecord]) -> String {
    let mut columns: Vec<(String, String)> = Vec::new();
    let mut horizons = BTreeSet::new();
    let mut cells = BTreeMap::new();
    for r in grid {
        let col = (r.questioner.clone(), r.wiring.clone());
        if !columns.contains(&col) {
            columns.push(col.clone());
        }
        horizons.insert(r.horizon);
        cells.insert((r.horizon, col), (r.accuracy, r.ci95));
    }
    const W: usize = 15;
    let mut out = format!("{:>4}", "T");
    for (q, w) in &columns {
        out.push_str(&format!("{:>W$}", format!("{q}/{w}")));
    }
    out.push('\n');
    for h in horizons {
        out.push_str(&format!("{:>4}", format!("{h}q")));
        for col in &columns {
            let cell = match cells.get(&(h, col.clone())) {
                Some((a, ci)) => format!("{:.2}±{:.2}", 100.0 * a, 100.0 * ci),
                None => "-".to_string(),
            };
            out.push_str(&format!("{cell:>W$}"));
        }
        out.push('\n');
    }
    out
}

/// Read transcripts from a JSON file holding one transcript, or from JSON lines.
pub fn read_transcripts(path: &Path) -> anyhow::Result<Vec<questioner::engine::Transcript>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(t) = serde_json::from_str(&text) {
        return Ok(vec![t]);
    }
    read_jsonl(path)
}

/// Replay each transcript against the built bank, recomputing the guess under the
/// oracle it names (trueA when unnamed). Returns the number verified.
pub fn check_transcripts(cfg: &RunConfig, path: &Path) -> anyhow::Result<usize> {
    let world = load_world(cfg)?;
    let ts = read_transcripts(path)?;
    for (i, t) in ts.iter().enumerate() {
        let kind = match &t.wiring {
            Some(name) => name.parse::<OracleKind>()?,
            None => OracleKind::TrueA,
        };
        t.replay(&world.bank, world.oracle(kind))
            .with_context(|| format!("transcript {} of {}", i + 1, path.display()))?;
    }
    Ok(ts.len())
}

pub fn audit(cfg: &RunConfig) -> anyhow::Result<BankAudit> {
    let world = load_world(cfg)?;
    Ok(audit_bank(
        &world.bank,
        &world.corpus,
        cfg.bank.agreement_cap,
        cfg.bank.min_count,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_tokens() {
        let cfg = RunConfig::default();
        let s = StageSet::parse(Some(&["il".into()]), &cfg).unwrap();
        assert!(s.il && s.rl.is_empty());
        let s = StageSet::parse(Some(&["rl6-8".into(), "rl10".into()]), &cfg).unwrap();
        assert!(!s.il);
        assert_eq!(s.rl.into_iter().collect::<Vec<_>>(), vec![6, 7, 8, 10]);
        assert_eq!(StageSet::parse(None, &cfg).unwrap(), StageSet::all(&cfg));
        assert!(StageSet::parse(Some(&["rl4".into()]), &cfg).is_err());
        assert!(StageSet::parse(Some(&["rl8-6".into()]), &cfg).is_err());
        assert!(StageSet::parse(Some(&["sft".into()]), &cfg).is_err());
    }

    #[test]
    fn table_has_one_row_per_horizon() {
        let rec = |q: &str, w: &str, h: usize, a: f64| GridRecord {
            format_version: 1,
            questioner: q.into(),
            wiring: w.into(),
            horizon: h,
            n_games: 10,
            successes: (a * 10.0) as usize,
            accuracy: a,
            ci95: 0.01,
        };
        let grid = vec![
            rec("IGE", "trueA", 1, 0.3),
            rec("IGE", "trueA", 2, 0.5),
            rec("ours", "trueA", 1, 0.4),
            rec("ours", "trueA", 2, 0.6),
        ];
        let t = render_table(&grid);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("IGE/trueA") && lines[0].contains("ours/trueA"));
        assert!(lines[2].contains("60.00±1.00"));
    }

    #[test]
    fn config_hash_ignores_training_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.rl.lr = 0.5;
        assert_eq!(config_hash(&a), config_hash(&b));
        b.seed = 1;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
