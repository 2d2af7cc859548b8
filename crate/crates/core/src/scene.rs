//! Synthetic scenes: the stand-in for an image with a list of candidate objects.
//!
//! Corpus file format: JSON lines, one [`Scene`] per line:
//!
//! ```text
//! {"scene_id":0,"seed":123,"objects":[{"id":0,"category":"person","color":"red","x":0.31,"y":0.72,"size":"small"}, ...]}
//! ```
//!
//! `color` is `null` for colorless objects.

use std::io::{BufRead, Write};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Medium,
    Large,
}

impl Size {
    pub const ALL: [Size; 3] = [Size::Small, Size::Medium, Size::Large];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Medium => "medium",
            Size::Large => "large",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Object {
    pub id: usize,
    pub category: String,
    pub color: Option<String>,
    pub x: f64,
    pub y: f64,
    pub size: Size,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    #[serde(rename = "seed")]
    pub rng_seed: u64,
    pub objects: Vec<Object>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameInstance {
    pub scene: Scene,
    pub target: usize,
}

/// A weighted vocabulary token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weighted {
    pub token: String,
    pub weight: f64,
}

impl Weighted {
    pub fn new(token: &str, weight: f64) -> Self {
        Self {
            token: token.to_string(),
            weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub categories: Vec<Weighted>,
    pub colors: Vec<Weighted>,
    /// Probability that an object has no color.
    pub colorless_prob: f64,
    /// Weights for small, medium, large.
    pub size_weights: [f64; 3],
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let categories = [
            ("person", 0.24),
            ("car", 0.14),
            ("dog", 0.12),
            ("cat", 0.10),
            ("chair", 0.12),
            ("cup", 0.10),
            ("bottle", 0.10),
            ("umbrella", 0.08),
        ];
        let colors = ["red", "blue", "green", "yellow", "white", "black"];
        Self {
            categories: categories
                .iter()
                .map(|&(t, w)| Weighted::new(t, w))
                .collect(),
            colors: colors.iter().map(|&t| Weighted::new(t, 1.0)).collect(),
            colorless_prob: 0.2,
            size_weights: [0.3, 0.4, 0.3],
            min_objects: 8,
            max_objects: 8,
        }
    }
}

fn check_weights(name: &str, ws: &[Weighted]) -> Result<()> {
    if ws.is_empty() {
        return Err(Error::config(format!("{name} vocabulary is empty")));
    }
    if ws.iter().any(|w| !w.weight.is_finite() || w.weight < 0.0) {
        return Err(Error::config(format!("{name} weights must be finite and non-negative")));
    }
    if ws.iter().map(|w| w.weight).sum::<f64>() <= 0.0 {
        return Err(Error::config(format!("{name} weights sum to zero")));
    }
    let mut tokens: Vec<&str> = ws.iter().map(|w| w.token.as_str()).collect();
    tokens.sort_unstable();
    tokens.dedup();
    if tokens.len() != ws.len() {
        return Err(Error::config(format!("{name} vocabulary has duplicate tokens")));
    }
    Ok(())
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects < 2 {
            return Err(Error::config("scenes need at least 2 objects"));
        }
        if self.max_objects < self.min_objects {
            return Err(Error::config("max_objects < min_objects"));
        }
        check_weights("category", &self.categories)?;
        if self.colorless_prob < 1.0 {
            check_weights("color", &self.colors)?;
        }
        if !(0.0..=1.0).contains(&self.colorless_prob) {
            return Err(Error::config("colorless_prob must lie in [0, 1]"));
        }
        if self.size_weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || self.size_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::config("invalid size weights"));
        }
        Ok(())
    }

    /// Normalized category probabilities in vocabulary order.
    pub fn category_probs(&self) -> Vec<f64> {
        let total: f64 = self.categories.iter().map(|w| w.weight).sum();
        self.categories.iter().map(|w| w.weight / total).collect()
    }

    pub fn category_names(&self) -> Vec<String> {
        self.categories.iter().map(|w| w.token.clone()).collect()
    }

    pub fn color_names(&self) -> Vec<String> {
        self.colors.iter().map(|w| w.token.clone()).collect()
    }
}

/// Generate a scene. The result depends only on `(config, seed)`; `scene_id` is set to `seed`.
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let mut rng = rng::stream(seed, &[tag::SCENE]);
    let m = rng.gen_range(config.min_objects..=config.max_objects);
    let cat_dist = WeightedIndex::new(config.categories.iter().map(|w| w.weight))
        .map_err(|e| Error::config(e.to_string()))?;
    let color_dist = if config.colors.is_empty() {
        None
    } else {
        Some(
            WeightedIndex::new(config.colors.iter().map(|w| w.weight))
                .map_err(|e| Error::config(e.to_string()))?,
        )
    };
    let size_dist =
        WeightedIndex::new(config.size_weights).map_err(|e| Error::config(e.to_string()))?;

    let objects = (0..m)
        .map(|id| {
            let category = config.categories[cat_dist.sample(&mut rng)].token.clone();
            let colorless = rng.gen::<f64>() < config.colorless_prob;
            let color = match (&color_dist, colorless) {
                (Some(d), false) => Some(config.colors[d.sample(&mut rng)].token.clone()),
                _ => None,
            };
            let x = rng.gen::<f64>();
            let y = rng.gen::<f64>();
            let size = Size::ALL[size_dist.sample(&mut rng)];
            Object {
                id,
                category,
                color,
                x,
                y,
                size,
            }
        })
        .collect();
    Ok(Scene {
        scene_id: seed,
        rng_seed: seed,
        objects,
    })
}

/// Generate `n` scenes with ids `0..n`, each seeded from `(seed, id)`.
pub fn generate_corpus(config: &SceneConfig, n: usize, seed: u64) -> Result<Vec<Scene>> {
    (0..n)
        .map(|i| {
            let mut s = generate_scene(config, rng::derive(seed, &[tag::SCENE, i as u64]))?;
            s.scene_id = i as u64;
            Ok(s)
        })
        .collect()
}

impl Scene {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.objects.len() < 2 {
            return Err(Error::config(format!(
                "scene {} has {} objects; need at least 2",
                self.scene_id,
                self.objects.len()
            )));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.id != i {
                return Err(Error::config(format!(
                    "scene {}: object at position {i} has id {}",
                    self.scene_id, o.id
                )));
            }
            if !(0.0..=1.0).contains(&o.x) || !(0.0..=1.0).contains(&o.y) {
                return Err(Error::config(format!(
                    "scene {}: object {i} position out of [0,1]",
                    self.scene_id
                )));
            }
        }
        Ok(())
    }

    /// Rank of each object from the left (0 = leftmost); ties in x broken by id.
    pub fn x_ranks(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.objects.len()).collect();
        order.sort_by(|&a, &b| {
            self.objects[a]
                .x
                .total_cmp(&self.objects[b].x)
                .then(a.cmp(&b))
        });
        let mut ranks = vec![0; order.len()];
        for (r, &i) in order.iter().enumerate() {
            ranks[i] = r;
        }
        ranks
    }
}

/// Pick a target uniformly among all objects.
pub fn sample_game(scene: &Scene, seed: u64) -> Result<GameInstance> {
    sample_game_filtered(scene, seed, |_| true)?
        .ok_or_else(|| Error::config("scene has no objects"))
}

/// Pick a target uniformly among objects accepted by `eligible`.
/// Returns `Ok(None)` when no object is eligible.
pub fn sample_game_filtered(
    scene: &Scene,
    seed: u64,
    eligible: impl Fn(&Object) -> bool,
) -> Result<Option<GameInstance>> {
    scene.validate()?;
    let ids: Vec<usize> = scene
        .objects
        .iter()
        .filter(|o| eligible(o))
        .map(|o| o.id)
        .collect();
    if ids.is_empty() {
        return Ok(None);
    }
    let mut rng = rng::stream(seed, &[tag::TARGET]);
    let target = ids[rng.gen_range(0..ids.len())];
    Ok(Some(GameInstance {
        scene: scene.clone(),
        target,
    }))
}

pub fn write_corpus<W: Write>(mut w: W, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Vec<Scene>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Scene = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("corpus line {}: {e}", n + 1)))?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}
