//! Synthetic gaze population with known per-user structure.
//!
//! Each user mixes a handful of gaze prototypes. A prototype is a slot-space
//! distribution built from a positional archetype (top-left primacy, centre
//! bias, ...) plus an affinity between its own genre weights and the items on
//! screen. Every user additionally has a personal taste vector, which is what
//! the profile file exposes; the prototype mixture is never written to the
//! corpus and only lives in the ground-truth sidecar.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Corpus, GazeSession, Layout, UserProfile};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticPopulationConfig {
    pub num_users: usize,
    pub num_sessions: usize,
    pub num_prototypes: usize,
    /// Standard deviation of the multiplicative log-normal noise on gaze.
    pub noise: f64,
    /// Symmetric Dirichlet concentration of the per-user prototype mixture.
    pub mixture_concentration: f64,
    pub feature_dim: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub positional_strength: f64,
    pub affinity_strength: f64,
    pub taste_strength: f64,
    /// Probability that the click goes to the most-fixated slot.
    pub p_top: f64,
    /// Probability that the click goes to the second most-fixated slot.
    pub p_second: f64,
    pub min_total_dwell_ms: f64,
    pub max_total_dwell_ms: f64,
    /// Seeds the prototypes; populations sharing it share gaze archetypes.
    pub world_seed: u64,
    /// Seeds users, items, gaze noise and clicks.
    pub seed: u64,
    pub user_prefix: String,
}

impl Default for SyntheticPopulationConfig {
    fn default() -> Self {
        Self {
            num_users: 50,
            num_sessions: 400,
            num_prototypes: 4,
            noise: 0.05,
            mixture_concentration: 0.5,
            feature_dim: 8,
            grid_rows: 3,
            grid_cols: 5,
            patch_rows: 6,
            patch_cols: 10,
            positional_strength: 1.0,
            affinity_strength: 1.5,
            taste_strength: 1.5,
            p_top: 0.75,
            p_second: 0.2,
            min_total_dwell_ms: 4_000.0,
            max_total_dwell_ms: 16_000.0,
            world_seed: 7,
            seed: 0,
            user_prefix: "u".into(),
        }
    }
}

impl SyntheticPopulationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_prototypes == 0 {
            return Err("num_prototypes must be at least 1".into());
        }
        if !(self.noise >= 0.0) {
            return Err("noise must be non-negative".into());
        }
        if self.num_users == 0 || self.num_sessions < self.num_users {
            return Err("need at least one session per user".into());
        }
        if !(self.mixture_concentration > 0.0) {
            return Err("mixture_concentration must be positive".into());
        }
        if self.p_top < 0.0 || self.p_second < 0.0 || self.p_top + self.p_second > 1.0 {
            return Err("click probabilities must be non-negative and sum to at most 1".into());
        }
        if self.grid_rows * self.grid_cols < 2 || self.feature_dim == 0 {
            return Err("need at least two slots and one feature".into());
        }
        if !(self.min_total_dwell_ms > 0.0 && self.max_total_dwell_ms >= self.min_total_dwell_ms) {
            return Err("invalid dwell range".into());
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::grid(
            &format!("grid{}x{}", self.grid_rows, self.grid_cols),
            self.grid_rows,
            self.grid_cols,
            self.patch_rows,
            self.patch_cols,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    /// Positional logit per slot.
    pub positional: Vec<f64>,
    /// Genre weights scored against item features.
    pub affinity: Vec<f64>,
}

/// Generator sidecar: everything needed to recompute the clean gaze of a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SyntheticPopulationConfig,
    pub prototypes: Vec<Prototype>,
    /// True prototype mixture per user.
    pub mixtures: BTreeMap<String, Vec<f64>>,
}

impl GroundTruth {
    /// Noise-free gaze distribution of each prototype for one screen.
    pub fn prototype_gaze(&self, items: &[Vec<f64>], taste: &[f64]) -> Vec<Vec<f64>> {
        let c = &self.config;
        self.prototypes
            .iter()
            .map(|p| {
                let logits: Vec<f64> = items
                    .iter()
                    .enumerate()
                    .map(|(n, f)| {
                        c.positional_strength * p.positional[n]
                            + c.affinity_strength * dot(&p.affinity, f)
                            + c.taste_strength * dot(taste, f)
                    })
                    .collect();
                softmax(&logits)
            })
            .collect()
    }

    /// Noise-free mixture gaze for a user on one screen.
    pub fn clean_gaze(&self, user: &str, items: &[Vec<f64>], taste: &[f64]) -> Option<Vec<f64>> {
        let alpha = self.mixtures.get(user)?;
        let comps = self.prototype_gaze(items, taste);
        let mut g = vec![0.0; items.len()];
        for (a, comp) in alpha.iter().zip(&comps) {
            for (gn, cn) in g.iter_mut().zip(comp) {
                *gn += a * cn;
            }
        }
        Some(g)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn normal(rng: &mut impl Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn dirichlet(rng: &mut impl Rng, k: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive shape");
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = draws.iter().sum();
        if s > 0.0 {
            return draws.into_iter().map(|v| v / s).collect();
        }
    }
}

/// Positional archetypes evaluated at slot centres `(cx, cy)`.
fn archetype(k: usize, cx: f64, cy: f64, rng: &mut impl Rng) -> f64 {
    match k {
        // top-left primacy, the F-shaped scan
        0 => -3.0 * cy - 2.0 * cx,
        // centre bias
        1 => -12.0 * ((cx - 0.5).powi(2) + (cy - 0.5).powi(2)),
        // right-hand side, lower rows
        2 => 3.0 * cx + 1.5 * cy,
        // bottom-left
        3 => 3.0 * cy - 2.0 * cx,
        _ => 1.5 * normal(rng),
    }
}

fn build_prototypes(cfg: &SyntheticPopulationConfig, layout: &Layout) -> Vec<Prototype> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
    (0..cfg.num_prototypes)
        .map(|k| {
            let positional: Vec<f64> = layout
                .slots
                .iter()
                .map(|r| {
                    let (cx, cy) = r.center();
                    archetype(k, cx, cy, &mut rng)
                })
                .collect();
            let mean = positional.iter().sum::<f64>() / positional.len() as f64;
            let affinity = (0..cfg.feature_dim).map(|_| normal(&mut rng)).collect();
            Prototype {
                positional: positional.into_iter().map(|v| v - mean).collect(),
                affinity,
            }
        })
        .collect()
}

/// Draws a population corpus and its ground truth.
pub fn generate_population(cfg: &SyntheticPopulationConfig) -> Result<(Corpus, GroundTruth), String> {
    cfg.validate()?;
    let layout = cfg.layout();
    let prototypes = build_prototypes(cfg, &layout);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = cfg.num_users.to_string().len().max(3);

    let mut users = Vec::with_capacity(cfg.num_users);
    let mut mixtures = BTreeMap::new();
    for u in 0..cfg.num_users {
        let id = format!("{}{:0width$}", cfg.user_prefix, u);
        mixtures.insert(id.clone(), dirichlet(&mut rng, cfg.num_prototypes, cfg.mixture_concentration));
        let preference = (0..cfg.feature_dim).map(|_| normal(&mut rng)).collect();
        users.push(UserProfile { user: id, preference });
    }

    // one session each, the rest spread uniformly at random
    let mut counts = vec![1usize; cfg.num_users];
    for _ in cfg.num_users..cfg.num_sessions {
        counts[rng.random_range(0..cfg.num_users)] += 1;
    }

    let truth = GroundTruth {
        config: cfg.clone(),
        prototypes,
        mixtures,
    };
    let n = layout.num_slots();
    let mut sessions = Vec::with_capacity(cfg.num_sessions);
    let mut order: Vec<usize> = Vec::new();
    for (u, profile) in users.iter().enumerate() {
        for _ in 0..counts[u] {
            let items: Vec<Vec<f64>> = (0..n)
                .map(|_| dirichlet(&mut rng, cfg.feature_dim, 0.5))
                .collect();
            let clean = truth
                .clean_gaze(&profile.user, &items, &profile.preference)
                .expect("user has a mixture");
            let noisy: Vec<f64> = clean.iter().map(|g| g * (cfg.noise * normal(&mut rng)).exp()).collect();
            let total: f64 = noisy.iter().sum();
            let gaze: Vec<f64> = noisy.iter().map(|v| v / total).collect();
            let dwell_total = rng.random_range(cfg.min_total_dwell_ms..=cfg.max_total_dwell_ms);
            let dwell_ms: Vec<f64> = gaze.iter().map(|g| g * dwell_total).collect();
            let rank = super::dwell_rank(&dwell_ms);
            let r: f64 = rng.random();
            let click = if r < cfg.p_top {
                rank[0]
            } else if r < cfg.p_top + cfg.p_second {
                rank[1]
            } else {
                rng.random_range(0..n)
            };
            order.push(sessions.len());
            sessions.push(GazeSession {
                user: profile.user.clone(),
                session: String::new(),
                layout: layout.id.clone(),
                items,
                dwell_ms,
                click,
            });
        }
    }
    // interleave users so file order does not follow user order
    order.shuffle(&mut rng);
    let width = cfg.num_sessions.to_string().len().max(4);
    let mut shuffled: Vec<GazeSession> = order.iter().map(|&i| sessions[i].clone()).collect();
    for (i, s) in shuffled.iter_mut().enumerate() {
        s.session = format!("s{i:0width$}");
    }
    let corpus = Corpus {
        layouts: vec![layout],
        users,
        sessions: shuffled,
    };
    Ok((corpus, truth))
}
