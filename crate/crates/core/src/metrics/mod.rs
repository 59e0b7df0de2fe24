//! Attention-alignment and click-prediction metrics, significance tests and
//! the aggregate results table. Logarithms are natural throughout.

mod table;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

pub use table::{aggregate, improvement_percent, render_csv, render_markdown, significance_stars, Cell, MethodRuns, Table};

pub const LOG_BASE: &str = "natural";

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{0}")]
    Usage(String),
    #[error("cosine similarity of a zero vector")]
    ZeroNorm,
}

/// Model-side and human-side view of one held-out session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionEval {
    pub user: String,
    pub session: String,
    /// Probed slot relevance `a`.
    pub relevance: Vec<f64>,
    /// Normalised fixation `g`.
    pub gaze: Vec<f64>,
    pub click: usize,
    pub probs: Vec<f64>,
    pub predicted: usize,
}

/// Indices of the `k` largest entries, ties to the lower index.
pub fn top_k(x: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&i, &j| x[j].total_cmp(&x[i]).then(i.cmp(&j)));
    idx.truncate(k);
    idx
}

fn check_k(n: usize, k: usize) -> Result<(), MetricsError> {
    if k == 0 || k > n {
        return Err(MetricsError::Usage(format!("k = {k} outside 1..={n}")));
    }
    Ok(())
}

/// 1 if the clicked slot is among the top `k` of `a`.
pub fn csh_at_k(a: &[f64], clicked: usize, k: usize) -> Result<f64, MetricsError> {
    check_k(a.len(), k)?;
    Ok(if top_k(a, k).contains(&clicked) { 1.0 } else { 0.0 })
}

/// `|top_k(a) ∩ top_k(g)| / k`.
pub fn tgo_at_k(a: &[f64], g: &[f64], k: usize) -> Result<f64, MetricsError> {
    check_k(a.len(), k)?;
    if a.len() != g.len() {
        return Err(MetricsError::Usage("distributions differ in length".into()));
    }
    let ta = top_k(a, k);
    let hits = top_k(g, k).iter().filter(|n| ta.contains(n)).count();
    Ok(hits as f64 / k as f64)
}

/// `Σ g log(g / max(a, ε))` with `0·log 0 = 0`.
pub fn kl(g: &[f64], a: &[f64], eps: f64) -> f64 {
    g.iter()
        .zip(a)
        .filter(|(gn, _)| **gn > 0.0)
        .map(|(gn, an)| gn * (gn / an.max(eps)).ln())
        .sum()
}

/// Jensen–Shannon divergence.
pub fn js(g: &[f64], a: &[f64]) -> f64 {
    let m: Vec<f64> = g.iter().zip(a).map(|(x, y)| 0.5 * (x + y)).collect();
    let part = |p: &[f64]| -> f64 {
        p.iter()
            .zip(&m)
            .filter(|(pn, _)| **pn > 0.0)
            .map(|(pn, mn)| pn * (pn / mn).ln())
            .sum()
    };
    0.5 * part(g) + 0.5 * part(a)
}

pub fn cosine(g: &[f64], a: &[f64]) -> Result<f64, MetricsError> {
    let dot: f64 = g.iter().zip(a).map(|(x, y)| x * y).sum();
    let ng = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if ng == 0.0 || na == 0.0 {
        return Err(MetricsError::ZeroNorm);
    }
    Ok(dot / (ng * na))
}

/// Fraction of negatives scored strictly below the positive, ties counted half.
pub fn session_auc(probs: &[f64], clicked: usize) -> f64 {
    let pos = probs[clicked];
    let (mut below, mut ties) = (0.0, 0.0);
    for (n, &p) in probs.iter().enumerate() {
        if n == clicked {
            continue;
        }
        if p < pos {
            below += 1.0;
        } else if p == pos {
            ties += 1.0;
        }
    }
    (below + 0.5 * ties) / (probs.len() - 1) as f64
}

/// `−log max(p(click), ε)`.
pub fn click_log_loss(probs: &[f64], clicked: usize, eps: f64) -> f64 {
    -probs[clicked].max(eps).ln()
}

/// Test-set means of every metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sessions: usize,
    pub csh_at_1: f64,
    pub csh_at_3: f64,
    pub csh_at_5: f64,
    pub tgo_at_1: f64,
    pub tgo_at_3: f64,
    pub tgo_at_5: f64,
    pub cosine: f64,
    pub js: f64,
    pub kl: f64,
    pub accuracy: f64,
    pub logloss: f64,
    pub auc: f64,
}

impl MetricsReport {
    pub const METRICS: [&'static str; 12] = [
        "csh_at_1", "csh_at_3", "csh_at_5", "tgo_at_1", "tgo_at_3", "tgo_at_5", "cosine", "js", "kl", "accuracy",
        "logloss", "auc",
    ];

    /// Whether smaller values of `metric` are better.
    pub fn lower_is_better(metric: &str) -> bool {
        matches!(metric, "js" | "kl" | "logloss")
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        Some(match metric {
            "csh_at_1" => self.csh_at_1,
            "csh_at_3" => self.csh_at_3,
            "csh_at_5" => self.csh_at_5,
            "tgo_at_1" => self.tgo_at_1,
            "tgo_at_3" => self.tgo_at_3,
            "tgo_at_5" => self.tgo_at_5,
            "cosine" => self.cosine,
            "js" => self.js,
            "kl" => self.kl,
            "accuracy" => self.accuracy,
            "logloss" => self.logloss,
            "auc" => self.auc,
            _ => return None,
        })
    }

    pub fn from_sessions(sessions: &[SessionEval], eps: f64) -> Result<Self, MetricsError> {
        if sessions.is_empty() {
            return Err(MetricsError::Usage("no sessions to evaluate".into()));
        }
        let mut sum = [0.0; 12];
        for s in sessions {
            let n = s.relevance.len();
            if s.gaze.len() != n || s.probs.len() != n || s.click >= n || s.predicted >= n {
                return Err(MetricsError::Usage(format!("session {} has inconsistent slot counts", s.session)));
            }
            let k = |k: usize| k.min(n);
            let vals = [
                csh_at_k(&s.relevance, s.click, k(1))?,
                csh_at_k(&s.relevance, s.click, k(3))?,
                csh_at_k(&s.relevance, s.click, k(5))?,
                tgo_at_k(&s.relevance, &s.gaze, k(1))?,
                tgo_at_k(&s.relevance, &s.gaze, k(3))?,
                tgo_at_k(&s.relevance, &s.gaze, k(5))?,
                // an all-zero relevance vector shares no direction with the gaze
                match cosine(&s.gaze, &s.relevance) {
                    Err(MetricsError::ZeroNorm) => 0.0,
                    other => other?,
                },
                js(&s.gaze, &s.relevance),
                kl(&s.gaze, &s.relevance, eps),
                if s.predicted == s.click { 1.0 } else { 0.0 },
                click_log_loss(&s.probs, s.click, eps),
                session_auc(&s.probs, s.click),
            ];
            for (acc, v) in sum.iter_mut().zip(vals) {
                *acc += v;
            }
        }
        let m = sessions.len() as f64;
        let [csh_at_1, csh_at_3, csh_at_5, tgo_at_1, tgo_at_3, tgo_at_5, cosine, js, kl, accuracy, logloss, auc] =
            sum.map(|v| v / m);
        Ok(Self {
            sessions: sessions.len(),
            csh_at_1,
            csh_at_3,
            csh_at_5,
            tgo_at_1,
            tgo_at_3,
            tgo_at_5,
            cosine,
            js,
            kl,
            accuracy,
            logloss,
            auc,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
}

/// Two-sided paired t-test. With zero variance of the differences, `p` is 0
/// when the mean difference is nonzero and 1 otherwise.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, MetricsError> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(MetricsError::Usage("paired t-test needs two equal-length samples of size >= 2".into()));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = a.len() - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest { t: 0.0, p: 1.0, df }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p: 0.0,
                df,
            }
        });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("positive degrees of freedom");
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(TTest { t, p, df })
}
