//! Session corpora, interface layouts and the leave-one-out split.
//!
//! On disk a corpus is a directory holding:
//!
//! * `sessions.jsonl`: one session per line,
//!   `{"user", "session", "layout", "items": [[f, ...], ...], "dwell_ms": [...], "click": n}`.
//!   `items[n]` is the feature vector of the item shown in slot `n`,
//!   `dwell_ms[n]` the total fixation time in milliseconds on that slot and
//!   `click` the zero-based clicked slot.
//! * `layouts.json`: `[{"id", "slots": [{"x", "y", "w", "h"}], "patch_grid": [rows, cols]}]`
//!   with rectangles in normalised `[0, 1]²` image coordinates.
//! * `users.json`: `[{"user", "preference": [...]}]`.
//! * `manifest.json` (optional): `{"format_version", "sessions", "users", "layouts"}`.
//!   When present the counts are checked on load.

mod layout;
pub mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use layout::{Layout, Rect};

pub const FORMAT_VERSION: u32 = 1;

pub const SESSIONS_FILE: &str = "sessions.jsonl";
pub const LAYOUTS_FILE: &str = "layouts.json";
pub const USERS_FILE: &str = "users.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Schema {
        file: String,
        line: usize,
        message: String,
    },
    #[error("{file}:{line}: negative or non-finite dwell time {value} in slot {slot}")]
    NegativeDwell {
        file: String,
        line: usize,
        slot: usize,
        value: f64,
    },
    #[error("layout {id}: {message}")]
    Layout { id: String, message: String },
    #[error("manifest mismatch: {0}")]
    Manifest(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GazeSession {
    pub user: String,
    pub session: String,
    pub layout: String,
    pub items: Vec<Vec<f64>>,
    pub dwell_ms: Vec<f64>,
    pub click: usize,
}

impl GazeSession {
    pub fn num_slots(&self) -> usize {
        self.dwell_ms.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserProfile {
    pub user: String,
    pub preference: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub sessions: usize,
    pub users: usize,
    pub layouts: usize,
}

/// A validated set of sessions together with the layouts and users they reference.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub layouts: Vec<Layout>,
    pub users: Vec<UserProfile>,
    pub sessions: Vec<GazeSession>,
}

impl Corpus {
    pub fn layout(&self, id: &str) -> Option<&Layout> {
        self.layouts.iter().find(|l| l.id == id)
    }

    pub fn user(&self, id: &str) -> Option<&UserProfile> {
        self.users.iter().find(|u| u.user == id)
    }

    pub fn user_ids(&self) -> BTreeSet<&str> {
        self.users.iter().map(|u| u.user.as_str()).collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: FORMAT_VERSION,
            sessions: self.sessions.len(),
            users: self.users.len(),
            layouts: self.layouts.len(),
        }
    }

    /// Checks every cross-reference and value constraint.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut layout_slots = BTreeMap::new();
        for layout in &self.layouts {
            layout.patch_slot_map()?;
            if layout_slots.insert(layout.id.as_str(), layout.num_slots()).is_some() {
                return Err(DataError::Layout {
                    id: layout.id.clone(),
                    message: "duplicate layout id".into(),
                });
            }
        }
        let mut pref_dim = None;
        let mut seen_users = BTreeSet::new();
        for (i, u) in self.users.iter().enumerate() {
            let line = i + 1;
            if !seen_users.insert(u.user.as_str()) {
                return Err(schema(USERS_FILE, line, format!("duplicate user {}", u.user)));
            }
            if u.preference.iter().any(|v| !v.is_finite()) {
                return Err(schema(USERS_FILE, line, "non-finite preference".into()));
            }
            match pref_dim {
                None => pref_dim = Some(u.preference.len()),
                Some(d) if d != u.preference.len() => {
                    return Err(schema(USERS_FILE, line, "preference dimension differs".into()))
                }
                _ => {}
            }
        }
        let mut feature_dim = None;
        for (i, s) in self.sessions.iter().enumerate() {
            validate_session(s, i + 1, &layout_slots, &seen_users, &mut feature_dim)?;
        }
        Ok(())
    }

    /// Reads a corpus directory (see module docs for the layout).
    pub fn load(dir: &Path) -> Result<Corpus, DataError> {
        let layouts: Vec<Layout> = read_json_or_default(&dir.join(LAYOUTS_FILE))?;
        let users: Vec<UserProfile> = read_json_or_default(&dir.join(USERS_FILE))?;
        let sessions = read_sessions(&dir.join(SESSIONS_FILE))?;
        let corpus = Corpus {
            layouts,
            users,
            sessions,
        };
        corpus.validate()?;
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            let m: Manifest = read_json(&manifest_path)?;
            let have = corpus.manifest();
            if m.format_version != FORMAT_VERSION {
                return Err(DataError::Manifest(format!(
                    "format version {} unsupported (expected {FORMAT_VERSION})",
                    m.format_version
                )));
            }
            if m != have {
                return Err(DataError::Manifest(format!(
                    "header says {} sessions / {} users / {} layouts, files hold {} / {} / {}",
                    m.sessions, m.users, m.layouts, have.sessions, have.users, have.layouts
                )));
            }
        }
        Ok(corpus)
    }

    /// Writes the corpus in canonical form: sessions in stored order,
    /// compact JSON with shortest round-trip floats.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let mut out = Vec::new();
        for s in &self.sessions {
            serde_json::to_writer(&mut out, s).expect("session serialises");
            out.push(b'\n');
        }
        write_bytes(&dir.join(SESSIONS_FILE), &out)?;
        write_json(&dir.join(LAYOUTS_FILE), &self.layouts)?;
        write_json(&dir.join(USERS_FILE), &self.users)?;
        write_json(&dir.join(MANIFEST_FILE), &self.manifest())?;
        Ok(())
    }
}

fn validate_session(
    s: &GazeSession,
    line: usize,
    layout_slots: &BTreeMap<&str, usize>,
    users: &BTreeSet<&str>,
    feature_dim: &mut Option<usize>,
) -> Result<(), DataError> {
    let Some(&n) = layout_slots.get(s.layout.as_str()) else {
        return Err(schema(SESSIONS_FILE, line, format!("unknown layout {}", s.layout)));
    };
    if !users.contains(s.user.as_str()) {
        return Err(schema(SESSIONS_FILE, line, format!("unknown user {}", s.user)));
    }
    if s.dwell_ms.len() != n || s.items.len() != n {
        return Err(schema(
            SESSIONS_FILE,
            line,
            format!(
                "layout {} has {n} slots but session carries {} dwell values and {} items",
                s.layout,
                s.dwell_ms.len(),
                s.items.len()
            ),
        ));
    }
    if let Some((slot, &value)) = s
        .dwell_ms
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
    {
        return Err(DataError::NegativeDwell {
            file: SESSIONS_FILE.into(),
            line,
            slot,
            value,
        });
    }
    if s.click >= n {
        return Err(schema(SESSIONS_FILE, line, format!("click {} outside 0..{n}", s.click)));
    }
    for item in &s.items {
        if item.iter().any(|v| !v.is_finite()) {
            return Err(schema(SESSIONS_FILE, line, "non-finite item feature".into()));
        }
        match feature_dim {
            None => *feature_dim = Some(item.len()),
            Some(d) if *d != item.len() => {
                return Err(schema(SESSIONS_FILE, line, "item feature dimension differs".into()))
            }
            _ => {}
        }
    }
    Ok(())
}

fn schema(file: &str, line: usize, message: String) -> DataError {
    DataError::Schema {
        file: file.into(),
        line,
        message,
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_sessions(path: &Path) -> Result<Vec<GazeSession>, DataError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut sessions = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: GazeSession =
            serde_json::from_str(&line).map_err(|e| schema(SESSIONS_FILE, i + 1, e.to_string()))?;
        sessions.push(s);
    }
    Ok(sessions)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let name = path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    serde_json::from_slice(&bytes).map_err(|e| schema(&name, e.line(), e.to_string()))
}

fn read_json_or_default<T: for<'de> Deserialize<'de> + Default>(path: &Path) -> Result<T, DataError> {
    if path.exists() {
        read_json(path)
    } else {
        Ok(T::default())
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(bytes).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serialisable");
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

/// Session indices of a train/test partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Holds out one session per user that has at least two; single-session
/// users only contribute training data.
pub fn leave_one_out_split(corpus: &Corpus, seed: u64) -> Split {
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.sessions.iter().enumerate() {
        by_user.entry(s.user.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = Vec::new();
    for idx in by_user.values() {
        if idx.len() >= 2 {
            test.push(*idx.choose(&mut rng).expect("non-empty"));
        }
    }
    test.sort_unstable();
    let held: BTreeSet<usize> = test.iter().copied().collect();
    let train = (0..corpus.sessions.len()).filter(|i| !held.contains(i)).collect();
    Split { train, test }
}

/// Ranks slots by dwell time, longest first; ties go to the lower slot index.
pub fn dwell_rank(dwell: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dwell.len()).collect();
    order.sort_by(|&a, &b| dwell[b].total_cmp(&dwell[a]).then(a.cmp(&b)));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_corpus() -> Corpus {
        let layout = Layout::grid("g", 1, 3, 2, 6);
        let users = vec![
            UserProfile {
                user: "a".into(),
                preference: vec![0.1, 0.2],
            },
            UserProfile {
                user: "b".into(),
                preference: vec![0.3, -0.2],
            },
        ];
        let mk = |user: &str, session: &str, click| GazeSession {
            user: user.into(),
            session: session.into(),
            layout: "g".into(),
            items: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]],
            dwell_ms: vec![120.0, 30.5, 0.0],
            click,
        };
        Corpus {
            layouts: vec![layout],
            users,
            sessions: vec![mk("a", "1", 0), mk("a", "2", 1), mk("b", "3", 2), mk("a", "4", 0)],
        }
    }

    #[test]
    fn empty_file_loads_as_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(SESSIONS_FILE), "").unwrap();
        let c = Corpus::load(dir.path()).unwrap();
        assert!(c.sessions.is_empty());
    }

    #[test]
    fn save_load_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_corpus();
        c.save(dir.path()).unwrap();
        let first = fs::read(dir.path().join(SESSIONS_FILE)).unwrap();
        let loaded = Corpus::load(dir.path()).unwrap();
        assert_eq!(loaded, c);
        let dir2 = tempfile::tempdir().unwrap();
        loaded.save(dir2.path()).unwrap();
        for f in [SESSIONS_FILE, LAYOUTS_FILE, USERS_FILE, MANIFEST_FILE] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(dir2.path().join(f)).unwrap());
        }
        assert_eq!(first, fs::read(dir2.path().join(SESSIONS_FILE)).unwrap());
    }

    #[test]
    fn negative_dwell_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny_corpus();
        c.save(dir.path()).unwrap();
        c.sessions[2].dwell_ms[1] = -4.0;
        let text: String = c
            .sessions
            .iter()
            .map(|s| serde_json::to_string(s).unwrap() + "\n")
            .collect();
        fs::write(dir.path().join(SESSIONS_FILE), text).unwrap();
        match Corpus::load(dir.path()) {
            Err(DataError::NegativeDwell { line, slot, .. }) => assert_eq!((line, slot), (3, 1)),
            other => panic!("expected dwell error, got {other:?}"),
        }
    }

    #[test]
    fn schema_violation_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus().save(dir.path()).unwrap();
        let mut text = fs::read_to_string(dir.path().join(SESSIONS_FILE)).unwrap();
        text.push_str("{\"user\":\"a\",\"bogus\":1}\n");
        fs::write(dir.path().join(SESSIONS_FILE), text).unwrap();
        match Corpus::load(dir.path()) {
            Err(DataError::Schema { line, .. }) => assert_eq!(line, 5),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_counts_are_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_corpus();
        c.save(dir.path()).unwrap();
        let mut m = c.manifest();
        m.sessions += 1;
        fs::write(dir.path().join(MANIFEST_FILE), serde_json::to_vec(&m).unwrap()).unwrap();
        assert!(matches!(Corpus::load(dir.path()), Err(DataError::Manifest(_))));
    }

    #[test]
    fn split_follows_leave_one_out_rules() {
        let c = tiny_corpus();
        let s = leave_one_out_split(&c, 4);
        assert_eq!(s.test.len(), 1, "only user a has two or more sessions");
        assert_eq!(c.sessions[s.test[0]].user, "a");
        assert_eq!(s.train.len() + s.test.len(), c.sessions.len());
        assert_eq!(s, leave_one_out_split(&c, 4));
    }

    #[test]
    fn dwell_rank_breaks_ties_by_index() {
        assert_eq!(dwell_rank(&[1.0, 3.0, 3.0, 0.0]), vec![1, 2, 0, 3]);
    }
}
