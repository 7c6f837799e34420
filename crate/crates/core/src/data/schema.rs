use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense behavior index into [`BehaviorSchema::behaviors`].
pub type BehaviorId = u16;

/// Rule used to cut a user history into sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SessionRule {
    /// A new session starts when the gap to the previous interaction exceeds `seconds`.
    Gap { seconds: i64 },
    /// Sessions are maximal runs sharing a UTC calendar day.
    CalendarDay,
}

impl SessionRule {
    pub const SHORT_VIDEO: SessionRule = SessionRule::Gap { seconds: 900 };
    pub const JDATA: SessionRule = SessionRule::Gap { seconds: 1800 };
    pub const TMALL: SessionRule = SessionRule::CalendarDay;
}

impl Default for SessionRule {
    fn default() -> Self {
        Self::SHORT_VIDEO
    }
}

/// Ordered behavior types with their hierarchy levels.
///
/// Levels start at 1 (shallowest engagement). Exactly one behavior carries the
/// maximal level; it is the target behavior.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct BehaviorSchema {
    behaviors: Vec<String>,
    levels: Vec<u32>,
    target: BehaviorId,
    session_rule: SessionRule,
}

/// On-disk layout of the schema document.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SchemaFile {
    behaviors: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    levels: Option<Vec<u32>>,
    #[serde(default)]
    session: SessionRule,
}

impl TryFrom<SchemaFile> for BehaviorSchema {
    type Error = Error;

    fn try_from(f: SchemaFile) -> Result<Self> {
        let levels = match f.levels {
            Some(l) => l,
            None => (1..=f.behaviors.len() as u32).collect(),
        };
        BehaviorSchema::new(f.behaviors, levels, f.session)
    }
}

impl From<BehaviorSchema> for SchemaFile {
    fn from(s: BehaviorSchema) -> Self {
        SchemaFile {
            behaviors: s.behaviors,
            levels: Some(s.levels),
            session: s.session_rule,
        }
    }
}

impl BehaviorSchema {
    pub fn new(behaviors: Vec<String>, levels: Vec<u32>, session_rule: SessionRule) -> Result<Self> {
        if behaviors.is_empty() {
            return Err(Error::Config("schema has no behaviors".into()));
        }
        if behaviors.len() != levels.len() {
            return Err(Error::Config(format!(
                "schema lists {} behaviors but {} levels",
                behaviors.len(),
                levels.len()
            )));
        }
        if behaviors.len() > BehaviorId::MAX as usize {
            return Err(Error::Config("too many behaviors".into()));
        }
        for (i, b) in behaviors.iter().enumerate() {
            if b.is_empty() || b.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid behavior name {b:?}")));
            }
            if behaviors[..i].contains(b) {
                return Err(Error::Config(format!("duplicate behavior {b:?}")));
            }
        }
        let mut distinct: Vec<u32> = levels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.iter().enumerate().any(|(i, &l)| l != i as u32 + 1) {
            return Err(Error::Config(format!(
                "behavior levels must start at 1 without gaps, got {levels:?}"
            )));
        }
        let max = *distinct.last().unwrap();
        let tops: Vec<usize> = (0..levels.len()).filter(|&i| levels[i] == max).collect();
        if tops.len() != 1 {
            return Err(Error::Config(
                "exactly one behavior must hold the maximal level".into(),
            ));
        }
        if let SessionRule::Gap { seconds } = session_rule {
            if seconds < 0 {
                return Err(Error::Config("session gap must be nonnegative".into()));
            }
        }
        Ok(Self {
            behaviors,
            levels,
            target: tops[0] as BehaviorId,
            session_rule,
        })
    }

    /// Behaviors listed with levels 1..=n in the given order.
    pub fn ordered(names: &[&str], session_rule: SessionRule) -> Result<Self> {
        let levels = (1..=names.len() as u32).collect();
        Self::new(names.iter().map(|s| s.to_string()).collect(), levels, session_rule)
    }

    /// `p3s < click < conversion` with a 15-minute inactivity rule.
    pub fn short_video() -> Self {
        Self::ordered(&["p3s", "click", "conversion"], SessionRule::SHORT_VIDEO).unwrap()
    }

    /// Two-behavior `exposure < conversion` preset used for ranking.
    pub fn exposure_conversion() -> Self {
        Self::ordered(&["exposure", "conversion"], SessionRule::SHORT_VIDEO).unwrap()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn len(&self) -> usize {
        self.behaviors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.behaviors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.behaviors
    }

    pub fn name(&self, id: BehaviorId) -> &str {
        &self.behaviors[id as usize]
    }

    pub fn id(&self, name: &str) -> Result<BehaviorId> {
        self.behaviors
            .iter()
            .position(|b| b == name)
            .map(|i| i as BehaviorId)
            .ok_or_else(|| Error::Data(format!("unknown behavior {name:?}")))
    }

    pub fn level(&self, id: BehaviorId) -> u32 {
        self.levels[id as usize]
    }

    pub fn levels(&self) -> &[u32] {
        &self.levels
    }

    pub fn max_level(&self) -> u32 {
        self.levels[self.target as usize]
    }

    pub fn target(&self) -> BehaviorId {
        self.target
    }

    /// Behaviors holding level 1.
    pub fn lowest(&self) -> impl Iterator<Item = BehaviorId> + '_ {
        (0..self.len() as BehaviorId).filter(|&b| self.level(b) == 1)
    }

    pub fn session_rule(&self) -> SessionRule {
        self.session_rule
    }

    pub fn with_session_rule(mut self, rule: SessionRule) -> Self {
        self.session_rule = rule;
        self
    }
}
